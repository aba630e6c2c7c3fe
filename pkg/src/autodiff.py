"""Reverse-mode differentiation over recorded float64 tensor programs.

`forward` runs a graph builder under a torch function mode that records every
primitive application on a `Tape`; `grad` and `vjp` replay torch's autograd
graph backwards from a node of that tape.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch.overrides import TorchFunctionMode

from errors import ContractError, ShapeError

DTYPE = torch.float64


_OP_ALIASES = {
    "radd": "add",
    "iadd": "add",
    "rsub": "sub",
    "isub": "sub",
    "rmul": "mul",
    "imul": "mul",
    "truediv": "div",
    "rtruediv": "div",
    "itruediv": "div",
    "rpow": "pow",
    "getitem": "slice",
    "cat": "concat",
    "expand": "broadcast",
    "broadcast_to": "broadcast",
    "linear": "affine",
}

_ELEMENTWISE = {"add", "sub", "mul", "div", "pow", "maximum", "minimum"}

_SHAPE_WORDS = ("size", "shape", "dimension")


def as_tensor(value, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    return torch.as_tensor(value, dtype=dtype)


def _op_name(func) -> str:
    name = getattr(func, "__name__", None) or getattr(func, "__qualname__", repr(func))
    name = name.strip("_")
    return _OP_ALIASES.get(name, name)


def _tensor_args(args, kwargs) -> list[torch.Tensor]:
    found = []
    for value in list(args) + list(kwargs.values()):
        if isinstance(value, torch.Tensor):
            found.append(value)
        elif isinstance(value, (list, tuple)):
            found.extend(v for v in value if isinstance(v, torch.Tensor))
    return found


def _check_elementwise(op: str, tensors: list[torch.Tensor]) -> None:
    if len(tensors) != 2:
        return
    a, b = tuple(tensors[0].shape), tuple(tensors[1].shape)
    if a == b or tensors[0].numel() == 1 or tensors[1].numel() == 1:
        return
    # Only a leading batch dimension may be broadcast.
    short, long = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long) and long[len(long) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


@dataclass(frozen=True)
class TapeNode:
    op: str
    parents: tuple[int, ...]
    shape: tuple[int, ...]


class Tape:
    """Ordered record of primitive applications; leaves occupy the first slots."""

    def __init__(self, leaves: Sequence[torch.Tensor]):
        self.leaves = list(leaves)
        self.nodes: list[TapeNode] = [TapeNode("leaf", (), tuple(leaf.shape)) for leaf in self.leaves]
        self._index = {id(leaf): i for i, leaf in enumerate(self.leaves)}
        # Holding every value keeps the ids in _index unique for the tape's lifetime.
        self._values = list(self.leaves)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: list[torch.Tensor], result: torch.Tensor) -> None:
        parents = tuple(self._index[id(t)] for t in inputs if id(t) in self._index)
        self._index[id(result)] = len(self.nodes)
        self._values.append(result)
        self.nodes.append(TapeNode(op, parents, tuple(result.shape)))

    def node_index(self, tensor: torch.Tensor) -> int:
        try:
            return self._index[id(tensor)]
        except KeyError:
            raise ContractError("tensor was not produced on this tape") from None

    def ops(self) -> list[str]:
        return [node.op for node in self.nodes]


class _TapeRecorder(TorchFunctionMode):
    def __init__(self, tape: Tape):
        super().__init__()
        self.tape = tape

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        op = _op_name(func)
        tensors = _tensor_args(args, kwargs)
        if op in _ELEMENTWISE:
            _check_elementwise(op, tensors)
        try:
            result = func(*args, **kwargs)
        except RuntimeError as e:
            if not any(word in str(e) for word in _SHAPE_WORDS):
                raise
            shapes = " and ".join(str(tuple(t.shape)) for t in tensors)
            raise ShapeError(f"{op}: incompatible shapes {shapes}") from e
        if isinstance(result, torch.Tensor):
            self.tape.record(op, tensors, result)
        return result


def forward(graph_builder: Callable[..., torch.Tensor], leaves: Sequence) -> tuple[torch.Tensor, Tape]:
    """Evaluate `graph_builder(*leaves)` and return its value with the recorded tape."""
    leaf_tensors = [as_tensor(leaf).detach().requires_grad_(True) for leaf in leaves]
    tape = Tape(leaf_tensors)
    with torch.enable_grad(), _TapeRecorder(tape):
        value = graph_builder(*leaf_tensors)
    if not isinstance(value, torch.Tensor):
        raise ContractError(f"graph builder returned {type(value).__name__}, expected a tensor")
    return value, tape


def grad(tape: Tape, root: torch.Tensor) -> list[torch.Tensor]:
    """d(root)/d(leaf) for every leaf of the tape; unused leaves get zeros."""
    if root.numel() != 1:
        raise ContractError(f"grad needs a scalar root, got shape {tuple(root.shape)}")
    if not root.requires_grad:
        return [torch.zeros_like(leaf) for leaf in tape.leaves]
    grads = torch.autograd.grad(root.reshape(()), tape.leaves, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(leaf) if g is None else g for g, leaf in zip(grads, tape.leaves)]


def vjp(tape: Tape, output: torch.Tensor, cotangent, wrt: int = 0) -> torch.Tensor:
    """cotangentᵀ · d(output)/d(leaf[wrt])."""
    cotangent = as_tensor(cotangent)
    if tuple(cotangent.shape) != tuple(output.shape):
        raise ShapeError(
            f"vjp: cotangent shape {tuple(cotangent.shape)} does not match output shape {tuple(output.shape)}"
        )
    leaf = tape.leaves[wrt]
    if not output.requires_grad:
        return torch.zeros_like(leaf)
    (g,) = torch.autograd.grad(output, leaf, grad_outputs=cotangent, retain_graph=True, allow_unused=True)
    return torch.zeros_like(leaf) if g is None else g
