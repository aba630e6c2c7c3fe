import hashlib
import logging
import shutil
from pathlib import Path

import numpy as np
import torch


def prepare_output_dir(output_dir: str | Path, clean: bool = False) -> Path:
    """Create the output directory, optionally wiping a previous run first."""
    logger = logging.getLogger(__name__)
    path = Path(output_dir)

    try:
        if clean and path.exists():
            logger.info(f"Cleaning directory: {path}")
            shutil.rmtree(path)
        path.mkdir(parents=True, exist_ok=True)
        return path
    except OSError as e:
        logger.error(f"Error preparing output directory {path}: {str(e)}")
        raise


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for the stream keyed by (seed, *keys)."""
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 ^ int(state[1])


def torch_generator(seed: int, *keys: int) -> torch.Generator:
    generator = torch.Generator(device="cpu")
    generator.manual_seed(derive_seed(seed, *keys))
    return generator


def time_key(t: float) -> int:
    """Bit pattern of a float64 time, usable as a seed key."""
    return int(np.array(float(t), dtype=np.float64).view(np.uint64))


def sha256_hex(*chunks: bytes | str) -> str:
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk.encode("utf-8") if isinstance(chunk, str) else chunk)
    return digest.hexdigest()
