"""Keyed counter-based random streams (Philox-4x64).

Every stream is ``Philox(key=seed)`` with the stream id placed in the most
significant 64-bit word of the counter, so streams never overlap and any
implementation of Philox-4x64-10 can regenerate them.
"""

from __future__ import annotations

import numpy as np

U64 = (1 << 64) - 1


def bit_generator(seed: int, stream: int = 0) -> np.random.Philox:
    if not 0 <= seed <= U64:
        raise ValueError(f"seed must fit in u64, got {seed}")
    return np.random.Philox(key=seed, counter=[0, 0, 0, stream])


def generator(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(bit_generator(seed, stream))


def bipolar_bits(seed: int, n: int, stream: int = 0) -> np.ndarray:
    """``n`` fair +/-1 values: bit i (LSB first) of the raw u64 outputs, 1 -> +1."""
    words = bit_generator(seed, stream).random_raw((n + 63) // 64).astype(np.uint64)
    bits = (words[:, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)
    return np.where(bits.ravel()[:n] == 1, 1, -1).astype(np.int8)


def derive_seed(seed: int, *path: int) -> int:
    """Child u64 seed for a sub-experiment (episode index, worker, ...)."""
    ss = np.random.SeedSequence([seed, *path])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
