"""Hyperdimensional few-shot classifier.

Features are projected onto a bipolar F x D base matrix that is never
stored: entry ``(f, d)`` is read from a 256-entry seed block at position
``(d + f) mod 256``, so row 0 is the block tiled across D and each
following row is the previous one cyclically shifted by one column.
Encoded hypervectors are the signs of the projection (sign(0) = +1).

Class hypervectors live in saturating int16 memory. Inference picks the
class with the smallest L1 distance to the encoded query; training makes a
single pass over the support samples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .rng import bipolar_bits
from .tensorcore import ShapeError

BLOCK_SIZE = 256
STRIDE = 1
INT16_MIN, INT16_MAX = -(1 << 15), (1 << 15) - 1
MEMORY_MAGIC = b"FHV1"
UPDATE_RULES = ("paper-literal", "add-correct-on-miss")

F_RANGE = (16, 1024)
D_RANGE = (1024, 8192)
N_RANGE = (2, 128)
BITS_RANGE = (1, 16)


@dataclass(frozen=True)
class HdcConfig:
    F: int
    D: int
    N: int
    infer_bits: int = 16
    seed: int = 0
    update_rule: str = "paper-literal"
    binarize: bool = True
    train_bits: int = field(default=16, init=False)

    def __post_init__(self):
        for name, (lo, hi) in (("F", F_RANGE), ("D", D_RANGE), ("N", N_RANGE),
                               ("infer_bits", BITS_RANGE)):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside the supported range [{lo}, {hi}]")
        if self.D % BLOCK_SIZE:
            raise ValueError(f"D must be a multiple of the {BLOCK_SIZE}-entry seed block")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must be a u64")

    def with_(self, **changes) -> "HdcConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class CrpSeedBlock:
    values: np.ndarray
    seed: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int8)
        if v.shape != (BLOCK_SIZE,) or not np.all(np.abs(v) == 1):
            raise ValueError(f"seed block must hold {BLOCK_SIZE} entries in {{-1, +1}}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_seed(cls, seed: int) -> "CrpSeedBlock":
        return cls(bipolar_bits(seed, BLOCK_SIZE), seed)


def crp_matrix_entry(f: int, d: int, block: CrpSeedBlock,
                     F: int | None = None, D: int | None = None) -> int:
    if f < 0 or d < 0 or (F is not None and f >= F) or (D is not None and d >= D):
        raise IndexError(f"base-matrix index ({f}, {d}) out of range for F={F}, D={D}")
    return int(block.values[(d + f * STRIDE) % BLOCK_SIZE])


def crp_chunk(block: CrpSeedBlock, F: int, d0: int) -> np.ndarray:
    """Rows 0..F-1 of the base matrix for columns d0..d0+255, built on the fly."""
    pos = (np.arange(BLOCK_SIZE)[None, :] + d0 + STRIDE * np.arange(F)[:, None]) % BLOCK_SIZE
    return block.values[pos]


def materialize(block: CrpSeedBlock, F: int, D: int) -> np.ndarray:
    """Full F x D base matrix, as a conventional RP encoder would store it."""
    row0 = np.tile(block.values, D // BLOCK_SIZE + 1)[:D]
    return np.stack([np.roll(row0, -f * STRIDE) for f in range(F)])


def _sign(y: np.ndarray) -> np.ndarray:
    return np.where(y >= 0, 1, -1).astype(np.int8)


def _check_features(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("feature values must be finite")
    return x


def project(x: np.ndarray, block: CrpSeedBlock, D: int) -> np.ndarray:
    """Raw projections of one ``(F,)`` or a batch ``(n, F)`` of feature vectors."""
    x = _check_features(x)
    F = x.shape[-1]
    if D % BLOCK_SIZE:
        raise ValueError(f"D must be a multiple of {BLOCK_SIZE}")
    out = np.empty(x.shape[:-1] + (D,))
    for d0 in range(0, D, BLOCK_SIZE):
        out[..., d0 : d0 + BLOCK_SIZE] = x @ crp_chunk(block, F, d0)
    return out


def encode(x: np.ndarray, block: CrpSeedBlock, D: int, binarize: bool = True) -> np.ndarray:
    """Encode features into hypervectors (bipolar int8, or rounded raw projections)."""
    y = project(x, block, D)
    if binarize:
        return _sign(y)
    return np.clip(np.rint(y), INT16_MIN, INT16_MAX).astype(np.int16)


def encode_explicit(x: np.ndarray, base: np.ndarray) -> np.ndarray:
    """sign(x @ B) against a stored base matrix."""
    return _sign(_check_features(x) @ base)


# -- class memory ---------------------------------------------------------

@dataclass
class ClassMemory:
    hvs: np.ndarray  # (N, D) int16
    counts: np.ndarray  # (N,) samples trained per class
    saturation_events: int = 0

    @classmethod
    def empty(cls, N: int, D: int) -> "ClassMemory":
        return cls(np.zeros((N, D), dtype=np.int16), np.zeros(N, dtype=np.int64))

    @property
    def N(self) -> int:
        return self.hvs.shape[0]

    @property
    def D(self) -> int:
        return self.hvs.shape[1]

    def copy(self) -> "ClassMemory":
        return ClassMemory(self.hvs.copy(), self.counts.copy(), self.saturation_events)

    def saturating_add(self, cls: int, delta: np.ndarray) -> None:
        wide = self.hvs[cls].astype(np.int64) + delta
        clipped = np.clip(wide, INT16_MIN, INT16_MAX)
        self.saturation_events += int(np.count_nonzero(clipped != wide))
        self.hvs[cls] = clipped.astype(np.int16)

    def __eq__(self, other):
        if not isinstance(other, ClassMemory):
            return NotImplemented
        # saturation_events is a run-time diagnostic and is not persisted
        return np.array_equal(self.hvs, other.hvs) and np.array_equal(self.counts, other.counts)


def quantize(c: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric uniform quantization of a class HV to ``bits``-bit integer codes."""
    if not BITS_RANGE[0] <= bits <= BITS_RANGE[1]:
        raise ValueError(f"bits must be in {BITS_RANGE}, got {bits}")
    c = np.asarray(c)
    if bits == 16:
        return c.astype(np.int64)
    if bits == 1:
        return np.where(c >= 0, 1, -1).astype(np.int64)
    levels = (1 << (bits - 1)) - 1
    scale = np.max(np.abs(c), axis=-1, keepdims=True).astype(np.float64)
    safe = np.where(scale == 0, 1.0, scale)
    r = c / safe * levels
    # round half away from zero
    return (np.sign(r) * np.floor(np.abs(r) + 0.5)).astype(np.int64)


def query_scale(bits: int) -> int:
    """Factor putting a bipolar query on the same integer grid as quantized class codes.

    2..15-bit codes span [-levels, levels], so the query becomes +/-levels;
    1-bit codes and the raw 16-bit memory are compared against +/-1.
    """
    if bits in (1, 16):
        return 1
    return (1 << (bits - 1)) - 1


def l1_distance(h: np.ndarray, c: np.ndarray, infer_bits: int = 16) -> int:
    h = np.asarray(h)
    c = np.asarray(c)
    if h.shape != c.shape:
        raise ShapeError(f"dimension mismatch: {h.shape} vs {c.shape}")
    hq = h.astype(np.int64) * query_scale(infer_bits)
    return int(np.abs(hq - quantize(c, infer_bits)).sum())


def distances(h: np.ndarray, mem: ClassMemory, infer_bits: int = 16) -> np.ndarray:
    """L1 distances from one HV ``(D,)`` or a batch ``(n, D)`` to every class."""
    h = np.asarray(h, dtype=np.int64) * query_scale(infer_bits)
    if h.shape[-1] != mem.D:
        raise ShapeError(f"HV has D={h.shape[-1]}, memory has D={mem.D}")
    q = quantize(mem.hvs, infer_bits)
    if h.ndim == 1:
        return np.abs(h[None, :] - q).sum(axis=1)
    return np.stack([np.abs(row[None, :] - q).sum(axis=1) for row in h])


def classify(h: np.ndarray, mem: ClassMemory, infer_bits: int = 16) -> tuple[int, np.ndarray]:
    dist = distances(h, mem, infer_bits)
    return int(np.argmin(dist)), dist


def classify_batch(H: np.ndarray, mem: ClassMemory, infer_bits: int = 16) -> tuple[np.ndarray, np.ndarray]:
    dist = distances(np.atleast_2d(H), mem, infer_bits)
    return np.argmin(dist, axis=1), dist


def fsl_train_single_pass(
    samples: Iterable[tuple[np.ndarray, int]],
    mem: ClassMemory,
    cfg: HdcConfig,
    block: CrpSeedBlock | None = None,
) -> ClassMemory:
    """One pass over ``(feature, label)`` pairs; returns the updated memory.

    A correct prediction adds the encoded sample to its class; a miss
    subtracts it from the predicted class (and, under
    ``add-correct-on-miss``, also adds it to the true class). A sample
    whose class HV is still all zero is added to it directly.
    """
    block = CrpSeedBlock.from_seed(cfg.seed) if block is None else block
    if mem.N != cfg.N or mem.D != cfg.D:
        raise ShapeError(f"memory is {mem.N}x{mem.D}, config wants {cfg.N}x{cfg.D}")
    out = mem.copy()
    for x, label in samples:
        label = int(label)
        if not 0 <= label < cfg.N:
            raise ValueError(f"label {label} outside [0, {cfg.N})")
        if np.shape(x) != (cfg.F,):
            raise ShapeError(f"feature vector has shape {np.shape(x)}, expected ({cfg.F},)")
        h = encode(x, block, cfg.D, cfg.binarize).astype(np.int64)
        out.counts[label] += 1
        if not out.hvs[label].any():
            out.saturating_add(label, h)
            continue
        pred, _ = classify(h, out, cfg.train_bits)
        if pred == label:
            out.saturating_add(label, h)
        else:
            out.saturating_add(pred, -h)
            if cfg.update_rule == "add-correct-on-miss":
                out.saturating_add(label, h)
    return out


def memory_footprint(cfg: HdcConfig, mode: str = "cRP") -> tuple[int, float]:
    """Stored base-matrix elements and reduction versus an explicit F x D matrix."""
    explicit = cfg.F * cfg.D
    if mode == "explicit-RP":
        stored = explicit
    elif mode == "cRP":
        stored = BLOCK_SIZE
    else:
        raise ValueError(f"mode must be 'explicit-RP' or 'cRP', got {mode!r}")
    return stored, explicit / stored


# -- FHV1 class-memory files ----------------------------------------------

def write_memory(fh: BinaryIO, mem: ClassMemory, train_bits: int = 16) -> None:
    fh.write(MEMORY_MAGIC)
    fh.write(struct.pack("<IIB", mem.N, mem.D, train_bits))
    fh.write(np.ascontiguousarray(mem.hvs, dtype="<i2").tobytes())
    fh.write(np.ascontiguousarray(mem.counts, dtype="<u4").tobytes())


def read_memory(fh: BinaryIO) -> ClassMemory:
    magic = fh.read(4)
    if magic != MEMORY_MAGIC:
        raise ValueError(f"bad class-memory magic {magic!r}")
    header = fh.read(9)
    if len(header) != 9:
        raise ValueError("truncated FHV1 header")
    N, D, bits = struct.unpack("<IIB", header)
    if bits != 16:
        raise ValueError(f"unsupported train_bits {bits}")
    raw = fh.read(2 * N * D)
    cnt = fh.read(4 * N)
    if len(raw) != 2 * N * D or len(cnt) != 4 * N:
        raise ValueError("truncated FHV1 payload")
    hvs = np.frombuffer(raw, dtype="<i2").astype(np.int16).reshape(N, D)
    counts = np.frombuffer(cnt, dtype="<u4").astype(np.int64)
    return ClassMemory(hvs, counts)


def save_memory(path: str | Path, mem: ClassMemory) -> None:
    with open(path, "wb") as fh:
        write_memory(fh, mem)


def load_memory(path: str | Path) -> ClassMemory:
    with open(path, "rb") as fh:
        return read_memory(fh)
