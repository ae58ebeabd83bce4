"""Dense tensors, conv layer specs and the reference dense convolution.

The dense path here is the correctness oracle for the clustered executor in
:mod:`fslhdnn.wclust`, so it is kept deliberately plain: zero padding,
cross-correlation (no kernel flip), float64 accumulation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

TENSOR_MAGIC = b"FHT1"
SUPPORTED_KERNELS = (1, 3, 5)


class ShapeError(ValueError):
    """Raised when tensor or layer dimensions do not line up."""


@dataclass(frozen=True)
class Tensor3:
    """Activation tensor stored as an ``(height, width, channels)`` array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"Tensor3 needs 3 axes (h, w, c), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor3 values must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, height: int, width: int, channels: int) -> "Tensor3":
        return cls(np.zeros((height, width, channels)))


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    in_height: int = 1
    in_width: int = 1

    def __post_init__(self):
        if self.kernel not in SUPPORTED_KERNELS:
            raise ShapeError(f"kernel must be one of {SUPPORTED_KERNELS}, got {self.kernel}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("in_channels and out_channels must be >= 1")
        for axis, size in (("height", self.in_height), ("width", self.in_width)):
            span = size + 2 * self.padding - self.kernel
            if size < 1 or span < 0 or span % self.stride:
                raise ShapeError(
                    f"{axis}: (in_{axis} + 2*padding - kernel) / stride + 1 is not a "
                    f"positive integer for in_{axis}={size}, kernel={self.kernel}, "
                    f"stride={self.stride}, padding={self.padding}"
                )

    @property
    def out_height(self) -> int:
        return (self.in_height + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.in_width + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def taps(self) -> int:
        """Weights per output channel (kernel² · in_channels)."""
        return self.kernel * self.kernel * self.in_channels

    @property
    def out_pixels(self) -> int:
        return self.out_height * self.out_width

    def fields(self) -> tuple[int, ...]:
        return (self.in_channels, self.out_channels, self.kernel, self.stride,
                self.padding, self.in_height, self.in_width)


@dataclass(frozen=True)
class DenseFilterBank:
    """Filter weights indexed ``(out_channel, ky, kx, in_channel)``."""

    spec: ConvLayerSpec
    weights: np.ndarray

    def __post_init__(self):
        s = self.spec
        w = np.asarray(self.weights, dtype=np.float64)
        expected = (s.out_channels, s.kernel, s.kernel, s.in_channels)
        if w.size != int(np.prod(expected)):
            raise ShapeError(f"weights hold {w.size} values, spec needs {expected}")
        w = w.reshape(expected).copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class CostRecord:
    """Operation and parameter counts for one layer (or a sum of layers).

    ``bytes_params`` assumes 4-bit cluster indices and 16-bit weight values.
    A dense layer reports all of its weights under ``centroid_params``.
    """

    multiplies: int = 0
    adds: int = 0
    index_params: int = 0
    centroid_params: int = 0
    bytes_params: int = 0

    def __post_init__(self):
        for name in ("multiplies", "adds", "index_params", "centroid_params", "bytes_params"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def ops(self) -> int:
        return self.multiplies + self.adds

    @property
    def params(self) -> int:
        return self.index_params + self.centroid_params

    def __add__(self, other: "CostRecord") -> "CostRecord":
        return CostRecord(
            self.multiplies + other.multiplies,
            self.adds + other.adds,
            self.index_params + other.index_params,
            self.centroid_params + other.centroid_params,
            self.bytes_params + other.bytes_params,
        )


@dataclass
class OpCounter:
    """Per-call tally of arithmetic actually performed by an executor."""

    multiplies: int = 0
    adds: int = 0


def check_input(x: Tensor3, spec: ConvLayerSpec) -> None:
    for axis, got, want in (
        ("height", x.height, spec.in_height),
        ("width", x.width, spec.in_width),
        ("channels", x.channels, spec.in_channels),
    ):
        if got != want:
            raise ShapeError(f"input {axis} is {got}, layer expects {want}")


def extract_patches(x: Tensor3, spec: ConvLayerSpec) -> np.ndarray:
    """Zero-padded sliding windows, shape ``(out_h, out_w, ky, kx, in_channel)``."""
    check_input(x, spec)
    p, k, s = spec.padding, spec.kernel, spec.stride
    padded = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    # win: (Hp-k+1, Wp-k+1, C, ky, kx)
    win = win[::s, ::s]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2))


def dense_conv2d(x: Tensor3, bank: DenseFilterBank, counter: OpCounter | None = None) -> Tensor3:
    spec = bank.spec
    patches = extract_patches(x, spec)
    oh, ow = spec.out_height, spec.out_width
    cols = patches.reshape(oh * ow, spec.taps)
    out = cols @ bank.weights.reshape(spec.out_channels, spec.taps).T
    if counter is not None:
        # one multiply and one add per (pixel, tap, out_channel) product term
        macs = cols.shape[0] * cols.shape[1] * spec.out_channels
        counter.multiplies += macs
        counter.adds += macs
    return Tensor3(out.reshape(oh, ow, spec.out_channels))


def dense_cost(spec: ConvLayerSpec) -> CostRecord:
    macs = spec.taps * spec.out_channels * spec.out_pixels
    weights = spec.taps * spec.out_channels
    return CostRecord(multiplies=macs, adds=macs, index_params=0,
                      centroid_params=weights, bytes_params=2 * weights)


def relu(x: Tensor3) -> Tensor3:
    return Tensor3(np.maximum(x.data, 0.0))


def max_pool2d(x: Tensor3, size: int = 2) -> Tensor3:
    h, w = x.height // size, x.width // size
    if h == 0 or w == 0:
        raise ShapeError(f"cannot {size}x{size} max-pool a {x.height}x{x.width} map")
    blocks = x.data[: h * size, : w * size].reshape(h, size, w, size, x.channels)
    return Tensor3(blocks.max(axis=(1, 3)))


def global_avg_pool(x: Tensor3) -> np.ndarray:
    return x.data.mean(axis=(0, 1))


def round_bf16(values: np.ndarray) -> np.ndarray:
    """Round to the nearest bfloat16 value (ties to even), returned as float64."""
    f32 = np.ascontiguousarray(values, dtype=np.float32)
    bits = f32.view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) >> 16) << 16
    out = rounded.astype(np.uint32).view(np.float32).astype(np.float64)
    return np.where(np.isfinite(f32), out, f32.astype(np.float64))


# -- FHT1 tensor files -----------------------------------------------------

def write_tensor(fh: BinaryIO, data: np.ndarray) -> None:
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ShapeError(f"FHT1 stores 3-axis tensors, got shape {arr.shape}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<3I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray | None:
    """Read one FHT1 record; returns None at a clean end of file."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    header = fh.read(12)
    if len(header) != 12:
        raise ValueError("truncated FHT1 header")
    h, w, c = struct.unpack("<3I", header)
    n = h * w * c
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise ValueError(f"truncated FHT1 payload: expected {n} float32 values")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(h, w, c)


def save_tensors(path: str | Path, tensors: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for t in tensors:
            write_tensor(fh, t)


def load_tensors(path: str | Path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while (t := read_tensor(fh)) is not None:
            out.append(t)
    return out
