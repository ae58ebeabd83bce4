"""Per-filter weight clustering, cross-filter pattern sharing and the
accumulate-then-multiply convolution executor.

A clustered filter stores a 4-bit cluster index per ``(ky, kx, in_channel)``
position plus at most 16 centroid values. Output channels in one
:class:`PatternGroup` share the index map, so the per-cluster input sums are
computed once per group and reused by every member channel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .tensorcore import (
    ConvLayerSpec,
    CostRecord,
    DenseFilterBank,
    OpCounter,
    ShapeError,
    Tensor3,
    extract_patches,
)

MAX_GROUPS = 16
MODEL_MAGIC = b"FHC1"
DENSE_MAGIC = b"FHD1"
MAX_LLOYD_ITERS = 100


class IntegrityError(ValueError):
    """A clustered layer references a cluster it does not define."""


def _check_g(G: int) -> None:
    if not 1 <= G <= MAX_GROUPS:
        raise ValueError(f"G must be in [1, {MAX_GROUPS}], got {G}")


# -- 1-D clustering --------------------------------------------------------

def _segment_dp(values: np.ndarray, counts: np.ndarray, k: int) -> list[int]:
    """Optimal contiguous k-segmentation of sorted distinct ``values``.

    Returns the start index of every segment. Weighted squared error is
    evaluated from prefix sums of centred values.
    """
    n = len(values)
    x = values - np.average(values, weights=counts)
    cw = np.concatenate(([0.0], np.cumsum(counts)))
    cx = np.concatenate(([0.0], np.cumsum(counts * x)))
    cxx = np.concatenate(([0.0], np.cumsum(counts * x * x)))

    def seg_cost(starts, ends) -> np.ndarray:
        # cost of segments [starts, ends] inclusive
        w = cw[ends + 1] - cw[starts]
        s = cx[ends + 1] - cx[starts]
        return np.maximum(cxx[ends + 1] - cxx[starts] - s * s / w, 0.0)

    prev = seg_cost(0, np.arange(n))
    back = np.zeros((k, n), dtype=int)
    for g in range(1, k):
        cur = np.full(n, np.inf)
        for j in range(g, n):
            starts = np.arange(g, j + 1)
            total = prev[starts - 1] + seg_cost(starts, j)
            best = int(np.argmin(total))
            cur[j] = total[best]
            back[g, j] = starts[best]
        prev = cur
    bounds = []
    j = n - 1
    for g in range(k - 1, 0, -1):
        start = back[g, j]
        bounds.append(start)
        j = start - 1
    bounds.append(0)
    return bounds[::-1]


def _mean(members: np.ndarray) -> float:
    lo, hi = members.min(), members.max()
    # identical members must reproduce their value bit-for-bit
    return float(lo) if lo == hi else float(members.mean())


def _member_means(flat: np.ndarray, index: np.ndarray, k: int) -> np.ndarray:
    return np.array([_mean(flat[index == g]) for g in range(k)])


def _nearest(flat: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin takes the first minimum, so ties go to the lower cluster index
    return np.argmin(np.abs(flat[:, None] - centroids[None, :]), axis=1)


def cluster_filter(weights: np.ndarray, G: int) -> tuple[np.ndarray, np.ndarray]:
    """Cluster a weight slice into at most ``G`` average values.

    Returns ``(index_map, centroids)`` with ``index_map`` shaped like
    ``weights`` and ``centroids`` sorted ascending. Fewer than ``G``
    centroids come back when the slice has fewer distinct values.
    The partition minimises within-cluster squared error exactly.
    """
    _check_g(G)
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot cluster an empty weight slice")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    flat = w.ravel()
    values, counts = np.unique(flat, return_counts=True)
    k = min(G, len(values))
    starts = _segment_dp(values, counts.astype(np.float64), k)
    seg_of_value = np.searchsorted(np.asarray(starts), np.arange(len(values)), side="right") - 1
    index = seg_of_value[np.searchsorted(values, flat)]
    centroids = _member_means(flat, index, k)
    for _ in range(MAX_LLOYD_ITERS):
        new_index = _nearest(flat, centroids)
        if np.array_equal(new_index, index):
            break
        index = new_index
        used = np.unique(index)
        index = np.searchsorted(used, index)
        centroids = _member_means(flat, index, len(used))
    return index.reshape(w.shape).astype(np.uint8), centroids


def reconstruction_error(weights: np.ndarray, index_map: np.ndarray, centroids: np.ndarray) -> float:
    """Sum of squared differences between weights and their centroids."""
    w = np.asarray(weights, dtype=np.float64)
    return float(np.sum((w - np.asarray(centroids)[index_map]) ** 2))


# -- pattern sharing -------------------------------------------------------

@dataclass(frozen=True)
class PatternGroup:
    """Output channels sharing one cluster-index map.

    ``centroids[i, g]`` is the weight of cluster ``g`` for channel
    ``members[i]``. Unused cluster slots hold 0.0.
    """

    index_map: np.ndarray  # (ky, kx, in_channel), values < group_count
    members: tuple[int, ...]
    centroids: np.ndarray  # (len(members), group_count)

    @property
    def group_count(self) -> int:
        return self.centroids.shape[1]

    def validate(self, spec: ConvLayerSpec) -> None:
        k = spec.kernel
        if self.index_map.shape != (k, k, spec.in_channels):
            raise ShapeError(f"index map shape {self.index_map.shape} != {(k, k, spec.in_channels)}")
        if self.centroids.shape[0] != len(self.members):
            raise ShapeError("one centroid row is needed per member channel")
        if self.index_map.size and int(self.index_map.max()) >= self.group_count:
            raise IntegrityError(
                f"index map references cluster {int(self.index_map.max())} "
                f"but only {self.group_count} are defined"
            )


@dataclass(frozen=True)
class ClusteredLayer:
    spec: ConvLayerSpec
    G: int
    groups: tuple[PatternGroup, ...]

    def validate(self) -> None:
        seen: list[int] = []
        for grp in self.groups:
            grp.validate(self.spec)
            seen.extend(grp.members)
        if sorted(seen) != list(range(self.spec.out_channels)):
            raise IntegrityError("pattern groups must partition the output channels")

    @property
    def group_size(self) -> int:
        return max(len(g.members) for g in self.groups)


def share_patterns(bank: DenseFilterBank, G: int, group_size: int | None = None) -> ClusteredLayer:
    """Fit one index map per run of ``group_size`` consecutive output channels.

    The map is clustered from the per-position mean weight over the run;
    each member then gets its own centroids as class-conditional means of
    its weights. ``group_size`` defaults to all output channels. When it
    does not divide the channel count the last run is shorter.
    """
    _check_g(G)
    spec = bank.spec
    cout = spec.out_channels
    if bank.weights.size == 0:
        raise ValueError("empty filter bank")
    group_size = cout if group_size is None else group_size
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    groups = []
    for start in range(0, cout, group_size):
        members = tuple(range(start, min(start + group_size, cout)))
        w = bank.weights[list(members)].reshape(len(members), -1)
        index, _ = cluster_filter(w.mean(axis=0), G)
        index = index.ravel()
        cents = np.zeros((len(members), G))
        for g in range(int(index.max()) + 1):
            mask = index == g
            for i in range(len(members)):
                cents[i, g] = _mean(w[i][mask])
        groups.append(PatternGroup(index.reshape(spec.kernel, spec.kernel, spec.in_channels),
                                   members, cents))
    return ClusteredLayer(spec, G, tuple(groups))


def expand(layer: ClusteredLayer) -> DenseFilterBank:
    spec = layer.spec
    w = np.zeros((spec.out_channels, spec.kernel, spec.kernel, spec.in_channels))
    for grp in layer.groups:
        for row, ch in enumerate(grp.members):
            w[ch] = grp.centroids[row][grp.index_map]
    return DenseFilterBank(spec, w)


# -- execution -------------------------------------------------------------

def stream_order(spec: ConvLayerSpec) -> np.ndarray:
    """Permutation of ``(ky, kx, cin)`` tap positions into stream order.

    Taps are summed column by column (kx outer, then ky, then cin), the
    order in which a PE row receives input pixels.
    """
    k, c = spec.kernel, spec.in_channels
    return np.arange(k * k * c).reshape(k, k, c).transpose(1, 0, 2).ravel()


def clustered_conv2d(x: Tensor3, layer: ClusteredLayer, counter: OpCounter | None = None) -> Tensor3:
    """Accumulate inputs per cluster once per group, then multiply by centroids."""
    spec = layer.spec
    layer.validate()
    patches = extract_patches(x, spec)
    oh, ow = spec.out_height, spec.out_width
    npix = oh * ow
    order = stream_order(spec)
    cols = patches.reshape(npix, spec.taps)[:, order]
    out = np.zeros((npix, spec.out_channels))
    for grp in layer.groups:
        G = grp.group_count
        idx = grp.index_map.ravel()[order]
        sums = np.zeros((npix, G))
        for t in range(spec.taps):
            sums[:, idx[t]] += cols[:, t]
        acc = np.zeros((npix, len(grp.members)))
        for g in range(G):
            acc += sums[:, g : g + 1] * grp.centroids[:, g]
        out[:, list(grp.members)] = acc
        if counter is not None:
            counter.adds += npix * spec.taps
            counter.multiplies += npix * G * len(grp.members)
            counter.adds += npix * G * len(grp.members)
    return Tensor3(out.reshape(oh, ow, spec.out_channels))


def clustered_cost(spec: ConvLayerSpec, G: int, group_size: int | None = None) -> CostRecord:
    _check_g(G)
    group_size = spec.out_channels if group_size is None else group_size
    n_groups = math.ceil(spec.out_channels / group_size)
    npix = spec.out_pixels
    centroid_terms = G * spec.out_channels * npix
    index_params = spec.taps * n_groups
    centroid_params = G * spec.out_channels
    return CostRecord(
        multiplies=centroid_terms,
        adds=spec.taps * npix * n_groups + centroid_terms,
        index_params=index_params,
        centroid_params=centroid_params,
        # nibbles are packed per group, so an odd tap count wastes half a byte
        bytes_params=n_groups * math.ceil(spec.taps / 2) + 2 * centroid_params,
    )


# -- model files -----------------------------------------------------------

@dataclass(frozen=True)
class ClusteredModel:
    layers: tuple[ClusteredLayer, ...]


def pack_nibbles(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.uint8).ravel()
    if v.size and v.max() > 15:
        raise ValueError("nibble values must be < 16")
    if v.size % 2:
        v = np.append(v, 0)
    return (v[0::2] | (v[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(raw: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8)
    out = np.empty(2 * b.size, dtype=np.uint8)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    return out[:count]


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError(f"truncated file while reading {what}")
    return raw


def _read_spec(fh: BinaryIO) -> ConvLayerSpec:
    return ConvLayerSpec(*struct.unpack("<7I", _read_exact(fh, 28, "layer spec")))


def write_model(fh: BinaryIO, model: ClusteredModel) -> None:
    fh.write(MODEL_MAGIC)
    fh.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        layer.validate()
        fh.write(struct.pack("<7I", *layer.spec.fields()))
        fh.write(struct.pack("<2I", layer.G, len(layer.groups)))
        for grp in layer.groups:
            if grp.group_count != layer.G:
                raise ShapeError("every group must carry exactly G centroid slots")
            fh.write(struct.pack(f"<{1 + len(grp.members)}I", len(grp.members), *grp.members))
            fh.write(pack_nibbles(grp.index_map))
            fh.write(np.ascontiguousarray(grp.centroids, dtype="<f4").tobytes())


def read_model(fh: BinaryIO) -> ClusteredModel:
    magic = fh.read(4)
    if magic != MODEL_MAGIC:
        raise ValueError(f"bad clustered-model magic {magic!r}")
    (n_layers,) = struct.unpack("<I", _read_exact(fh, 4, "layer count"))
    layers = []
    for li in range(n_layers):
        spec = _read_spec(fh)
        G, n_groups = struct.unpack("<2I", _read_exact(fh, 8, f"layer {li} header"))
        _check_g(G)
        groups = []
        for _ in range(n_groups):
            (m,) = struct.unpack("<I", _read_exact(fh, 4, "member count"))
            members = struct.unpack(f"<{m}I", _read_exact(fh, 4 * m, "member ids"))
            idx = unpack_nibbles(_read_exact(fh, math.ceil(spec.taps / 2), "index map"), spec.taps)
            cents = np.frombuffer(_read_exact(fh, 4 * m * G, "centroids"), dtype="<f4")
            groups.append(PatternGroup(
                idx.reshape(spec.kernel, spec.kernel, spec.in_channels),
                tuple(members),
                cents.astype(np.float64).reshape(m, G),
            ))
        layer = ClusteredLayer(spec, G, tuple(groups))
        layer.validate()
        layers.append(layer)
    return ClusteredModel(tuple(layers))


def save_model(path: str | Path, model: ClusteredModel) -> None:
    with open(path, "wb") as fh:
        write_model(fh, model)


def load_model(path: str | Path) -> ClusteredModel:
    with open(path, "rb") as fh:
        return read_model(fh)


def write_dense_model(fh: BinaryIO, banks: Sequence[DenseFilterBank]) -> None:
    """FHD1: u32 layer count, then per layer 7 u32 spec fields and float32 weights."""
    fh.write(DENSE_MAGIC)
    fh.write(struct.pack("<I", len(banks)))
    for bank in banks:
        fh.write(struct.pack("<7I", *bank.spec.fields()))
        fh.write(np.ascontiguousarray(bank.weights, dtype="<f4").tobytes())


def read_dense_model(fh: BinaryIO) -> list[DenseFilterBank]:
    magic = fh.read(4)
    if magic != DENSE_MAGIC:
        raise ValueError(f"bad dense-model magic {magic!r}")
    (n_layers,) = struct.unpack("<I", _read_exact(fh, 4, "layer count"))
    banks = []
    for _ in range(n_layers):
        spec = _read_spec(fh)
        n = spec.taps * spec.out_channels
        w = np.frombuffer(_read_exact(fh, 4 * n, "weights"), dtype="<f4").astype(np.float64)
        banks.append(DenseFilterBank(spec, w))
    return banks
