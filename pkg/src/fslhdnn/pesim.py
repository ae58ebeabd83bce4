"""Cycle-approximate model of the 4x16 clustered-convolution PE array.

Cycle definition (this model's own abstraction, not a chip trace):

* one cycle on a row bus broadcasts one input pixel value to every PE in
  that row; each PE adds it into the accumulation RF of every live window
  that covers the pixel (at most three for a 3x3 kernel);
* one cycle in a PE's multiply unit performs one centroid multiply and
  add against the fourth RF;
* RF reads and writes are free.

Each PE row produces one output row. It streams the padded input column by
column, and each column carries the ``kernel`` input rows under that output
row, so every input row is streamed once per vertical kernel offset. A
window's RF is handed to the multiply RF once its last column has passed;
if the multiply RF is still busy the handoff waits, and if no accumulation
RF is free for a new window the row bus stalls.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensorcore import ConvLayerSpec, ShapeError, Tensor3
from .wclust import ClusteredLayer


class UnsupportedShapeError(ShapeError):
    pass


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 4
    cols: int = 16
    rf_groups: int = 16
    accum_rfs_per_pe: int = 3
    mult_rfs_per_pe: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array needs at least one row and one column")
        if self.accum_rfs_per_pe != 3 or self.mult_rfs_per_pe != 1:
            raise ValueError("each PE has exactly 3 accumulation RFs and 1 multiply RF")
        if not 1 <= self.rf_groups <= 16:
            raise ValueError("rf_groups must be in [1, 16]")


@dataclass(frozen=True)
class Tile:
    out_rows: tuple[int, ...]  # one per active PE row
    groups: tuple[int, ...]  # pattern-group ids, one per active PE column


@dataclass(frozen=True)
class LayerSchedule:
    spec: ConvLayerSpec
    G: int
    group_members: tuple[tuple[int, ...], ...]
    tiles: tuple[Tile, ...]
    cfg: ArrayConfig

    @property
    def group_size(self) -> int:
        return max(len(m) for m in self.group_members)

    @property
    def pe_utilization(self) -> float:
        # busy channel-slots over offered channel-slots, per tile
        offered = len(self.tiles) * self.cfg.rows * self.cfg.cols * self.group_size
        busy = sum(len(t.out_rows) * sum(len(self.group_members[g]) for g in t.groups)
                   for t in self.tiles)
        return busy / offered

    def owner(self, out_row: int, channel: int) -> tuple[int, int, int]:
        """(tile, PE row, PE column) producing ``channel`` of ``out_row``."""
        hits = []
        for ti, t in enumerate(self.tiles):
            for c, g in enumerate(t.groups):
                if channel in self.group_members[g] and out_row in t.out_rows:
                    hits.append((ti, t.out_rows.index(out_row), c))
        if len(hits) != 1:
            raise AssertionError(f"output ({out_row}, ch {channel}) has {len(hits)} owners")
        return hits[0]


@dataclass
class SimReport:
    cycles: int
    input_bus_words: int
    weight_bus_words: int
    accum_ops: int
    mult_ops: int
    pe_utilization: float
    overlap_efficiency: float
    accumulate_cycles: int = 0
    multiply_cycles: int = 0
    stall_cycles: int = 0
    rf_accumulations: int = 0
    tiles: int = 0
    model: str = "phase-overlap cycle approximation"
    output: Tensor3 | None = field(default=None, repr=False)
    events: list | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("output")
        d.pop("events")
        return d


def schedule_layer(
    spec: ConvLayerSpec,
    G: int,
    cfg: ArrayConfig = ArrayConfig(),
    group_size: int | None = None,
    groups: Sequence[Sequence[int]] | None = None,
) -> LayerSchedule:
    """Tile output rows over PE rows and pattern groups over PE columns.

    A pattern group is never split across columns: its index map travels on
    one column bus, so splitting it would repeat its input accumulations.
    ``groups`` overrides the consecutive ``group_size`` partition.
    """
    if spec.kernel != 3:
        raise UnsupportedShapeError(
            f"the PE array only runs 3x3 kernels (got {spec.kernel}x{spec.kernel}); "
            "use wclust.clustered_conv2d for other shapes"
        )
    if not 1 <= G <= cfg.rf_groups:
        raise ValueError(f"G={G} does not fit the {cfg.rf_groups}-entry register files")
    if groups is None:
        gs = spec.out_channels if group_size is None else group_size
        groups = [range(s, min(s + gs, spec.out_channels)) for s in range(0, spec.out_channels, gs)]
    members = tuple(tuple(int(c) for c in g) for g in groups)
    if sorted(c for m in members for c in m) != list(range(spec.out_channels)):
        raise ValueError("groups must partition the output channels")
    row_tiles = [tuple(range(r, min(r + cfg.rows, spec.out_height)))
                 for r in range(0, spec.out_height, cfg.rows)]
    col_tiles = [tuple(range(c, min(c + cfg.cols, len(members))))
                 for c in range(0, len(members), cfg.cols)]
    tiles = tuple(Tile(r, c) for c in col_tiles for r in row_tiles)
    return LayerSchedule(spec, G, members, tiles, cfg)


@dataclass(frozen=True)
class _StreamTiming:
    cycles: int
    accumulate_cycles: int
    multiply_cycles: int
    stall_cycles: int
    rf_accumulations: int


def _windows(spec: ConvLayerSpec):
    """Per padded column: windows that start there, cover it, end there."""
    wp = spec.in_width + 2 * spec.padding
    k, s = spec.kernel, spec.stride
    starts = [[] for _ in range(wp)]
    ends = [[] for _ in range(wp)]
    covers = [[] for _ in range(wp)]
    for ox in range(spec.out_width):
        starts[ox * s].append(ox)
        ends[ox * s + k - 1].append(ox)
        for ix in range(ox * s, ox * s + k):
            covers[ix].append(ox)
    return starts, covers, ends


@lru_cache(maxsize=256)
def _stream_timing(spec: ConvLayerSpec, mult_per_window: int, n_rfs: int) -> _StreamTiming:
    """Event timeline of one PE row stream for one output row."""
    starts, covers, ends = _windows(spec)
    column_cycles = spec.kernel * spec.in_channels
    t = 0
    stall = 0
    slot_free = [0] * n_rfs
    slot_of: dict[int, int] = {}
    mult_free = 0
    rf_adds = 0
    for ix in range(len(covers)):
        for ox in starts[ix]:
            slot = min(range(n_rfs), key=lambda i: (slot_free[i], i))
            if slot_free[slot] == math.inf:
                raise AssertionError("more live windows than accumulation RFs")
            if slot_free[slot] > t:
                stall += slot_free[slot] - t
                t = slot_free[slot]
            slot_free[slot] = math.inf
            slot_of[ox] = slot
        t += column_cycles
        rf_adds += column_cycles * len(covers[ix])
        for ox in ends[ix]:
            handoff = max(t, mult_free)
            slot_free[slot_of.pop(ox)] = handoff
            mult_free = handoff + mult_per_window
    accumulate = len(covers) * column_cycles
    return _StreamTiming(
        cycles=int(max(t, mult_free)),
        accumulate_cycles=accumulate,
        multiply_cycles=spec.out_width * mult_per_window,
        stall_cycles=int(stall),
        rf_accumulations=rf_adds,
    )


def simulate(
    schedule: LayerSchedule,
    cfg: ArrayConfig | None = None,
    layer: ClusteredLayer | None = None,
    x: Tensor3 | None = None,
    trace: bool = False,
) -> SimReport:
    """Run the schedule and return cycle, traffic and operation counts.

    Passing ``layer`` and ``x`` turns on value tracking: every broadcast is
    replayed through the RFs and the produced output tensor is attached to
    the report. ``trace`` records one event per row-bus broadcast.
    """
    cfg = schedule.cfg if cfg is None else cfg
    spec = schedule.spec
    G = schedule.G
    if (layer is None) != (x is None):
        raise ValueError("value tracking needs both the clustered layer and the input")
    if layer is not None and layer.spec != spec:
        raise ShapeError("clustered layer does not match the scheduled spec")
    if layer is not None or trace:
        return _simulate_detailed(schedule, cfg, layer, x, trace)

    wp = spec.in_width + 2 * spec.padding
    stream_words = spec.kernel * wp * spec.in_channels
    cycles = acc_c = mul_c = stall = 0
    in_words = w_words = rf_adds = mults = out_adds = 0
    for tile in schedule.tiles:
        sizes = [len(schedule.group_members[g]) for g in tile.groups]
        timing = _stream_timing(spec, G * max(sizes), cfg.accum_rfs_per_pe)
        cycles += timing.cycles
        acc_c += timing.accumulate_cycles
        mul_c += timing.multiply_cycles
        stall += timing.stall_cycles
        rows = len(tile.out_rows)
        in_words += rows * stream_words
        w_words += sum(spec.taps + G * m for m in sizes)
        rf_adds += rows * len(sizes) * timing.rf_accumulations
        per_row = rows * spec.out_width * G * sum(sizes)
        mults += per_row
        out_adds += per_row
    return _report(schedule, cycles, acc_c, mul_c, stall, in_words, w_words,
                   rf_adds, mults, out_adds)


def _report(schedule, cycles, acc_c, mul_c, stall, in_words, w_words,
            rf_adds, mults, out_adds, output=None, events=None) -> SimReport:
    serial, ideal = acc_c + mul_c, max(acc_c, mul_c)
    if serial == ideal:
        overlap = 1.0
    else:
        overlap = min(1.0, max(0.0, (serial - cycles) / (serial - ideal)))
    return SimReport(
        cycles=cycles,
        input_bus_words=in_words,
        weight_bus_words=w_words,
        accum_ops=rf_adds + out_adds,
        mult_ops=mults,
        pe_utilization=schedule.pe_utilization,
        overlap_efficiency=overlap,
        accumulate_cycles=acc_c,
        multiply_cycles=mul_c,
        stall_cycles=stall,
        rf_accumulations=rf_adds,
        tiles=len(schedule.tiles),
        output=output,
        events=events,
    )


def _simulate_detailed(schedule, cfg, layer, x, trace) -> SimReport:
    spec = schedule.spec
    G = schedule.G
    k, s, p = spec.kernel, spec.stride, spec.padding
    starts, covers, ends = _windows(spec)
    track = layer is not None
    if track:
        layer.validate()
        padded = np.pad(x.data, ((p, p), (p, p), (0, 0)))
        out = np.zeros((spec.out_height, spec.out_width, spec.out_channels))
        by_members = {grp.members: grp for grp in layer.groups}
        pe_groups = []
        for m in schedule.group_members:
            if m not in by_members:
                raise ShapeError(f"schedule group {m} is not a pattern group of the layer")
            pe_groups.append(by_members[m])
    events = [] if trace else None
    cycles = acc_c = mul_c = stall = 0
    in_words = w_words = rf_adds = mults = out_adds = 0
    for ti, tile in enumerate(schedule.tiles):
        sizes = [len(schedule.group_members[g]) for g in tile.groups]
        timing = _stream_timing(spec, G * max(sizes), cfg.accum_rfs_per_pe)
        cycles += timing.cycles
        acc_c += timing.accumulate_cycles
        mul_c += timing.multiply_cycles
        stall += timing.stall_cycles
        w_words += sum(spec.taps + G * m for m in sizes)
        for oy in tile.out_rows:
            live: dict[tuple[int, int], list[float]] = {}
            for ix in range(len(covers)):
                for ox in starts[ix]:
                    for col in range(len(tile.groups)):
                        live[(col, ox)] = [0.0] * G
                for ky in range(k):
                    iy = oy * s + ky
                    for cin in range(spec.in_channels):
                        in_words += 1
                        if trace:
                            events.append(("broadcast", ti, oy, iy, ix, cin))
                        val = float(padded[iy, ix, cin]) if track else 0.0
                        for col, g_id in enumerate(tile.groups):
                            for ox in covers[ix]:
                                rf_adds += 1
                                if track:
                                    g = pe_groups[g_id].index_map[ky, ix - ox * s, cin]
                                    live[(col, ox)][g] += val
                for ox in ends[ix]:
                    for col, g_id in enumerate(tile.groups):
                        sums = live.pop((col, ox))
                        members = schedule.group_members[g_id]
                        for row, ch in enumerate(members):
                            acc = 0.0
                            for g in range(G):
                                mults += 1
                                out_adds += 1
                                if track:
                                    acc += sums[g] * pe_groups[g_id].centroids[row, g]
                            if track:
                                out[oy, ox, ch] = acc
    output = Tensor3(out) if track else None
    return _report(schedule, cycles, acc_c, mul_c, stall, in_words, w_words,
                   rf_adds, mults, out_adds, output, events)


def simulate_layer(layer: ClusteredLayer, cfg: ArrayConfig = ArrayConfig(),
                   x: Tensor3 | None = None) -> SimReport:
    """Schedule a clustered layer with its own pattern groups and simulate it."""
    sched = schedule_layer(layer.spec, layer.G, cfg, groups=[g.members for g in layer.groups])
    if x is None:
        return simulate(sched, cfg)
    return simulate(sched, cfg, layer=layer, x=x)


__all__ = [
    "ArrayConfig",
    "LayerSchedule",
    "SimReport",
    "Tile",
    "UnsupportedShapeError",
    "schedule_layer",
    "simulate",
    "simulate_layer",
]
