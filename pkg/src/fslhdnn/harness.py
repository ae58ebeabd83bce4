"""Few-shot episodes, the kNN-L1 baseline and the end-to-end pipeline."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from .hdc import ClassMemory, CrpSeedBlock, HdcConfig, classify_batch, encode, fsl_train_single_pass
from .tensorcore import (
    ConvLayerSpec,
    CostRecord,
    DenseFilterBank,
    ShapeError,
    Tensor3,
    dense_cost,
    global_avg_pool,
    load_tensors,
    max_pool2d,
    read_tensor,
    relu,
    write_tensor,
)
from .wclust import ClusteredModel, clustered_conv2d, clustered_cost

log = logging.getLogger(__name__)

LABEL_MAGIC = b"FHL1"
REPORT_HEADER = ["episode", "seed", "way", "shot", "D", "infer_bits", "hdc_acc", "knn_acc"]

# (in_channels, out_channels, input side) for the 13 VGG16 conv layers, 224x224 input
VGG16_CONV = [
    (3, 64, 224), (64, 64, 224),
    (64, 128, 112), (128, 128, 112),
    (128, 256, 56), (256, 256, 56), (256, 256, 56),
    (256, 512, 28), (512, 512, 28), (512, 512, 28),
    (512, 512, 14), (512, 512, 14), (512, 512, 14),
]


def vgg16_specs() -> list[ConvLayerSpec]:
    return [ConvLayerSpec(cin, cout, 3, 1, 1, side, side) for cin, cout, side in VGG16_CONV]


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("FHDNN_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


# -- labeled features -----------------------------------------------------

@dataclass(frozen=True)
class LabeledFeatures:
    features: np.ndarray  # (n, F)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ShapeError(f"need (n, F) features and (n,) labels, got {x.shape} and {y.shape}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def F(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def class_indices(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}


def label_path(path: str | Path) -> Path:
    return Path(str(path) + ".labels")


def write_labels(fh, labels: np.ndarray) -> None:
    fh.write(LABEL_MAGIC)
    fh.write(struct.pack("<I", len(labels)))
    fh.write(np.asarray(labels, dtype="<u4").tobytes())


def read_labels(fh) -> np.ndarray:
    if fh.read(4) != LABEL_MAGIC:
        raise ValueError("bad label-file magic")
    (n,) = struct.unpack("<I", fh.read(4))
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise ValueError("truncated FHL1 file")
    return np.frombuffer(raw, dtype="<u4").astype(np.int64)


def features_bytes(data: LabeledFeatures) -> tuple[bytes, bytes]:
    """(FHT1 tensor bytes, FHL1 label bytes) for a labeled feature set."""
    t, lab = io.BytesIO(), io.BytesIO()
    write_tensor(t, data.features[:, None, :])
    write_labels(lab, data.labels)
    return t.getvalue(), lab.getvalue()


def save_features(path: str | Path, data: LabeledFeatures, labels_to: str | Path | None = None) -> None:
    t, lab = features_bytes(data)
    Path(path).write_bytes(t)
    Path(labels_to or label_path(path)).write_bytes(lab)


def load_features(path: str | Path, labels_from: str | Path | None = None) -> LabeledFeatures:
    with open(path, "rb") as fh:
        t = read_tensor(fh)
    if t is None or t.shape[1] != 1:
        raise ShapeError(f"{path}: feature files hold one (1 x F) row per sample")
    with open(labels_from or label_path(path), "rb") as fh:
        labels = read_labels(fh)
    if len(labels) != t.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {t.shape[0]} samples")
    return LabeledFeatures(t[:, 0, :].astype(np.float64), labels)


def make_synthetic_dataset(classes: int, per_class: int, F: int, spread: float, seed: int) -> LabeledFeatures:
    """Gaussian blobs: class means ~ N(0, I_F), samples = mean + spread * N(0, I_F).

    Values are rounded to float32 so the set survives a FHT1 round trip unchanged.
    """
    if classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes and 2 samples per class")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    means = rng.generator(seed, stream=0).standard_normal((classes, F))
    noise = rng.generator(seed, stream=1).standard_normal((classes, per_class, F))
    x = (means[:, None, :] + spread * noise).reshape(-1, F)
    y = np.repeat(np.arange(classes), per_class)
    return LabeledFeatures(x.astype(np.float32).astype(np.float64), y)


# -- episodes -------------------------------------------------------------

@dataclass(frozen=True)
class Episode:
    way: int
    shot: int
    query: int
    seed: int
    class_ids: tuple[int, ...]  # dataset class behind each episode label
    support_idx: np.ndarray  # dataset row per support sample
    query_idx: np.ndarray
    support_x: np.ndarray
    support_y: np.ndarray  # episode labels in [0, way)
    query_x: np.ndarray
    query_y: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.way, self.shot, self.query, self.seed, self.class_ids) == (
            other.way, other.shot, other.query, other.seed, other.class_ids
        ) and all(np.array_equal(getattr(self, f), getattr(other, f))
                  for f in ("support_idx", "query_idx", "support_x", "support_y", "query_x", "query_y"))


def sample_episode(data: LabeledFeatures, way: int, shot: int, query: int, seed: int) -> Episode:
    """Draw an N-way K-shot episode.

    Support samples are listed class by class in episode-label order, which
    is the order single-pass training consumes them.
    """
    if way < 2 or shot < 1 or query < 1:
        raise ValueError("need way >= 2, shot >= 1, query >= 1")
    by_class = data.class_indices()
    need = shot + query
    eligible = [c for c, idx in by_class.items() if len(idx) >= need]
    if len(eligible) < way:
        short = sorted((c for c in by_class if c not in eligible),
                       key=lambda c: (len(by_class[c]), c))
        detail = (f"class {short[0]} has {len(by_class[short[0]])} samples, needs {need}"
                  if short else f"dataset has only {len(by_class)} classes")
        raise ValueError(f"cannot draw a {way}-way episode with {need} samples/class: {detail}")
    g = rng.generator(seed)
    chosen = g.choice(np.array(sorted(eligible)), size=way, replace=False)
    sup, qry, sup_y, qry_y = [], [], [], []
    for label, c in enumerate(chosen):
        picks = g.choice(by_class[int(c)], size=need, replace=False)
        sup.extend(picks[:shot])
        qry.extend(picks[shot:])
        sup_y.extend([label] * shot)
        qry_y.extend([label] * query)
    sup = np.asarray(sup)
    sup_y = np.asarray(sup_y)
    qry = np.asarray(qry)
    return Episode(
        way, shot, query, seed, tuple(int(c) for c in chosen),
        sup, qry,
        data.features[sup], sup_y.astype(np.int64),
        data.features[qry], np.asarray(qry_y, dtype=np.int64),
    )


def knn_l1_predict(support_x: np.ndarray, support_y: np.ndarray, query_x: np.ndarray,
                   k: int = 1, n_classes: int | None = None) -> np.ndarray:
    """Majority vote of the k L1-nearest supports; ties go to the lowest class id."""
    n_classes = int(support_y.max()) + 1 if n_classes is None else n_classes
    if not 1 <= k <= len(support_y):
        raise ValueError(f"k must be in [1, {len(support_y)}], got {k}")
    preds = np.empty(len(query_x), dtype=np.int64)
    for i, q in enumerate(query_x):
        d = np.abs(support_x - q).sum(axis=1)
        # nearest first; equal distances resolved toward the lower class id
        order = np.lexsort((support_y, d))[:k]
        votes = np.bincount(support_y[order], minlength=n_classes)
        preds[i] = int(np.argmax(votes))
    return preds


def knn_l1(episode: Episode, k: int = 1) -> float:
    pred = knn_l1_predict(episode.support_x, episode.support_y, episode.query_x, k, episode.way)
    return float(np.mean(pred == episode.query_y))


@dataclass
class EpisodeReport:
    episode: int
    seed: int
    hdc_accuracy: float
    knn_accuracy: float
    config: dict
    confusion: np.ndarray = field(repr=False)  # (way, way) true x predicted, HDC
    memory: ClassMemory | None = field(default=None, repr=False)

    def csv_row(self) -> list[str]:
        c = self.config
        return [str(self.episode), str(self.seed), str(c["way"]), str(c["shot"]), str(c["D"]),
                str(c["infer_bits"]), f"{self.hdc_accuracy:.6f}", f"{self.knn_accuracy:.6f}"]


def run_pipeline(episode: Episode, cfg: HdcConfig, k: int = 1, episode_id: int = 0,
                 block: CrpSeedBlock | None = None) -> EpisodeReport:
    """Train a fresh class memory on the support set and score both classifiers."""
    if episode.support_x.shape[1] != cfg.F:
        raise ShapeError(f"episode features have F={episode.support_x.shape[1]}, config F={cfg.F}")
    if episode.way != cfg.N:
        raise ValueError(f"episode is {episode.way}-way but the config has N={cfg.N}")
    for name, x in (("support", episode.support_x), ("query", episode.query_x)):
        zero = np.flatnonzero(~x.any(axis=1))
        if zero.size:
            log.warning("episode %d: %d all-zero %s feature vectors encode to all +1",
                        episode_id, zero.size, name)
    block = CrpSeedBlock.from_seed(cfg.seed) if block is None else block
    mem = fsl_train_single_pass(zip(episode.support_x, episode.support_y),
                                ClassMemory.empty(cfg.N, cfg.D), cfg, block)
    pred, _ = classify_batch(encode(episode.query_x, block, cfg.D, cfg.binarize), mem, cfg.infer_bits)
    confusion = np.zeros((episode.way, episode.way), dtype=np.int64)
    np.add.at(confusion, (episode.query_y, pred), 1)
    snapshot = asdict(cfg) | {"way": episode.way, "shot": episode.shot,
                              "query": episode.query, "k": k}
    return EpisodeReport(
        episode=episode_id,
        seed=episode.seed,
        hdc_accuracy=float(np.mean(pred == episode.query_y)),
        knn_accuracy=knn_l1(episode, k),
        config=snapshot,
        confusion=confusion,
        memory=mem,
    )


def episode_seed(seed: int, index: int) -> int:
    return rng.derive_seed(seed, index)


def run_episodes(data: LabeledFeatures, cfg: HdcConfig, way: int, shot: int, query: int,
                 episodes: int, seed: int, k: int = 1, workers: int | None = None) -> list[EpisodeReport]:
    """Independent seeded episodes, evaluated in parallel, returned in order."""
    block = CrpSeedBlock.from_seed(cfg.seed)

    def one(i: int) -> EpisodeReport:
        ep = sample_episode(data, way, shot, query, episode_seed(seed, i))
        rep = run_pipeline(ep, cfg, k, episode_id=i, block=block)
        rep.memory = None
        return rep

    n = worker_count(workers)
    if n == 1:
        return [one(i) for i in range(episodes)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, range(episodes)))


def summarize(reports: Sequence[EpisodeReport]) -> dict:
    hdc = np.array([r.hdc_accuracy for r in reports])
    knn = np.array([r.knn_accuracy for r in reports])
    diff = hdc - knn

    def stats(v):
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        return {"mean": float(v.mean()), "stderr": se}

    return {
        "episodes": len(reports),
        "hdc_acc": stats(hdc),
        "knn_acc": stats(knn),
        "hdc_minus_knn": stats(diff),
        "config": {k: v for k, v in reports[0].config.items()} if reports else {},
    }


def report_csv(reports: Sequence[EpisodeReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


# -- cost tables ----------------------------------------------------------

def cost_table(specs: Sequence[ConvLayerSpec], G: int, group_size: int | None = None) -> list[dict]:
    """Per-layer dense vs clustered counts; ``group_size`` None means full sharing."""
    rows = []
    total_d, total_c = CostRecord(), CostRecord()
    for i, spec in enumerate(specs):
        d = dense_cost(spec)
        c = clustered_cost(spec, G, group_size)
        total_d, total_c = total_d + d, total_c + c
        rows.append(_cost_row(str(i), spec, d, c))
    rows.append(_cost_row("total", None, total_d, total_c))
    return rows


def _cost_row(name: str, spec: ConvLayerSpec | None, d: CostRecord, c: CostRecord) -> dict:
    return {
        "layer": name,
        "shape": "" if spec is None else
        f"{spec.in_channels}->{spec.out_channels}@{spec.in_height}x{spec.in_width}",
        "dense_ops": d.ops,
        "clustered_ops": c.ops,
        "ops_reduction": d.ops / c.ops,
        "dense_mults": d.multiplies,
        "clustered_mults": c.multiplies,
        "dense_bytes": d.bytes_params,
        "clustered_bytes": c.bytes_params,
        "params_reduction": d.bytes_params / c.bytes_params,
    }


# -- feature extraction ---------------------------------------------------

def _pool_between(prev: ConvLayerSpec, nxt: ConvLayerSpec, li: int) -> bool:
    """Whether a 2x2 max-pool sits between two layers, inferred from their shapes."""
    if prev.out_channels != nxt.in_channels:
        raise ShapeError(f"layer {li}: expects {nxt.in_channels} input channels, "
                         f"layer {li - 1} produces {prev.out_channels}")
    same = (nxt.in_height, nxt.in_width) == (prev.out_height, prev.out_width)
    halved = (nxt.in_height, nxt.in_width) == (prev.out_height // 2, prev.out_width // 2)
    if same:
        return False
    if halved:
        return True
    raise ShapeError(f"layer {li}: input {nxt.in_height}x{nxt.in_width} does not follow "
                     f"layer {li - 1} output {prev.out_height}x{prev.out_width}")


def extract_features(images: Sequence[Tensor3 | np.ndarray], model: ClusteredModel,
                     labels: Sequence[int] | None = None) -> LabeledFeatures:
    """Clustered conv + ReLU per layer, 2x2 max-pool where the next layer's input
    is half the size, global average pooling at the end."""
    layers = model.layers
    if not layers:
        raise ShapeError("model has no layers")
    pools = [_pool_between(layers[i - 1].spec, layers[i].spec, i) for i in range(1, len(layers))]
    feats = []
    for img in images:
        x = img if isinstance(img, Tensor3) else Tensor3(img)
        for i, layer in enumerate(layers):
            x = relu(clustered_conv2d(x, layer))
            if i < len(pools) and pools[i]:
                x = max_pool2d(x)
        feats.append(global_avg_pool(x))
    y = np.zeros(len(feats), dtype=np.int64) if labels is None else np.asarray(labels)
    return LabeledFeatures(np.array(feats).reshape(len(feats), -1), y)


def load_images(path: str | Path) -> list[Tensor3]:
    return [Tensor3(t) for t in load_tensors(path)]


def random_dense_model(specs: Sequence[ConvLayerSpec], seed: int) -> list[DenseFilterBank]:
    """He-initialised dense banks for a small frozen extractor."""
    g = rng.generator(seed, stream=7)
    return [DenseFilterBank(s, g.standard_normal((s.out_channels, s.kernel, s.kernel, s.in_channels))
                            * math.sqrt(2.0 / s.taps)) for s in specs]
