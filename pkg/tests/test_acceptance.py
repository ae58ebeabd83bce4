"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line with the measured values."""

import csv
import io
import time

import numpy as np
import pytest

from fslhdnn import cli, harness, hdc
from fslhdnn.pesim import schedule_layer, simulate_layer
from fslhdnn.tensorcore import ConvLayerSpec, DenseFilterBank, OpCounter, Tensor3, dense_conv2d
from fslhdnn.wclust import (
    ClusteredLayer,
    PatternGroup,
    clustered_conv2d,
    clustered_cost,
    expand,
    share_patterns,
)

# Few-shot benchmark protocol, fixed before the held-out run:
# spread was set with kNN alone (bisection to mean kNN accuracy 0.70 on tuning
# dataset seeds 100-102); the benchmark then uses unseen dataset seeds.
BENCH_SPREAD = 1.78
BENCH_DATA_SEEDS = (1000, 1001, 1002, 1003)
BENCH_EPISODES_PER_SET = 20
BENCH = dict(classes=20, per_class=40, F=64, D=4096, way=10, shot=5, query=15)
BENCH_RULE, BENCH_BITS = "add-correct-on-miss", 8


def report(capsys, n, ok, detail, seconds, limit):
    ok = ok and seconds < limit
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail} ({seconds:.1f}s, limit {limit}s)")
    return ok


def run_benchmark(rule, bits):
    reports = []
    for ds in BENCH_DATA_SEEDS:
        data = harness.make_synthetic_dataset(BENCH["classes"], BENCH["per_class"], BENCH["F"],
                                              BENCH_SPREAD, ds)
        cfg = hdc.HdcConfig(F=BENCH["F"], D=BENCH["D"], N=BENCH["way"], infer_bits=bits,
                            seed=ds, update_rule=rule)
        reports += harness.run_episodes(data, cfg, BENCH["way"], BENCH["shot"], BENCH["query"],
                                        BENCH_EPISODES_PER_SET, ds)
    return harness.summarize(reports)


def random_integer_layer(r, spec, G):
    members = np.arange(spec.out_channels)
    gs = int(r.integers(1, spec.out_channels + 1))
    groups = []
    for start in range(0, spec.out_channels, gs):
        m = tuple(int(c) for c in members[start:start + gs])
        idx = r.integers(0, G, (3, 3, spec.in_channels)).astype(np.uint8)
        groups.append(PatternGroup(idx, m, r.integers(-8, 9, (len(m), G)).astype(float)))
    return ClusteredLayer(spec, G, tuple(groups))


def test_c1_clustered_conv_oracle(capsys):
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    worst, exact_fail, n = 0.0, 0, 0
    for _ in range(120):
        cin, cout = int(r.integers(1, 17)), int(r.integers(1, 33))
        G = int(r.choice([1, 4, 8, 16]))
        hw = int(r.integers(3, 9))
        stride = int(r.integers(1, 3))
        if (hw + 2 - 3) % stride:
            hw += 1
        spec = ConvLayerSpec(cin, cout, 3, stride, 1, hw, hw)
        layer = share_patterns(DenseFilterBank(spec, r.standard_normal(cout * 9 * cin)), G,
                               int(r.integers(1, cout + 1)))
        x = Tensor3(r.standard_normal((hw, hw, cin)))
        a = clustered_conv2d(x, layer).data
        b = dense_conv2d(x, expand(layer)).data
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)))
        ilayer = random_integer_layer(r, spec, G)
        xi = Tensor3(r.integers(-9, 10, (hw, hw, cin)).astype(float))
        exact_fail += not np.array_equal(clustered_conv2d(xi, ilayer).data, dense_conv2d(xi, expand(ilayer)).data)
        n += 1
    dt = time.perf_counter() - t0
    ok = report(capsys, 1, worst < 1e-5 and exact_fail == 0 and n >= 100,
                f"{n} layers, worst relative error {worst:.2e} (< 1e-5), integer mismatches {exact_fail}", dt, 60)
    assert ok


def test_c2_vgg16_cost_reduction(capsys, tmp_path):
    t0 = time.perf_counter()
    assert cli.main(["costs", "--model", "vgg16", "--G", "16", "--manifest", str(tmp_path / "m.json")]) == 0
    capsys.readouterr()
    rows = harness.cost_table(harness.vgg16_specs(), 16)
    total = rows[-1]
    ops, params = total["ops_reduction"], total["params_reduction"]
    dt = time.perf_counter() - t0
    ok = report(capsys, 2, 3.0 <= ops <= 4.4 and 3.5 <= params <= 5.3,
                f"total ops reduction {ops:.2f}x (want 3.0-4.4), params reduction {params:.2f}x (want 3.5-5.3)",
                dt, 5)
    assert ok


def test_c3_crp_memory_ratio(capsys):
    t0 = time.perf_counter()
    got = [hdc.memory_footprint(hdc.HdcConfig(F=F, D=1024, N=2))[1] for F in (128, 1024)]
    dt = time.perf_counter() - t0
    assert report(capsys, 3, got == [512, 4096], f"ratios {got[0]:.0f} and {got[1]:.0f} (want 512, 4096)", dt, 1)


def test_c4_crp_explicit_equivalence(capsys):
    t0 = time.perf_counter()
    mismatches = checked = 0
    for F, D in ((16, 1024), (64, 2048), (1024, 8192)):
        for seed in range(10):
            blk = hdc.CrpSeedBlock.from_seed(seed)
            x = np.random.default_rng(seed).standard_normal((4, F))
            a = hdc.encode(x, blk, D)
            b = hdc.encode_explicit(x, hdc.materialize(blk, F, D))
            mismatches += int(np.count_nonzero(a != b))
            checked += a.size
    dt = time.perf_counter() - t0
    assert report(capsys, 4, mismatches == 0, f"{checked} encoded entries, {mismatches} mismatches", dt, 120)


def test_c5_hdc_beats_knn(capsys):
    t0 = time.perf_counter()
    s = run_benchmark(BENCH_RULE, BENCH_BITS)
    lit = run_benchmark("paper-literal", 16)
    dt = time.perf_counter() - t0
    knn, diff = s["knn_acc"]["mean"], s["hdc_minus_knn"]
    with capsys.disabled():
        print(f"\n    default rule (paper-literal, 16-bit): hdc {lit['hdc_acc']['mean']:.4f}, "
              f"hdc - knn {lit['hdc_minus_knn']['mean']:+.4f} +/- {lit['hdc_minus_knn']['stderr']:.4f}")
    ok = report(capsys, 5, 0.6 <= knn <= 0.8 and diff["mean"] > 0,
                f"{s['episodes']} episodes ({BENCH_RULE}, {BENCH_BITS}-bit): hdc {s['hdc_acc']['mean']:.4f}, "
                f"knn {knn:.4f}, paired hdc - knn {diff['mean']:+.4f} +/- {diff['stderr']:.4f} (want > 0)",
                dt, 300)
    assert ok


def test_c6_quantization_contract(capsys):
    t0 = time.perf_counter()
    data = harness.make_synthetic_dataset(BENCH["classes"], BENCH["per_class"], BENCH["F"],
                                          BENCH_SPREAD, BENCH_DATA_SEEDS[0])
    cfg = hdc.HdcConfig(F=64, D=4096, N=10, seed=BENCH_DATA_SEEDS[0], update_rule=BENCH_RULE)
    blk = hdc.CrpSeedBlock.from_seed(cfg.seed)
    identical = True
    for i in range(BENCH_EPISODES_PER_SET):
        ep = harness.sample_episode(data, 10, 5, 15, harness.episode_seed(cfg.seed, i))
        mem = hdc.fsl_train_single_pass(zip(ep.support_x, ep.support_y), hdc.ClassMemory.empty(10, 4096), cfg, blk)
        H = hdc.encode(ep.query_x, blk, 4096).astype(np.int64)
        raw = np.abs(H[:, None, :] - mem.hvs[None].astype(np.int64)).sum(axis=2)
        d16 = hdc.distances(H, mem, 16)
        identical &= d16.dtype == raw.dtype and np.array_equal(d16, raw)
        identical &= np.array_equal(hdc.classify_batch(H, mem, 16)[0], np.argmin(raw, axis=1))
    one_bit = run_benchmark(BENCH_RULE, 1)["hdc_acc"]["mean"]
    dt = time.perf_counter() - t0
    ok = report(capsys, 6, bool(identical) and one_bit >= 2 / 10,
                f"16-bit distances bit-identical to raw memory: {bool(identical)}; "
                f"1-bit accuracy {one_bit:.4f} (want >= 0.2)", dt, 120)
    assert ok


def test_c7_simulator_reconciliation(capsys):
    t0 = time.perf_counter()
    r = np.random.default_rng(77)
    configs = [(8, 32, 8, 8, 8, 4), (4, 16, 4, 16, 16, 1), (3, 5, 6, 6, 4, 2), (16, 24, 5, 7, 16, 8),
               (1, 1, 3, 3, 1, 1), (2, 40, 9, 4, 4, 3), (6, 12, 8, 8, 8, 12), (5, 33, 4, 6, 2, 5),
               (16, 16, 6, 6, 16, 16), (7, 9, 5, 5, 3, 9), (2, 64, 8, 8, 4, 4), (12, 20, 7, 3, 1, 7)]
    bad = []
    for cin, cout, h, w, G, gs in configs:
        spec = ConvLayerSpec(cin, cout, 3, 1, 1, h, w)
        layer = share_patterns(DenseFilterBank(spec, r.standard_normal(cout * 9 * cin)), G, gs)
        x = Tensor3(r.standard_normal((h, w, cin)))
        rep = simulate_layer(layer, x=x)
        cost = clustered_cost(spec, G, gs)
        counter = OpCounter()
        ref = clustered_conv2d(x, layer, counter)
        if not (np.array_equal(rep.output.data, ref.data)
                and (rep.mult_ops, rep.accum_ops) == (cost.multiplies, cost.adds)
                == (counter.multiplies, counter.adds)):
            bad.append((cin, cout, h, w, G, gs))
    u_full = schedule_layer(ConvLayerSpec(4, 16, 3, 1, 1, 4, 16), 8, group_size=1).pe_utilization
    u_five = schedule_layer(ConvLayerSpec(4, 16, 3, 1, 1, 5, 16), 8, group_size=1).pe_utilization
    dt = time.perf_counter() - t0
    ok = report(capsys, 7, not bad and u_full == 1.0 and u_five == 5 / 8,
                f"{len(configs)} layers, mismatching {bad or 'none'}; utilization {u_full} and {u_five} "
                f"(want 1.0, 0.625)", dt, 60)
    assert ok


class CountingIterator:
    def __init__(self, items):
        self.items = list(items)
        self.pos = 0
        self.served = [0] * len(self.items)

    def __iter__(self):
        return self

    def __next__(self):
        if self.pos >= len(self.items):
            raise StopIteration
        self.served[self.pos] += 1
        self.pos += 1
        return self.items[self.pos - 1]


def test_c8_single_pass_and_determinism(capsys, tmp_path, monkeypatch):
    t0 = time.perf_counter()
    data = harness.make_synthetic_dataset(8, 12, 32, 1.5, 3)
    cfg = hdc.HdcConfig(F=32, D=2048, N=8, seed=5)
    it = CountingIterator(zip(data.features, data.labels))
    hdc.fsl_train_single_pass(it, hdc.ClassMemory.empty(8, 2048), cfg)
    once = it.served == [1] * len(data)

    def memory_bytes():
        mem = hdc.fsl_train_single_pass(zip(data.features, data.labels), hdc.ClassMemory.empty(8, 2048), cfg)
        buf = io.BytesIO()
        hdc.write_memory(buf, mem)
        return buf.getvalue()

    same_mem = memory_bytes() == memory_bytes()
    monkeypatch.chdir(tmp_path)
    argv = ["episodes", "--way", "10", "--shot", "5", "--episodes", "20", "--D", "4096", "--seed", "7"]
    cli.main(argv + ["--out", "a.csv"])
    cli.main(argv + ["--out", "b.csv"])
    same_csv = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    dt = time.perf_counter() - t0
    ok = report(capsys, 8, once and same_mem and same_csv and len(rows) == 21,
                f"each of {len(data)} samples served once: {once}; memory files identical: {same_mem}; "
                f"episode CSVs identical: {same_csv}", dt, 60)
    assert ok
