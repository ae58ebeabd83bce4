import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fslhdnn.harness import (
    LabeledFeatures,
    extract_features,
    features_bytes,
    knn_l1,
    knn_l1_predict,
    load_features,
    make_synthetic_dataset,
    random_dense_model,
    report_csv,
    run_episodes,
    run_pipeline,
    sample_episode,
    save_features,
    summarize,
    worker_count,
)
from fslhdnn.hdc import HdcConfig
from fslhdnn.tensorcore import ConvLayerSpec, ShapeError, Tensor3, dense_conv2d, global_avg_pool, max_pool2d, relu
from fslhdnn.wclust import ClusteredLayer, ClusteredModel, PatternGroup, expand, share_patterns

DATA = make_synthetic_dataset(10, 12, 16, 1.0, 3)


def test_unique_partition():
    data = LabeledFeatures(np.arange(4.0)[:, None], [0, 0, 1, 1])
    ep = sample_episode(data, 2, 1, 1, seed=5)
    assert sorted(ep.class_ids) == [0, 1]
    assert sorted(np.r_[ep.support_idx, ep.query_idx].tolist()) == [0, 1, 2, 3]


def test_same_seed_same_episode():
    assert sample_episode(DATA, 5, 3, 4, 11) == sample_episode(DATA, 5, 3, 4, 11)
    assert sample_episode(DATA, 5, 3, 4, 11) != sample_episode(DATA, 5, 3, 4, 12)


@given(seed=st.integers(0, 2**64 - 1), way=st.integers(2, 10), shot=st.integers(1, 6), query=st.integers(1, 6))
def test_episode_structure(seed, way, shot, query):
    ep = sample_episode(DATA, way, shot, query, seed)
    assert not set(ep.support_idx.tolist()) & set(ep.query_idx.tolist())
    assert np.bincount(ep.support_y, minlength=way).tolist() == [shot] * way
    assert np.bincount(ep.query_y, minlength=way).tolist() == [query] * way
    assert len(set(ep.class_ids)) == way
    # episode label i always maps to dataset class class_ids[i]
    assert np.array_equal(DATA.labels[ep.support_idx], np.array(ep.class_ids)[ep.support_y])
    assert np.array_equal(DATA.labels[ep.query_idx], np.array(ep.class_ids)[ep.query_y])


def test_deficient_class_named():
    data = LabeledFeatures(np.zeros((7, 2)), [0, 0, 0, 1, 1, 1, 2])
    with pytest.raises(ValueError, match="class 2 has 1 samples"):
        sample_episode(data, 3, 1, 1, 0)


def test_class_coverage_uniform():
    data = make_synthetic_dataset(10, 10, 16, 1.0, 0)
    counts = np.zeros(10)
    for s in range(20):
        for c in sample_episode(data, 5, 2, 2, s).class_ids:
            counts[c] += 1
    expected = counts.sum() / 10
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 27.88  # df=9, p=0.001


def test_knn_exact_match_and_tie():
    sx = np.array([[0.0, 0.0], [2.0, 0.0]])
    assert knn_l1_predict(sx, np.array([1, 0]), np.array([[0.0, 0.0]])).tolist() == [1]
    # query equidistant from both supports: lower class id wins
    assert knn_l1_predict(sx, np.array([1, 0]), np.array([[1.0, 0.0]])).tolist() == [0]


def test_knn_separable_is_perfect():
    data = make_synthetic_dataset(10, 20, 32, 0.01, 4)
    assert knn_l1(sample_episode(data, 10, 5, 10, 1)) == 1.0


def brute_knn(sx, sy, qx, k, n):
    out = []
    for q in qx:
        pairs = sorted((sum(abs(a - b) for a, b in zip(s, q)), int(y)) for s, y in zip(sx, sy))
        votes = [0] * n
        for _, y in pairs[:k]:
            votes[y] += 1
        out.append(votes.index(max(votes)))
    return out


@settings(max_examples=40)
@given(seed=st.integers(0, 2**32), k=st.integers(1, 7))
def test_knn_matches_brute_force(seed, k):
    r = np.random.default_rng(seed)
    sx = r.integers(0, 4, (12, 3)).astype(float)  # small grid forces ties
    sy = r.integers(0, 4, 12)
    qx = r.integers(0, 4, (6, 3)).astype(float)
    assert knn_l1_predict(sx, sy, qx, k, 4).tolist() == brute_knn(sx, sy, qx, k, 4)


def test_knn_k_bounds():
    with pytest.raises(ValueError):
        knn_l1_predict(np.zeros((2, 1)), np.array([0, 1]), np.zeros((1, 1)), k=3)


def test_point_masses_and_zero_spread():
    data = make_synthetic_dataset(5, 6, 16, 0.0, 2)
    ep = sample_episode(data, 5, 3, 3, 0)
    rep = run_pipeline(ep, HdcConfig(F=16, D=1024, N=5, seed=3))
    assert rep.hdc_accuracy == 1.0 and rep.knn_accuracy == 1.0
    assert rep.confusion.sum() == 15
    assert rep.confusion.sum(axis=1).tolist() == [3] * 5


def test_huge_spread_is_near_chance():
    data = make_synthetic_dataset(10, 25, 16, 1e3, 8)
    cfg = HdcConfig(F=16, D=1024, N=10, seed=1, update_rule="add-correct-on-miss", infer_bits=8)
    reps = run_episodes(data, cfg, 10, 5, 20, episodes=1, seed=2)
    assert abs(reps[0].knn_accuracy - 0.1) <= 0.1
    assert abs(reps[0].hdc_accuracy - 0.1) <= 0.1


def test_pipeline_checks_dims():
    ep = sample_episode(DATA, 5, 1, 1, 0)
    with pytest.raises(ShapeError):
        run_pipeline(ep, HdcConfig(F=32, D=1024, N=5))
    with pytest.raises(ValueError):
        run_pipeline(ep, HdcConfig(F=16, D=1024, N=6))


def test_synthetic_file_bytes_deterministic(tmp_path):
    a = features_bytes(make_synthetic_dataset(4, 5, 16, 1.5, 99))
    b = features_bytes(make_synthetic_dataset(4, 5, 16, 1.5, 99))
    assert a == b
    assert a != features_bytes(make_synthetic_dataset(4, 5, 16, 1.5, 100))
    save_features(tmp_path / "f.fht", DATA)
    back = load_features(tmp_path / "f.fht")
    np.testing.assert_array_equal(back.features, DATA.features)
    np.testing.assert_array_equal(back.labels, DATA.labels)


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("FHDNN_THREADS", "2")
    assert worker_count(8) == 2
    assert worker_count(1) == 1


def test_parallel_matches_serial():
    cfg = HdcConfig(F=16, D=1024, N=5, seed=4)
    serial = run_episodes(DATA, cfg, 5, 3, 4, episodes=6, seed=1, workers=1)
    parallel = run_episodes(DATA, cfg, 5, 3, 4, episodes=6, seed=1, workers=4)
    assert report_csv(serial) == report_csv(parallel)


def test_report_formats():
    cfg = HdcConfig(F=16, D=1024, N=5, seed=4)
    reps = run_episodes(DATA, cfg, 5, 3, 4, episodes=3, seed=1)
    lines = report_csv(reps).splitlines()
    assert lines[0] == "episode,seed,way,shot,D,infer_bits,hdc_acc,knn_acc"
    assert len(lines) == 4
    s = summarize(reps)
    json.dumps(s)
    assert s["episodes"] == 3
    assert s["hdc_minus_knn"]["mean"] == pytest.approx(s["hdc_acc"]["mean"] - s["knn_acc"]["mean"])


def test_constant_image_closed_form():
    spec = ConvLayerSpec(2, 3, 1, 1, 0, 4, 4)
    cents = np.array([[0.5], [-1.0], [2.0]])
    model = ClusteredModel((ClusteredLayer(spec, 1, (PatternGroup(np.zeros((1, 1, 2), np.uint8), (0, 1, 2), cents),)),))
    feats = extract_features([np.full((4, 4, 2), 3.0)], model).features[0]
    # each output = c * (3 + 3), then ReLU
    assert feats.tolist() == [3.0, 0.0, 12.0]
    assert not extract_features([np.zeros((4, 4, 2))], model).features.any()


def dense_extract(img, layers):
    x = Tensor3(img)
    for i, layer in enumerate(layers):
        x = relu(dense_conv2d(x, expand(layer)))
        if i + 1 < len(layers) and layers[i + 1].spec.in_height != layer.spec.out_height:
            x = max_pool2d(x)
    return global_avg_pool(x)


def test_clustered_vs_dense_extraction(rng):
    specs = [ConvLayerSpec(3, 8, 3, 1, 1, 8, 8), ConvLayerSpec(8, 16, 3, 1, 1, 4, 4)]
    layers = tuple(share_patterns(b, 8, 4) for b in random_dense_model(specs, 1))
    imgs = rng.standard_normal((10, 8, 8, 3))
    got = extract_features(list(imgs), ClusteredModel(layers)).features
    ref = np.array([dense_extract(im, layers) for im in imgs])
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-12)


def test_dim_chain_error_names_layer():
    specs = [ConvLayerSpec(3, 8, 3, 1, 1, 8, 8), ConvLayerSpec(8, 4, 3, 1, 1, 5, 5)]
    layers = tuple(share_patterns(b, 4) for b in random_dense_model(specs, 1))
    with pytest.raises(ShapeError, match="layer 1"):
        extract_features([np.zeros((8, 8, 3))], ClusteredModel(layers))
