import math

import numpy as np
import pytest

from sfwcompress.compress import (
    TRADEOFF_HEADER,
    budget,
    compress,
    decompose_layer,
    filter_prune_local,
    lowrank_compress,
    magnitude_prune_global,
    rank_for_reduction,
    read_tradeoff_csv,
    select_ranks,
    sweep,
    write_tradeoff_csv,
)
from sfwcompress.errors import RankOutOfRange
from sfwcompress.models import Conv2d, Dense, Model, make_cnn, make_mlp
from sfwcompress.numerics import RngStream


def tiny_dense(values):
    m = make_mlp(2, [], 2)
    m.named_params()["0.W"][...] = np.reshape(values, (2, 2))
    m.named_params()["0.b"][...] = [0.25, -0.25]
    return m


def trained_like_cnn(seed=0, bn=False):
    m = make_cnn(2, [6, 8], 3, batchnorm=bn)
    m.init(RngStream(seed, "init"))
    return m


# --- magnitude ---------------------------------------------------------------------

def test_magnitude_example():
    out, rep = magnitude_prune_global(tiny_dense([0.5, -0.1, 0.3, -0.7]), 0.5)
    assert np.allclose(out.named_params()["0.W"].ravel(), [0.5, 0, 0, -0.7])
    assert rep.zeros == 2 and rep.prunable_total == 4
    # biases untouched
    assert np.allclose(out.named_params()["0.b"], [0.25, -0.25])


def test_magnitude_extremes_and_ties():
    m = tiny_dense([0.5, -0.1, 0.3, -0.7])
    out, _ = magnitude_prune_global(m, 0.0)
    assert np.array_equal(out.named_params()["0.W"], m.named_params()["0.W"])
    out, rep = magnitude_prune_global(m, 1.0)
    assert not np.any(out.named_params()["0.W"]) and rep.zeros == 4
    out, _ = magnitude_prune_global(tiny_dense([1.0, -1.0, 1.0, 1.0]), 0.5)
    assert np.allclose(out.named_params()["0.W"].ravel(), [0, 0, 1, 1])


def test_magnitude_exact_counts_and_full_sort_oracle():
    m = make_mlp(2, [30, 20], 2, batchnorm=True)
    m.init(RngStream(0, "init"))
    info = m.param_info()
    pooled = [(abs(v), li, j) for name, a in m.named_params().items() if info[name].prunable
              for li, j, v in [(info[name].layer, j, x) for j, x in enumerate(a.ravel())]]
    P = len(pooled)
    for s in [0.0, 0.1, 0.29, 0.5, 0.77, 0.9, 1.0]:
        out, rep = magnitude_prune_global(m, s)
        assert rep.zeros == budget(s, P) == math.floor(round(s * P, 9))
        victims = sorted(pooled)[: budget(s, P)]
        got = {(info[n].layer, j) for n, a in out.named_params().items() if info[n].prunable
               for j in np.flatnonzero(a.ravel() == 0)}
        assert got == {(li, j) for _, li, j in victims}
        # non-prunable tensors never touched
        for name, a in out.named_params().items():
            if not info[name].prunable:
                assert np.array_equal(a, m.named_params()[name])


def test_magnitude_monotone_zero_sets():
    m = make_mlp(2, [16], 2)
    m.init(RngStream(1, "init"))
    prev = set()
    for s in np.linspace(0, 1, 11):
        out, _ = magnitude_prune_global(m, float(s))
        cur = {(n, j) for n, a in out.named_params().items() if n.endswith("W") for j in np.flatnonzero(a.ravel() == 0)}
        assert prev <= cur
        prev = cur


def test_magnitude_rejects_bad_fraction():
    with pytest.raises(ValueError):
        magnitude_prune_global(tiny_dense([1, 2, 3, 4]), 1.5)


# --- filters ------------------------------------------------------------------------

def conv_with_filter_norms(norms):
    m = Model([Conv2d(1, len(norms), 1)])
    W = m.named_params()["0.W"]
    for i, n in enumerate(norms):
        W[i, 0, 0, 0] = n
    return m


def test_filter_examples():
    out, rep = filter_prune_local(conv_with_filter_norms([4.0, 1.0, 3.0]), 1 / 3)
    assert rep.detail["0.W"] == [1]
    assert np.allclose(out.named_params()["0.W"].ravel(), [4, 0, 3])
    out, rep = filter_prune_local(conv_with_filter_norms([2.0, 2.0, 2.0]), 1 / 3)
    assert rep.detail["0.W"] == [0]


def test_filter_zero_fraction_bit_identical():
    m = trained_like_cnn(bn=True)
    x = np.random.default_rng(0).standard_normal((5, 2, 6, 6))
    out, rep = filter_prune_local(m, 0.0)
    assert np.array_equal(out.forward(x), m.forward(x)) and rep.zeros == 0


def test_filter_counts_per_layer():
    m = trained_like_cnn()
    for f in [0.25, 0.5, 0.75]:
        out, rep = filter_prune_local(m, f)
        for i, layer in enumerate(out.layers):
            if isinstance(layer, Conv2d):
                W = layer.params["W"]
                dead = int(np.sum(~W.reshape(W.shape[0], -1).any(axis=1)))
                assert dead == math.floor(f * W.shape[0])
                assert layer.params["W"].shape == m.layers[i].params["W"].shape
        # dense head untouched
        assert np.array_equal(out.layers[-1].params["W"], m.layers[-1].params["W"])
        assert rep.params_after < rep.params_before
    with pytest.raises(ValueError):
        filter_prune_local(m, 1.0)


# --- low rank ----------------------------------------------------------------------

def test_rank_example_288_to_88():
    assert rank_for_reduction(8, 36, 200 / 288) == 2
    m = Model([Conv2d(4, 8, 3)])
    m.init(RngStream(0, "init"))
    assert select_ranks(m, 200 / 288) == {0: 2}
    out, rep = lowrank_compress(m, 200 / 288)
    factors = [l for l in out.layers if isinstance(l, Conv2d)]
    assert sum(l.params["W"].size for l in factors) == 88
    assert rep.achieved == pytest.approx(200 / 288, abs=1e-15)
    assert rep.params_before - rep.params_after == 200


def test_rank_formula_properties():
    for n, m in [(8, 36), (16, 72), (3, 3), (1, 9)]:
        for s in np.linspace(0, 0.99, 23):
            t = rank_for_reduction(n, m, float(s))
            assert 1 <= t <= min(n, m)
            if t > 1:
                assert t * (n + m) <= (1 - s) * n * m + 1e-9
    assert rank_for_reduction(8, 36, 0.0) == min(8, math.floor(8 * 36 / 44))


def test_dense_decomposition_counts():
    layer = Dense(6, 4)
    layer.init(np.random.default_rng(0))
    A, B = decompose_layer(layer, 2)
    assert A.params["W"].size + B.params["W"].size == 20
    assert not np.any(A.params["b"]) and np.array_equal(B.params["b"], layer.params["b"])
    with pytest.raises(RankOutOfRange):
        decompose_layer(layer, 5)
    with pytest.raises(RankOutOfRange):
        decompose_layer(layer, 0)


def test_full_rank_decomposition_preserves_outputs():
    m = trained_like_cnn(3)
    x = np.random.default_rng(1).standard_normal((4, 2, 6, 6))
    layers = []
    for layer in m.layers:
        if isinstance(layer, Conv2d):
            n = layer.n_out
            layers.extend(decompose_layer(layer, min(n, layer.c_in * 9)))
        else:
            layers.append(layer)
    assert np.max(np.abs(Model(layers).forward(x) - m.forward(x))) <= 1e-5


def test_truncation_error_is_tail_energy():
    gen = np.random.default_rng(2)
    layer = Conv2d(3, 7, 3)
    layer.init(gen)
    W = layer.params["W"].reshape(7, 27)
    s = np.linalg.svd(W, compute_uv=False)
    for t in range(1, 8):
        A, B = decompose_layer(layer, t)
        approx = B.params["W"].reshape(7, t) @ A.params["W"].reshape(t, 27)
        assert abs(np.linalg.norm(W - approx) - math.sqrt(np.sum(s[t:] ** 2))) <= 1e-9


def test_eckart_young_spot_check():
    gen = np.random.default_rng(3)
    layer = Dense(8, 5)
    layer.init(gen)
    W = layer.params["W"]
    A, B = decompose_layer(layer, 2)
    Ua, Vb = B.params["W"], A.params["W"]
    best = np.linalg.norm(W - Ua @ Vb)
    for _ in range(10_000):
        P = (Ua + 0.05 * gen.standard_normal(Ua.shape)) @ (Vb + 0.05 * gen.standard_normal(Vb.shape))
        assert np.linalg.norm(W - P) >= best - 1e-12


def test_lowrank_zero_target_is_identity():
    m = trained_like_cnn()
    x = np.random.default_rng(4).standard_normal((3, 2, 6, 6))
    out, rep = lowrank_compress(m, 0.0)
    assert np.array_equal(out.forward(x), m.forward(x)) and rep.achieved == 0.0


# --- sweeps ------------------------------------------------------------------------------

def test_sweep_contract(tmp_path):
    m = make_mlp(2, [10], 2)
    m.init(RngStream(0, "init"))
    before = {k: v.copy() for k, v in m.named_params().items()}
    x = np.random.default_rng(0).standard_normal((50, 2))
    y = (x[:, 0] > 0).astype(np.int64)
    ev = lambda model: model.evaluate(x, y)[1]
    recs = sweep(m, "magnitude", [0.0, 0.5, 0.9], ev, config_id="abc", seed=3)
    assert len(recs) == 3
    assert recs[0].metric_post == recs[0].metric_pre
    assert all(np.array_equal(before[k], v) for k, v in m.named_params().items())
    with pytest.raises(ValueError):
        sweep(m, "magnitude", [0.5, 0.1], ev)
    path = tmp_path / "t.csv"
    write_tradeoff_csv(path, recs)
    assert path.read_text(encoding="utf-8").splitlines()[0] == ",".join(TRADEOFF_HEADER)
    assert read_tradeoff_csv(path) == recs


def test_sweep_reproduces_magnitude_example():
    m = tiny_dense([0.5, -0.1, 0.3, -0.7])
    seen = []
    sweep(m, "magnitude", [0.5], lambda model: seen.append(model.named_params()["0.W"].ravel().copy()) or 0.0)
    assert np.allclose(seen[-1], [0.5, 0, 0, -0.7])


def test_compress_dispatch():
    with pytest.raises(ValueError):
        compress(tiny_dense([1, 2, 3, 4]), "bogus", 0.5)
