import math

import numpy as np
import pytest

from sfwcompress.errors import DegenerateDirection, HorizonExceeded, InfeasiblePoint, InvalidBeta, ShapeMismatch
from sfwcompress.numerics import contiguous_groups
from sfwcompress.optim import (
    SFW,
    SGD,
    ConvergenceExperimentSpec,
    OptimizerState,
    fw_gap,
    fw_update,
    group_penalty_grad,
    lr_schedule,
    momentum_update,
    nuclear_subgradient,
    proxgd_step,
    rescale_lr,
    sfw_step,
    sgd_step,
    svt,
    theorem_schedule,
)
from sfwcompress.regions import FeasibleRegion, Kind, gauge, lmo


def test_momentum_examples():
    assert np.allclose(momentum_update([1.0, 0.0], [0.0, 1.0], 0.9, 3), [0.9, 0.1])
    assert np.allclose(momentum_update([1.0, 0.0], [0.0, 1.0], 0.9, 0), [0.0, 1.0])
    assert np.allclose(momentum_update([1.0, 0.0], [0.0, 1.0], 0.0, 5), [0.0, 1.0])
    with pytest.raises(ShapeMismatch):
        momentum_update([1.0], [0.0, 1.0], 0.5, 1)


def test_rescale_examples():
    assert rescale_lr("gradient", 0.1, 2.0, 4.0) == pytest.approx(0.05)
    assert rescale_lr("diameter", 0.2, D=4.0) == pytest.approx(0.05)
    assert rescale_lr("gradient", 0.9, 10.0, 1.0) == 1.0
    assert rescale_lr("none", 1.7) == 1.0
    assert rescale_lr("gradient-theory", 0.1, 3.0) == pytest.approx(0.3)
    with pytest.raises(DegenerateDirection):
        rescale_lr("gradient", 0.1, 1.0, 0.0)


def test_schedule_examples():
    assert lr_schedule("linear-decay", 0, 10, 0.1) == 0.1
    assert lr_schedule("linear-decay", 5, 10, 0.1) == pytest.approx(0.05)
    assert all(lr_schedule("constant", t, 10, 0.3) == 0.3 for t in range(10))
    with pytest.raises(HorizonExceeded):
        lr_schedule("constant", 10, 10, 0.1)


def test_fw_update_examples():
    th, v = np.array([1.0, 1.0]), np.array([-2.0, 0.0])
    assert np.allclose(fw_update(th, v, 0.5), [-0.5, 0.5])
    assert np.array_equal(fw_update(th, v, 0.0), th)
    assert np.allclose(fw_update(th, v, 1.0), v)


def test_sfw_step_matches_definition():
    r = FeasibleRegion(Kind.K_SUPPORT, 1.0, (5,), 2)
    st = OptimizerState(0.2, "constant", 10, "gradient", rho=0.5)
    theta = np.zeros(5)
    gen = np.random.default_rng(0)
    m = None
    for t in range(4):
        g = gen.standard_normal(5)
        m = g if m is None else 0.5 * m + 0.5 * g
        v = lmo(r, m)
        eta = min(1.0, 0.2 * np.linalg.norm(g) / np.linalg.norm(v - theta))
        expect = (1 - eta) * theta + eta * v
        theta, rec = sfw_step(st, theta, r, g)
        st.advance()
        assert np.allclose(theta, expect, atol=1e-14)
        assert rec.eff_lr == pytest.approx(eta)


def test_sfw_step_skips_degenerate_direction():
    r = FeasibleRegion(Kind.L2_BALL, 1.0, (2,))
    st = OptimizerState(0.1, "constant", 5, "gradient", rho=0.0)
    theta = np.array([-1.0, 0.0])  # already the vertex for g = [1, 0]
    new, rec = sfw_step(st, theta, r, np.array([1.0, 0.0]))
    assert rec.skipped and np.array_equal(new, theta)


@pytest.mark.parametrize("kind", [k for k in Kind])
def test_sfw_feasibility_short(kind):
    shape = (4, 5) if kind is Kind.SPECTRAL_K_SUPPORT else (20,)
    k = None if kind is Kind.L2_BALL else 2
    r = FeasibleRegion(kind, 0.7, shape, k)
    gen = np.random.default_rng(1)
    for mode in ("none", "gradient", "diameter"):
        st = OptimizerState(0.5, "constant", 1000, mode, rho=0.9)
        theta = np.zeros(shape)
        for _ in range(1000):
            theta, _ = sfw_step(st, theta, r, gen.standard_normal(shape) * 10)
            st.advance()
            assert gauge(r, theta) <= 0.7 * (1 + 1e-9)


def test_sfw_geometric_decay_toward_vertex():
    r = FeasibleRegion(Kind.L2_BALL, 1.0, (3,))
    st = OptimizerState(0.3, "constant", 100, "none", rho=0.0)
    g = np.array([1.0, 2.0, 2.0])
    v = lmo(r, g)
    theta = np.array([0.1, 0.0, 0.0])
    d0 = np.linalg.norm(theta - v)
    for t in range(1, 20):
        theta, _ = sfw_step(st, theta, r, g)
        st.advance()
        assert np.linalg.norm(theta - v) == pytest.approx(d0 * 0.7**t, rel=1e-10)


def test_sgd_examples():
    assert np.allclose(sgd_step([1.0], np.array([0.0]), 0.1, 0.5)[0], [0.95])
    assert np.allclose(sgd_step([3.0], np.array([2.0]), 0.1)[0], [2.8])
    assert np.allclose(sgd_step([3.0], np.array([2.0]), 0.0)[0], [3.0])
    # heavy ball: second step uses rho * buf + d
    th, buf = sgd_step(np.array([0.0]), np.array([1.0]), 0.1, 0.0, 0.9)
    th, buf = sgd_step(th, np.array([1.0]), 0.1, 0.0, 0.9, buf)
    assert np.allclose(th, [-0.1 - 0.19])


def test_group_penalty_examples():
    out = group_penalty_grad(np.array([3.0, 4.0, 0.0, 0.0]), [[0, 1], [2, 3]], 0.1)
    assert np.allclose(out, [0.06, 0.08, 0.0, 0.0])
    assert np.array_equal(group_penalty_grad(np.array([3.0, 4.0]), [[0, 1]], 0.0), [0.0, 0.0])


def test_group_penalty_is_gradient_of_sum_of_norms():
    gen = np.random.default_rng(2)
    theta = gen.standard_normal(12)
    groups = contiguous_groups(4, 3)
    f = lambda x: 0.3 * sum(np.linalg.norm(x[g]) for g in groups)
    num = np.array([(f(theta + 1e-6 * e) - f(theta - 1e-6 * e)) / 2e-6 for e in np.eye(12)])
    assert np.allclose(group_penalty_grad(theta, groups, 0.3), num, atol=1e-8)


def test_nuclear_subgradient_examples_and_pairing():
    assert np.allclose(nuclear_subgradient(np.diag([3.0, 1.0]), 0.1), 0.1 * np.eye(2))
    assert np.array_equal(nuclear_subgradient(np.zeros((2, 2)), 0.1), np.zeros((2, 2)))
    assert np.allclose(nuclear_subgradient(2 * np.eye(2), 0.5), 0.5 * np.eye(2))
    gen = np.random.default_rng(3)
    for shape in [(3, 5), (6, 4), (5, 5)]:
        A = gen.standard_normal(shape)
        S = nuclear_subgradient(A, 0.7)
        nuc = np.linalg.svd(A, compute_uv=False).sum()
        assert np.vdot(S, A) == pytest.approx(0.7 * nuc, abs=1e-9)
    # rank deficient: only the live singular directions
    A = gen.standard_normal((5, 2)) @ gen.standard_normal((2, 4))
    assert np.linalg.matrix_rank(nuclear_subgradient(A, 1.0), tol=1e-8) == 2


def test_svt_examples():
    assert np.allclose(svt(np.diag([3.0, 1.0]), 1.5), np.diag([1.5, 0.0]), atol=1e-12)
    A = np.random.default_rng(4).standard_normal((4, 3))
    assert np.allclose(svt(A, 0.0), A, atol=1e-9)
    assert np.allclose(svt(np.diag([3.0, 1.0]), 5.0), 0.0)
    with pytest.raises(ValueError):
        svt(A, -1.0)


def test_svt_is_the_prox():
    gen = np.random.default_rng(5)
    A, tau = gen.standard_normal((5, 4)), 0.8
    obj = lambda X: 0.5 * np.sum((X - A) ** 2) + tau * np.linalg.svd(X, compute_uv=False).sum()
    X = svt(A, tau)
    best = obj(X)
    for _ in range(100):
        assert obj(X + 1e-3 * gen.standard_normal(A.shape)) >= best - 1e-9


def test_proxgd_composition():
    gen = np.random.default_rng(6)
    for _ in range(3):
        th, g = gen.standard_normal((3, 4)), gen.standard_normal((3, 4))
        lr, wd, lam = 0.1, 0.01, 2.0
        out, _ = proxgd_step(th, g, lr, wd, lam)
        assert np.allclose(out, svt(th - lr * (g + wd * th), lr * lam))


def test_fw_gap_examples():
    r = FeasibleRegion(Kind.L2_BALL, 1.0, (2,))
    assert fw_gap(np.array([0.3, 0.1]), np.zeros(2), r) == 0.0
    assert fw_gap(np.array([1.0, 0.0]), np.array([1.0, 0.0]), r) == pytest.approx(2.0)
    assert fw_gap(np.array([-1.0, 0.0]), np.array([1.0, 0.0]), r) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(InfeasiblePoint):
        fw_gap(np.array([2.0, 0.0]), np.array([1.0, 0.0]), r)


def test_theorem_schedule_examples():
    spec = ConvergenceExperimentSpec(M=1, G=1, D=1, h0=1, T=100, beta=2)
    eta, b = theorem_schedule(spec)
    assert eta == pytest.approx(1 / math.sqrt(200)) and b == 100
    assert spec.bound() == pytest.approx(0.27678, abs=1e-5)
    eta4, _ = theorem_schedule(ConvergenceExperimentSpec(1, 1, 1, 1, 400, 2))
    assert eta4 == pytest.approx(eta / 2)
    assert eta * spec.G <= 1 / math.sqrt(2 * spec.T) + 1e-15
    with pytest.raises(InvalidBeta):
        theorem_schedule(ConvergenceExperimentSpec(1, 1, 1, 1, 100, 1))


def test_drivers():
    params = {"w": np.ones((2, 3)), "b": np.ones(2)}
    grads = {"w": np.ones((2, 3)), "b": np.ones(2)}
    regions = {"w": FeasibleRegion(Kind.K_SUPPORT, 3.0, (2, 3), 2), "b": FeasibleRegion(Kind.L2_BALL, 2.0, (2,))}
    opt = SFW(regions, OptimizerState(0.1, "linear-decay", 4))
    recs = opt.step(params, grads)
    assert set(recs) == {"w", "b"} and opt.state.t == 1
    sgd = SGD(OptimizerState(0.1, "constant", 4, rho=0.0), "group", targets=["w"],
              labels={"w": np.repeat(np.arange(2), 3)})
    p = {"w": np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]])}
    sgd.state.penalty = 0.5
    sgd.step(p, {"w": np.zeros((2, 3))})
    assert np.allclose(p["w"], [[3 - 0.03, 4 - 0.04, 0], [0, 0, 0]])
    with pytest.raises(ValueError):
        SGD(OptimizerState(0.1), "bogus")
