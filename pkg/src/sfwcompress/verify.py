"""Verification routines: brute-force LMO oracles, theorem check, gradient check."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import (
    LeastSquaresProblem,
    finite_diff_check,
    least_squares_problem,
    make_blobs,
    make_cnn,
    make_mlp,
    make_two_moons,
)
from .numerics import RngStream, contiguous_groups
from .optim import ConvergenceExperimentSpec, OptimizerState, fw_gap, sfw_step, theorem_schedule
from .regions import FeasibleRegion, Kind, gauge, lmo

LMO_TOL = 1e-10
GRADCHECK_TOL = {"quadratic": 1e-8, "mlp": 1e-5, "cnn": 1e-5}


# --- brute-force LMO oracles -------------------------------------------------

def _supports(n, k):
    """0/1 masks of every non-empty support with at most ``k`` entries."""
    rows = []
    for size in range(1, k + 1):
        for combo in itertools.combinations(range(n), size):
            m = np.zeros(n)
            m[list(combo)] = 1.0
            rows.append(m)
    return np.array(rows)


def polytope_vertices(n, k, tau):
    """Every vertex of the k-sparse polytope: all sign patterns on all supports."""
    out = [np.zeros(n)]
    for size in range(1, k + 1):
        for combo in itertools.combinations(range(n), size):
            for signs in itertools.product((-1.0, 1.0), repeat=size):
                v = np.zeros(n)
                v[list(combo)] = signs
                out.append(tau * v)
    return np.array(out)


class LmoOracle:
    """Exact minimum of ``<v, g>`` over a region, computed without the closed forms.

    Polytope: enumeration of vertices. KSupport / GroupKSupport: every
    admissible support, each with its continuous minimizer ``-tau ||g_S||``.
    Spectral: von Neumann's trace inequality with singular values from
    LAPACK (a separate SVD route). L2Ball: Cauchy-Schwarz.
    """

    def __init__(self, region: FeasibleRegion):
        self.region = region
        kind, n = region.kind, region.size
        if kind is Kind.K_SPARSE_POLYTOPE:
            self.vertices = polytope_vertices(n, region.k, region.tau)
        elif kind is Kind.K_SUPPORT:
            self.masks = _supports(n, region.k)
        elif kind is Kind.GROUP_K_SUPPORT:
            groups = _supports(region.n_groups, region.k)
            # expand group masks to coordinate masks
            self.masks = groups[:, region.labels]

    def minimum(self, g) -> float:
        r = self.region
        flat = np.asarray(g, dtype=np.float64).ravel()
        if r.kind is Kind.L2_BALL:
            return -r.tau * float(np.linalg.norm(flat))
        if r.kind is Kind.K_SPARSE_POLYTOPE:
            return float(np.min(self.vertices @ flat))
        if r.kind in (Kind.K_SUPPORT, Kind.GROUP_K_SUPPORT):
            return -r.tau * float(np.sqrt(np.max(self.masks @ (flat * flat))))
        s = np.linalg.svd(flat.reshape(r.matrix_shape), compute_uv=False)
        return -r.tau * float(np.linalg.norm(s[: r.k]))


def lmo_defect(region: FeasibleRegion, g, oracle: LmoOracle) -> float:
    """Optimality gap of ``lmo(g)`` plus any excess of its gauge over ``tau``."""
    v = lmo(region, g)
    gap = float(np.vdot(v, g)) - oracle.minimum(g)
    excess = max(0.0, gauge(region, v) - region.tau)
    return max(gap, excess, 0.0)


@dataclass
class LmoReport:
    kind: str
    shape: tuple
    k: int | None
    trials: int
    max_gap: float
    passed: bool


def make_region(kind, dim=None, k=None, shape=None, group_size=2, tau=1.0) -> FeasibleRegion:
    kind = Kind(kind)
    if kind is Kind.SPECTRAL_K_SUPPORT:
        return FeasibleRegion(kind, tau, tuple(shape or (4, 5)), k)
    if kind is Kind.GROUP_K_SUPPORT:
        if dim % group_size:
            raise ValueError("dim must be a multiple of group_size")
        return FeasibleRegion(kind, tau, (dim,), k, groups=tuple(contiguous_groups(dim // group_size, group_size)))
    if kind is Kind.L2_BALL:
        return FeasibleRegion(kind, tau, (dim,))
    return FeasibleRegion(kind, tau, (dim,), k)


def verify_lmo(kind, dim=6, k=3, trials=1000, seed=0, shape=None, group_size=2) -> LmoReport:
    """Compare the closed-form LMO with brute force on seeded Gaussian gradients."""
    region = make_region(kind, dim, k, shape, group_size)
    if region.kind is not Kind.SPECTRAL_K_SUPPORT and region.size > 8:
        raise ValueError("brute-force enumeration is limited to dim <= 8")
    oracle = LmoOracle(region)
    gen = RngStream(seed, "noise", (list(Kind).index(region.kind),)).generator()
    worst = 0.0
    for _ in range(trials):
        g = gen.standard_normal(region.shape)
        worst = max(worst, lmo_defect(region, g, oracle))
    return LmoReport(region.kind.value, region.shape, region.k, trials, worst, worst <= LMO_TOL)


def lmo_suite(trials=1000, seed=0) -> list:
    """All five kinds at dim 8 (matrices 4x5) for every k up to 4."""
    reports = [verify_lmo(Kind.L2_BALL, 8, None, trials, seed)]
    for k in range(1, 5):
        reports.append(verify_lmo(Kind.K_SPARSE_POLYTOPE, 8, k, trials, seed))
        reports.append(verify_lmo(Kind.K_SUPPORT, 8, k, trials, seed))
        reports.append(verify_lmo(Kind.GROUP_K_SUPPORT, 8, k, trials, seed))
        reports.append(verify_lmo(Kind.SPECTRAL_K_SUPPORT, None, k, trials, seed, shape=(4, 5)))
    return reports


# --- convergence check -------------------------------------------------------

@dataclass
class ConvergenceProblem:
    """Least squares over an L2 ball with certified theorem constants."""

    problem: LeastSquaresProblem
    region: FeasibleRegion
    theta0: np.ndarray
    M: float
    G: float
    D: float
    h0: float

    def spec(self, T, beta=None) -> ConvergenceExperimentSpec:
        b_min = 2.0 * self.h0 / (self.M * self.D**2)
        return ConvergenceExperimentSpec(self.M, self.G, self.D, self.h0, T, b_min if beta is None else beta)


def convergence_problem(seed=0, m=200, n=10, tau=1.0) -> ConvergenceProblem:
    """Nearly parallel per-sample gradients keep ``||grad L||`` close to the
    certified ``G``, so the theorem step size actually moves the iterates
    and the run reaches the regime where the bound's ``1/sqrt(T)`` rate is
    observable within ``T`` steps."""
    p = least_squares_problem(seed, m, n, spread=0.1, target_scale=3.0, aligned=True)
    region = FeasibleRegion(Kind.L2_BALL, tau, (n,))
    theta0 = np.zeros(n)
    return ConvergenceProblem(p, region, theta0, p.smoothness(), p.lipschitz_bound(tau), region.diameter,
                              p.gap_bound(theta0))


def run_theorem_sfw(cp: ConvergenceProblem, spec: ConvergenceExperimentSpec, seed: int):
    """Algorithm 1 with ``eta_t = ||grad_t|| eta``, batch ``b = T``, no momentum.

    Returns ``(averaged, sampled, max_sample_grad)``: the mean of
    ``G(theta_t) ||grad L(theta_t)||`` over the iterates, the value at the
    uniformly drawn output iterate, and the largest per-sample gradient
    norm seen in any batch.
    """
    eta, b = theorem_schedule(spec)
    T = spec.T
    state = OptimizerState(lr0=eta, schedule="constant", horizon=T, rescale="gradient-theory", rho=0.0)
    gen = RngStream(seed, "shuffle").generator()
    p, region = cp.problem, cp.region
    theta = cp.theta0.copy()
    prods = np.empty(T)
    max_sample = 0.0
    for t in range(T):
        full = p.grad(theta)
        prods[t] = fw_gap(theta, full, region) * float(np.linalg.norm(full))
        idx = gen.integers(0, p.m, size=b)
        max_sample = max(max_sample, float(np.max(p.per_sample_grad_norms(theta)[idx])))
        theta, _ = sfw_step(state, theta, region, p.batch_grad(theta, idx))
        state.advance()
    a = int(RngStream(seed, "noise").generator().integers(0, T))
    return float(np.mean(prods)), float(prods[a]), max_sample


@dataclass
class ConvergenceReport:
    T: int
    seeds: int
    bound: float
    # mean over seeds of G(theta_a) ||grad L(theta_a)||, theta_a drawn uniformly
    measured_mean: float
    # same expectation with the draw integrated out (mean over all iterates)
    averaged_mean: float
    max_sample_grad: float
    G: float
    eta: float
    passed: bool
    per_seed: list = field(default_factory=list, repr=False)


def convergence_check(T=100, seeds=20, problem_seed=0, beta=None, cp: ConvergenceProblem | None = None) -> ConvergenceReport:
    cp = cp or convergence_problem(problem_seed)
    spec = cp.spec(T, beta)
    eta, _ = theorem_schedule(spec)
    runs = [run_theorem_sfw(cp, spec, s) for s in range(seeds)]
    avg = float(np.mean([r[0] for r in runs]))
    sampled = float(np.mean([r[1] for r in runs]))
    max_g = max(r[2] for r in runs)
    bound = spec.bound()
    ok = sampled <= bound and avg <= bound and max_g <= cp.G * (1 + 1e-12)
    return ConvergenceReport(T, seeds, bound, sampled, avg, max_g, cp.G, eta, ok, [r[1] for r in runs])


def convergence_ratio_check(T=100, seeds=20, factor=4, problem_seed=0, lo=1.3, hi=3.0, beta=None) -> dict:
    cp = convergence_problem(problem_seed)
    short = convergence_check(T, seeds, beta=beta, cp=cp)
    long = convergence_check(factor * T, seeds, beta=beta, cp=cp)
    ratio = short.measured_mean / long.measured_mean
    return {
        "short": asdict(short), "long": asdict(long), "ratio": ratio,
        "averaged_ratio": short.averaged_mean / long.averaged_mean,
        "bound_ratio": short.bound / long.bound,
        "passed": short.passed and long.passed and lo <= ratio <= hi,
    }


# --- gradient check ----------------------------------------------------------

def gradcheck(kind="mlp", seed=0, eps=1e-5, batch=16, batchnorm=False, model=None, data=None) -> dict:
    """Finite-difference check of the quadratic, MLP or CNN gradients."""
    if kind == "quadratic":
        p = least_squares_problem(seed, 50, 8)
        theta = RngStream(seed, "init").generator().standard_normal(p.n)
        err = finite_diff_check(lambda: p.loss(theta), {"theta": theta}, {"theta": p.grad(theta)}, eps,
                                rng=RngStream(seed, "noise"))
    else:
        if model is None:
            if kind == "mlp":
                model, data = make_mlp(2, [100, 100], 2, batchnorm=batchnorm), make_two_moons(seed, 4 * batch)
            else:
                model, data = make_cnn(1, [4, 8], 3, batchnorm=batchnorm), make_blobs(seed, 4 * batch, 3, shape=(1, 6, 6))
            model.init(RngStream(seed, "init"))
        x, y = data.inputs[:batch], data.labels[:batch]
        _, _, grads = model.loss_and_grads(x, y)
        grads = {k: v.copy() for k, v in grads.items()}
        err = finite_diff_check(lambda: model.loss_and_grads(x, y)[0], model.named_params(), grads, eps,
                                rng=RngStream(seed, "noise"))
    tol = GRADCHECK_TOL.get(kind, 1e-5)
    return {"kind": kind, "max_rel_err": err, "tol": tol, "passed": err <= tol}
