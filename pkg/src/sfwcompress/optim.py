"""Stochastic Frank-Wolfe and the SGD-family baselines.

Step primitives (``momentum_update``, ``rescale_lr``, ``sfw_step``,
``sgd_step``, ``proxgd_step``, ...) are pure functions on arrays. The
``SFW`` and ``SGD`` classes apply them to a model's parameter groups, one
feasible region per group.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDirection, HorizonExceeded, InfeasiblePoint, InvalidBeta, ShapeMismatch
from .numerics import group_norms, partition_labels, svd_full
from .regions import FeasibleRegion, gauge, lmo

log = logging.getLogger(__name__)

RESCALE_MODES = ("none", "diameter", "gradient", "gradient-theory")
SCHEDULES = ("constant", "linear-decay")


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"shape {np.shape(a)} vs {np.shape(b)}")


def clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def lr_schedule(kind: str, t: int, T: int, lr0: float) -> float:
    if not 0 <= t < T:
        raise HorizonExceeded(f"step {t} outside horizon [0, {T})")
    if kind == "constant":
        return lr0
    if kind == "linear-decay":
        return lr0 * (1.0 - t / T)
    raise ValueError(f"unknown schedule {kind!r}")


def momentum_update(m, g, rho: float, t: int) -> np.ndarray:
    """Exponential moving average of gradients; the first step returns ``g``."""
    g = np.asarray(g, dtype=np.float64)
    if m is None or t == 0:
        return g.copy()
    m = np.asarray(m, dtype=np.float64)
    _same_shape(m, g)
    return rho * m + (1.0 - rho) * g


def rescale_lr(mode: str, lr: float, grad_norm=None, dir_norm=None, D=None) -> float:
    """Effective Frank-Wolfe step size in ``[0, 1]``.

    ``gradient`` scales by ``||grad|| / ||v - theta||``; ``gradient-theory``
    by ``||grad||`` alone; ``diameter`` divides by the region diameter.
    """
    if mode == "none":
        return clamp01(lr)
    if mode == "diameter":
        return clamp01(lr / D)
    if mode == "gradient":
        if dir_norm == 0:
            raise DegenerateDirection("v - theta vanished")
        return clamp01(lr * grad_norm / dir_norm)
    if mode == "gradient-theory":
        return clamp01(lr * grad_norm)
    raise ValueError(f"unknown rescale mode {mode!r}")


def fw_update(theta, v, eta_hat: float) -> np.ndarray:
    """Convex combination ``(1 - eta) * theta + eta * v``."""
    return theta + eta_hat * (v - theta)


@dataclass
class StepRecord:
    """What one group's SFW step did; feeds the effective-lr trace."""

    lr: float
    grad_norm: float
    dir_norm: float
    eff_lr: float
    skipped: bool = False


@dataclass
class OptimizerState:
    lr0: float
    schedule: str = "linear-decay"
    horizon: int = 1
    rescale: str = "gradient"
    rho: float = 0.9
    weight_decay: float = 0.0
    penalty: float = 0.0
    t: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rescale not in RESCALE_MODES:
            raise ValueError(f"rescale must be one of {RESCALE_MODES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def current_lr(self) -> float:
        return lr_schedule(self.schedule, self.t, self.horizon, self.lr0)

    def advance(self):
        self.t += 1


def sfw_step(state: OptimizerState, theta, region: FeasibleRegion, g, key=0, lr=None):
    """One SFW update of a single parameter group.

    Returns ``(new_theta, StepRecord)``. A degenerate direction (``v`` equal
    to ``theta``) under gradient rescaling leaves ``theta`` unchanged.
    """
    theta = np.asarray(theta, dtype=np.float64)
    _same_shape(theta, g)
    m = momentum_update(state.buffers.get(key), g, state.rho, state.t)
    state.buffers[key] = m
    v = lmo(region, m)
    lr = state.current_lr() if lr is None else lr
    grad_norm = float(np.linalg.norm(g))
    dir_norm = float(np.linalg.norm(v - theta))
    try:
        eta = rescale_lr(state.rescale, lr, grad_norm, dir_norm, region.diameter)
    except DegenerateDirection:
        log.debug("degenerate direction for group %s at step %d; skipped", key, state.t)
        return theta, StepRecord(lr, grad_norm, dir_norm, 0.0, skipped=True)
    return fw_update(theta, v, eta), StepRecord(lr, grad_norm, dir_norm, eta)


def sgd_step(theta, g, lr: float, weight_decay: float = 0.0, rho: float = 0.0, buf=None):
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    Returns ``(new_theta, new_buffer)``; the buffer starts as the first
    decayed gradient.
    """
    theta = np.asarray(theta, dtype=np.float64)
    _same_shape(theta, g)
    d = g + weight_decay * theta
    buf = d.copy() if buf is None else rho * buf + d
    return theta - lr * buf, buf


def group_penalty_grad(theta, groups, lam: float, *, labels=None) -> np.ndarray:
    """Gradient of ``lam * sum_i ||theta_i||_2``; zero groups contribute 0."""
    theta = np.asarray(theta, dtype=np.float64)
    flat = theta.ravel()
    if labels is None:
        labels = partition_labels(groups, flat.size)
    if lam == 0:
        return np.zeros_like(theta)
    norms = group_norms(flat, labels=labels)
    safe = np.where(norms > 0, norms, 1.0)
    scale = np.where(norms > 0, lam / safe, 0.0)
    return (flat * scale[labels]).reshape(theta.shape)


def nuclear_subgradient(A, lam: float) -> np.ndarray:
    """``lam * U V^T`` over singular values above ``1e-12 * sigma_1``."""
    A = np.asarray(A, dtype=np.float64)
    f = svd_full(A)
    if f.sigma.size == 0 or f.sigma[0] == 0:
        return np.zeros_like(A)
    keep = f.sigma > 1e-12 * f.sigma[0]
    return lam * (f.U[:, keep] @ f.V[:, keep].T)


def svt(A, threshold: float) -> np.ndarray:
    """Singular value soft-thresholding (prox of ``threshold * ||.||_*``)."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    f = svd_full(A)
    return (f.U * np.maximum(f.sigma - threshold, 0.0)) @ f.V.T


def proxgd_step(theta, g, lr, weight_decay, lam, rho=0.0, buf=None):
    """SGD step on the loss, then singular value thresholding at ``lr * lam``.

    ``theta`` is a matrix. Returns ``(new_theta, new_buffer)``.
    """
    theta, buf = sgd_step(theta, g, lr, weight_decay, rho, buf)
    return svt(theta, lr * lam), buf


def fw_gap(theta, grad, region: FeasibleRegion) -> float:
    """Frank-Wolfe gap ``max_v <v - theta, -grad>`` over the region."""
    theta = np.asarray(theta, dtype=np.float64)
    if gauge(region, theta) > region.tau * (1.0 + 1e-9):
        raise InfeasiblePoint("theta lies outside the region")
    v = lmo(region, grad)
    return max(0.0, float(np.vdot(v - theta, -np.asarray(grad))))


# --- convergence theory ----------------------------------------------------

@dataclass(frozen=True)
class ConvergenceExperimentSpec:
    """Constants entering the gradient-rescaling convergence bound."""

    M: float
    G: float
    D: float
    h0: float
    T: int
    beta: float

    @property
    def beta_min(self) -> float:
        return 2.0 * self.h0 / (self.M * self.D**2)

    @property
    def batch_size(self) -> int:
        return self.T

    def bound(self) -> float:
        M, G, D, h0, T, beta = self.M, self.G, self.D, self.h0, self.T, self.beta
        return D / math.sqrt(T) * (math.sqrt(h0 * M * G**2 * beta) + G**2 + M * G * D / (2.0 * math.sqrt(2.0)))


def theorem_schedule(spec: ConvergenceExperimentSpec):
    """Step-size factor and batch size prescribed by the convergence theorem.

    Returns ``(eta, b)``; the per-step size is ``||grad_t|| * eta``.
    """
    if spec.beta < spec.beta_min * (1.0 - 1e-12):
        raise InvalidBeta(f"beta={spec.beta} below 2 h0 / (M D^2) = {spec.beta_min}")
    eta = math.sqrt(spec.h0 / (spec.T * spec.M * spec.D**2 * spec.G**2 * spec.beta))
    return eta, spec.T


# --- model-level drivers ---------------------------------------------------

class SFW:
    """SFW over named parameter groups, each in its own feasible region."""

    def __init__(self, regions: dict, state: OptimizerState):
        self.regions = regions
        self.state = state
        self.last_records: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        """Update ``params`` in place; returns ``{name: StepRecord}``."""
        lr = self.state.current_lr()
        records = {}
        for name, region in self.regions.items():
            new, rec = sfw_step(self.state, params[name], region, grads[name], key=name, lr=lr)
            params[name][...] = new
            records[name] = rec
        self.state.advance()
        self.last_records = records
        return records


class SGD:
    """Momentum SGD with weight decay and optional structured penalties.

    ``penalty`` selects the extra term on the ``targets`` parameters:
    ``"group"`` (filter-wise L2 norms), ``"nuclear"`` (subgradient of the
    nuclear norm of the matrix view) or ``"prox"`` (singular value
    thresholding after the step).
    """

    def __init__(self, state: OptimizerState, penalty: str | None = None, targets=(), labels=None):
        if penalty not in (None, "group", "nuclear", "prox"):
            raise ValueError(f"unknown penalty {penalty!r}")
        self.state = state
        self.penalty = penalty
        self.targets = set(targets)
        self.labels = labels or {}

    def step(self, params: dict, grads: dict) -> dict:
        st = self.state
        lr = st.current_lr()
        for name, theta in params.items():
            g = grads[name]
            if name in self.targets and st.penalty:
                if self.penalty == "group":
                    g = g + group_penalty_grad(theta, None, st.penalty, labels=self.labels[name])
                elif self.penalty == "nuclear":
                    mat = theta.reshape(theta.shape[0], -1)
                    g = g + nuclear_subgradient(mat, st.penalty).reshape(theta.shape)
            new, st.buffers[name] = sgd_step(theta, g, lr, st.weight_decay, st.rho, st.buffers.get(name))
            if self.penalty == "prox" and name in self.targets:
                new = svt(new.reshape(theta.shape[0], -1), lr * st.penalty).reshape(theta.shape)
            theta[...] = new
        st.advance()
        return {}
