"""Feasible regions: atomic-norm balls, their gauges and linear minimization oracles."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BudgetExceedsDimension, PowerIterationStalled, ShapeMismatch
from .numerics import (
    SVD_TOPK_MAX_ITER,
    SVD_TOPK_TOL,
    RngStream,
    SvdFactors,
    group_norms,
    ksupport_norm,
    partition_labels,
    svd_full,
    svd_topk,
    topk_indices,
)


class Kind(str, enum.Enum):
    L2_BALL = "L2Ball"
    K_SPARSE_POLYTOPE = "KSparsePolytope"
    K_SUPPORT = "KSupport"
    GROUP_K_SUPPORT = "GroupKSupport"
    SPECTRAL_K_SUPPORT = "SpectralKSupport"


@dataclass(frozen=True, eq=False)
class FeasibleRegion:
    """A ball of radius ``tau`` for one of the supported atomic norms.

    ``shape`` is the ambient tensor shape. ``SpectralKSupport`` views the
    tensor as an ``(shape[0], prod(shape[1:]))`` matrix; ``GroupKSupport``
    uses ``groups`` (default: one group per leading-axis slice, i.e. per
    convolutional filter or per output neuron).
    """

    kind: Kind
    tau: float
    shape: tuple
    k: int | None = None
    groups: tuple | None = None
    # truncated-SVD controls for the spectral LMO
    svd_tol: float = SVD_TOPK_TOL
    svd_max_iter: int = SVD_TOPK_MAX_ITER
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        n = self.size
        labels = None
        if self.kind is Kind.L2_BALL:
            limit = None
        elif self.kind is Kind.GROUP_K_SUPPORT:
            groups = self.groups
            if groups is None:
                per = n // self.shape[0]
                labels = np.repeat(np.arange(self.shape[0]), per)
                limit = self.shape[0]
            else:
                labels = partition_labels(groups, n)
                limit = len(groups)
        elif self.kind is Kind.SPECTRAL_K_SUPPORT:
            if len(self.shape) < 2:
                raise ShapeMismatch("spectral region needs a matrix or higher-order tensor")
            limit = min(self.matrix_shape)
        else:
            limit = n
        if limit is not None:
            if self.k is None or not 1 <= self.k <= limit:
                raise BudgetExceedsDimension(f"k={self.k} outside [1, {limit}] for {self.kind.value}")
            object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def matrix_shape(self) -> tuple:
        return (self.shape[0], self.size // self.shape[0])

    @property
    def n_groups(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def diameter(self) -> float:
        """L2 diameter of the region."""
        if self.kind is Kind.K_SPARSE_POLYTOPE:
            return 2.0 * self.tau * math.sqrt(self.k)
        return 2.0 * self.tau

    def contains(self, x, rtol: float = 1e-9) -> bool:
        return gauge(self, x) <= self.tau * (1.0 + rtol)

    def with_tau(self, tau: float) -> "FeasibleRegion":
        return FeasibleRegion(self.kind, tau, self.shape, self.k, self.groups, self.svd_tol, self.svd_max_iter)


def _check_shape(region: FeasibleRegion, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != region.shape:
        raise ShapeMismatch(f"expected shape {region.shape}, got {x.shape}")
    return x


def lmo(region: FeasibleRegion, g) -> np.ndarray:
    """Return a vertex ``v`` minimizing ``<v, g>`` over the region.

    A zero ``g`` gives the zero tensor.
    """
    g = _check_shape(region, g)
    if not np.any(g):
        return np.zeros(region.shape)
    tau = region.tau
    kind = region.kind
    flat = g.ravel()

    if kind is Kind.L2_BALL:
        return -tau * g / np.linalg.norm(flat)

    if kind is Kind.K_SPARSE_POLYTOPE:
        v = np.zeros(region.size)
        idx = topk_indices(flat, region.k)
        v[idx] = -tau * np.sign(flat[idx])
        return v.reshape(region.shape)

    if kind is Kind.K_SUPPORT:
        v = np.zeros(region.size)
        idx = topk_indices(flat, region.k)
        v[idx] = flat[idx]
        return (-tau / np.linalg.norm(v[idx]) * v).reshape(region.shape)

    if kind is Kind.GROUP_K_SUPPORT:
        labels = region.labels
        norms = group_norms(flat, labels=labels)
        chosen = topk_indices(norms, region.k)
        mask = np.isin(labels, chosen)
        v = np.where(mask, flat, 0.0)
        return (-tau / np.linalg.norm(v) * v).reshape(region.shape)

    if kind is Kind.SPECTRAL_K_SUPPORT:
        W = flat.reshape(region.matrix_shape)
        factors = _leading_triples(W, region.k, region.svd_tol, region.svd_max_iter)
        s = factors.sigma
        return (-tau / np.linalg.norm(s) * ((factors.U * s) @ factors.V.T)).reshape(region.shape)

    raise AssertionError(kind)


# below this size a full Jacobi SVD is cheaper than power iteration and exact
SPECTRAL_DIRECT_MAX = 32


def _leading_triples(W, k, tol=SVD_TOPK_TOL, max_iter=SVD_TOPK_MAX_ITER):
    r = min(W.shape)
    if k == r or r <= SPECTRAL_DIRECT_MAX:
        f = svd_full(W)
        return SvdFactors(f.U[:, :k], f.sigma[:k], f.V[:, :k])
    try:
        return svd_topk(W, k, tol, max_iter)
    except PowerIterationStalled as exc:
        # stalls only on near-degenerate gaps, where the best block is
        # optimal to within the unresolved gap
        return exc.best


def gauge(region: FeasibleRegion, x) -> float:
    """Norm whose ``tau``-ball is the region (membership: ``gauge <= tau``)."""
    x = _check_shape(region, x)
    flat = x.ravel()
    kind = region.kind
    if kind is Kind.L2_BALL:
        return float(np.linalg.norm(flat))
    if kind is Kind.K_SPARSE_POLYTOPE:
        if flat.size == 0:
            return 0.0
        return float(max(np.max(np.abs(flat)), np.sum(np.abs(flat)) / region.k))
    if kind is Kind.K_SUPPORT:
        return ksupport_norm(flat, region.k)
    if kind is Kind.GROUP_K_SUPPORT:
        return ksupport_norm(group_norms(flat, labels=region.labels), region.k)
    if kind is Kind.SPECTRAL_K_SUPPORT:
        return ksupport_norm(svd_full(flat.reshape(region.matrix_shape)).sigma, region.k)
    raise AssertionError(kind)


def radius_from_diameter(kind, D: float, k: int | None = None) -> float:
    """Radius ``tau`` such that the region's L2 diameter equals ``D``."""
    kind = Kind(kind)
    if not D > 0:
        raise ValueError("diameter must be positive")
    if kind is Kind.K_SPARSE_POLYTOPE:
        return D / (2.0 * math.sqrt(k))
    # antipodal atoms of norm tau realize the diameter
    return D / 2.0


def ensure_feasible(region: FeasibleRegion, theta) -> np.ndarray:
    """Radially rescale ``theta`` into the region if it lies outside."""
    theta = _check_shape(region, theta)
    gval = gauge(region, theta)
    if gval <= region.tau:
        return theta
    out = theta * (region.tau / gval)
    # rounding can leave the rescaled point a hair outside
    while gauge(region, out) > region.tau * (1.0 + 1e-12):
        out = out * (1.0 - 1e-13)
    return out


# --- radius estimation -----------------------------------------------------

def fan_in(shape) -> int:
    shape = tuple(shape)
    if len(shape) <= 1:
        return max(1, shape[0] if shape else 1)
    return int(np.prod(shape[1:]))


def init_fan_in_gaussian(shape, gen: np.random.Generator) -> np.ndarray:
    return gen.standard_normal(shape) * math.sqrt(2.0 / fan_in(shape))


def init_ones(shape, gen=None) -> np.ndarray:
    return np.ones(shape)


def init_zeros(shape, gen=None) -> np.ndarray:
    return np.zeros(shape)


INIT_SCHEMES: dict[str, Callable] = {
    "fan_in_gaussian": init_fan_in_gaussian,
    "ones": init_ones,
    "zeros": init_zeros,
}


def estimate_init_norm(shape, init_scheme, samples: int, rng: RngStream) -> float:
    """Mean L2 norm over ``samples`` fresh draws of an initializer."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    init = INIT_SCHEMES[init_scheme] if isinstance(init_scheme, str) else init_scheme
    gen = rng.generator()
    return float(np.mean([np.linalg.norm(init(tuple(shape), gen)) for _ in range(samples)]))


@dataclass(frozen=True)
class RadiusSpec:
    w: float
    init_norm: float
    diameter: float
    tau: float

    @classmethod
    def build(cls, kind, w: float, init_norm: float, k: int | None = None) -> "RadiusSpec":
        if not w > 0 or not init_norm > 0:
            raise ValueError("w and init_norm must be positive")
        D = 2.0 * w * init_norm
        return cls(w, init_norm, D, radius_from_diameter(kind, D, k))


def resolve_k(fraction: float, dimension: int) -> int:
    """Integer budget from a fractional k, rounding half up, at least 1."""
    return max(1, min(dimension, int(math.floor(fraction * dimension + 0.5))))


def k_dimension(kind, shape) -> int:
    """The count a fractional k refers to for a region kind and tensor shape."""
    kind = Kind(kind)
    shape = tuple(shape)
    if kind is Kind.GROUP_K_SUPPORT:
        return shape[0]
    if kind is Kind.SPECTRAL_K_SUPPORT:
        return min(shape[0], int(np.prod(shape[1:])))
    return int(np.prod(shape))
