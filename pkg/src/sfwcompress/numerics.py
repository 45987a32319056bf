"""Dense numerical building blocks: top-k selection, SVDs, group norms, RNG.

Tensors are plain ``numpy.float64`` arrays. ``as_tensor`` is the single
gate that rejects non-finite data; everything downstream assumes finite
input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import (
    BudgetExceedsDimension,
    InvalidPartition,
    NonFiniteInput,
    PowerIterationStalled,
)

EPS = np.finfo(np.float64).eps
PURPOSES = ("init", "shuffle", "data", "noise")

# Defaults for the truncated SVD; surfaced in the experiment config.
SVD_TOPK_TOL = 1e-8
SVD_TOPK_MAX_ITER = 500
SVD_TOPK_OVERSAMPLE = 5
JACOBI_MAX_SWEEPS = 60


def as_tensor(x, *, copy=False) -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf."""
    arr = np.array(x, dtype=np.float64, copy=copy) if copy else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by ``(seed, purpose, *extra)``.

    Backed by Philox, a counter-based generator whose output depends only
    on its key, so identical keys give identical sequences on every platform.
    """

    seed: int
    purpose: str
    extra: tuple = field(default=())

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown RNG purpose {self.purpose!r}; expected one of {PURPOSES}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def child(self, *extra) -> "RngStream":
        return RngStream(self.seed, self.purpose, self.extra + tuple(int(e) for e in extra))

    def generator(self) -> np.random.Generator:
        entropy = [int(self.seed), PURPOSES.index(self.purpose), *self.extra]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class SvdFactors:
    """``A ~= U @ diag(sigma) @ V.T`` with ``sigma`` non-increasing."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self, rank=None) -> np.ndarray:
        t = len(self.sigma) if rank is None else rank
        return (self.U[:, :t] * self.sigma[:t]) @ self.V[:, :t].T


def topk_indices(x, k: int) -> np.ndarray:
    """Indices of the ``k`` largest ``|x|``; ties go to the lower index.

    The result is sorted ascending.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if k > x.size:
        raise BudgetExceedsDimension(f"k={k} exceeds dimension {x.size}")
    if k < 0:
        raise ValueError("k must be non-negative")
    # stable sort on -|x| keeps lower indices first among equal magnitudes
    order = np.argsort(-np.abs(x), kind="stable")
    return np.sort(order[:k])


def _complete_basis(Q: np.ndarray, cols: Sequence[int], against=None) -> None:
    """Overwrite ``Q[:, cols]`` with unit vectors orthogonal to the rest.

    Candidates are the standard basis vectors in index order, so the
    completion is deterministic.
    """
    n = Q.shape[0]
    cols = list(cols)
    keep = [j for j in range(Q.shape[1]) if j not in set(cols)]
    basis = Q[:, keep]
    if against is not None and against.size:
        basis = np.hstack([against, basis])
    cand = 0
    for j in cols:
        while True:
            if cand >= n:
                raise ArithmeticError("cannot complete orthonormal basis")
            e = np.zeros(n)
            e[cand] = 1.0
            cand += 1
            for _ in range(2):
                if basis.size:
                    e -= basis @ (basis.T @ e)
            nrm = np.linalg.norm(e)
            if nrm > 0.5:
                break
        Q[:, j] = e / nrm
        basis = np.hstack([basis, Q[:, j : j + 1]])


def orthonormalize(X: np.ndarray, against: np.ndarray | None = None) -> np.ndarray:
    """Gram-Schmidt with one re-orthogonalization pass per column.

    Columns that collapse (linearly dependent input) are replaced by a
    deterministic completion, so the output always has orthonormal columns.
    ``against`` holds extra orthonormal columns the output must avoid.
    """
    Q = np.array(X, dtype=np.float64, copy=True)
    n, k = Q.shape
    collapsed = []
    for j in range(k):
        x = Q[:, j]
        ref = np.linalg.norm(x)
        for _ in range(2):
            if against is not None and against.size:
                x -= against @ (against.T @ x)
            if j:
                x -= Q[:, :j] @ (Q[:, :j].T @ x)
        nrm = np.linalg.norm(x)
        if ref == 0.0 or nrm <= 1e-10 * ref:
            collapsed.append(j)
            x[:] = 0.0
        else:
            x /= nrm
    if collapsed:
        _complete_basis(Q, collapsed, against)
    return Q


def svd_full(A, *, max_sweeps: int = JACOBI_MAX_SWEEPS) -> SvdFactors:
    """Economy SVD by one-sided Jacobi rotations.

    Returns ``r = min(n, m)`` triples. Columns of ``U`` belonging to exactly
    zero singular values are completed to an orthonormal set.
    """
    A = as_tensor(A)
    if A.ndim != 2:
        raise ValueError("svd_full expects a matrix")
    n, m = A.shape
    transposed = n < m
    B = A.T if transposed else A
    p, q = B.shape
    at = np.ascontiguousarray(B.T, dtype=np.float64).copy()
    # power-of-two scaling is exact and keeps squared norms clear of underflow
    peak = float(np.max(np.abs(at))) if at.size else 0.0
    shift = math.frexp(peak)[1] if peak > 0 else 0
    at = np.ldexp(at, -shift)
    vt = np.eye(q)
    tol = max(q, 2) * EPS
    # columns this small relative to the whole matrix are numerically zero
    zero = max(q, 2) * EPS * float(np.linalg.norm(at))
    if kernels.jacobi_sweeps(at, vt, tol, max_sweeps, zero * zero) < 0:
        raise ArithmeticError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    sigma = np.sqrt(np.einsum("ij,ij->i", at, at))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    at = at[order]
    V = np.ascontiguousarray(vt[order].T)
    U = np.zeros((p, q))
    live = sigma > zero
    U[:, live] = (at[live] / sigma[live, None]).T
    if not live.all():
        sigma[~live] = 0.0
        _complete_basis(U, np.flatnonzero(~live))
    sigma = np.ldexp(sigma, shift)
    if transposed:
        U, V = V, U
    return SvdFactors(U, sigma, V)


def svd_topk(
    A,
    k: int,
    tol: float = SVD_TOPK_TOL,
    max_iter: int = SVD_TOPK_MAX_ITER,
    rng: RngStream | None = None,
) -> SvdFactors:
    """Leading ``k`` singular triples by block power iteration.

    The block carries ``SVD_TOPK_OVERSAMPLE`` extra columns so the k-th
    triple converges at rate ``sigma_{b+1} / sigma_k`` rather than
    ``sigma_{k+1} / sigma_k``. Each iteration multiplies the active block by
    ``A`` and ``A.T`` with re-orthonormalization, then applies a
    Rayleigh-Ritz rotation. Leading
    triples whose residual ``||A v - s u||^2 + ||A.T u - s v||^2`` drops
    below ``(tol * s_1)^2`` are locked and deflated out of ``A``.
    """
    A = as_tensor(A)
    n, m = A.shape
    r = min(n, m)
    if not 1 <= k <= r:
        raise BudgetExceedsDimension(f"k={k} outside [1, {r}]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not np.any(A):
        return SvdFactors(np.eye(n)[:, :k], np.zeros(k), np.eye(m)[:, :k])

    gen = (rng or RngStream(0, "init")).generator()
    Vb = orthonormalize(gen.standard_normal((m, min(r, k + SVD_TOPK_OVERSAMPLE))))
    U_lock = np.zeros((n, 0))
    V_lock = np.zeros((m, 0))
    s_lock = np.zeros(0)

    def deflated(x):
        return A @ x - U_lock @ (s_lock[:, None] * (V_lock.T @ x))

    def deflated_t(y):
        return A.T @ y - V_lock @ (s_lock[:, None] * (U_lock.T @ y))

    worst = np.inf
    for _ in range(max_iter):
        Ub = orthonormalize(deflated(Vb), against=U_lock)
        Vb = orthonormalize(deflated_t(Ub), against=V_lock)
        small = svd_full(Ub.T @ deflated(Vb))
        Ub = Ub @ small.U
        Vb = Vb @ small.V
        s = small.sigma
        res = np.sqrt(
            np.sum((deflated(Vb) - Ub * s) ** 2, axis=0)
            + np.sum((deflated_t(Ub) - Vb * s) ** 2, axis=0)
        )
        scale = s_lock[0] if s_lock.size else s[0]
        limit = tol * scale
        done = 0
        while done < s.size and res[done] <= limit:
            done += 1
        worst = float(res.max()) if res.size else 0.0
        if done:
            U_lock = np.hstack([U_lock, Ub[:, :done]])
            V_lock = np.hstack([V_lock, Vb[:, :done]])
            s_lock = np.concatenate([s_lock, s[:done]])
            Ub, Vb, s = Ub[:, done:], Vb[:, done:], s[done:]
        if s_lock.size >= k:
            return _sorted_factors(U_lock, s_lock, V_lock, k)
    best = _sorted_factors(np.hstack([U_lock, Ub]), np.concatenate([s_lock, s]), np.hstack([V_lock, Vb]), k)
    raise PowerIterationStalled(
        f"svd_topk: {k - s_lock.size} of {k} triples unconverged after {max_iter} iterations",
        best=best,
        residual=worst,
    )


def _sorted_factors(U, s, V, k) -> SvdFactors:
    order = np.argsort(-s, kind="stable")[:k]
    return SvdFactors(U[:, order], s[order], V[:, order])


def partition_labels(groups, n: int) -> np.ndarray:
    """Validate a disjoint covering partition of ``range(n)``.

    Returns a label vector: ``labels[i]`` is the group index owning entry i.
    """
    labels = np.full(n, -1, dtype=np.int64)
    for g, idx in enumerate(groups):
        idx = np.asarray(idx, dtype=np.int64).ravel()
        if idx.size == 0:
            raise InvalidPartition(f"group {g} is empty")
        if idx.min() < 0 or idx.max() >= n:
            raise InvalidPartition(f"group {g} indexes outside [0, {n})")
        if np.any(labels[idx] != -1) or np.unique(idx).size != idx.size:
            raise InvalidPartition(f"group {g} overlaps another group")
        labels[idx] = g
    if np.any(labels < 0):
        raise InvalidPartition("groups do not cover every index")
    return labels


def contiguous_groups(n_groups: int, size: int) -> list[np.ndarray]:
    """Partition ``range(n_groups * size)`` into consecutive blocks (filters)."""
    return [np.arange(g * size, (g + 1) * size) for g in range(n_groups)]


def group_norms(x, groups=None, *, labels=None) -> np.ndarray:
    """Per-group L2 norms. Pass either ``groups`` or precomputed ``labels``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if labels is None:
        labels = partition_labels(groups, x.size)
    elif labels.shape != x.shape:
        raise InvalidPartition("label vector does not match x")
    return np.sqrt(np.bincount(labels, weights=x * x, minlength=int(labels.max()) + 1))


def ksupport_norm(x, k: int) -> float:
    """k-support norm via the sorted-magnitude closed form.

    Squared norm is the sum of squares of the ``k - r - 1`` largest
    magnitudes plus the squared sum of the rest divided by ``r + 1``, for the
    unique ``r`` whose tail mean lies between the neighbouring magnitudes.
    """
    z = np.sort(np.abs(np.asarray(x, dtype=np.float64).ravel()))[::-1]
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(kernels.ksupport_norm_sorted(np.ascontiguousarray(z), int(k)))
