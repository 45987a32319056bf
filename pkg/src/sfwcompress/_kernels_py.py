"""Pure-Python (numpy) versions of the hot kernels.

Same algorithms, same loop order, same stopping rules as ``_kernels_c.pyx``.
Dot products go through numpy here, so results agree with the compiled
backend to rounding, not bit for bit.
"""
import math

import numpy as np

NAME = "python"


def jacobi_sweeps(at, vt, tol, max_sweeps, zero_sq=0.0):
    """One-sided (Hestenes) Jacobi on the rows of ``at``, in place.

    Rows of ``at`` are the columns of the matrix being factored; every
    rotation applied to them is mirrored on the rows of ``vt``. Pairs where
    either row has squared norm ``<= zero_sq`` are skipped: such a row is
    numerically zero and its direction is round-off. Returns the
    number of sweeps used, or ``-1`` if ``max_sweeps`` ran out first.
    """
    r = at.shape[0]
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p in range(r - 1):
            for q in range(p + 1, r):
                ap = at[p]
                aq = at[q]
                alpha = float(np.dot(ap, ap))
                beta = float(np.dot(aq, aq))
                gamma = float(np.dot(ap, aq))
                if gamma == 0.0 or min(alpha, beta) <= zero_sq or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                at[q] = s * ap + c * aq
                at[p] = new_p
                vp = vt[p]
                vq = vt[q]
                new_vp = c * vp - s * vq
                vt[q] = s * vp + c * vq
                vt[p] = new_vp
        if not rotated:
            return sweep
    return -1


def ksupport_norm_sorted(z, k):
    """k-support norm of a vector given its magnitudes sorted descending."""
    d = z.shape[0]
    if d == 0:
        return 0.0
    k = min(k, d)
    # tail[j] = sum(z[j:]), head_sq[j] = sum(z[:j] ** 2)
    tail = np.concatenate([np.cumsum(z[::-1])[::-1], [0.0]])
    head_sq = np.concatenate([[0.0], np.cumsum(z * z)])
    for slack in (0.0, 1e-12 * float(z[0])):
        for r in range(k):
            lo = k - r - 1
            mean = tail[lo] / (r + 1)
            upper = z[lo - 1] if lo >= 1 else math.inf
            if upper + slack >= mean and mean + slack >= z[lo]:
                return math.sqrt(head_sq[lo] + tail[lo] * tail[lo] / (r + 1))
    # unreachable for finite non-negative sorted input
    raise ArithmeticError("k-support norm: no admissible split index")
