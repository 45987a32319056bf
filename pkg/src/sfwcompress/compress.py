"""One-shot compression: global magnitude pruning, L1 filter pruning, low-rank factorization."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .errors import RankOutOfRange
from .models import Conv2d, Dense, Model
from .numerics import svd_full

METHODS = ("magnitude", "filter", "lowrank")
TRADEOFF_HEADER = ["method", "config_id", "seed", "target", "achieved", "metric_pre", "metric_post"]


def budget(fraction: float, n: int) -> int:
    """``floor(fraction * n)``, immune to products like 0.29 * 100 = 28.999..."""
    return int(math.floor(round(fraction * n, 9)))


@dataclass
class SparsityReport:
    method: str
    target: float
    prunable_total: int
    zeros: int
    per_layer: dict = field(default_factory=dict)
    params_before: int = 0
    params_after: int = 0
    # method-specific headline number: sparsity, filter fraction or parameter reduction
    achieved: float = 0.0
    # pruned filter indices or chosen ranks, keyed by parameter / layer
    detail: dict = field(default_factory=dict)

    @property
    def achieved_sparsity(self) -> float:
        return self.zeros / self.prunable_total if self.prunable_total else 0.0


def _check_fraction(x, upper_open=False):
    if not 0.0 <= x <= 1.0 or (upper_open and x >= 1.0):
        raise ValueError(f"fraction {x} outside [0, 1{')' if upper_open else ']'}")


def _prunable(model: Model) -> list:
    info = model.param_info()
    return [(name, arr) for name, arr in model.named_params().items() if info[name].prunable]


def _count_zeros(model, method, target, **extra) -> SparsityReport:
    per_layer, total, zeros = {}, 0, 0
    for name, arr in _prunable(model):
        z = int(np.count_nonzero(arr == 0))
        per_layer[name] = (z, arr.size)
        total += arr.size
        zeros += z
    rep = SparsityReport(method, target, total, zeros, per_layer, **extra)
    return rep


def magnitude_prune_global(model: Model, sparsity: float):
    """Zero the ``floor(s * P)`` smallest-magnitude prunable weights, pooled across layers.

    Ties are broken by (layer, flat index). Returns a pruned copy and its report.
    """
    _check_fraction(sparsity)
    out = model.copy()
    params = _prunable(out)
    mags = np.concatenate([np.abs(a).ravel() for _, a in params]) if params else np.zeros(0)
    count = budget(sparsity, mags.size)
    # stable sort on the concatenation orders ties by (layer, flat index)
    chosen = np.argsort(mags, kind="stable")[:count]
    mask = np.zeros(mags.size, dtype=bool)
    mask[chosen] = True
    start = 0
    for _, arr in params:
        flat = arr.reshape(-1)
        flat[mask[start : start + flat.size]] = 0.0
        start += flat.size
    n = out.n_params()
    rep = _count_zeros(out, "magnitude", sparsity, params_before=n, params_after=n)
    rep.achieved = rep.achieved_sparsity
    return out, rep


def filter_prune_local(model: Model, fraction: float):
    """In every conv layer zero the ``floor(f * n)`` filters of smallest L1 norm.

    Ties go to the lowest filter index; biases are left alone and tensor
    shapes are kept, so removal is accounted for rather than physical.
    """
    _check_fraction(fraction, upper_open=True)
    out = model.copy()
    removed, filters, structural = 0, 0, 0
    per_layer_filters = {}
    for i, layer in enumerate(out.layers):
        if not isinstance(layer, Conv2d):
            continue
        W = layer.params["W"]
        n = W.shape[0]
        drop = budget(fraction, n)
        norms = np.abs(W).reshape(n, -1).sum(axis=1)
        idx = np.sort(np.argsort(norms, kind="stable")[:drop])
        W[idx] = 0.0
        per_layer_filters[f"{i}.W"] = [int(j) for j in idx]
        removed += drop
        filters += n
        structural += drop * W[0].size
    before = out.n_params()
    rep = _count_zeros(out, "filter", fraction, params_before=before, params_after=before - structural)
    rep.achieved = removed / filters if filters else 0.0
    rep.detail = per_layer_filters
    return out, rep


def _matrix_dims(layer):
    if isinstance(layer, Conv2d):
        return layer.n_out, layer.c_in * layer.d * layer.d
    if isinstance(layer, Dense):
        return layer.n_out, layer.n_in
    raise TypeError(f"cannot factorize {type(layer).__name__}")


def rank_for_reduction(n: int, m: int, reduction: float) -> int:
    """Largest ``t`` with ``t (n + m) <= (1 - s) n m``, clamped to ``[1, min(n, m)]``."""
    t = budget((1.0 - reduction) * n * m / (n + m), 1)
    return min(max(t, 1), min(n, m))


def select_ranks(model: Model, reduction: float) -> dict:
    """Per conv layer rank ``t`` for a parameter-reduction fraction ``s``."""
    _check_fraction(reduction, upper_open=True)
    ranks = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            ranks[i] = rank_for_reduction(*_matrix_dims(layer), reduction)
    return ranks


def decompose_layer(layer, t: int):
    """Split a conv or dense layer into two via a rank-``t`` SVD.

    The first factor carries ``Sigma_t V_t^T`` with no bias, the second
    ``U_t`` and the original bias.
    """
    n, m = _matrix_dims(layer)
    if not 1 <= t <= min(n, m):
        raise RankOutOfRange(f"rank {t} outside [1, {min(n, m)}]")
    W = layer.params["W"].reshape(n, m)
    f = svd_full(W)
    first = f.sigma[:t, None] * f.V[:, :t].T
    second = f.U[:, :t]
    if isinstance(layer, Conv2d):
        A = Conv2d(layer.c_in, t, layer.d)
        A.params["W"][...] = first.reshape(t, layer.c_in, layer.d, layer.d)
        B = Conv2d(t, n, 1)
        B.params["W"][...] = second.reshape(n, t, 1, 1)
    else:
        A = Dense(m, t)
        A.params["W"][...] = first
        B = Dense(t, n)
        B.params["W"][...] = second
    B.params["b"][...] = layer.params["b"]
    return A, B


def lowrank_compress(model: Model, reduction: float):
    """Factorize every conv layer at the rank chosen by ``select_ranks``.

    A zero target asks for no reduction, which the unfactorized network
    already meets, so layers are left intact rather than cut to the
    count-formula rank.
    """
    ranks = select_ranks(model, reduction) if reduction > 0 else {}
    before = after = 0
    layers = []
    for i, layer in enumerate(model.layers):
        if i in ranks:
            n, m = _matrix_dims(layer)
            t = ranks[i]
            before += n * m
            after += t * (n + m)
            layers.extend(decompose_layer(layer, t))
        else:
            layers.append(_clone(layer))
    out = Model(layers)
    total = model.n_params()
    rep = _count_zeros(out, "lowrank", reduction, params_before=total, params_after=total - before + after)
    rep.achieved = 1.0 - after / before if before else 0.0
    rep.detail = ranks
    return out, rep


def _clone(layer):
    return Model([layer]).copy().layers[0]


def compress(model: Model, method: str, target: float):
    if method == "magnitude":
        return magnitude_prune_global(model, target)
    if method == "filter":
        return filter_prune_local(model, target)
    if method == "lowrank":
        return lowrank_compress(model, target)
    raise ValueError(f"unknown compression method {method!r}")


# --- sweeps ----------------------------------------------------------------

@dataclass(frozen=True)
class TradeoffRecord:
    method: str
    config_id: str
    seed: int
    target: float
    achieved: float
    metric_pre: float
    metric_post: float


def sweep(model: Model, method: str, targets: Sequence[float], evaluator: Callable[[Model], float],
          config_id="", seed=0) -> list:
    """Compress fresh copies at each target; the input model is never mutated."""
    targets = [float(t) for t in targets]
    if targets != sorted(targets):
        raise ValueError("targets must be sorted ascending")
    pre = float(evaluator(model))
    records = []
    for target in targets:
        compressed, rep = compress(model, method, target)
        records.append(TradeoffRecord(method, str(config_id), int(seed), target, rep.achieved, pre, float(evaluator(compressed))))
    return records


def write_tradeoff_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRADEOFF_HEADER)
        for r in records:
            w.writerow([getattr(r, k) if not isinstance(getattr(r, k), float) else repr(getattr(r, k)) for k in TRADEOFF_HEADER])


def read_tradeoff_csv(path) -> list:
    casts = {f.name: f.type for f in fields(TradeoffRecord)}
    conv = {"str": str, "int": int, "float": float}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(TradeoffRecord(**{k: conv[casts[k]](row[k]) for k in TRADEOFF_HEADER}))
    return out


def record_dict(r: TradeoffRecord) -> dict:
    return asdict(r)
