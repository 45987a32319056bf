"""Pruning-robustness studies: grid sweep two training families, select the
on-average-best config of each, and compare them per seed at one target."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

from .config import expand_grid
from .harness import family, grid_select, run_jobs, summarize


@dataclass(frozen=True)
class Study:
    base: dict
    # family label -> grid of dotted keys; single-valued axes pin the method
    grids: dict
    candidate: str
    baseline: str
    target: float
    min_wins: int = 2

    @property
    def seeds(self):
        return tuple(self.base["run"]["seeds"])


# two-layer MLP (2-100-100-2, about 10^4 weights), global magnitude pruning
MLP_MAGNITUDE = Study(
    base={
        "dataset": {"kind": "two_moons", "n_train": 1000, "n_test": 1000, "noise": 0.15},
        "model": {"kind": "mlp", "hidden": [100, 100]},
        "compression": {"method": "magnitude", "targets": [0.5, 0.7, 0.8, 0.9, 0.95, 0.98]},
        "run": {"epochs": 30, "batch_size": 32, "seeds": [0, 1, 2]},
    },
    grids={
        "sfw:KSupport": {
            "optimizer.method": ["sfw"],
            "optimizer.lr": [0.1, 0.3],
            "region.weights.kind": ["KSupport"],
            "region.weights.k_fraction": [0.01, 0.02, 0.05],
            "region.weights.w": [1, 3, 10],
        },
        "sgd": {
            "optimizer.method": ["sgd"],
            "optimizer.lr": [0.05, 0.1, 0.2],
            "optimizer.weight_decay": [1e-3, 5e-3, 1e-2, 2e-2],
        },
    },
    candidate="sfw:KSupport",
    baseline="sgd",
    target=0.9,
)

# tiny CNN (8 and 16 filters) on 8x8 template images, per-layer filter pruning
CNN_FILTER = Study(
    base={
        "dataset": {"kind": "blobs", "n_train": 600, "n_test": 600, "classes": 4, "std": 1.5,
                    "image_shape": [1, 8, 8]},
        "model": {"kind": "cnn", "channels": [8, 16]},
        "compression": {"method": "filter", "targets": [0.25, 0.5, 0.75]},
        "run": {"epochs": 30, "batch_size": 32, "seeds": [0, 1, 2]},
    },
    grids={
        "sfw:GroupKSupport": {
            "optimizer.method": ["sfw"],
            "optimizer.lr": [0.1, 0.3],
            "region.weights.kind": ["GroupKSupport"],
            "region.weights.k_fraction": [0.25, 0.5],
            "region.weights.w": [3, 10],
        },
        "sgd_group": {
            "optimizer.method": ["sgd_group"],
            "optimizer.lr": [0.05, 0.1, 0.2],
            "optimizer.penalty": [1e-4, 1e-3, 1e-2],
        },
    },
    candidate="sfw:GroupKSupport",
    baseline="sgd_group",
    target=0.5,
)

STUDIES = {"mlp-magnitude": MLP_MAGNITUDE, "cnn-filter": CNN_FILTER}


def study_configs(study: Study) -> list:
    out = []
    for label in sorted(study.grids):
        for cfg in expand_grid(study.base, study.grids[label]):
            if family(cfg) != label:
                raise ValueError(f"grid {label} produced family {family(cfg)}")
            out.append(cfg)
    return out


@dataclass
class StudyResult:
    target: float
    reference: float
    candidate: dict
    baseline: dict
    # per seed: (candidate metric_post, baseline metric_post) at the target
    per_seed: dict = field(default_factory=dict)
    wins: int = 0
    dense_ok: bool = False
    passed: bool = False
    unfiltered_wins: int = 0
    selection: dict = field(default_factory=dict, repr=False)


def _at(results, cid, target):
    out = {}
    for r in results:
        if r.config_id != cid:
            continue
        hit = [x.metric_post for x in r.records if math.isclose(x.target, target)]
        out[r.seed] = hit[0] if hit else float("nan")
    return out


def run_study(study: Study, out_dir=None, threads=1, threshold=0.05) -> StudyResult:
    """Sweep both grids over all seeds, select per family, compare per seed.

    The dense reference is the best mean dense train accuracy of any config
    in the sweep; selection discards configs more than ``threshold`` below it.
    """
    configs = study_configs(study)
    jobs = [(copy.deepcopy(c), s) for c in configs for s in study.seeds]
    results = run_jobs(jobs, out_dir, threads)
    ok = [r for r in results if r.error is None]
    records = [x for r in ok for x in r.records]
    dense, fams = {}, {}
    for r in ok:
        dense.setdefault(r.config_id, []).append((r.dense_train_acc, r.dense_test_acc))
        fams[r.config_id] = r.family
    summaries = summarize(records, dense, fams)
    reference = max(s.dense_train_acc for s in summaries)
    sel = grid_select(summaries, reference, threshold)
    cand, base = sel[study.candidate]["filtered"], sel[study.baseline]["filtered"]
    res = StudyResult(study.target, reference, cand, base, selection=sel)
    if cand is None or base is None:
        return res
    a, b = _at(ok, cand["config_id"], study.target), _at(ok, base["config_id"], study.target)
    res.per_seed = {s: (a.get(s, float("nan")), b.get(s, float("nan"))) for s in study.seeds}
    res.wins = sum(1 for x, y in res.per_seed.values() if x >= y)
    ua = _at(ok, sel[study.candidate]["unfiltered"]["config_id"], study.target)
    ub = _at(ok, sel[study.baseline]["unfiltered"]["config_id"], study.target)
    res.unfiltered_wins = sum(1 for s in study.seeds if ua.get(s, -1) >= ub.get(s, math.inf))
    res.dense_ok = all(reference - d["dense_train_acc"] <= threshold + 1e-12 for d in (cand, base))
    res.passed = res.wins >= study.min_wins and res.dense_ok
    return res
