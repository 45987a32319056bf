"""Experiment orchestration: build, train, log, snapshot, compress, select."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import compress as cmp
from .config import validate
from .errors import NonFiniteLoss
from .models import Dataset, Dense, Model, load_idx, make_blobs, make_cnn, make_mlp, make_two_moons
from .numerics import RngStream
from .optim import SFW, SGD, ConvergenceExperimentSpec, OptimizerState, theorem_schedule
from .regions import FeasibleRegion, Kind, RadiusSpec, ensure_feasible, estimate_init_norm, k_dimension, resolve_k

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "train_acc", "test_acc", "grad_norm_mean", "eff_lr_mean", "wall_s"]
TRACE_HEADER = ["step", "group", "lr", "grad_norm", "dir_norm", "eff_lr", "skipped"]
SNAPSHOT_FORMAT = "sfwcompress-snapshot-1"

# initializer each parameter role is drawn from when estimating E||theta||
ROLE_INIT = {"weight": "fan_in_gaussian", "bias": "zeros", "norm": None}


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# --- construction ----------------------------------------------------------

def build_datasets(cfg) -> tuple:
    ds = cfg["dataset"]
    seed = ds["data_seed"]
    if ds["kind"] == "two_moons":
        return make_two_moons(seed, ds["n_train"], ds["noise"], n_test=ds["n_test"])
    if ds["kind"] == "blobs":
        shape = tuple(ds["image_shape"]) if "image_shape" in ds else None
        return make_blobs(seed, ds["n_train"], ds["classes"], dim=ds["dim"], std=ds["std"],
                          n_test=ds["n_test"], shape=shape)
    limit = ds.get("limit")
    train = load_idx(ds["images"], ds.get("labels"), limit=limit, split="train")
    if "test_images" in ds:
        test = load_idx(ds["test_images"], ds.get("test_labels"), limit=limit, split="test")
    else:
        # hold out the tail of the training file
        n_test = min(ds.get("n_test", len(train) // 5), len(train) - 1)
        cut = len(train) - n_test
        test = Dataset(train.inputs[cut:], train.labels[cut:], "test")
        train = Dataset(train.inputs[:cut], train.labels[:cut], "train")
    return train, test


def build_model(cfg, train: Dataset) -> Model:
    m = cfg["model"]
    n_classes = max(train.n_classes, cfg["dataset"].get("classes", 2))
    if m["kind"] == "mlp":
        n_in = int(np.prod(train.inputs.shape[1:]))
        return make_mlp(n_in, m["hidden"], n_classes, m["activation"], m["batchnorm"])
    if train.inputs.ndim != 4:
        raise ValueError("cnn models need (N, c, h, w) inputs")
    return make_cnn(train.inputs.shape[1], m["channels"], n_classes, m["kernel"], m["activation"], m["batchnorm"])


def _flatten_inputs(model: Model, x):
    # MLPs consume flattened images
    if isinstance(model.layers[0], Dense) and x.ndim > 2:
        return x.reshape(len(x), -1)
    return x


def init_norm(shape, role, samples, rng: RngStream) -> float:
    """Estimated E||theta||_2 under the default initializer for ``role``.

    Parameters initialized to a constant zero have no scale of their own;
    they fall back to ``sqrt(numel)`` (unit scale per entry).
    """
    scheme = ROLE_INIT.get(role)
    if scheme is None:
        # normalization parameters: ones for gamma, zeros for beta; use unit scale
        return math.sqrt(int(np.prod(shape)))
    est = estimate_init_norm(shape, scheme, samples, rng)
    return est if est > 0 else math.sqrt(int(np.prod(shape)))


def build_regions(model: Model, cfg, seed: int) -> dict:
    """One feasible region per constrained parameter tensor."""
    rc = cfg["region"]
    info = model.param_info()
    num = cfg["numerics"]
    regions = {}
    for idx, (name, arr) in enumerate(model.named_params().items()):
        pi = info[name]
        spec = rc["layers"].get(name) or (rc["weights"] if pi.prunable else rc["others"])
        kind = spec["kind"]
        if kind == "none":
            continue
        kind = Kind(kind)
        if kind is Kind.SPECTRAL_K_SUPPORT and arr.ndim < 2:
            kind = Kind.L2_BALL
        if kind is Kind.GROUP_K_SUPPORT and arr.ndim < 2:
            kind = Kind.L2_BALL
        k = None
        if kind is not Kind.L2_BALL:
            dim = k_dimension(kind, arr.shape)
            k = min(spec["k"], dim) if "k" in spec else resolve_k(spec["k_fraction"], dim)
        if "tau" in spec:
            tau = float(spec["tau"])
        else:
            norm = init_norm(arr.shape, pi.role, rc["init_norm_samples"], RngStream(seed, "init", (1_000_000 + idx,)))
            tau = RadiusSpec.build(kind, spec["w"], norm, k).tau
        regions[name] = FeasibleRegion(kind, tau, arr.shape, k, svd_tol=num["svd_topk_tol"],
                                       svd_max_iter=num["svd_topk_max_iter"])
    return regions


def _structured_targets(model: Model) -> list:
    info = model.param_info()
    conv = [n for n, p in info.items() if p.structured]
    return conv or [n for n, p in info.items() if p.prunable]


def build_optimizer(model: Model, cfg, horizon: int, regions: dict):
    o = cfg["optimizer"]
    method = o["method"]
    tm = o.get("theorem_mode")
    if method == "sfw" and tm:
        # the theorem's step rule: eta_t = ||grad_t|| eta, constant eta, no momentum
        eta, _ = theorem_schedule(ConvergenceExperimentSpec(tm["M"], tm["G"], tm["D"], tm["h0"], tm["T"], tm["beta"]))
        return SFW(regions, OptimizerState(lr0=eta, schedule="constant", horizon=horizon,
                                           rescale="gradient-theory", rho=0.0))
    state = OptimizerState(
        lr0=o["lr"], schedule=o["schedule"], horizon=horizon,
        rescale=o["rescale"] if method == "sfw" else "none",
        rho=o["momentum"],
        # constraints replace weight decay in SFW runs
        weight_decay=0.0 if method == "sfw" else o["weight_decay"],
        penalty=o["penalty"],
    )
    if method == "sfw":
        return SFW(regions, state)
    penalty = {"sgd": None, "sgd_group": "group", "sgd_nuclear": "nuclear", "proxgd": "prox"}[method]
    targets = _structured_targets(model) if penalty else []
    params = model.named_params()
    labels = {}
    if penalty == "group":
        for n in targets:
            a = params[n]
            labels[n] = np.repeat(np.arange(a.shape[0]), a.size // a.shape[0])
    return SGD(state, penalty, targets, labels)


def family(cfg) -> str:
    """Training-method label used to group configs during selection."""
    o, r = cfg["optimizer"], cfg["region"]
    if o["method"] == "sfw":
        return f"sfw:{r['weights']['kind']}"
    return o["method"]


# --- training --------------------------------------------------------------

@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    grad_norm_mean: float
    eff_lr_mean: float
    wall_s: float

    def row(self):
        return [_fmt(getattr(self, k)) for k in METRICS_HEADER]


@dataclass
class RunResult:
    config_id: str
    seed: int
    family: str
    metrics: list
    dense_train_acc: float
    dense_test_acc: float
    feasible: bool = True
    records: list = field(default_factory=list)
    model: Model | None = None
    error: str | None = None
    trace: list = field(default_factory=list)


def check_feasible(model: Model, regions: dict, rtol=1e-9) -> bool:
    params = model.named_params()
    return all(r.contains(params[n], rtol) for n, r in regions.items())


def train(model: Model, train_set: Dataset, test_set: Dataset, cfg, seed: int, keep_trace=True):
    """Train in place. Returns ``(metrics, trace, feasible_every_epoch)``."""
    run = cfg["run"]
    regions = build_regions(model, cfg, seed) if cfg["optimizer"]["method"] == "sfw" else {}
    params = model.named_params()
    for name, region in regions.items():
        params[name][...] = ensure_feasible(region, params[name])
    steps = math.ceil(len(train_set) / run["batch_size"])
    opt = build_optimizer(model, cfg, run["epochs"] * steps, regions)
    x_tr, x_te = _flatten_inputs(model, train_set.inputs), _flatten_inputs(model, test_set.inputs)
    flat_train = Dataset(x_tr, train_set.labels, "train")
    metrics, trace, feasible = [], [], True
    step = 0
    for epoch in range(run["epochs"]):
        t0 = time.perf_counter()
        gnorms, eff = [], []
        for xb, yb in flat_train.batches(run["batch_size"], RngStream(seed, "shuffle", (epoch,))):
            loss, _, grads = model.loss_and_grads(xb, yb)
            model.commit_stats()
            gnorms.append(math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
            lr = opt.state.current_lr()
            recs = opt.step(params, grads)
            if recs:
                eff.extend(r.eff_lr for r in recs.values())
                if keep_trace:
                    trace.extend((step, n, r.lr, r.grad_norm, r.dir_norm, r.eff_lr, int(r.skipped)) for n, r in recs.items())
            else:
                eff.append(lr)
                if keep_trace:
                    trace.append((step, "*", lr, gnorms[-1], 0.0, lr, 0))
            step += 1
        tr_loss, tr_acc = model.evaluate(x_tr, train_set.labels, run["eval_batch_size"])
        if not math.isfinite(tr_loss):
            raise NonFiniteLoss(f"train loss {tr_loss} at epoch {epoch}")
        _, te_acc = model.evaluate(x_te, test_set.labels, run["eval_batch_size"])
        if regions and run["check_feasibility"] and not check_feasible(model, regions):
            feasible = False
            log.warning("feasibility violated at epoch %d", epoch)
        wall = time.perf_counter() - t0 if run["record_wall_time"] else 0.0
        metrics.append(MetricsRecord(epoch, tr_loss, tr_acc, te_acc, float(np.mean(gnorms)), float(np.mean(eff)), wall))
    return metrics, trace, feasible


def make_evaluator(model_template: Model, dataset: Dataset, batch_size=512):
    def evaluate(model):
        x = _flatten_inputs(model, dataset.inputs)
        return model.evaluate(x, dataset.labels, batch_size)[1]
    return evaluate


def run_single(cfg, seed: int, out_dir=None, keep_model=False) -> RunResult:
    """Train one (config, seed) job, compress, and write its files."""
    cfg = validate(cfg)
    train_set, test_set = build_datasets(cfg)
    model = build_model(cfg, train_set)
    model.init(RngStream(seed, "init"))
    res = RunResult(cfg["config_id"], seed, family(cfg), [], float("nan"), float("nan"))
    try:
        res.metrics, res.trace, res.feasible = train(model, train_set, test_set, cfg, seed)
    except NonFiniteLoss as exc:
        res.error = str(exc)
        if out_dir:
            _write_job(out_dir, cfg, res, None)
        return res
    ev = cfg["run"]["eval_batch_size"]
    res.dense_train_acc = make_evaluator(model, train_set, ev)(model)
    res.dense_test_acc = make_evaluator(model, test_set, ev)(model)
    comp = cfg.get("compression")
    if comp:
        data = test_set if comp["metric"] == "test_acc" else train_set
        res.records = cmp.sweep(model, comp["method"], comp["targets"], make_evaluator(model, data, ev),
                                config_id=cfg["config_id"], seed=seed)
    if out_dir:
        _write_job(out_dir, cfg, res, model)
    if keep_model:
        res.model = model
    return res


def job_dir(out_dir, config_id, seed):
    return os.path.join(out_dir, str(config_id), f"seed{seed}")


def _write_job(out_dir, cfg, res: RunResult, model):
    d = job_dir(out_dir, res.config_id, res.seed)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    write_metrics_csv(os.path.join(d, "metrics.csv"), res.metrics)
    with open(os.path.join(d, "eff_lr_trace.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in res.trace:
            w.writerow([_fmt(v) for v in row])
    if res.records:
        cmp.write_tradeoff_csv(os.path.join(d, "tradeoff.csv"), res.records)
    if model is not None:
        save_snapshot(os.path.join(d, "snapshot"), model)
    summary = {
        "config_id": res.config_id, "seed": res.seed, "family": res.family,
        "dense_train_acc": res.dense_train_acc, "dense_test_acc": res.dense_test_acc,
        "feasible": res.feasible, "error": res.error,
    }
    with open(os.path.join(d, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow(m.row())


def run_experiment(cfg, seeds=None, out_dir=None, threads=1) -> list:
    """Run every seed of a config (or an explicit seed list)."""
    cfg = validate(cfg)
    seeds = list(seeds) if seeds is not None else cfg["run"]["seeds"]
    out_dir = out_dir if out_dir is not None else cfg["run"]["out_dir"]
    return run_jobs([(cfg, s) for s in seeds], out_dir, threads)


def _job(args):
    cfg, seed, out_dir = args
    res = run_single(cfg, seed, out_dir)
    res.trace = []
    return res


def run_jobs(jobs, out_dir, threads=1) -> list:
    """Independent (config, seed) jobs; each writes only its own directory."""
    payload = [(cfg, seed, out_dir) for cfg, seed in jobs]
    if threads > 1 and len(payload) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_job, payload))
    return [_job(p) for p in payload]


# --- snapshots -------------------------------------------------------------

def _state_tensors(model: Model) -> dict:
    out = dict(model.named_params())
    for i, layer in enumerate(model.layers):
        if hasattr(layer, "running_mean"):
            out[f"{i}.running_mean"] = layer.running_mean
            out[f"{i}.running_var"] = layer.running_var
    return out


def save_snapshot(prefix, model: Model):
    """``prefix.bin``: concatenated little-endian float64 tensors; ``prefix.json``: manifest."""
    entries, offset = [], 0
    with open(prefix + ".bin", "wb") as fh:
        for name, arr in _state_tensors(model).items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += 8 * arr.size
    manifest = {"format": SNAPSHOT_FORMAT, "dtype": "<f8", "layers": model.describe(), "tensors": entries}
    with open(prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_snapshot(prefix) -> Model:
    with open(prefix + ".json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"unrecognized snapshot format {manifest.get('format')!r}")
    model = Model.from_description(manifest["layers"])
    blob = open(prefix + ".bin", "rb").read()
    state = _state_tensors(model)
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=e["offset"]).reshape(e["shape"])
        state[e["name"]][...] = arr
    return model


# --- selection -------------------------------------------------------------

@dataclass
class ConfigSummary:
    config_id: str
    family: str
    mean_post: float
    dense_train_acc: float
    dense_test_acc: float
    n_rows: int


def summarize(records, dense: dict, families: dict) -> list:
    """Per-config means; ``dense[cid]`` is a list of (train_acc, test_acc) per seed."""
    by_cfg = {}
    for r in records:
        by_cfg.setdefault(r.config_id, []).append(r)
    out = []
    for cid in sorted(by_cfg):
        rows = sorted(by_cfg[cid], key=lambda r: (r.seed, r.target))
        accs = sorted(dense.get(cid, []))
        out.append(ConfigSummary(
            cid, families[cid],
            math.fsum(r.metric_post for r in rows) / len(rows),
            math.fsum(a for a, _ in accs) / len(accs) if accs else float("nan"),
            math.fsum(b for _, b in accs) / len(accs) if accs else float("nan"),
            len(rows),
        ))
    return out


def grid_select(summaries, reference: float, threshold=0.05, filter_metric="train_acc") -> dict:
    """Best config per family by mean post-compression metric.

    Configs whose dense accuracy (train by default) falls more than
    ``threshold`` below ``reference`` are excluded from the filtered pick;
    the unfiltered pick is always reported. Ties go to the smaller id.
    """
    out = {}
    fams = sorted({s.family for s in summaries})
    for fam in fams:
        cands = sorted((s for s in summaries if s.family == fam), key=lambda s: s.config_id)
        acc = (lambda s: s.dense_train_acc) if filter_metric == "train_acc" else (lambda s: s.dense_test_acc)
        survivors = [s for s in cands if not acc(s) < reference - threshold - 1e-12]
        best = lambda pool: max(pool, key=lambda s: (s.mean_post, [-ord(c) for c in s.config_id])) if pool else None
        f, u = best(survivors), best(cands)
        out[fam] = {
            "filtered": asdict(f) if f else None,
            "unfiltered": asdict(u),
            "excluded": [s.config_id for s in cands if s not in survivors],
        }
        if f is None:
            log.warning("no %s config survives the dense-accuracy filter", fam)
    return out


def collect_runs(out_dir):
    """Load tradeoff rows, dense accuracies and families from job directories."""
    records, dense, families = [], {}, {}
    for root, _, files in sorted(os.walk(out_dir)):
        if "summary.json" not in files:
            continue
        with open(os.path.join(root, "summary.json"), encoding="utf-8") as fh:
            s = json.load(fh)
        if s.get("error"):
            continue
        families[s["config_id"]] = s["family"]
        dense.setdefault(s["config_id"], []).append((s["dense_train_acc"], s["dense_test_acc"]))
        if "tradeoff.csv" in files:
            records.extend(cmp.read_tradeoff_csv(os.path.join(root, "tradeoff.csv")))
    return records, dense, families


def select_from_runs(out_dir, reference=None, reference_config=None, threshold=0.05, filter_metric="train_acc"):
    records, dense, families = collect_runs(out_dir)
    summaries = summarize(records, dense, families)
    if reference is None:
        if reference_config is None:
            # the best dense run stands in for the reference
            reference = max(s.dense_train_acc if filter_metric == "train_acc" else s.dense_test_acc for s in summaries)
        else:
            ref = next(s for s in summaries if s.config_id == reference_config)
            reference = ref.dense_train_acc if filter_metric == "train_acc" else ref.dense_test_acc
    return {"reference": reference, "threshold": threshold, "filter_metric": filter_metric,
            "selection": grid_select(summaries, reference, threshold, filter_metric)}
