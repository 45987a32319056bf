"""Experiment configuration: JSON schema validation plus defaults."""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
from importlib import resources

import jsonschema

from .errors import ConfigError

DEFAULTS = {
    "dataset": {"kind": "two_moons", "n_train": 1000, "n_test": 500, "noise": 0.1, "classes": 2,
                "dim": 2, "std": 1.0, "data_seed": 0},
    "model": {"kind": "mlp", "hidden": [100, 100], "channels": [8, 16], "kernel": 3,
              "activation": "relu", "batchnorm": False},
    # desk-scale recipe: linear decay from 0.1, momentum 0.9
    "optimizer": {"lr": 0.1, "schedule": "linear-decay", "rescale": "gradient", "momentum": 0.9,
                  "weight_decay": 0.0, "penalty": 0.0},
    "region": {"weights": {"kind": "KSupport", "k_fraction": 0.1, "w": 10.0},
               "others": {"kind": "L2Ball", "w": 10.0}, "layers": {}, "init_norm_samples": 10},
    "run": {"epochs": 30, "batch_size": 32, "out_dir": "runs", "eval_batch_size": 512,
            "record_wall_time": False, "check_feasibility": True},
    "numerics": {"svd_topk_tol": 1e-8, "svd_topk_max_iter": 500},
}


def schema() -> dict:
    text = resources.files("sfwcompress").joinpath("config_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "layers":
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def config_id(cfg: dict) -> str:
    """Stable short hash of the canonical JSON form (ignores run seeds and output dir)."""
    core = {k: v for k, v in cfg.items() if k not in ("config_id", "run")}
    core["run"] = {k: v for k, v in cfg.get("run", {}).items() if k not in ("seeds", "out_dir")}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def _check_region(where, spec):
    kind = spec["kind"]
    if kind not in ("L2Ball", "none") and "k" not in spec and "k_fraction" not in spec:
        raise ConfigError(f"{where}: {kind} needs k or k_fraction")
    if "k" in spec and "k_fraction" in spec:
        raise ConfigError(f"{where}: give k or k_fraction, not both")
    if kind != "none" and ("w" in spec) == ("tau" in spec):
        raise ConfigError(f"{where}: give exactly one of w or tau")


def validate(raw: dict) -> dict:
    """Validate a raw config against the schema and return it with defaults filled in."""
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    # explicit region blocks replace the defaults wholesale
    for key in ("weights", "others"):
        if key in raw.get("region", {}):
            cfg["region"][key] = copy.deepcopy(raw["region"][key])
    if cfg["optimizer"]["method"] == "sfw":
        _check_region("region.weights", cfg["region"]["weights"])
        _check_region("region.others", cfg["region"]["others"])
        for name, spec in cfg["region"]["layers"].items():
            _check_region(f"region.layers.{name}", spec)
    tm = cfg["optimizer"].get("theorem_mode")
    if tm:
        if cfg["optimizer"]["method"] != "sfw":
            raise ConfigError("optimizer.theorem_mode applies to sfw only")
        beta_min = 2.0 * tm["h0"] / (tm["M"] * tm["D"] ** 2)
        if tm["beta"] < beta_min * (1.0 - 1e-12):
            raise ConfigError(f"optimizer.theorem_mode.beta={tm['beta']} below 2 h0 / (M D^2) = {beta_min}")
    comp = cfg.get("compression")
    if comp is not None:
        comp.setdefault("metric", "test_acc")
        if comp["targets"] != sorted(comp["targets"]):
            raise ConfigError("compression.targets must be sorted ascending")
        if comp["method"] in ("filter", "lowrank") and max(comp["targets"]) >= 1.0:
            raise ConfigError(f"{comp['method']} targets must be below 1")
    ds = cfg["dataset"]
    if ds["kind"] == "idx" and "images" not in ds:
        raise ConfigError("dataset.images is required for idx datasets")
    if cfg["model"]["kind"] == "cnn" and ds["kind"] == "two_moons":
        raise ConfigError("a cnn needs image-shaped data")
    cfg.setdefault("config_id", config_id(cfg))
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return validate(raw)


def set_path(cfg: dict, dotted: str, value):
    node = cfg
    *head, last = dotted.split(".")
    for key in head:
        node = node.setdefault(key, {})
    node[last] = value


def expand_grid(base: dict, grid: dict) -> list:
    """Cartesian product of ``{"a.b.c": [values]}`` axes applied to ``base``.

    Each expanded config gets an id derived from its content.
    """
    keys = sorted(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cfg = copy.deepcopy(base)
        cfg.pop("config_id", None)
        for k, v in zip(keys, combo):
            set_path(cfg, k, v)
        out.append(validate(cfg))
    return out
