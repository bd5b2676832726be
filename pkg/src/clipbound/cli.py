"""Command-line driver: config parsing, orchestration, and output artifacts.

Subcommands:

- toy:     run the three clipping modes on the bimodal mean-estimation task
- train:   calibrate noise, train over a seed list, aggregate metrics
- hpo:     randomized grid search with search-wide privacy charging
- account: stand-alone privacy accounting / noise calibration
- grid:    print the hyperparameter grid without running anything

Every run directory gets a manifest JSON snapshotting the config, seeds and
version so the artifacts can be replayed bit-identically. CSV/JSON layouts
are fixed; the plotting package parses them without configuration.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .clipping import MODE_ADAPTIVE, MODE_CONSTANT, ClippingConfig
from .datasets import (
    Dataset,
    TabularSchema,
    adult_schema,
    balance_by_attribute,
    dutch_schema,
    gen_bimodal,
    gen_skewed_classification,
    load_idx_dataset,
    preprocess_tabular,
    read_csv_rows,
    skew_class,
    split_rows,
)
from .errors import ClipboundError, ConfigError, TrainingDiverged
from .hpo import (
    POLICIES,
    POLICY_GRID,
    GridSpec,
    TnbParams,
    build_grid,
    default_grid,
    default_tnb_for_grid,
    dphpo_report,
    run_random_search,
)
from .models import ModelSpec
from .numkit import Rng
from .privacy import MechanismParams, calibrate_sigma, epsilon_of
from .trainer import (
    COUNT_NOISE_RATIO,
    HistoryRow,
    OptimizerConfig,
    RunResult,
    TrainConfig,
    train,
)

TOY_MODES = ("constant", "unbounded", "bounded")

HISTORY_COLUMNS = HistoryRow.FIELDS
SWEEP_COLUMNS = (
    "trial_index",
    "learning_rate",
    "clip_param",
    "batch_size",
    "seed",
    "objective",
    "macro_acc",
    "worst_acc",
    "per_run_epsilon",
)
MANIFEST_KEYS = (
    "config",
    "seeds",
    "epsilon",
    "delta",
    "sigma_grad",
    "sigma_count",
    "steps",
    "sampling_rate",
    "metrics",
    "non_private_flags",
    "version",
)

CLIP_PARAM_ROLES = ("constant", "initial", "lower_bound")
OBJECTIVE_KEYS = ("macro_acc", "worst_acc", "micro_acc")


# ---------------------------------------------------------------------------
# Config schema and loading
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_POSNUM = {"type": "number", "exclusiveMinimum": 0}
_POSINT = {"type": "integer", "minimum": 1}
_FRACTION = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}

_CLIPPING_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": [MODE_CONSTANT, MODE_ADAPTIVE]},
        "c0": _POSNUM,
        "c_lb": {"type": "number", "minimum": 0},
        "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "tau": _POSNUM,
        "eta_c": _POSNUM,
    },
}

_TOY_MODE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {"learning_rate": _POSNUM, "c0": _POSNUM, "c_lb": {"type": "number", "minimum": 0}},
}

_INLINE_TABULAR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kinds", "target_map"],
    "properties": {
        "kinds": {"type": "object", "additionalProperties": {"type": "string"}},
        "target_map": {"type": "object", "additionalProperties": {"type": "integer"}},
        "collapse": {"type": "object"},
        "collapse_default": {"type": "object", "additionalProperties": {"type": "string"}},
        "missing_tokens": {"type": "array", "items": {"type": "string"}},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "model", "training", "output_dir", "seeds"],
    "properties": {
        "output_dir": {"type": "string"},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["bimodal", "blobs", "idx", "tabular"]},
                # bimodal
                "n": _POSINT,
                "p_major": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "mode_lo": _NUM,
                "mode_hi": _NUM,
                "jitter_std": {"type": "number", "minimum": 0},
                # blobs
                "n_per_class": _POSINT,
                "num_classes": _POSINT,
                "minority_class": {"type": "integer", "minimum": 0},
                "keep_fraction": _FRACTION,
                "cluster_separation": {"type": "number", "minimum": 0},
                "dim": _POSINT,
                "test_n_per_class": {"type": "integer", "minimum": 0},
                # idx
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "skew": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["class_id", "keep_fraction"],
                    "properties": {
                        "class_id": {"type": "integer", "minimum": 0},
                        "keep_fraction": _FRACTION,
                    },
                },
                # tabular
                "path": {"type": "string"},
                "test_path": {"type": "string"},
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "schema": {
                    "anyOf": [{"enum": ["adult", "dutch"]}, _INLINE_TABULAR_SCHEMA]
                },
                "balance_train": {"type": "boolean"},
                "balance_test": {"type": "boolean"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["mean", "logistic", "softmax", "mlp"]},
                "hidden": _POSINT,
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "required": ["learning_rate", "clipping"],
            "properties": {
                "learning_rate": _POSNUM,
                "epochs": _POSINT,
                "steps": _POSINT,
                "sampling_rate": _FRACTION,
                "batch_size": _POSINT,
                "clipping": _CLIPPING_SCHEMA,
                "optimizer": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["sgd", "momentum", "adam"]},
                        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "eps": _POSNUM,
                    },
                },
                "noiseless": {"type": "boolean"},
                "record_norm_quantiles": {"type": "boolean"},
                "modes": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {mode: _TOY_MODE_SCHEMA for mode in TOY_MODES},
                },
            },
        },
        "privacy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "target_epsilon": _POSNUM,
                "sigma_grad": _POSNUM,
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "count_ratio": {"type": "number", "minimum": 0},
            },
        },
        "hpo": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "learning_rate": {"type": "array", "minItems": 1, "items": _POSNUM},
                        "clip_param": {"type": "array", "minItems": 1, "items": _POSNUM},
                        "batch_size": {"type": "array", "minItems": 1, "items": _POSINT},
                    },
                },
                "include_batch_size": {"type": "boolean"},
                "policy": {"enum": list(POLICIES)},
                "tnb": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "eta": {"type": "number", "exclusiveMinimum": -1},
                        "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                },
                "fixed_k": _POSINT,
                "clip_param_role": {"enum": list(CLIP_PARAM_ROLES)},
                "objective": {"enum": list(OBJECTIVE_KEYS)},
            },
        },
    },
}


def validate_config(cfg: dict) -> dict:
    """Schema plus cross-field checks; returns the config unchanged."""
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None

    tb = cfg["training"]
    if ("epochs" in tb) == ("steps" in tb):
        raise ConfigError("training: set exactly one of epochs / steps")
    if ("sampling_rate" in tb) == ("batch_size" in tb):
        raise ConfigError("training: set exactly one of sampling_rate / batch_size")

    pb = cfg.get("privacy", {})
    noiseless = tb.get("noiseless", False)
    has_target = "target_epsilon" in pb
    has_sigma = "sigma_grad" in pb
    if noiseless:
        if has_target or has_sigma:
            raise ConfigError("noiseless runs take neither target_epsilon nor sigma_grad")
    elif has_target == has_sigma:
        raise ConfigError("privacy: set exactly one of target_epsilon / sigma_grad")

    ds = cfg["dataset"]
    required_by_kind = {
        "bimodal": ("n",),
        "blobs": ("n_per_class", "num_classes", "dim"),
        "idx": ("images", "labels"),
        "tabular": ("path", "schema"),
    }
    for key in required_by_kind[ds["kind"]]:
        if key not in ds:
            raise ConfigError(f"dataset kind {ds['kind']!r} requires {key!r}")
    if cfg["model"]["kind"] == "mean" and ds["kind"] != "bimodal":
        raise ConfigError("mean model runs on the bimodal dataset")

    hb = cfg.get("hpo", {})
    if "tnb" in hb and "fixed_k" in hb:
        raise ConfigError("hpo: set at most one of tnb / fixed_k")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return validate_config(cfg)


def resolve_data_path(p: str) -> Path:
    """Relative dataset paths resolve under CLIPBOUND_DATA_DIR when it is set."""
    path = Path(p)
    root = os.environ.get("CLIPBOUND_DATA_DIR")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


# ---------------------------------------------------------------------------
# Building blocks from config
# ---------------------------------------------------------------------------


def build_dataset(block: dict, rng: Rng) -> tuple[Dataset, Dataset | None]:
    """(train split, optional eval split) for one dataset block."""
    kind = block["kind"]
    if kind == "bimodal":
        ds = gen_bimodal(
            block["n"],
            block.get("p_major", 0.6),
            block.get("mode_lo", 0.0),
            block.get("mode_hi", 1.0),
            block.get("jitter_std", 0.05),
            rng.split("train"),
        )
        return ds, None
    if kind == "blobs":
        common = (
            block["num_classes"],
            block.get("minority_class", 0),
            block.get("keep_fraction", 1.0),
            block.get("cluster_separation", 3.0),
            block["dim"],
        )
        ds = gen_skewed_classification(block["n_per_class"], *common, rng.split("train"))
        test_n = block.get("test_n_per_class", 0)
        test = None
        if test_n > 0:
            test = gen_skewed_classification(
                test_n, common[0], common[1], 1.0, common[3], common[4], rng.split("test")
            )
        return ds, test
    if kind == "idx":
        num_classes = block.get("num_classes", 10)
        ds = load_idx_dataset(
            resolve_data_path(block["images"]), resolve_data_path(block["labels"]), num_classes
        )
        if "skew" in block:
            ds = skew_class(
                ds, block["skew"]["class_id"], block["skew"]["keep_fraction"], rng.split("skew")
            )
        test = None
        if "test_images" in block and "test_labels" in block:
            test = load_idx_dataset(
                resolve_data_path(block["test_images"]),
                resolve_data_path(block["test_labels"]),
                num_classes,
            )
        return ds, test
    # tabular
    schema = block["schema"]
    if schema == "adult":
        schema = adult_schema()
    elif schema == "dutch":
        schema = dutch_schema()
    else:
        schema = TabularSchema(
            kinds=dict(schema["kinds"]),
            target_map=dict(schema["target_map"]),
            collapse={c: dict(m) for c, m in schema.get("collapse", {}).items()},
            collapse_default=dict(schema.get("collapse_default", {})),
            missing_tokens=tuple(schema.get("missing_tokens", ("?", ""))),
        )
    rows = read_csv_rows(resolve_data_path(block["path"]))
    if "test_path" in block:
        train_rows, test_rows = rows, read_csv_rows(resolve_data_path(block["test_path"]))
    elif "test_fraction" in block:
        train_rows, test_rows = split_rows(rows, block["test_fraction"], rng.split("split"))
    else:
        train_rows, test_rows = rows, None
    ds = preprocess_tabular(train_rows, schema)
    if block.get("balance_train", False):
        ds = balance_by_attribute(ds, rng.split("balance_train"))
    test = None
    if test_rows is not None:
        test = preprocess_tabular(test_rows, schema, fit_rows=train_rows)
        if block.get("balance_test", False):
            test = balance_by_attribute(test, rng.split("balance_test"))
    return ds, test


def build_model_spec(block: dict, ds: Dataset) -> ModelSpec:
    kind = block["kind"]
    if kind == "mean":
        return ModelSpec("mean")
    if kind == "logistic":
        if ds.num_classes != 2:
            raise ConfigError(f"logistic model needs 2 classes, dataset has {ds.num_classes}")
        return ModelSpec("logistic", input_dim=ds.dim)
    if kind == "softmax":
        return ModelSpec("softmax", input_dim=ds.dim, num_classes=ds.num_classes)
    return ModelSpec(
        "mlp", input_dim=ds.dim, num_classes=ds.num_classes, hidden=block.get("hidden", 64)
    )


def build_clipping(block: dict, **overrides) -> ClippingConfig:
    merged = dict(block)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return ClippingConfig(
        mode=merged.get("mode", MODE_ADAPTIVE),
        c0=merged.get("c0", 1.0),
        c_lb=merged.get("c_lb", 0.0),
        gamma=merged.get("gamma", 0.5),
        tau=merged.get("tau", 2.5),
        eta_c=merged.get("eta_c", 0.2),
    )


def build_optimizer(block: dict) -> OptimizerConfig:
    return OptimizerConfig(
        kind=block.get("kind", "sgd"),
        momentum=block.get("momentum", 0.9),
        beta1=block.get("beta1", 0.9),
        beta2=block.get("beta2", 0.999),
        eps=block.get("eps", 1e-8),
    )


def build_train_config(
    cfg: dict,
    seed: int,
    n: int,
    clipping: ClippingConfig | None = None,
    learning_rate: float | None = None,
    batch_size: int | None = None,
) -> TrainConfig:
    """TrainConfig for one run, calibrating sigma_grad if a target is set."""
    tb = cfg["training"]
    pb = cfg.get("privacy", {})
    clip = clipping if clipping is not None else build_clipping(tb["clipping"])
    lr = learning_rate if learning_rate is not None else tb["learning_rate"]
    noiseless = tb.get("noiseless", False)
    base = dict(
        learning_rate=lr,
        clipping=clip,
        seed=seed,
        epochs=tb.get("epochs"),
        steps=tb.get("steps"),
        sampling_rate=None if batch_size is not None else tb.get("sampling_rate"),
        batch_size=batch_size if batch_size is not None else tb.get("batch_size"),
        delta=pb.get("delta", 1e-5),
        optimizer=build_optimizer(tb.get("optimizer", {})),
        noiseless=noiseless,
        record_norm_quantiles=tb.get("record_norm_quantiles", True),
    )
    if noiseless:
        return TrainConfig(sigma_grad=0.0, **base)
    probe = TrainConfig(sigma_grad=0.0, **{**base, "noiseless": True})
    q = probe.resolve_sampling_rate(n)
    steps = probe.resolve_steps(q)
    count_ratio = pb.get("count_ratio", COUNT_NOISE_RATIO)
    if "sigma_grad" in pb:
        sigma_grad = pb["sigma_grad"]
    else:
        sigma_grad = calibrate_sigma(
            pb["target_epsilon"],
            base["delta"],
            q,
            steps,
            count_ratio=count_ratio if clip.adaptive else 0.0,
        )
    sigma_count = count_ratio * sigma_grad if clip.adaptive else None
    return TrainConfig(sigma_grad=sigma_grad, sigma_count=sigma_count, **base)


def method_name(clip: ClippingConfig) -> str:
    if not clip.adaptive:
        return "constant"
    return "bounded" if clip.c_lb > 0 else "unbounded"


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    """Shortest round-trip decimal form; NaN prints as 'nan'."""
    return repr(float(value))


def write_history_csv(path: Path, history: list[HistoryRow]) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(
            ",".join(
                [
                    str(row.step),
                    _fmt(row.loss),
                    _fmt(row.clip_bound),
                    _fmt(row.noisy_clip_fraction),
                    _fmt(row.grad_norm_p50),
                    _fmt(row.grad_norm_p90),
                    _fmt(row.grad_norm_max),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def _jsonable(obj):
    """Plain JSON types only: numpy scalars unwrapped, non-finite floats null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def non_private_flags(cfg_training: dict) -> list[str]:
    flags = []
    if cfg_training.get("noiseless", False):
        flags.append("noiseless")
    if cfg_training.get("record_norm_quantiles", True):
        flags.append("grad_norm_quantiles")
    return flags


def write_manifest(
    path: Path,
    *,
    config: dict,
    seeds: list[int],
    epsilon: float | None,
    delta: float,
    sigma_grad: float,
    sigma_count: float | None,
    steps: int,
    sampling_rate: float,
    metrics: dict,
    flags: list[str],
) -> None:
    manifest = {
        "config": config,
        "seeds": seeds,
        "epsilon": epsilon,
        "delta": delta,
        "sigma_grad": sigma_grad,
        "sigma_count": sigma_count,
        "steps": steps,
        "sampling_rate": sampling_rate,
        "metrics": metrics,
        "non_private_flags": flags,
        "version": __version__,
    }
    assert tuple(manifest) == MANIFEST_KEYS
    write_json(path, manifest)


# ---------------------------------------------------------------------------
# toy
# ---------------------------------------------------------------------------


def default_toy_config() -> dict:
    """Built-in bimodal mean-estimation config with per-mode settings."""
    return {
        "dataset": {
            "kind": "bimodal",
            "n": 10000,
            "p_major": 0.6,
            "mode_lo": 0.0,
            "mode_hi": 1.0,
            "jitter_std": 0.0,
        },
        "model": {"kind": "mean"},
        "training": {
            "learning_rate": 0.5,
            "steps": 3000,
            "sampling_rate": 1.0,
            "noiseless": True,
            "clipping": {
                "mode": "adaptive",
                "c0": 1.0,
                "c_lb": 0.0,
                "gamma": 0.5,
                "tau": 1.0,
                "eta_c": 0.2,
            },
            "modes": {
                "constant": {"learning_rate": 0.5, "c0": 10.0},
                "unbounded": {"learning_rate": 0.002, "c0": 1.0},
                "bounded": {"learning_rate": 0.02, "c0": 1.0, "c_lb": 0.6},
            },
        },
        "output_dir": "runs/toy",
        "seeds": [1],
    }


def _toy_clipping(cfg: dict, mode: str) -> ClippingConfig:
    tb = cfg["training"]
    override = tb.get("modes", {}).get(mode, {})
    base = tb["clipping"]
    if mode == "constant":
        return build_clipping(base, mode=MODE_CONSTANT, c0=override.get("c0"), c_lb=0.0)
    if mode == "unbounded":
        return build_clipping(base, mode=MODE_ADAPTIVE, c0=override.get("c0"), c_lb=0.0)
    c_lb = override.get("c_lb", base.get("c_lb", 0.0))
    if c_lb <= 0:
        raise ConfigError("toy bounded mode needs c_lb > 0 (training.modes.bounded.c_lb)")
    c0 = override.get("c0", base.get("c0", 1.0))
    return build_clipping(base, mode=MODE_ADAPTIVE, c0=max(c0, c_lb), c_lb=c_lb)


def run_toy(cfg: dict, out_dir: Path) -> dict:
    """Train the three modes with shared seeds; returns the summary dict."""
    if cfg["model"]["kind"] != "mean" or cfg["dataset"]["kind"] != "bimodal":
        raise ConfigError("toy command needs a mean model on the bimodal dataset")
    seed = cfg["seeds"][0]
    dataset, _ = build_dataset(cfg["dataset"], Rng(seed).split("data"))
    spec = ModelSpec("mean")
    out_dir.mkdir(parents=True, exist_ok=True)

    summary: dict = {"seed": seed, "modes": {}}
    last: RunResult | None = None
    for mode in TOY_MODES:
        clip = _toy_clipping(cfg, mode)
        lr = cfg["training"].get("modes", {}).get(mode, {}).get("learning_rate")
        run_cfg = build_train_config(cfg, seed, dataset.n, clipping=clip, learning_rate=lr)
        result = train(run_cfg, dataset, spec, Rng(seed).split("train"))
        write_history_csv(out_dir / f"{mode}_history.csv", result.history)
        summary["modes"][mode] = {
            "final_estimate": result.metrics["estimate"],
            "final_clip_bound": result.final_clip_bound,
            "final_loss": result.metrics["final_loss"],
        }
        last = result
    write_json(out_dir / "toy_summary.json", summary)
    write_manifest(
        out_dir / "manifest.json",
        config=cfg,
        seeds=[seed],
        epsilon=last.epsilon,
        delta=cfg.get("privacy", {}).get("delta", 1e-5),
        sigma_grad=last.sigma_grad,
        sigma_count=None,
        steps=last.steps,
        sampling_rate=last.sampling_rate,
        metrics={
            f"{mode}_{key}": value
            for mode, block in summary["modes"].items()
            for key, value in block.items()
        },
        flags=non_private_flags(cfg["training"]),
    )
    return summary


def cmd_toy(args) -> int:
    cfg = load_config(args.config) if args.config else validate_config(default_toy_config())
    out_dir = Path(args.output_dir or cfg["output_dir"])
    summary = run_toy(cfg, out_dir)
    for mode, block in summary["modes"].items():
        print(
            f"{mode}: estimate={block['final_estimate']:.4f} "
            f"clip_bound={block['final_clip_bound']:.6g}"
        )
    print(f"wrote {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def aggregate_metrics(per_seed: list[dict]) -> dict:
    """mean and standard error (sample std / sqrt(n)) per metric key."""
    keys = sorted({k for m in per_seed for k in m})
    out = {}
    for key in keys:
        values = [float(m[key]) for m in per_seed if key in m]
        arr = np.asarray(values)
        se = float(np.std(arr, ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        out[key] = {"mean": float(arr.mean()), "se": se, "values": values}
    return out


def run_train(cfg: dict, out_dir: Path) -> tuple[dict, list[int]]:
    """Per-seed runs plus the aggregate; returns (aggregate, failed seeds)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    clip = build_clipping(cfg["training"]["clipping"])
    per_seed_metrics: list[dict] = []
    epsilons: list[float] = []
    done: list[int] = []
    failed: list[int] = []
    for seed in cfg["seeds"]:
        rng = Rng(seed)
        dataset, eval_ds = build_dataset(cfg["dataset"], rng.split("data"))
        spec = build_model_spec(cfg["model"], dataset)
        run_cfg = build_train_config(cfg, seed, dataset.n, clipping=clip)
        seed_dir = out_dir / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        try:
            result = train(run_cfg, dataset, spec, rng.split("train"), eval_dataset=eval_ds)
        except TrainingDiverged as exc:
            print(f"seed {seed}: diverged: {exc}", file=sys.stderr)
            write_history_csv(seed_dir / "history.csv", exc.history or [])
            failed.append(seed)
            continue
        write_history_csv(seed_dir / "history.csv", result.history)
        write_manifest(
            seed_dir / "manifest.json",
            config=cfg,
            seeds=[seed],
            epsilon=result.epsilon,
            delta=run_cfg.delta,
            sigma_grad=result.sigma_grad,
            sigma_count=result.sigma_count,
            steps=result.steps,
            sampling_rate=result.sampling_rate,
            metrics=result.metrics,
            flags=non_private_flags(cfg["training"]),
        )
        per_seed_metrics.append(result.metrics)
        if result.epsilon is not None:
            epsilons.append(result.epsilon)
        done.append(seed)

    aggregate = {
        "method": method_name(clip),
        "epsilon": float(np.mean(epsilons)) if epsilons else None,
        "epsilon_values": epsilons,
        "delta": cfg.get("privacy", {}).get("delta", 1e-5),
        "seeds": done,
        "failed_seeds": failed,
        "metrics": aggregate_metrics(per_seed_metrics) if per_seed_metrics else {},
        "version": __version__,
    }
    write_json(out_dir / "aggregate.json", aggregate)
    return aggregate, failed


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.output_dir or cfg["output_dir"])
    aggregate, failed = run_train(cfg, out_dir)
    for key, stat in aggregate["metrics"].items():
        print(f"{key}: {stat['mean']:.4f} +- {stat['se']:.4f}")
    if aggregate["epsilon"] is not None:
        print(f"epsilon: {aggregate['epsilon']:.4f}")
    print(f"wrote {out_dir}")
    if failed:
        print(f"{len(failed)} seed(s) diverged: {failed}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# hpo
# ---------------------------------------------------------------------------


def grid_from_config(hb: dict) -> GridSpec:
    if "grid" not in hb:
        return default_grid(hb.get("include_batch_size", False))
    axes = []
    block = hb["grid"]
    for name in ("batch_size", "learning_rate", "clip_param"):
        if name in block:
            axes.append((name, tuple(block[name])))
    return GridSpec(tuple(axes))


def _clip_for_trial(base: ClippingConfig, role: str, value: float) -> ClippingConfig:
    if role == "constant":
        return ClippingConfig(mode=MODE_CONSTANT, c0=value)
    if role == "initial":
        return ClippingConfig(
            mode=MODE_ADAPTIVE,
            c0=value,
            c_lb=min(base.c_lb, value),
            gamma=base.gamma,
            tau=base.tau,
            eta_c=base.eta_c,
        )
    return ClippingConfig(
        mode=MODE_ADAPTIVE,
        c0=max(base.c0, value),
        c_lb=value,
        gamma=base.gamma,
        tau=base.tau,
        eta_c=base.eta_c,
    )


def default_clip_role(clip: ClippingConfig) -> str:
    if not clip.adaptive:
        return "constant"
    return "lower_bound" if clip.c_lb > 0 else "initial"


def run_hpo(cfg: dict, out_dir: Path) -> dict:
    hb = cfg.get("hpo", {})
    grid_spec = grid_from_config(hb)
    grid = build_grid(grid_spec)
    policy = hb.get("policy", POLICY_GRID)
    base_clip = build_clipping(cfg["training"]["clipping"])
    role = hb.get("clip_param_role", default_clip_role(base_clip))
    objective_key = hb.get("objective", "macro_acc")
    base_seed = cfg["seeds"][0]
    rng = Rng(base_seed).split("hpo")

    # A fixed-data search: every trial sees the same train/eval draw so the
    # objective varies only with the hyperparameters.
    data_rng = Rng(base_seed).split("data")
    dataset, eval_ds = build_dataset(cfg["dataset"], data_rng)
    if eval_ds is None:
        raise ConfigError("hpo needs an eval split (test data) for the objective")
    spec = build_model_spec(cfg["model"], dataset)

    counter = itertools.count()

    def objective_fn(config: dict):
        index = next(counter)
        seed = base_seed + index
        clip = _clip_for_trial(base_clip, role, config["clip_param"]) if "clip_param" in config else base_clip
        run_cfg = build_train_config(
            cfg,
            seed,
            dataset.n,
            clipping=clip,
            learning_rate=config.get("learning_rate"),
            batch_size=config.get("batch_size"),
        )
        result = train(run_cfg, dataset, spec, Rng(seed).split("train"), eval_dataset=eval_ds)
        return result.metrics[objective_key], result.epsilon, result.metrics

    tnb = None
    fixed_k = hb.get("fixed_k")
    if fixed_k is None:
        tnb = (
            TnbParams(eta=hb["tnb"].get("eta", 1.0), gamma=hb["tnb"]["gamma"])
            if "tnb" in hb
            else default_tnb_for_grid(len(grid))
        )
    result = run_random_search(grid, objective_fn, rng, tnb=tnb, fixed_k=fixed_k, policy=policy)

    # Conservative charge over the whole grid: one mechanism per distinct
    # batch size (learning rate and clip parameter do not change it).
    charge = None
    if not cfg["training"].get("noiseless", False):
        mechanisms = []
        batch_axis = dict(grid_spec.axes).get("batch_size", (None,))
        for bs in batch_axis:
            probe = build_train_config(cfg, base_seed, dataset.n, clipping=base_clip, batch_size=bs)
            q = probe.resolve_sampling_rate(dataset.n)
            steps = probe.resolve_steps(q)
            mechanisms.append(
                MechanismParams(q, steps, probe.sigma_grad, probe.resolve_sigma_count(), probe.delta)
            )
        charge = dphpo_report(mechanisms, len(grid), policy)
        result.per_run_epsilon = charge["per_run_epsilon"]
        result.total_epsilon = charge["hpo_total_epsilon"]

    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [",".join(SWEEP_COLUMNS)]
    default_batch = cfg["training"].get("batch_size")
    for trial in result.trials:
        batch = trial.config.get("batch_size", default_batch)
        if batch is None:
            probe_q = cfg["training"]["sampling_rate"]
            batch = int(round(probe_q * dataset.n))
        row = [
            str(trial.index),
            _fmt(trial.config.get("learning_rate", cfg["training"]["learning_rate"])),
            _fmt(trial.config["clip_param"]) if "clip_param" in trial.config else _fmt(float("nan")),
            str(int(batch)),
            str(base_seed + trial.index),
            _fmt(trial.objective) if trial.objective is not None else _fmt(float("nan")),
            _fmt(trial.metrics.get("macro_acc", float("nan"))),
            _fmt(trial.metrics.get("worst_acc", float("nan"))),
            _fmt(trial.per_run_epsilon) if trial.per_run_epsilon is not None else _fmt(float("nan")),
        ]
        lines.append(",".join(row))
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")

    best = result.best
    metrics = dict(best.metrics)
    metrics.update(
        {
            "objective": best.objective,
            "grid_size": result.grid_size,
            "k_drawn": result.k_drawn,
        }
    )
    if charge:
        metrics.update(charge)
    best_cfg = build_train_config(
        cfg,
        base_seed + best.index,
        dataset.n,
        clipping=_clip_for_trial(base_clip, role, best.config["clip_param"])
        if "clip_param" in best.config
        else base_clip,
        learning_rate=best.config.get("learning_rate"),
        batch_size=best.config.get("batch_size"),
    )
    q = best_cfg.resolve_sampling_rate(dataset.n)
    write_manifest(
        out_dir / "best_manifest.json",
        config={"run_config": cfg, "best_trial": best.config, "policy": result.policy},
        seeds=[base_seed + best.index],
        epsilon=result.total_epsilon,
        delta=best_cfg.delta,
        sigma_grad=best_cfg.sigma_grad,
        sigma_count=best_cfg.resolve_sigma_count(),
        steps=best_cfg.resolve_steps(q),
        sampling_rate=q,
        metrics=metrics,
        flags=non_private_flags(cfg["training"]),
    )
    return {
        "best": best.config,
        "objective": best.objective,
        "k_drawn": result.k_drawn,
        "grid_size": result.grid_size,
        "charge": charge,
    }


def cmd_hpo(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.output_dir or cfg["output_dir"])
    report = run_hpo(cfg, out_dir)
    print(f"grid size {report['grid_size']}, trials drawn {report['k_drawn']}")
    print(f"best objective {report['objective']:.4f} at {report['best']}")
    if report["charge"]:
        for key, value in report["charge"].items():
            print(f"{key}: {value:.4f}")
    print(f"wrote {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# account / grid
# ---------------------------------------------------------------------------


def cmd_account(args) -> int:
    if (args.sigma_grad is None) == (args.target_epsilon is None):
        raise ConfigError("account: set exactly one of --sigma-grad / --target-epsilon")
    count_ratio = args.count_ratio
    if args.target_epsilon is not None:
        sigma = calibrate_sigma(
            args.target_epsilon, args.delta, args.q, args.steps, count_ratio=count_ratio
        )
        sigma_count = count_ratio * sigma if count_ratio > 0 else None
        eps, order = epsilon_of(
            MechanismParams(args.q, args.steps, sigma, sigma_count, args.delta)
        )
        payload = {
            "sigma_grad": sigma,
            "sigma_count": sigma_count,
            "epsilon": eps,
            "order": order,
            "q": args.q,
            "steps": args.steps,
            "delta": args.delta,
        }
        print(f"sigma_grad = {sigma:.6g} (epsilon {eps:.6g} at order {order})")
    else:
        if args.sigma_grad is None:
            raise ConfigError("account: set exactly one of --sigma-grad / --target-epsilon")
        sigma_count = count_ratio * args.sigma_grad if count_ratio > 0 else None
        eps, order = epsilon_of(
            MechanismParams(args.q, args.steps, args.sigma_grad, sigma_count, args.delta)
        )
        payload = {
            "sigma_grad": args.sigma_grad,
            "sigma_count": sigma_count,
            "epsilon": eps,
            "order": order,
            "q": args.q,
            "steps": args.steps,
            "delta": args.delta,
        }
        print(f"epsilon = {eps:.6g} (order {order})")
    if args.json:  # machine-readable copy of the same numbers
        print(json.dumps(_jsonable(payload), sort_keys=True))
    if args.out:
        write_json(Path(args.out), payload)
    return 0


def cmd_grid(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        spec = grid_from_config(cfg.get("hpo", {}))
    else:
        spec = default_grid(args.include_batch_size)
    print(",".join(spec.names))
    for config in build_grid(spec):
        print(",".join(str(config[name]) for name in spec.names))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clipbound",
        description="Differentially private training with adaptive, lower-bounded gradient clipping.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("toy", help="bimodal mean-estimation comparison of clipping modes")
    toy.add_argument("--config", help="JSON config (defaults to the built-in toy setup)")
    toy.add_argument("--output-dir", help="override the config's output_dir")
    toy.set_defaults(func=cmd_toy)

    tr = sub.add_parser("train", help="train over a seed list and aggregate metrics")
    tr.add_argument("--config", required=True)
    tr.add_argument("--output-dir")
    tr.set_defaults(func=cmd_train)

    hp = sub.add_parser("hpo", help="randomized grid search with privacy charging")
    hp.add_argument("--config", required=True)
    hp.add_argument("--output-dir")
    hp.set_defaults(func=cmd_hpo)

    ac = sub.add_parser("account", help="privacy accounting or noise calibration")
    ac.add_argument("--q", type=float, required=True, help="Poisson sampling rate")
    ac.add_argument("--steps", type=int, required=True)
    ac.add_argument("--sigma-grad", type=float, default=None)
    ac.add_argument("--target-epsilon", type=float, default=None, help="calibrate sigma_grad")
    ac.add_argument("--count-ratio", type=float, default=0.0, help="sigma_count / sigma_grad (0 = no count query)")
    ac.add_argument("--delta", type=float, default=1e-5)
    ac.add_argument("--json", action="store_true", help="also print a JSON payload")
    ac.add_argument("--out", help="write the JSON payload to this file")
    ac.set_defaults(func=cmd_account)

    gr = sub.add_parser("grid", help="print the hyperparameter grid and exit")
    gr.add_argument("--config")
    gr.add_argument("--include-batch-size", action="store_true")
    gr.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ClipboundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
