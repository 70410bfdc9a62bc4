"""Experiment configuration: parsing, validation, defaults, and hashing.

Configs are TOML (preferred) or JSON. Every knob an experiment depends on
lives here; reruns of a config with the same hash must produce byte-identical
metrics. Unknown keys are rejected rather than ignored so typos cannot
silently change an experiment.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(Exception):
    """Malformed or out-of-range experiment configuration."""


STRATEGIES = ("full", "ffa", "fedsa")
VARIANTS = ("lora", "rslora", "vera")
PARTITION_MODES = ("iid", "dirichlet")

_TOP_KEYS = {
    "name", "seed", "output_dir", "strategy", "m", "rounds", "local_steps",
    "lr", "batch_size", "sampling_rate", "data_weighted", "eval_fraction",
    "similarity_epochs", "analysis", "adapted_layers",
    "task", "variant", "partition",
}
_TASK_KEYS_COMMON = {"kind", "hidden_dims"}
_TASK_KEYS_REGRESSION = _TASK_KEYS_COMMON | {
    "k", "d", "n", "noise_std", "covariance", "delta_scale", "delta_rank",
    "client_delta_spread",
}
_TASK_KEYS_CLASSIFICATION = _TASK_KEYS_COMMON | {
    "d", "num_classes", "n", "separation", "w0_std",
}
_VARIANT_KEYS = {"kind", "alpha", "rank"}
_PARTITION_KEYS = {"mode", "alpha"}


@dataclass(frozen=True)
class TaskConfig:
    kind: str
    d: int
    n: int
    k: int = 1                      # regression output dim
    num_classes: int = 2            # classification only
    noise_std: float = 0.0
    covariance: object = "identity"
    delta_scale: float = 1.0
    delta_rank: int | None = None
    client_delta_spread: float = 0.0
    separation: float = 6.0
    w0_std: float = 0.1
    hidden_dims: tuple[int, ...] = ()

    @property
    def out_dim(self) -> int:
        return self.k if self.kind == "regression" else self.num_classes


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig
    strategy: str
    name: str = "experiment"
    seed: int = 0
    output_dir: str = ""
    m: int = 3
    rounds: int = 1000
    local_steps: int = 10
    lr: float = 0.01
    batch_size: int | None = None
    sampling_rate: float = 1.0
    data_weighted: bool = False
    eval_fraction: float = 0.2
    similarity_epochs: int = 50
    analysis: bool = True
    adapted_layers: tuple[int, ...] = (0,)
    variant_kind: str = "lora"
    alpha: float = 16.0
    rank: int = 8
    partition_mode: str = "iid"
    partition_alpha: float | None = None

    def resolved_output_dir(self) -> str:
        return self.output_dir or f"runs/{self.name}"


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _check_keys(section: dict, allowed: set, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in {where}")


def _as_int(raw, name: str) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ConfigError(f"{name} must be an integer, got {raw!r}")
    return raw


def _as_number(raw, name: str) -> float:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError(f"{name} must be a number, got {raw!r}")
    return float(raw)


def _parse_task(raw: dict) -> TaskConfig:
    _require(isinstance(raw, dict), "task must be a table/object")
    kind = raw.get("kind")
    _require(kind in ("regression", "classification"),
             f"task.kind must be 'regression' or 'classification', got {kind!r}")
    hidden = tuple(raw.get("hidden_dims", ()))
    for h in hidden:
        _require(isinstance(h, int) and h >= 1,
                 f"task.hidden_dims entries must be integers >= 1, got {h!r}")
    if kind == "regression":
        _check_keys(raw, _TASK_KEYS_REGRESSION, "task (regression)")
        _require(not hidden, "regression task supports a single layer only "
                             "(task.hidden_dims must be empty)")
        k = _as_int(raw.get("k", 4), "task.k")
        d = _as_int(raw.get("d", 8), "task.d")
        n = _as_int(raw.get("n", 256), "task.n")
        _require(k >= 1, f"task.k must be >= 1, got {k}")
        _require(d >= 1, f"task.d must be >= 1, got {d}")
        _require(n >= 1, f"task.n must be >= 1, got {n}")
        noise = _as_number(raw.get("noise_std", 0.0), "task.noise_std")
        _require(noise >= 0, f"task.noise_std must be >= 0, got {noise}")
        delta_scale = _as_number(raw.get("delta_scale", 1.0), "task.delta_scale")
        delta_rank = raw.get("delta_rank")
        if delta_rank is not None:
            delta_rank = _as_int(delta_rank, "task.delta_rank")
            _require(1 <= delta_rank <= min(k, d),
                     f"task.delta_rank must be in [1, {min(k, d)}], got {delta_rank}")
        spread = _as_number(raw.get("client_delta_spread", 0.0),
                            "task.client_delta_spread")
        _require(spread >= 0, f"task.client_delta_spread must be >= 0, got {spread}")
        return TaskConfig(kind=kind, k=k, d=d, n=n, noise_std=noise,
                          covariance=raw.get("covariance", "identity"),
                          delta_scale=delta_scale, delta_rank=delta_rank,
                          client_delta_spread=spread, hidden_dims=hidden)
    _check_keys(raw, _TASK_KEYS_CLASSIFICATION, "task (classification)")
    d = _as_int(raw.get("d", 16), "task.d")
    num_classes = _as_int(raw.get("num_classes", 3), "task.num_classes")
    n = _as_int(raw.get("n", 600), "task.n")
    _require(d >= 1, f"task.d must be >= 1, got {d}")
    _require(num_classes >= 2, f"task.num_classes must be >= 2, got {num_classes}")
    _require(n >= num_classes, f"task.n must be >= num_classes, got {n}")
    separation = _as_number(raw.get("separation", 6.0), "task.separation")
    _require(separation > 0, f"task.separation must be > 0, got {separation}")
    w0_std = _as_number(raw.get("w0_std", 0.1), "task.w0_std")
    _require(w0_std >= 0, f"task.w0_std must be >= 0, got {w0_std}")
    return TaskConfig(kind=kind, d=d, n=n, num_classes=num_classes,
                      separation=separation, w0_std=w0_std, hidden_dims=hidden)


def validate_config(raw: dict, default_name: str = "experiment") -> ExperimentConfig:
    """Validate a raw config mapping, filling documented defaults."""
    _require(isinstance(raw, dict), "config root must be a table/object")
    _check_keys(raw, _TOP_KEYS, "config")
    _require("task" in raw, "config requires a [task] section")
    _require("strategy" in raw, "config requires a strategy")
    task = _parse_task(raw["task"])

    strategy = raw["strategy"]
    _require(strategy in STRATEGIES,
             f"strategy must be one of {STRATEGIES}, got {strategy!r}")

    variant_raw = raw.get("variant", {})
    _require(isinstance(variant_raw, dict), "variant must be a table/object")
    _check_keys(variant_raw, _VARIANT_KEYS, "variant")
    variant_kind = variant_raw.get("kind", "lora")
    _require(variant_kind in VARIANTS,
             f"variant.kind must be one of {VARIANTS}, got {variant_kind!r}")
    alpha = _as_number(variant_raw.get("alpha", 16.0), "variant.alpha")
    _require(alpha > 0, f"variant.alpha must be > 0, got {alpha}")
    rank = _as_int(variant_raw.get("rank", 8), "variant.rank")
    _require(rank >= 1, f"variant.rank must be >= 1, got {rank}")

    partition_raw = raw.get("partition", {})
    _require(isinstance(partition_raw, dict), "partition must be a table/object")
    _check_keys(partition_raw, _PARTITION_KEYS, "partition")
    partition_mode = partition_raw.get("mode", "iid")
    _require(partition_mode in PARTITION_MODES,
             f"partition.mode must be one of {PARTITION_MODES}, got {partition_mode!r}")
    partition_alpha = partition_raw.get("alpha")
    if partition_mode == "dirichlet":
        _require(partition_alpha is not None, "partition.alpha required for dirichlet")
        partition_alpha = _as_number(partition_alpha, "partition.alpha")
        _require(partition_alpha > 0,
                 f"partition.alpha must be > 0, got {partition_alpha}")
    else:
        _require(partition_alpha is None, "partition.alpha only applies to dirichlet")
    _require(not (task.client_delta_spread > 0 and partition_mode == "dirichlet"),
             "choose one heterogeneity mechanism: client_delta_spread or dirichlet")

    m = _as_int(raw.get("m", 3), "m")
    _require(m >= 1, f"m must be >= 1, got {m}")
    rounds = _as_int(raw.get("rounds", 1000), "rounds")
    _require(rounds >= 0, f"rounds must be >= 0, got {rounds}")
    local_steps = _as_int(raw.get("local_steps", 10), "local_steps")
    _require(local_steps >= 1, f"local_steps must be >= 1, got {local_steps}")
    lr = _as_number(raw.get("lr", 0.01), "lr")
    _require(lr > 0, f"lr must be > 0, got {lr}")
    batch_size = raw.get("batch_size")
    if batch_size is not None:
        batch_size = _as_int(batch_size, "batch_size")
        _require(batch_size >= 1, f"batch_size must be >= 1, got {batch_size}")
    sampling_rate = _as_number(raw.get("sampling_rate", 1.0), "sampling_rate")
    _require(0 < sampling_rate <= 1,
             f"sampling_rate must be in (0, 1], got {sampling_rate}")
    eval_fraction = _as_number(raw.get("eval_fraction", 0.2), "eval_fraction")
    _require(0 <= eval_fraction < 1,
             f"eval_fraction must be in [0, 1), got {eval_fraction}")
    similarity_epochs = _as_int(raw.get("similarity_epochs", 50), "similarity_epochs")
    _require(similarity_epochs >= 1,
             f"similarity_epochs must be >= 1, got {similarity_epochs}")
    seed = _as_int(raw.get("seed", 0), "seed")
    _require(seed >= 0, f"seed must be >= 0, got {seed}")
    data_weighted = raw.get("data_weighted", False)
    _require(isinstance(data_weighted, bool), "data_weighted must be a boolean")
    analysis = raw.get("analysis", True)
    _require(isinstance(analysis, bool), "analysis must be a boolean")

    num_layers = len(task.hidden_dims) + 1
    adapted_raw = raw.get("adapted_layers", [0])
    _require(isinstance(adapted_raw, (list, tuple)) and adapted_raw,
             "adapted_layers must be a non-empty list")
    adapted = []
    for idx in adapted_raw:
        idx = _as_int(idx, "adapted_layers entry")
        _require(0 <= idx < num_layers,
                 f"adapted_layers entry {idx} out of range [0, {num_layers})")
        _require(idx not in adapted, f"adapted_layers entry {idx} repeated")
        adapted.append(idx)
    # rank must fit every adapted layer
    dims = [task.d, *task.hidden_dims, task.out_dim]
    for idx in adapted:
        cap = min(dims[idx + 1], dims[idx])
        _require(rank <= cap,
                 f"variant.rank {rank} exceeds min(k, d) = {cap} of layer {idx}")

    name = raw.get("name", default_name)
    _require(isinstance(name, str) and name, "name must be a non-empty string")
    output_dir = raw.get("output_dir", "")
    _require(isinstance(output_dir, str), "output_dir must be a string")

    return ExperimentConfig(
        task=task, strategy=strategy, name=name, seed=seed,
        output_dir=output_dir, m=m, rounds=rounds, local_steps=local_steps,
        lr=lr, batch_size=batch_size, sampling_rate=sampling_rate,
        data_weighted=data_weighted, eval_fraction=eval_fraction,
        similarity_epochs=similarity_epochs, analysis=analysis,
        adapted_layers=tuple(adapted), variant_kind=variant_kind, alpha=alpha,
        rank=rank, partition_mode=partition_mode, partition_alpha=partition_alpha,
    )


def parse_config(path_or_text, assume_json: bool | None = None) -> ExperimentConfig:
    """Load and validate a config from a file path or '-' for stdin.

    Format is chosen by extension (.json vs .toml); stdin and unknown
    extensions are sniffed: content starting with '{' parses as JSON.
    """
    if path_or_text == "-":
        text = sys.stdin.read()
        source = "<stdin>"
        suffix = ""
    else:
        path = Path(path_or_text)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
        source = str(path)
        suffix = path.suffix.lower()
    is_json = assume_json
    if is_json is None:
        is_json = suffix == ".json" or (suffix not in (".toml",)
                                        and text.lstrip().startswith("{"))
    try:
        if is_json:
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: JSON parse error at line {exc.lineno}, "
                          f"column {exc.colno}: {exc.msg}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: TOML parse error: {exc}") from exc
    default_name = Path(source).stem if source != "<stdin>" else "experiment"
    return validate_config(raw, default_name=default_name)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Canonical plain-data view of a config (stable across runs)."""
    task = cfg.task
    task_doc: dict = {"kind": task.kind, "d": task.d, "n": task.n,
                      "hidden_dims": list(task.hidden_dims)}
    if task.kind == "regression":
        task_doc.update({
            "k": task.k, "noise_std": task.noise_std,
            "covariance": task.covariance, "delta_scale": task.delta_scale,
            "delta_rank": task.delta_rank,
            "client_delta_spread": task.client_delta_spread,
        })
    else:
        task_doc.update({
            "num_classes": task.num_classes, "separation": task.separation,
            "w0_std": task.w0_std,
        })
    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "output_dir": cfg.resolved_output_dir(),
        "strategy": cfg.strategy,
        "m": cfg.m,
        "rounds": cfg.rounds,
        "local_steps": cfg.local_steps,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "sampling_rate": cfg.sampling_rate,
        "data_weighted": cfg.data_weighted,
        "eval_fraction": cfg.eval_fraction,
        "similarity_epochs": cfg.similarity_epochs,
        "analysis": cfg.analysis,
        "adapted_layers": list(cfg.adapted_layers),
        "task": task_doc,
        "variant": {"kind": cfg.variant_kind, "alpha": cfg.alpha, "rank": cfg.rank},
        "partition": {"mode": cfg.partition_mode, "alpha": cfg.partition_alpha},
    }


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
