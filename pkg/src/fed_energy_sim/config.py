"""Experiment configuration: JSON schema, validation, canonical hashing.

Config files are plain JSON; keys starting with an underscore are
documentation and are ignored (and excluded from the config hash, which
is otherwise stable under key reordering).  Validation errors always
name the offending key.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .core import InvalidArgumentError
from .data import PartitionSpec, SyntheticSpec
from .models import LossModel
from .scheduling import POLICY_KINDS

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_experiment_config",
    "config_hash",
]

_LR_KINDS = ("theorem-decay", "constant", "adam")


class ConfigError(ValueError):
    """Invalid configuration; `key` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config error at '{key}': {message}")


def _strip_private(obj):
    if isinstance(obj, dict):
        return {k: _strip_private(v) for k, v in obj.items() if not k.startswith("_")}
    if isinstance(obj, list):
        return [_strip_private(v) for v in obj]
    return obj


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError("config", f"invalid JSON in {path}: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return raw


def config_hash(raw: dict) -> str:
    canonical = json.dumps(_strip_private(raw), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _get(d: dict, key: str, kind, path: str, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{path}{key}", "missing required key")
        return default
    val = d[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(
            f"{path}{key}", f"expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}"
        )
    return val


@dataclass
class ExperimentConfig:
    raw: dict
    name: str
    mode: str
    model: LossModel
    data_spec: SyntheticSpec
    data_seed: int
    test_fraction: float
    group_truth_scale: float
    partition_spec: PartitionSpec
    policies: list[str]
    T: int
    K: int
    lr_raw: dict
    batch_size: int
    seeds: list[int]
    w0_kind: str
    w0_scale: float
    snapshot_stride: int
    allow_ragged: bool
    export_data: bool
    stagger_epochs: bool


def parse_experiment_config(raw: dict, allow_ragged: bool = False) -> ExperimentConfig:
    """Validate and materialize a config dict; raises ConfigError."""
    raw = _strip_private(raw)
    name = _get(raw, "name", str, "", default="unnamed")
    mode = _get(raw, "mode", str, "", default="comparison")
    if mode not in ("comparison", "train"):
        raise ConfigError("mode", f"must be 'comparison' or 'train', got {mode!r}")

    model_raw = _get(raw, "model", dict, "", required=True)
    data_raw = _get(raw, "data", dict, "", required=True)
    d = _get(data_raw, "d", int, "data.", required=True)
    try:
        model = LossModel(
            kind=_get(model_raw, "kind", str, "model.", required=True),
            n_features=d,
            lam=_get(model_raw, "lam", float, "model.", default=0.0),
            n_classes=_get(model_raw, "n_classes", int, "model.", default=2),
            hidden=_get(model_raw, "hidden", int, "model.", default=16),
        )
    except InvalidArgumentError as err:
        raise ConfigError("model", str(err)) from None

    task = _get(data_raw, "task", str, "data.", required=True)
    if task != model.task:
        raise ConfigError(
            "data.task", f"{model.kind} model expects {model.task!r}, got {task!r}"
        )
    if task == "classification":
        n_classes = _get(data_raw, "n_classes", int, "data.", default=model.n_classes)
        if n_classes != model.n_classes:
            raise ConfigError("data.n_classes", "must match model.n_classes")
    group_truth_scale = _get(data_raw, "group_truth_scale", float, "data.", default=1.0)
    try:
        data_spec = SyntheticSpec(
            task=task,
            n=_get(data_raw, "n", int, "data.", required=True),
            d=d,
            noise=_get(data_raw, "noise", float, "data.", default=0.1),
            n_classes=_get(data_raw, "n_classes", int, "data.", default=model.n_classes),
            class_sep=_get(data_raw, "class_sep", float, "data.", default=2.0),
            w_true=tuple(data_raw["w_true"]) if "w_true" in data_raw else None,
        )
    except InvalidArgumentError as err:
        raise ConfigError("data", str(err)) from None
    data_seed = _get(data_raw, "data_seed", int, "data.", default=1)
    test_fraction = _get(data_raw, "test_fraction", float, "data.", default=0.0)
    if not (0.0 <= test_fraction < 1.0):
        raise ConfigError("data.test_fraction", "must be in [0, 1)")

    part_raw = _get(raw, "partition", dict, "", required=True)
    try:
        partition_spec = PartitionSpec(
            kind=_get(part_raw, "kind", str, "partition.", required=True),
            n_clients=_get(part_raw, "n_clients", int, "partition.", required=True),
            groups=tuple(
                tuple(g) for g in _get(part_raw, "groups", list, "partition.", required=True)
            ),
        )
    except (InvalidArgumentError, TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError("partition.groups", str(err)) from None
    if data_spec.n < partition_spec.n_clients:
        raise ConfigError("data.n", "need at least one point per client")

    if mode == "train":
        policy = _get(raw, "policy", str, "", required=True)
        policies = [policy]
    else:
        policies = _get(raw, "policies", list, "", required=True)
    if not policies:
        raise ConfigError("policies", "must be a nonempty list")
    for p in policies:
        if p not in POLICY_KINDS:
            raise ConfigError(
                "policies", f"unknown policy {p!r}; known: {', '.join(POLICY_KINDS)}"
            )

    T = _get(raw, "T", int, "", required=True)
    K = _get(raw, "K", int, "", required=True)
    if T < 1:
        raise ConfigError("T", "must be >= 1")
    if K < 1 or K % T != 0:
        raise ConfigError("K", f"must be a positive multiple of T={T}")
    allow_ragged = allow_ragged or bool(raw.get("allow_ragged_epochs", False))
    stagger_epochs = bool(raw.get("stagger_epochs", False))
    # Staggered starts shift epoch phases, so trailing partial epochs
    # are inherent and the divisibility rule does not apply.
    if not allow_ragged and not stagger_epochs:
        n_rounds = K // T
        for _, cycle in partition_spec.groups:
            if n_rounds % cycle != 0:
                raise ConfigError(
                    "K",
                    f"K/(T*E_i) is not a positive integer for cycle {cycle} "
                    f"(K/T={n_rounds}); pass --allow-ragged-epochs to truncate",
                )

    lr_raw = _get(raw, "lr", dict, "", required=True)
    lr_kind = _get(lr_raw, "kind", str, "lr.", required=True)
    if lr_kind not in _LR_KINDS:
        raise ConfigError("lr.kind", f"must be one of {', '.join(_LR_KINDS)}")
    if lr_kind == "constant" and "eta" not in lr_raw:
        raise ConfigError("lr.eta", "constant schedule requires eta")

    batch_size = _get(raw, "batch_size", int, "", default=32)
    if batch_size < 1:
        raise ConfigError("batch_size", "must be >= 1")

    if mode == "train":
        seed = _get(raw, "seed", int, "", default=0)
        seeds = [seed]
    else:
        seeds = _get(raw, "seeds", list, "", required=True)
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds", "must be a nonempty list of integers")

    w0_raw = _get(raw, "w0", dict, "", default={"kind": "zeros"})
    w0_kind = _get(w0_raw, "kind", str, "w0.", default="zeros")
    if w0_kind not in ("zeros", "gaussian"):
        raise ConfigError("w0.kind", "must be 'zeros' or 'gaussian'")
    w0_scale = _get(w0_raw, "scale", float, "w0.", default=0.5)

    snapshot_stride = _get(raw, "snapshot_stride", int, "", default=10)
    if snapshot_stride < 1:
        raise ConfigError("snapshot_stride", "must be >= 1")

    return ExperimentConfig(
        raw=raw,
        name=name,
        mode=mode,
        model=model,
        data_spec=data_spec,
        data_seed=data_seed,
        test_fraction=test_fraction,
        group_truth_scale=group_truth_scale,
        partition_spec=partition_spec,
        policies=list(policies),
        T=T,
        K=K,
        lr_raw=dict(lr_raw),
        batch_size=batch_size,
        seeds=list(seeds),
        w0_kind=w0_kind,
        w0_scale=w0_scale,
        snapshot_stride=snapshot_stride,
        allow_ragged=allow_ragged,
        export_data=bool(raw.get("export_data", False)),
        stagger_epochs=stagger_epochs,
    )
