"""Synthetic dataset generation and partitioning across clients.

Partitions are exhaustive and disjoint; client weights are the exact
data-share ratios D_i / D.  Energy renewal cycles are assigned by group
membership i mod n_groups, the grouping used throughout the experiment
presets.

The ``optimum-skew`` partition pairs with datasets generated from
per-group ground-truth vectors (each energy group draws targets from its
own linear truth), which makes scheduling bias measurable as a distance
between closed-form optima.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import InvalidArgumentError, RngStream, as_model_vector
from .models import Dataset

__all__ = [
    "ClientProfile",
    "PartitionSpec",
    "SyntheticSpec",
    "generate_synthetic",
    "partition",
    "pooled_dataset",
    "split_train_test",
    "export_dataset",
    "import_dataset",
    "export_model_vector",
    "import_model_vector",
]


@dataclass
class ClientProfile:
    """One client: local dataset, aggregation weight, energy renewal cycle."""

    client_id: int
    data: Dataset
    weight: float
    cycle: int

    def __post_init__(self) -> None:
        if self.client_id < 0:
            raise InvalidArgumentError("client_id must be >= 0")
        if not (0.0 < self.weight <= 1.0):
            raise InvalidArgumentError(f"weight must be in (0, 1], got {self.weight}")
        if self.cycle < 1:
            raise InvalidArgumentError(f"cycle must be >= 1, got {self.cycle}")


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset over N clients.

    `groups` lists (size, cycle) pairs; client i belongs to group
    i mod len(groups), so sizes must match that modular assignment.
    """

    kind: str
    n_clients: int
    groups: tuple = ((0, 1),)

    def __post_init__(self) -> None:
        if self.kind not in ("iid", "label-skew", "optimum-skew"):
            raise InvalidArgumentError(f"unknown partition kind {self.kind!r}")
        if self.n_clients < 1:
            raise InvalidArgumentError("n_clients must be >= 1")
        groups = tuple((int(s), int(c)) for s, c in self.groups)
        object.__setattr__(self, "groups", groups)
        if sum(s for s, _ in groups) != self.n_clients:
            raise InvalidArgumentError(
                f"group sizes {[s for s, _ in groups]} do not sum to N={self.n_clients}"
            )
        n_groups = len(groups)
        for k, (size, cycle) in enumerate(groups):
            expected = len(range(k, self.n_clients, n_groups))
            if size != expected:
                raise InvalidArgumentError(
                    f"group {k} size {size} inconsistent with modular assignment "
                    f"(expected {expected})"
                )
            if cycle < 1:
                raise InvalidArgumentError(f"group {k} cycle must be >= 1")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def cycle_of(self, client_id: int) -> int:
        return self.groups[client_id % self.n_groups][1]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for synthetic data generation.

    Regression targets are <w_true, x> + Gaussian noise; classification
    features cluster around per-class centers.  `group_w_true` (one truth
    vector per group) makes point j follow the truth of group j mod G and
    tags the dataset with per-point group labels.
    """

    task: str
    n: int
    d: int
    noise: float = 0.1
    n_classes: int = 2
    class_sep: float = 2.0
    w_true: tuple | None = None
    group_w_true: tuple | None = None

    def __post_init__(self) -> None:
        if self.task not in ("regression", "classification"):
            raise InvalidArgumentError(f"unknown task {self.task!r}")
        if self.n <= 0:
            raise InvalidArgumentError(f"n must be > 0, got {self.n}")
        if self.d <= 0:
            raise InvalidArgumentError(f"d must be > 0, got {self.d}")
        if self.noise < 0:
            raise InvalidArgumentError("noise must be >= 0")
        if self.task == "classification" and self.n_classes < 2:
            raise InvalidArgumentError("n_classes must be >= 2")
        if self.w_true is not None and self.group_w_true is not None:
            raise InvalidArgumentError("give w_true or group_w_true, not both")


def generate_synthetic(spec: SyntheticSpec, rng: RngStream) -> Dataset:
    """Draw a dataset according to `spec`, deterministically under `rng`."""
    gen = rng.generator
    if spec.task == "regression":
        X = gen.standard_normal((spec.n, spec.d))
        if spec.group_w_true is not None:
            truths = np.asarray(spec.group_w_true, dtype=np.float64)
            if truths.ndim != 2 or truths.shape[1] != spec.d:
                raise InvalidArgumentError(
                    f"group_w_true must have shape (G, {spec.d})"
                )
            groups = np.arange(spec.n) % truths.shape[0]
            y = np.einsum("ij,ij->i", X, truths[groups])
            ds = Dataset(X, y + spec.noise * gen.standard_normal(spec.n), "regression")
            ds.groups = groups  # type: ignore[attr-defined]
            return ds
        if spec.w_true is not None:
            w = as_model_vector(np.asarray(spec.w_true, dtype=np.float64))
            if w.size != spec.d:
                raise InvalidArgumentError(f"w_true must have length {spec.d}")
        else:
            w = gen.standard_normal(spec.d)
        y = X @ w + spec.noise * gen.standard_normal(spec.n)
        return Dataset(X, y, "regression")

    centers = spec.class_sep * gen.standard_normal((spec.n_classes, spec.d))
    labels = np.arange(spec.n) % spec.n_classes
    labels = gen.permutation(labels)
    X = centers[labels] + gen.standard_normal((spec.n, spec.d))
    return Dataset(X, labels, "classification")


def _even_shares(n: int, parts: int) -> list[int]:
    # Remainder handed out round-robin from the first share.
    base, rem = divmod(n, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _slices_from_shares(order: np.ndarray, shares: list[int]) -> list[np.ndarray]:
    out = []
    pos = 0
    for s in shares:
        out.append(order[pos : pos + s])
        pos += s
    return out


def partition(
    data: Dataset, spec: PartitionSpec, rng: RngStream
) -> list[ClientProfile]:
    """Split `data` into per-client profiles with group-assigned cycles."""
    n = len(data)
    if n < spec.n_clients:
        raise InvalidArgumentError(
            f"need at least one point per client ({n} points, {spec.n_clients} clients)"
        )
    gen = rng.generator
    if spec.kind == "iid":
        order = gen.permutation(n)
        assignments = _slices_from_shares(order, _even_shares(n, spec.n_clients))
    elif spec.kind == "label-skew":
        assignments = _label_skew_assignments(data, spec, gen)
    else:
        assignments = _optimum_skew_assignments(data, spec, gen)

    total = sum(len(a) for a in assignments)
    profiles = []
    for cid, idx in enumerate(assignments):
        profiles.append(
            ClientProfile(
                client_id=cid,
                data=data.subset(np.sort(idx)),
                weight=len(idx) / total,
                cycle=spec.cycle_of(cid),
            )
        )
    return profiles


def _label_skew_assignments(data: Dataset, spec: PartitionSpec, gen) -> list[np.ndarray]:
    if data.task != "classification":
        raise InvalidArgumentError("label-skew requires classification data")
    n = len(data)
    # Two label-sorted shards per client: each client sees few labels.
    order = np.argsort(data.targets, kind="stable")
    n_shards = 2 * spec.n_clients
    shards = _slices_from_shares(order, _even_shares(n, n_shards))
    shard_order = gen.permutation(n_shards)
    return [
        np.concatenate([shards[shard_order[2 * i]], shards[shard_order[2 * i + 1]]])
        for i in range(spec.n_clients)
    ]


def _optimum_skew_assignments(data: Dataset, spec: PartitionSpec, gen) -> list[np.ndarray]:
    groups = getattr(data, "groups", None)
    if groups is None:
        raise InvalidArgumentError(
            "optimum-skew needs data generated with group_w_true (per-point groups)"
        )
    if int(groups.max()) + 1 != spec.n_groups:
        raise InvalidArgumentError(
            "data group count does not match partition group count"
        )
    assignments: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * spec.n_clients
    for k in range(spec.n_groups):
        members = list(range(k, spec.n_clients, spec.n_groups))
        pool = np.flatnonzero(groups == k)
        pool = pool[gen.permutation(len(pool))]
        for cid, idx in zip(members, _slices_from_shares(pool, _even_shares(len(pool), len(members)))):
            assignments[cid] = idx
    return assignments


def pooled_dataset(profiles: list[ClientProfile]) -> Dataset:
    """Concatenate client datasets (in id order) into one dataset.

    Because p_i = D_i / D, the plain average loss over the pooled points
    equals the p_i-weighted global objective.
    """
    ordered = sorted(profiles, key=lambda p: p.client_id)
    X = np.concatenate([p.data.features for p in ordered])
    y = np.concatenate([p.data.targets for p in ordered])
    return Dataset(X, y, ordered[0].data.task)


def split_train_test(data: Dataset, test_fraction: float, rng: RngStream):
    """Shuffle split into (train, test); the split seed is the rng label."""
    if not (0.0 < test_fraction < 1.0):
        raise InvalidArgumentError("test_fraction must be in (0, 1)")
    n = len(data)
    order = rng.generator.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    if n_test >= n:
        raise InvalidArgumentError("test split leaves no training data")
    test_idx, train_idx = order[:n_test], order[n_test:]
    train = data.subset(np.sort(train_idx))
    test = data.subset(np.sort(test_idx))
    if hasattr(data, "groups"):
        train.groups = data.groups[np.sort(train_idx)]  # type: ignore[attr-defined]
        test.groups = data.groups[np.sort(test_idx)]  # type: ignore[attr-defined]
    return train, test


def _format_value(v: float) -> str:
    # repr round-trips doubles exactly, giving bit-exact file round-trips.
    return repr(float(v))


def export_dataset(data: Dataset, path: str, seed: int | None = None) -> None:
    """Flat file: one-line JSON header, then comma-separated rows."""
    header = {
        "dimension": data.dim,
        "count": len(data),
        "seed": seed,
        "task": data.task,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(data)):
            feats = ",".join(_format_value(v) for v in data.features[i])
            if data.task == "classification":
                fh.write(f"{feats},{int(data.targets[i])}\n")
            else:
                fh.write(f"{feats},{_format_value(data.targets[i])}\n")


def import_dataset(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        d = int(header["dimension"])
        n = int(header["count"])
        task = header.get("task", "regression")
        X = np.empty((n, d))
        y_cls = np.empty(n, dtype=np.int64)
        y_reg = np.empty(n)
        for i in range(n):
            parts = fh.readline().rstrip("\n").split(",")
            if len(parts) != d + 1:
                raise InvalidArgumentError(f"row {i} has {len(parts)} fields, expected {d + 1}")
            X[i] = [float(p) for p in parts[:d]]
            if task == "classification":
                y_cls[i] = int(parts[d])
            else:
                y_reg[i] = float(parts[d])
    return Dataset(X, y_cls if task == "classification" else y_reg, task)


def export_model_vector(w: np.ndarray, path: str, seed: int | None = None) -> None:
    """Model dump in the same header-plus-rows flat format."""
    w = as_model_vector(w)
    header = {"dimension": int(w.size), "count": 1, "seed": seed, "task": "model"}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write(",".join(_format_value(v) for v in w) + "\n")


def import_model_vector(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("task") != "model":
            raise InvalidArgumentError(f"{path} is not a model file")
        values = [float(p) for p in fh.readline().rstrip("\n").split(",")]
    if len(values) != int(header["dimension"]):
        raise InvalidArgumentError("model file dimension mismatch")
    return np.asarray(values)
