"""Canned experiment recipes: policy comparison curves and bias metrics.

The ``paper-shape`` preset reproduces the reference experiment design at
desk scale -- 40 clients in four equal groups with energy cycles
(1, 5, 10, 20) and T = 5 local iterations -- on a small multiclass
logistic model where the pooled optimum is computable, so policies are
compared on the optimality gap rather than raw accuracy.  The
``optimum-skew`` preset gives each energy group its own ground-truth
regressor, which turns scheduling bias into a measurable distance from
the pooled optimum.

Every policy in a comparison consumes identical datasets, identical
initialization, and identical per-(client, round) minibatch streams;
only scheduling differs.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig, config_hash, parse_experiment_config
from .core import InvalidArgumentError, RngStream, as_model_vector
from .data import (
    ClientProfile,
    generate_synthetic,
    partition,
    pooled_dataset,
    split_train_test,
)
from .fedtrain import (
    LearningRateSchedule,
    RoundLog,
    TrainConfig,
    run,
    theorem_decay_schedule,
)
from .models import (
    Dataset,
    closed_form_optimum,
    estimate_constants,
    init_params,
    loss,
)

__all__ = [
    "PRESETS",
    "Problem",
    "build_problem",
    "run_policy_seed",
    "run_comparison",
    "run_train",
    "bias_metric",
    "preset_config",
]


PRESETS: dict[str, dict] = {
    "paper-shape": {
        "name": "paper-shape",
        "mode": "comparison",
        "_doc": "40 clients, cycles (1,5,10,20), T=5, 1000 global rounds, "
        "multiclass logistic stand-in; compares all four policies.",
        "model": {"kind": "logistic", "lam": 0.01, "n_classes": 10},
        "data": {
            "task": "classification",
            "n": 10000,
            "d": 20,
            "n_classes": 10,
            "class_sep": 2.0,
            "data_seed": 2024,
            "test_fraction": 0.2,
        },
        "partition": {
            "kind": "iid",
            "n_clients": 40,
            "groups": [[10, 1], [10, 5], [10, 10], [10, 20]],
        },
        "policies": [
            "paper-uniform-slot",
            "eager-benchmark1",
            "wait-for-all-benchmark2",
            "full-participation",
        ],
        "T": 5,
        "K": 5000,
        "seeds": [0, 1, 2, 3, 4],
        "lr": {"kind": "theorem-decay"},
        "batch_size": 32,
        "snapshot_stride": 200,
    },
    "paper-shape-adam": {
        "name": "paper-shape-adam",
        "mode": "comparison",
        "_doc": "paper-shape with the per-client ADAM optimizer (moment "
        "state persists across participations).",
        "model": {"kind": "logistic", "lam": 0.01, "n_classes": 10},
        "data": {
            "task": "classification",
            "n": 10000,
            "d": 20,
            "n_classes": 10,
            "class_sep": 2.0,
            "data_seed": 2024,
            "test_fraction": 0.2,
        },
        "partition": {
            "kind": "iid",
            "n_clients": 40,
            "groups": [[10, 1], [10, 5], [10, 10], [10, 20]],
        },
        "policies": [
            "paper-uniform-slot",
            "eager-benchmark1",
            "wait-for-all-benchmark2",
            "full-participation",
        ],
        "T": 5,
        "K": 5000,
        "seeds": [0, 1, 2],
        "lr": {"kind": "adam", "base_rate": 0.003},
        "batch_size": 32,
        "snapshot_stride": 200,
    },
    "optimum-skew": {
        "name": "optimum-skew",
        "mode": "comparison",
        "_doc": "Each energy group draws targets from its own linear truth; "
        "the eager benchmark drifts toward the fast group's optimum.",
        "model": {"kind": "quadratic", "lam": 0.001},
        "data": {
            "task": "regression",
            "n": 4000,
            "d": 6,
            "noise": 0.2,
            "group_truth_scale": 1.0,
            "data_seed": 77,
        },
        "partition": {
            "kind": "optimum-skew",
            "n_clients": 40,
            "groups": [[10, 1], [10, 5], [10, 10], [10, 20]],
        },
        "policies": ["paper-uniform-slot", "eager-benchmark1"],
        "T": 5,
        "K": 2000,
        "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        "lr": {"kind": "theorem-decay"},
        "batch_size": 8,
        "snapshot_stride": 100,
    },
    "quick-demo": {
        "name": "quick-demo",
        "mode": "comparison",
        "_doc": "Tiny quadratic comparison that finishes in seconds.",
        "model": {"kind": "quadratic", "lam": 0.05},
        "data": {"task": "regression", "n": 200, "d": 3, "noise": 0.3, "data_seed": 5},
        "partition": {
            "kind": "iid",
            "n_clients": 4,
            "groups": [[1, 1], [1, 2], [1, 2], [1, 4]],
        },
        "policies": ["paper-uniform-slot", "eager-benchmark1", "full-participation"],
        "T": 5,
        "K": 400,
        "seeds": [0, 1],
        "lr": {"kind": "theorem-decay"},
        "batch_size": 8,
        "snapshot_stride": 20,
    },
}


def preset_config(name: str) -> dict:
    if name not in PRESETS:
        raise InvalidArgumentError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        )
    return json.loads(json.dumps(PRESETS[name]))  # deep copy


@dataclass
class Problem:
    """A fully built comparison problem shared by all policies."""

    clients: list[ClientProfile]
    train: Dataset
    test: Dataset | None
    pooled: Dataset
    lr: LearningRateSchedule
    w0: np.ndarray
    w_star: np.ndarray | None
    f_star: float | None
    group_optima: list[np.ndarray] | None


def _resolve_lr(cfg: ExperimentConfig, clients: list[ClientProfile]) -> LearningRateSchedule:
    raw = cfg.lr_raw
    kind = raw["kind"]
    if kind == "constant":
        return LearningRateSchedule(kind="constant", eta=float(raw["eta"]))
    if kind == "adam":
        return LearningRateSchedule(
            kind="adam",
            base_rate=float(raw.get("base_rate", 1e-3)),
            beta1=float(raw.get("beta1", 0.9)),
            beta2=float(raw.get("beta2", 0.999)),
            eps=float(raw.get("eps", 1e-8)),
            reset_per_round=bool(raw.get("reset_per_round", False)),
        )
    if "mu" in raw and "gamma" in raw:
        return LearningRateSchedule(
            kind="theorem-decay", mu=float(raw["mu"]), gamma=float(raw["gamma"])
        )
    consts = estimate_constants(
        cfg.model,
        [c.data for c in clients],
        [np.zeros(cfg.model.param_dim)],
        cfg.batch_size,
    )
    return theorem_decay_schedule(consts.mu, consts.L, cfg.T)


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Generate, split and partition data; compute reference optima."""
    data_spec = cfg.data_spec
    if cfg.partition_spec.kind == "optimum-skew" and data_spec.group_w_true is None:
        gen = RngStream(cfg.data_seed, ("truths",)).generator
        truths = cfg.group_truth_scale * gen.standard_normal(
            (cfg.partition_spec.n_groups, data_spec.d)
        )
        data_spec = replace(data_spec, group_w_true=tuple(map(tuple, truths)))
    full = generate_synthetic(data_spec, RngStream(cfg.data_seed, ("data",)))
    test = None
    train = full
    if cfg.test_fraction > 0:
        train, test = split_train_test(full, cfg.test_fraction, RngStream(cfg.data_seed, ("split",)))
    clients = partition(train, cfg.partition_spec, RngStream(cfg.data_seed, ("partition",)))
    pooled = pooled_dataset(clients)
    lr = _resolve_lr(cfg, clients)
    if cfg.w0_kind == "zeros":
        w0 = np.zeros(cfg.model.param_dim)
    else:
        w0 = init_params(cfg.model, RngStream(cfg.data_seed, ("init",)), cfg.w0_scale)
    w_star = None
    f_star = None
    if cfg.model.kind == "quadratic" or (cfg.model.kind == "logistic" and cfg.model.lam > 0):
        w_star = closed_form_optimum(cfg.model, pooled)
        f_star = loss(cfg.model, w_star, pooled)
    group_optima = None
    if cfg.partition_spec.kind == "optimum-skew":
        group_optima = []
        for g in range(cfg.partition_spec.n_groups):
            members = [c for c in clients if c.client_id % cfg.partition_spec.n_groups == g]
            group_optima.append(closed_form_optimum(cfg.model, pooled_dataset(members)))
    return Problem(
        clients=clients,
        train=train,
        test=test,
        pooled=pooled,
        lr=lr,
        w0=w0,
        w_star=w_star,
        f_star=f_star,
        group_optima=group_optima,
    )


def run_policy_seed(
    cfg: ExperimentConfig,
    policy: str,
    seed: int,
    problem: Problem | None = None,
    jobs: int = 1,
) -> list[RoundLog]:
    """One full training run of `policy` under master seed `seed`."""
    if problem is None:
        problem = build_problem(cfg)
    train_cfg = TrainConfig(
        model=cfg.model,
        clients=problem.clients,
        policy_kind=policy,
        T=cfg.T,
        K=cfg.K,
        lr=problem.lr,
        seed=seed,
        w0=problem.w0,
        batch_size=cfg.batch_size,
        f_star=problem.f_star,
        test_data=problem.test,
        snapshot_stride=cfg.snapshot_stride,
        jobs=jobs,
        validate_epochs=not (cfg.allow_ragged or cfg.stagger_epochs),
        stagger_epochs=cfg.stagger_epochs,
    )
    return run(train_cfg)


def _comparison_task(raw_cfg: dict, policy: str, seed: int) -> tuple:
    cfg = parse_experiment_config(raw_cfg)
    problem = build_problem(cfg)
    logs = run_policy_seed(cfg, policy, seed, problem=problem)
    rows = [
        (log.round_start, log.global_loss, log.optimality_gap, log.accuracy)
        for log in logs
    ]
    return policy, seed, rows, logs[-1].model.tolist()


def bias_metric(final_model, pooled_opt, group_opts: list) -> dict:
    """Distance to the pooled optimum minus distance to the nearest group optimum."""
    w = as_model_vector(final_model)
    pooled = as_model_vector(pooled_opt)
    if w.shape != pooled.shape:
        raise InvalidArgumentError("model and optimum dimensions differ")
    dist_pooled = float(np.linalg.norm(w - pooled))
    dist_groups = []
    for g in group_opts:
        g = as_model_vector(g)
        if g.shape != w.shape:
            raise InvalidArgumentError("group optimum dimension differs")
        dist_groups.append(float(np.linalg.norm(w - g)))
    return {
        "distance_pooled": dist_pooled,
        "distance_groups": dist_groups,
        "bias_score": dist_pooled - min(dist_groups),
    }


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


def run_comparison(cfg: ExperimentConfig, jobs: int = 1, out_dir: str | None = None) -> dict:
    """Run every (policy, seed) pair on identical data; emit curves and a table."""
    if cfg.mode != "comparison":
        raise InvalidArgumentError("config mode must be 'comparison'")
    problem = build_problem(cfg)
    tasks = [(policy, seed) for policy in cfg.policies for seed in cfg.seeds]
    results: dict[tuple[str, int], tuple] = {}
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_comparison_task, cfg.raw, policy, seed)
                for policy, seed in tasks
            ]
            for fut in futures:
                policy, seed, rows, final = fut.result()
                results[(policy, seed)] = (rows, final)
    else:
        for policy, seed in tasks:
            _, _, rows, final = _comparison_task(cfg.raw, policy, seed)
            results[(policy, seed)] = (rows, final)

    summary: dict = {
        "name": cfg.name,
        "config_hash": config_hash(cfg.raw),
        "seeds": list(cfg.seeds),
        "policies": list(cfg.policies),
        "T": cfg.T,
        "K": cfg.K,
        "table": {},
    }
    curves: dict[str, dict] = {}
    for policy in cfg.policies:
        per_seed = [results[(policy, seed)][0] for seed in cfg.seeds]
        rounds = [row[0] for row in per_seed[0]]
        losses = np.array([[row[1] for row in rows] for rows in per_seed])
        curves[policy] = {"round": rounds, "loss_mean": losses.mean(0), "loss_std": losses.std(0)}
        gaps = None
        if per_seed[0][0][2] is not None:
            gaps = np.array([[row[2] for row in rows] for rows in per_seed])
            curves[policy]["gap_mean"] = gaps.mean(0)
            curves[policy]["gap_std"] = gaps.std(0)
        accs = None
        if per_seed[0][0][3] is not None:
            accs = np.array([[row[3] for row in rows] for rows in per_seed])
            curves[policy]["acc_mean"] = accs.mean(0)
            curves[policy]["acc_std"] = accs.std(0)
        entry: dict = {}
        entry["final_loss_mean"], entry["final_loss_std"] = _mean_std(losses[:, -1].tolist())
        if gaps is not None:
            entry["final_gap_mean"], entry["final_gap_std"] = _mean_std(gaps[:, -1].tolist())
        if accs is not None:
            entry["final_acc_mean"], entry["final_acc_std"] = _mean_std(accs[:, -1].tolist())
        if problem.group_optima is not None and problem.w_star is not None:
            scores = [
                bias_metric(
                    np.asarray(results[(policy, seed)][1]),
                    problem.w_star,
                    problem.group_optima,
                )
                for seed in cfg.seeds
            ]
            entry["bias_score_mean"], entry["bias_score_std"] = _mean_std(
                [s["bias_score"] for s in scores]
            )
            entry["distance_pooled_mean"], _ = _mean_std(
                [s["distance_pooled"] for s in scores]
            )
        summary["table"][policy] = entry

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        written = []
        for policy, cv in curves.items():
            path = os.path.join(out_dir, f"curves_{policy}.csv")
            _write_curve_csv(path, cv)
            written.append(os.path.basename(path))
        dat_path = os.path.join(out_dir, "curves.dat")
        _write_gnuplot_dat(dat_path, cfg.policies, curves)
        written.append(os.path.basename(dat_path))
        summary_path = os.path.join(out_dir, "summary.json")
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        written.append(os.path.basename(summary_path))
        summary["outputs"] = written
    return summary


def run_train(cfg: ExperimentConfig, out_dir: str, jobs: int = 1) -> dict:
    """Single-policy training run with full artifact export."""
    if cfg.mode != "train":
        raise InvalidArgumentError("config mode must be 'train'")
    from .data import export_dataset, export_model_vector
    from .fedtrain import export_round_logs
    from .scheduling import ParticipationTable, make_policy

    problem = build_problem(cfg)
    policy_kind = cfg.policies[0]
    seed = cfg.seeds[0]
    logs = run_policy_seed(cfg, policy_kind, seed, problem=problem, jobs=jobs)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    log_path = os.path.join(out_dir, "roundlog.csv")
    export_round_logs(logs, policy_kind, log_path)
    written.append("roundlog.csv")

    model_path = os.path.join(out_dir, "final_model.txt")
    export_model_vector(logs[-1].model, model_path, seed=seed)
    written.append("final_model.txt")

    indicators = np.zeros((len(logs), len(problem.clients)), dtype=np.uint8)
    for r, log in enumerate(logs):
        for cid in log.participants:
            indicators[r, cid] = 1
    policy = make_policy(policy_kind, seed, cfg.T, stagger=cfg.stagger_epochs)
    offsets = None
    if cfg.stagger_epochs and policy_kind == "paper-uniform-slot":
        offsets = tuple(policy.start_offset(c) for c in problem.clients)
    table = ParticipationTable(
        indicators=indicators,
        T=cfg.T,
        cycles=tuple(policy.effective_cycle(c) for c in problem.clients),
        offsets=offsets,
    )
    table.check_energy_feasibility()
    part_path = os.path.join(out_dir, "participation.csv")
    table.to_csv(part_path)
    written.append("participation.csv")

    if cfg.export_data:
        data_path = os.path.join(out_dir, "data.txt")
        export_dataset(problem.train, data_path, seed=cfg.data_seed)
        written.append("data.txt")

    return {
        "name": cfg.name,
        "config_hash": config_hash(cfg.raw),
        "policy": policy_kind,
        "seed": seed,
        "final_loss": logs[-1].global_loss,
        "final_gap": logs[-1].optimality_gap,
        "final_accuracy": logs[-1].accuracy,
        "outputs": written,
    }


def _write_curve_csv(path: str, curve: dict) -> None:
    cols = ["round_t", "loss_mean", "loss_std"]
    has_gap = "gap_mean" in curve
    has_acc = "acc_mean" in curve
    if has_gap:
        cols += ["gap_mean", "gap_std"]
    if has_acc:
        cols += ["acc_mean", "acc_std"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for i, r in enumerate(curve["round"]):
            row = [str(r), repr(float(curve["loss_mean"][i])), repr(float(curve["loss_std"][i]))]
            if has_gap:
                row += [repr(float(curve["gap_mean"][i])), repr(float(curve["gap_std"][i]))]
            if has_acc:
                row += [repr(float(curve["acc_mean"][i])), repr(float(curve["acc_std"][i]))]
            fh.write(",".join(row) + "\n")


def _write_gnuplot_dat(path: str, policies: list[str], curves: dict) -> None:
    metric = "gap_mean" if all("gap_mean" in curves[p] for p in policies) else "loss_mean"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# round_t " + " ".join(f"{p}:{metric}" for p in policies) + "\n")
        rounds = curves[policies[0]]["round"]
        for i, r in enumerate(rounds):
            vals = " ".join(repr(float(curves[p][metric][i])) for p in policies)
            fh.write(f"{r} {vals}\n")
