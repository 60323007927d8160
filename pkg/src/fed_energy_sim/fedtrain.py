"""Training orchestrator: local SGD, update scaling, aggregation, logging.

The per-round flow: broadcast the global model, let the policy pick the
participant set, run T local SGD iterations at each participant, then
aggregate.  The energy-aware policy aggregates scaled deltas
E_i * (w_i - w) added to the previous global model; the benchmark
policies aggregate full local models with absentees contributing the
previous global model.

Minibatch draws are keyed by (seed, "minibatch", client, round), so a
client's draws for a given round are identical whether or not any other
client trains -- this is what makes the all-clients-train shadow
execution in `analysis` replay participants bit-for-bit.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (
    InvalidArgumentError,
    ModelVector,
    RngStream,
    RoundClock,
    as_model_vector,
    check_same_dim,
    ensure_finite,
)
from .data import ClientProfile
from .models import (
    Dataset,
    LossModel,
    MinibatchSample,
    accuracy,
    loss,
    stochastic_gradient,
)
from .scheduling import SchedulePolicy, make_policy

__all__ = [
    "LearningRateSchedule",
    "theorem_decay_schedule",
    "AdamState",
    "RoundLog",
    "TrainConfig",
    "DivergedRunError",
    "local_train",
    "local_train_path",
    "make_local_update",
    "aggregate_paper",
    "aggregate_fedavg",
    "global_loss",
    "minibatch_plan",
    "run",
    "export_round_logs",
]


class DivergedRunError(RuntimeError):
    """Local training produced a non-finite model."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"model diverged at iteration {iteration}")


@dataclass(frozen=True)
class LearningRateSchedule:
    """Step-size rule indexed by the global iteration counter.

    theorem-decay uses eta_t = 2 / (mu * (gamma + t)); gamma >= T keeps
    the decreasing-rate premise eta_t <= 2 * eta_{t+T} valid for all t.
    """

    kind: str
    mu: float = 0.0
    gamma: float = 0.0
    eta: float = 0.0
    base_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reset_per_round: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("theorem-decay", "constant", "adam"):
            raise InvalidArgumentError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "theorem-decay" and (self.mu <= 0 or self.gamma <= 0):
            raise InvalidArgumentError("theorem-decay needs mu > 0 and gamma > 0")
        if self.kind == "constant" and self.eta < 0:
            raise InvalidArgumentError("constant schedule needs eta >= 0")
        if self.kind == "adam" and self.base_rate <= 0:
            raise InvalidArgumentError("adam needs base_rate > 0")

    def rate(self, t: int) -> float:
        if self.kind == "theorem-decay":
            return 2.0 / (self.mu * (self.gamma + t))
        if self.kind == "constant":
            return self.eta
        raise InvalidArgumentError("adam has no scalar rate; use the adam path")

    def rates(self, t0: int, n_steps: int) -> np.ndarray:
        return np.array([self.rate(t0 + j) for j in range(n_steps)])


def theorem_decay_schedule(mu: float, L: float, T: int) -> LearningRateSchedule:
    """The convergence-theorem schedule: gamma = max(8 * L / mu, T)."""
    if mu <= 0 or L <= 0:
        raise InvalidArgumentError("mu and L must be positive")
    return LearningRateSchedule(
        kind="theorem-decay", mu=mu, gamma=max(8.0 * L / mu, float(T))
    )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def fresh(cls, dim: int) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim))


@dataclass
class RoundLog:
    """One record per synchronization step (post-aggregation state)."""

    round_start: int
    participants: tuple
    model_hash: str
    global_loss: float
    accuracy: float | None = None
    optimality_gap: float | None = None
    model: np.ndarray | None = field(default=None, compare=False)
    wall_time: float = field(default=0.0, compare=False)


def minibatch_plan(rng: RngStream, n: int, batch_size: int, n_steps: int) -> np.ndarray:
    """Without-replacement batch indices for n_steps, shape (n_steps, b)."""
    if n < 1:
        raise InvalidArgumentError("dataset is empty")
    b = min(batch_size, n)
    gen = rng.generator
    return np.stack([gen.choice(n, size=b, replace=False) for _ in range(n_steps)])


def _hash_model(w: np.ndarray) -> str:
    return hashlib.sha256(w.tobytes()).hexdigest()[:16]


def _sgd_steps_python(
    model: LossModel,
    data: Dataset,
    w: np.ndarray,
    idx: np.ndarray,
    lr: LearningRateSchedule,
    t0: int,
    adam_state: AdamState | None,
    collect_path: list | None = None,
) -> np.ndarray:
    for j in range(idx.shape[0]):
        if collect_path is not None:
            collect_path.append(w.copy())
        g = stochastic_gradient(model, w, data, MinibatchSample(idx[j]))
        if lr.kind == "adam":
            st = adam_state
            st.count += 1
            st.m = lr.beta1 * st.m + (1.0 - lr.beta1) * g
            st.v = lr.beta2 * st.v + (1.0 - lr.beta2) * g * g
            m_hat = st.m / (1.0 - lr.beta1**st.count)
            v_hat = st.v / (1.0 - lr.beta2**st.count)
            w = w - lr.base_rate * m_hat / (np.sqrt(v_hat) + lr.eps)
        else:
            w = w - lr.rate(t0 + j) * g
        if not np.all(np.isfinite(w)):
            raise DivergedRunError(t0 + j)
    return w


def local_train(
    model: LossModel,
    client: ClientProfile,
    w_global,
    T: int,
    lr: LearningRateSchedule,
    t0: int,
    rng: RngStream,
    batch_size: int = 32,
    adam_state: AdamState | None = None,
) -> ModelVector:
    """T local SGD iterations from the broadcast global model.

    Step j uses the rate at global iteration t0 + j.  Raises
    DivergedRunError (carrying the failing iteration) on non-finite
    intermediates.
    """
    w0 = ensure_finite(as_model_vector(w_global), "broadcast model")
    idx = minibatch_plan(rng, len(client.data), batch_size, T)
    if lr.kind == "adam":
        if adam_state is None:
            adam_state = AdamState.fresh(w0.size)
        return _sgd_steps_python(model, client.data, w0, idx, lr, t0, adam_state)
    eta = lr.rates(t0, T)
    X = np.ascontiguousarray(client.data.features)
    if model.kind == "quadratic":
        w, bad = kernels.sgd_quadratic(
            X, np.ascontiguousarray(client.data.targets), w0, idx, eta, model.lam
        )
    elif model.kind == "logistic":
        w, bad = kernels.sgd_logistic(
            X,
            np.ascontiguousarray(client.data.targets, dtype=np.int64),
            w0,
            idx,
            eta,
            model.lam,
            model.n_classes,
        )
    else:
        return _sgd_steps_python(model, client.data, w0, idx, lr, t0, None)
    if bad >= 0:
        raise DivergedRunError(t0 + bad)
    return w


def local_train_path(
    model: LossModel,
    client: ClientProfile,
    w_global,
    T: int,
    lr: LearningRateSchedule,
    t0: int,
    rng: RngStream,
    batch_size: int = 32,
) -> tuple[ModelVector, list[np.ndarray]]:
    """Like `local_train` (SGD kinds) but also returns the visited points.

    Replays the same keyed minibatch draws through the generic Python
    loop; used by the analysis module to sample gradient moments along
    real trajectories.
    """
    if lr.kind == "adam":
        raise InvalidArgumentError("trajectory replay is for SGD schedules")
    w0 = ensure_finite(as_model_vector(w_global), "broadcast model")
    idx = minibatch_plan(rng, len(client.data), batch_size, T)
    path: list[np.ndarray] = []
    w = _sgd_steps_python(model, client.data, w0, idx, lr, t0, None, collect_path=path)
    return w, path


def make_local_update(
    client: ClientProfile, w_local_final, w_round_start
) -> ModelVector:
    """The scaled delta g_i = E_i * (local final - round start)."""
    wf = as_model_vector(w_local_final)
    ws = as_model_vector(w_round_start)
    check_same_dim(wf, ws, "local update operands")
    return client.cycle * (wf - ws)


def aggregate_paper(
    w_prev, updates: dict[int, np.ndarray], weights: dict[int, float]
) -> ModelVector:
    """Server rule for the energy-aware policy: w + sum_i p_i * g_i."""
    w = as_model_vector(w_prev).copy()
    for cid in sorted(updates):
        g = as_model_vector(updates[cid])
        check_same_dim(w, g, f"update from client {cid}")
        w += weights[cid] * g
    return w


def aggregate_fedavg(
    w_locals: dict[int, np.ndarray],
    weights: dict[int, float],
    w_prev,
    participants: set[int],
) -> ModelVector:
    """Weighted average of local models, absentees holding the old model."""
    wp = as_model_vector(w_prev)
    out = np.zeros_like(wp)
    for cid in sorted(weights):
        if cid in participants:
            wi = as_model_vector(w_locals[cid])
            check_same_dim(wp, wi, f"local model of client {cid}")
        else:
            wi = wp
        out += weights[cid] * wi
    return out


def global_loss(model: LossModel, clients: list[ClientProfile], w) -> float:
    """The p_i-weighted global objective (summation order fixed by id)."""
    return sum(
        c.weight * loss(model, w, c.data)
        for c in sorted(clients, key=lambda c: c.client_id)
    )


@dataclass
class TrainConfig:
    model: LossModel
    clients: list[ClientProfile]
    policy_kind: str
    T: int
    K: int
    lr: LearningRateSchedule
    seed: int
    w0: np.ndarray
    batch_size: int = 32
    f_star: float | None = None
    test_data: Dataset | None = None
    snapshot_stride: int = 10
    jobs: int = 1
    validate_epochs: bool = True
    stagger_epochs: bool = False


def _validate_config(cfg: TrainConfig) -> RoundClock:
    clock = RoundClock(cfg.T, cfg.K)
    if cfg.lr.kind == "theorem-decay" and cfg.lr.gamma < cfg.T:
        raise InvalidArgumentError(
            f"theorem-decay gamma={cfg.lr.gamma} must be >= T={cfg.T} "
            "to keep eta_t <= 2 * eta_(t+T)"
        )
    if cfg.validate_epochs:
        n_rounds = clock.n_rounds
        for c in cfg.clients:
            if n_rounds % c.cycle != 0:
                raise InvalidArgumentError(
                    f"K/(T*E_i) must be a positive integer; client {c.client_id} "
                    f"has E_i={c.cycle} with K/T={n_rounds} rounds "
                    "(pass allow_ragged_epochs to truncate the final epoch)"
                )
    ids = [c.client_id for c in cfg.clients]
    if ids != list(range(len(cfg.clients))):
        raise InvalidArgumentError("client ids must be 0..N-1 in order")
    return clock


def run_single_round(
    model: LossModel,
    clients: list[ClientProfile],
    weights: dict[int, float],
    w: np.ndarray,
    round_index: int,
    T: int,
    lr: LearningRateSchedule,
    seed: int,
    batch_size: int,
    participants: list[int],
    aggregation: str,
    adam_states: dict[int, AdamState] | None = None,
    jobs: int = 1,
) -> ModelVector:
    """One global round: local training at `participants`, then aggregate."""
    t0 = round_index * T

    def train_one(cid: int) -> tuple[int, np.ndarray]:
        rng = RngStream(seed, ("minibatch", cid, round_index))
        state = adam_states.get(cid) if adam_states is not None else None
        return cid, local_train(
            model, clients[cid], w, T, lr, t0, rng, batch_size, adam_state=state
        )

    ordered = sorted(participants)
    if jobs > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            locals_ = dict(pool.map(train_one, ordered))
    else:
        locals_ = dict(train_one(cid) for cid in ordered)

    if aggregation == "paper":
        updates = {
            cid: make_local_update(clients[cid], locals_[cid], w) for cid in ordered
        }
        return aggregate_paper(w, updates, weights)
    return aggregate_fedavg(locals_, weights, w, set(ordered))


def run(cfg: TrainConfig, policy: SchedulePolicy | None = None) -> list[RoundLog]:
    """Execute the full training loop, one RoundLog per sync step."""
    clock = _validate_config(cfg)
    if policy is None:
        policy = make_policy(cfg.policy_kind, cfg.seed, cfg.T, stagger=cfg.stagger_epochs)
    weights = {c.client_id: c.weight for c in cfg.clients}
    w = ensure_finite(as_model_vector(cfg.w0), "initial model").copy()
    if w.size != cfg.model.param_dim:
        raise InvalidArgumentError(
            f"w0 has length {w.size}, model expects {cfg.model.param_dim}"
        )
    adam_states: dict[int, AdamState] | None = None
    if cfg.lr.kind == "adam":
        adam_states = {}
    logs: list[RoundLog] = []
    for r in range(clock.n_rounds):
        started = time.perf_counter()
        participants = policy.participants(cfg.clients, r)
        if adam_states is not None:
            for cid in participants:
                if cfg.lr.reset_per_round or cid not in adam_states:
                    adam_states[cid] = AdamState.fresh(w.size)
        try:
            w = run_single_round(
                cfg.model,
                cfg.clients,
                weights,
                w,
                r,
                cfg.T,
                cfg.lr,
                cfg.seed,
                cfg.batch_size,
                participants,
                policy.aggregation,
                adam_states=adam_states,
                jobs=cfg.jobs,
            )
        except DivergedRunError as err:
            raise DivergedRunError(
                err.iteration,
                f"diverged during round {r} (iteration {err.iteration})",
            ) from None
        f_val = global_loss(cfg.model, cfg.clients, w)
        if not np.isfinite(f_val):
            raise DivergedRunError(r * cfg.T, f"non-finite global loss in round {r}")
        acc = None
        if cfg.test_data is not None and cfg.model.kind != "quadratic":
            acc = accuracy(cfg.model, w, cfg.test_data)
        gap = None if cfg.f_star is None else f_val - cfg.f_star
        snapshot = None
        if r % max(1, cfg.snapshot_stride) == 0 or r == clock.n_rounds - 1:
            snapshot = w.copy()
        logs.append(
            RoundLog(
                round_start=r * cfg.T,
                participants=tuple(sorted(participants)),
                model_hash=_hash_model(w),
                global_loss=f_val,
                accuracy=acc,
                optimality_gap=gap,
                model=snapshot,
                wall_time=time.perf_counter() - started,
            )
        )
    return logs


def export_round_logs(logs: list[RoundLog], policy_kind: str, path: str) -> None:
    """CSV export: one row per sync step."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("round_t,policy,participants,global_loss,accuracy,optimality_gap\n")
        for log in logs:
            acc = "" if log.accuracy is None else repr(log.accuracy)
            gap = "" if log.optimality_gap is None else repr(log.optimality_gap)
            ids = ";".join(str(i) for i in log.participants)
            fh.write(
                f"{log.round_start},{policy_kind},{ids},"
                f"{repr(log.global_loss)},{acc},{gap}\n"
            )
