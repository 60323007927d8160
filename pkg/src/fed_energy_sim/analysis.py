"""Numerical verification of the scheduling lemmas and the convergence bound.

The verifications run on small strongly convex instances where every
piece of the theory is computable:

* unbiasedness -- enumerate the joint slot draws of all clients with
  their exact probabilities (product of 1/E_i) and compare the schedule
  expectation of the realized aggregate against the all-clients virtual
  average, with minibatch draws frozen across branches via the keyed
  RNG streams.
* aggregate variance -- Monte Carlo over slot and minibatch draws at a
  tested sync step, compared against 4 * E_max^2 * G^2 * eta^2 * T^2
  with G^2 measured along the actually visited trajectory points.
* convergence bound -- run the energy-aware policy over seeds on a
  quadratic instance, feed empirical constants into the O(1/K) bound,
  and fit the tail decay rate of the optimality gap.

Checks are tested at energy-epoch-aligned sync steps (every client at an
epoch boundary), where the conditional slot distribution is the clean
product of uniforms.  mu and L are analytic; sigma2 and G2 are empirical
maxima over logged sample points (the minibatch expectation itself is an
exact enumeration, see `models.batch_second_moment`).  sigma2 follows
the convention of measuring stochastic-gradient deviation from the full
gradient at the round-start point.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .core import InvalidArgumentError, ModelVector, RngStream, as_model_vector
from .data import ClientProfile, pooled_dataset
from .fedtrain import (
    LearningRateSchedule,
    RoundLog,
    aggregate_paper,
    global_loss,
    local_train,
    local_train_path,
    make_local_update,
    run_single_round,
    theorem_decay_schedule,
)
from .models import (
    Dataset,
    LossModel,
    batch_second_moment,
    closed_form_optimum,
    estimate_constants,
    gradient,
    loss,
    loss_on_batch,
    stochastic_gradient,
    MinibatchSample,
)
from .scheduling import UniformSlotPolicy

__all__ = [
    "UnsupportedConfigurationError",
    "VirtualSequences",
    "BoundInputs",
    "AnalysisInstance",
    "shadow_round",
    "verify_lemma1",
    "verify_lemma1_suite",
    "verify_lemma2",
    "verify_lemma2_suite",
    "compute_gamma",
    "theorem_bound",
    "verify_theorem_shape",
    "rate_fit",
    "verify_gradients",
    "verify_schedule_marginals",
    "random_small_instance",
    "random_lemma2_instance",
    "theorem_instance",
]


class UnsupportedConfigurationError(InvalidArgumentError):
    """The verification premises exclude this configuration."""


@dataclass(frozen=True)
class VirtualSequences:
    """All-clients-train averages at a sync step.

    v_bar is the p-weighted average of every client's T-step local
    result; w_bar is the realized global model (all clients hold it
    after the broadcast, so the p-weighted average is the model itself).
    """

    v_bar: ModelVector
    w_bar: ModelVector
    v_locals: dict[int, ModelVector] = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class AnalysisInstance:
    """A self-contained small training problem for verification runs."""

    model: LossModel
    clients: list[ClientProfile]
    w0: np.ndarray
    T: int
    lr: LearningRateSchedule
    seed: int
    batch_size: int
    label: str = ""

    @property
    def cycles(self) -> list[int]:
        return [c.cycle for c in self.clients]

    @property
    def weights(self) -> dict[int, float]:
        return {c.client_id: c.weight for c in self.clients}

    def describe(self) -> dict:
        return {
            "label": self.label,
            "model": {
                "kind": self.model.kind,
                "n_features": self.model.n_features,
                "lam": self.model.lam,
                "n_classes": self.model.n_classes,
            },
            "n_clients": len(self.clients),
            "cycles": self.cycles,
            "sizes": [len(c.data) for c in self.clients],
            "T": self.T,
            "lr_kind": self.lr.kind,
            "seed": self.seed,
            "batch_size": self.batch_size,
        }


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _report(
    check: str,
    instance_payload: dict,
    mode: str,
    statistic: float,
    bound: float,
    passed: bool,
    details: dict,
) -> dict:
    return {
        "check": check,
        "instance_config_hash": _config_hash(instance_payload),
        "mode": mode,
        "statistic": statistic,
        "bound": bound,
        "slack": bound - statistic,
        "pass": bool(passed),
        "details": details,
    }


def _require_sgd_convex(model: LossModel, lr: LearningRateSchedule, what: str) -> None:
    if lr.kind == "adam":
        raise UnsupportedConfigurationError(f"{what} requires plain SGD, not adam")
    if not model.convex:
        raise UnsupportedConfigurationError(f"{what} requires a strongly convex model")


def shadow_round(
    model: LossModel,
    clients: list[ClientProfile],
    w_start,
    round_index: int,
    T: int,
    lr: LearningRateSchedule,
    seed: int,
    batch_size: int,
    participants: list[int],
) -> VirtualSequences:
    """All clients train from w_start; only `participants` update the model.

    Minibatch streams are the same keyed streams the real run uses, so
    the realized w_bar equals the real run's post-round global model
    bit-for-bit.
    """
    _require_sgd_convex(model, lr, "shadow_round")
    w_start = as_model_vector(w_start)
    weights = {c.client_id: c.weight for c in clients}
    t0 = round_index * T
    v_locals: dict[int, np.ndarray] = {}
    for c in clients:
        rng = RngStream(seed, ("minibatch", c.client_id, round_index))
        v_locals[c.client_id] = local_train(
            model, c, w_start, T, lr, t0, rng, batch_size
        )
    v_bar = np.zeros_like(w_start)
    for cid in sorted(v_locals):
        v_bar += weights[cid] * v_locals[cid]
    updates = {
        cid: make_local_update(clients[cid], v_locals[cid], w_start)
        for cid in sorted(participants)
    }
    w_bar = aggregate_paper(w_start, updates, weights)
    return VirtualSequences(v_bar=v_bar, w_bar=w_bar, v_locals=v_locals)


def _advance_rounds(
    inst: AnalysisInstance, w: np.ndarray, start_round: int, end_round: int
) -> np.ndarray:
    """Advance the real training state with the instance's own policy."""
    policy = UniformSlotPolicy(inst.seed, inst.T)
    weights = inst.weights
    for r in range(start_round, end_round):
        participants = policy.participants(inst.clients, r)
        w = run_single_round(
            inst.model,
            inst.clients,
            weights,
            w,
            r,
            inst.T,
            inst.lr,
            inst.seed,
            inst.batch_size,
            participants,
            aggregation="paper",
        )
    return w


def _aligned_rounds(inst: AnalysisInstance) -> list[int]:
    # Test at the start of the run and one full joint epoch later.
    return [0, math.lcm(*inst.cycles)]


def verify_lemma1(
    inst: AnalysisInstance,
    mode: str = "exhaustive",
    trials: int = 20000,
    tested_rounds: list[int] | None = None,
    tolerance: float = 1e-10,
) -> dict:
    """Schedule-expectation of the realized aggregate equals v_bar.

    Exhaustive mode enumerates every joint slot assignment with its
    exact probability (requires a joint support of at most 256); Monte
    Carlo mode samples assignments and checks each coordinate within 4
    standard errors.
    """
    _require_sgd_convex(inst.model, inst.lr, "lemma-1 verification")
    cycles = inst.cycles
    support = int(np.prod(cycles))
    if mode == "exhaustive" and support > 256:
        raise InvalidArgumentError(
            f"joint slot support {support} exceeds 256; use Monte Carlo mode"
        )
    if tested_rounds is None:
        tested_rounds = _aligned_rounds(inst)
    weights = inst.weights
    details: dict = {"rounds": []}
    worst = 0.0
    passed = True
    w = as_model_vector(inst.w0).copy()
    prev_round = 0
    for r0 in tested_rounds:
        if any(r0 % e for e in cycles):
            raise InvalidArgumentError(
                f"round {r0} is not epoch-aligned for cycles {cycles}"
            )
        w = _advance_rounds(inst, w, prev_round, r0)
        prev_round = r0
        shade = shadow_round(
            inst.model, inst.clients, w, r0, inst.T, inst.lr, inst.seed,
            inst.batch_size, participants=[],
        )
        v_bar = shade.v_bar
        updates_all = {
            c.client_id: make_local_update(c, shade.v_locals[c.client_id], w)
            for c in inst.clients
        }
        if mode == "exhaustive":
            mean_w = np.zeros_like(w)
            prob = 1.0 / support
            for joint in product(*[range(e) for e in cycles]):
                # At an aligned boundary a client joins this round iff its
                # freshly drawn slot is 0.
                sel = {
                    cid: updates_all[cid]
                    for cid, j in zip(sorted(updates_all), joint)
                    if j == 0
                }
                mean_w += prob * aggregate_paper(w, sel, weights)
            diff = float(np.max(np.abs(mean_w - v_bar)))
            ok = diff < tolerance
            stat = diff
        else:
            samples = np.empty((trials, w.size))
            for trial in range(trials):
                sel = {}
                for c in inst.clients:
                    stream = RngStream(inst.seed, ("lemma1-mc", r0, trial, c.client_id))
                    if int(stream.generator.integers(0, c.cycle)) == 0:
                        sel[c.client_id] = updates_all[c.client_id]
                samples[trial] = aggregate_paper(w, sel, weights)
            mean_w = samples.mean(axis=0)
            se = samples.std(axis=0, ddof=1) / np.sqrt(trials)
            dev = np.abs(mean_w - v_bar)
            ok = bool(np.all(dev <= 4.0 * se + 1e-12))
            stat = float(np.max(np.where(se > 0, dev / np.maximum(se, 1e-300), 0.0)))
        passed = passed and ok
        worst = max(worst, stat)
        details["rounds"].append({"round": r0, "statistic": stat, "pass": ok})
    bound = tolerance if mode == "exhaustive" else 4.0
    return _report(
        "lemma1", inst.describe(), mode, worst, bound, passed, details
    )


def verify_lemma2(
    inst: AnalysisInstance,
    trials: int = 2000,
    tested_rounds: list[int] | None = None,
    pilot: int = 200,
) -> dict:
    """Monte Carlo E||v_bar - w_bar||^2 against 4 E_max^2 G^2 eta^2 T^2.

    Requires the decreasing theorem schedule (eta_t <= 2 eta_{t+T}).  The
    squared rate is taken at the last iteration of the tested round, the
    form the variance argument supports.  G^2 is the max exact batch
    second moment over the points visited by the first `pilot` trials.
    """
    if inst.lr.kind != "theorem-decay":
        raise UnsupportedConfigurationError(
            "lemma-2 verification requires the theorem-decay schedule "
            f"(got {inst.lr.kind})"
        )
    _require_sgd_convex(inst.model, inst.lr, "lemma-2 verification")
    if trials < 10:
        raise InvalidArgumentError("need at least 10 trials")
    if tested_rounds is None:
        tested_rounds = _aligned_rounds(inst)
    weights = inst.weights
    e_max = max(inst.cycles)
    details: dict = {"rounds": [], "trials": trials, "pilot": min(pilot, trials)}
    worst_ratio = 0.0
    passed = True
    w = as_model_vector(inst.w0).copy()
    prev_round = 0
    for r0 in tested_rounds:
        if any(r0 % e for e in inst.cycles):
            raise InvalidArgumentError(
                f"round {r0} is not epoch-aligned for cycles {inst.cycles}"
            )
        w = _advance_rounds(inst, w, prev_round, r0)
        prev_round = r0
        t0 = r0 * inst.T
        sq_norms = np.empty(trials)
        g2 = 0.0
        for trial in range(trials):
            v_locals = {}
            collect = trial < pilot
            for c in inst.clients:
                mb = RngStream(inst.seed, ("lemma2", r0, trial, "mb", c.client_id))
                if collect:
                    vk, path = local_train_path(
                        inst.model, c, w, inst.T, inst.lr, t0, mb, inst.batch_size
                    )
                    for point in path:
                        g2 = max(
                            g2,
                            batch_second_moment(
                                inst.model, point, c.data, inst.batch_size
                            ),
                        )
                else:
                    vk = local_train(
                        inst.model, c, w, inst.T, inst.lr, t0, mb, inst.batch_size
                    )
                v_locals[c.client_id] = vk
            v_bar = np.zeros_like(w)
            for cid in sorted(v_locals):
                v_bar += weights[cid] * v_locals[cid]
            sel = {}
            for c in inst.clients:
                sched = RngStream(inst.seed, ("lemma2", r0, trial, "sched", c.client_id))
                if int(sched.generator.integers(0, c.cycle)) == 0:
                    sel[c.client_id] = make_local_update(c, v_locals[c.client_id], w)
            w_bar = aggregate_paper(w, sel, weights)
            diff = v_bar - w_bar
            sq_norms[trial] = float(diff @ diff)
        estimate = float(sq_norms.mean())
        se = float(sq_norms.std(ddof=1) / np.sqrt(trials))
        eta_last = inst.lr.rate(t0 + inst.T - 1)
        rhs = 4.0 * e_max**2 * g2 * eta_last**2 * inst.T**2
        ratio = (estimate + 4.0 * se) / rhs if rhs > 0 else (0.0 if estimate == 0 else np.inf)
        ok = estimate + 4.0 * se <= rhs or (rhs == 0 and estimate == 0)
        passed = passed and ok
        worst_ratio = max(worst_ratio, float(ratio))
        details["rounds"].append(
            {
                "round": r0,
                "estimate": estimate,
                "standard_error": se,
                "rhs": rhs,
                "G2": g2,
                "eta": eta_last,
                "pass": ok,
            }
        )
    return _report(
        "lemma2", inst.describe(), "monte-carlo", worst_ratio, 1.0, passed, details
    )


def _make_clients(
    model: LossModel, sizes: list[int], cycles: list[int], rng: RngStream, noise: float
) -> list[ClientProfile]:
    total = sum(sizes)
    gen = rng.generator
    w_true = gen.standard_normal(model.n_features)
    profiles = []
    for i, (sz, cyc) in enumerate(zip(sizes, cycles)):
        X = gen.standard_normal((sz, model.n_features))
        y = X @ w_true + noise * gen.standard_normal(sz)
        profiles.append(
            ClientProfile(
                client_id=i,
                data=Dataset(X, y, "regression"),
                weight=sz / total,
                cycle=cyc,
            )
        )
    return profiles


def random_small_instance(index: int, seed: int = 2024) -> AnalysisInstance:
    """Random quadratic instance with N <= 4 clients and cycles <= 4."""
    rng = RngStream(seed, ("lemma1-instance", index))
    gen = rng.generator
    n_clients = int(gen.integers(2, 5))
    cycles = [int(gen.integers(1, 5)) for _ in range(n_clients)]
    d = int(gen.integers(1, 4))
    sizes = [int(gen.integers(2, 7)) for _ in range(n_clients)]
    lam = float(gen.choice([0.0, 0.1]))
    T = int(gen.integers(1, 4))
    batch = int(gen.integers(1, 3))
    model = LossModel(kind="quadratic", n_features=d, lam=lam)
    clients = _make_clients(model, sizes, cycles, rng.child("data"), noise=0.4)
    w0 = gen.standard_normal(d)
    lr = LearningRateSchedule(kind="constant", eta=float(gen.uniform(0.02, 0.25)))
    return AnalysisInstance(
        model=model,
        clients=clients,
        w0=w0,
        T=T,
        lr=lr,
        seed=seed * 1000 + index,
        batch_size=batch,
        label=f"lemma1-{index}",
    )


_LEMMA2_CYCLE_FAMILIES = (
    (1, 2, 4, 8),
    (1, 2, 3, 6),
    (1, 2, 4),
    (1, 3, 6),
    (2, 4, 8),
    (1, 2, 8),
)


def random_lemma2_instance(index: int, seed: int = 4242) -> AnalysisInstance:
    """Random quadratic instance with mixed cycles <= 8 and lcm <= 24."""
    rng = RngStream(seed, ("lemma2-instance", index))
    gen = rng.generator
    n_clients = int(gen.integers(2, 9))
    family = _LEMMA2_CYCLE_FAMILIES[int(gen.integers(0, len(_LEMMA2_CYCLE_FAMILIES)))]
    cycles = [int(gen.choice(family)) for _ in range(n_clients)]
    if len(set(cycles)) == 1:  # keep the mix heterogeneous
        cycles[0] = family[0] if cycles[0] != family[0] else family[-1]
    d = int(gen.integers(1, 5))
    sizes = [int(gen.integers(max(3, d), 11)) for _ in range(n_clients)]
    lam = float(gen.choice([0.05, 0.2]))
    T = int(gen.integers(1, 4))
    batch = int(gen.integers(1, 4))
    model = LossModel(kind="quadratic", n_features=d, lam=lam)
    clients = _make_clients(model, sizes, cycles, rng.child("data"), noise=0.5)
    consts = estimate_constants(
        model, [c.data for c in clients], [np.zeros(d)], batch
    )
    lr = theorem_decay_schedule(consts.mu, consts.L, T)
    w0 = 1.5 * gen.standard_normal(d)
    return AnalysisInstance(
        model=model,
        clients=clients,
        w0=w0,
        T=T,
        lr=lr,
        seed=seed * 1000 + index,
        batch_size=batch,
        label=f"lemma2-{index}",
    )


def verify_lemma1_suite(
    n_instances: int = 20, seed: int = 2024, mode: str = "exhaustive", trials: int = 20000
) -> dict:
    reports = [
        verify_lemma1(random_small_instance(i, seed), mode=mode, trials=trials)
        for i in range(n_instances)
    ]
    worst = max(r["statistic"] for r in reports)
    passed = all(r["pass"] for r in reports)
    payload = {"suite": "lemma1", "n_instances": n_instances, "seed": seed, "mode": mode}
    return _report(
        "lemma1",
        payload,
        mode,
        worst,
        reports[0]["bound"],
        passed,
        {"instances": [{"hash": r["instance_config_hash"], "statistic": r["statistic"], "pass": r["pass"]} for r in reports]},
    )


def verify_lemma2_suite(
    n_instances: int = 10, seed: int = 4242, trials: int = 2000
) -> dict:
    reports = [
        verify_lemma2(random_lemma2_instance(i, seed), trials=trials)
        for i in range(n_instances)
    ]
    worst = max(r["statistic"] for r in reports)
    passed = all(r["pass"] for r in reports)
    payload = {"suite": "lemma2", "n_instances": n_instances, "seed": seed, "trials": trials}
    return _report(
        "lemma2",
        payload,
        "monte-carlo",
        worst,
        1.0,
        passed,
        {"instances": [{"hash": r["instance_config_hash"], "statistic": r["statistic"], "pass": r["pass"]} for r in reports]},
    )


def compute_gamma(model: LossModel, clients: list[ClientProfile]) -> float:
    """Heterogeneity F* - sum_i p_i F_i*; nonnegative up to numerics."""
    pooled = pooled_dataset(clients)
    w_star = closed_form_optimum(model, pooled)
    f_star = global_loss(model, clients, w_star)
    local_sum = 0.0
    for c in sorted(clients, key=lambda c: c.client_id):
        w_i = closed_form_optimum(model, c.data)
        local_sum += c.weight * loss(model, w_i, c.data)
    gamma = f_star - local_sum
    if gamma < -1e-10:
        raise RuntimeError(
            f"heterogeneity came out negative ({gamma}); optima are inconsistent"
        )
    return gamma


@dataclass(frozen=True)
class BoundInputs:
    """Constants feeding the O(1/K) convergence bound."""

    mu: float
    L: float
    sigma2: float
    G2: float
    gamma_het: float
    T: int
    E_max: int
    w0_gap: float

    def __post_init__(self) -> None:
        if self.mu <= 0 or self.L < self.mu:
            raise InvalidArgumentError("need 0 < mu <= L")
        if min(self.sigma2, self.G2, self.w0_gap) < 0:
            raise InvalidArgumentError("sigma2, G2, w0_gap must be nonnegative")
        if self.gamma_het < -1e-10:
            raise InvalidArgumentError("gamma_het must be nonnegative (up to noise)")
        if self.T < 1 or self.E_max < 1:
            raise InvalidArgumentError("T and E_max must be >= 1")

    @property
    def kappa(self) -> float:
        return self.L / self.mu

    @property
    def gamma_const(self) -> float:
        return max(8.0 * self.kappa, float(self.T))

    @property
    def eta0(self) -> float:
        # Largest rate of the schedule; using it in C gives the most
        # conservative constant over the whole run.
        return 2.0 / (self.mu * self.gamma_const)

    @property
    def B(self) -> float:
        return self.sigma2 + 6.0 * self.L * max(self.gamma_het, 0.0) + 8.0 * (self.T - 1) ** 2 * self.G2

    @property
    def C(self) -> float:
        return 4.0 * self.E_max**2 * self.T**2 * self.eta0**2 * self.G2


def theorem_bound(inputs: BoundInputs, K: int) -> float:
    """Upper bound on E[F(w^(K))] - F* after K iterations."""
    if K <= 0:
        raise InvalidArgumentError(f"K must be positive, got {K}")
    lead = 2.0 * inputs.kappa / (inputs.gamma_const + K)
    return lead * ((inputs.B + inputs.C) / inputs.mu + 2.0 * inputs.L * inputs.w0_gap)


def rate_fit(per_seed_logs: list[list[RoundLog]], min_decades: float = 1.5) -> dict:
    """Log-log slope of the seed-mean optimality gap over the tail window.

    The fit window is the tail half of the log-time range; the full
    range must span at least `min_decades` decades.
    """
    if len(per_seed_logs) < 1:
        raise InvalidArgumentError("need at least one seed's logs")
    t = None
    gaps = []
    for logs in per_seed_logs:
        steps = np.array([log.round_start for log in logs], dtype=float)
        # Metrics describe the model after the round, i.e. at t0 + T.
        steps += steps[1] - steps[0] if len(steps) > 1 else 1.0
        vals = [log.optimality_gap for log in logs]
        if any(v is None for v in vals):
            raise InvalidArgumentError("logs must carry optimality gaps")
        if t is None:
            t = steps
        elif not np.array_equal(t, steps):
            raise InvalidArgumentError("seeds have mismatched sync steps")
        gaps.append(vals)
    mean_gap = np.asarray(gaps).mean(axis=0)
    if np.any(mean_gap <= 0):
        raise InvalidArgumentError("mean gap must be positive for a log fit")
    decades = math.log10(t[-1] / t[0])
    if decades < min_decades:
        raise InvalidArgumentError(
            f"K range spans {decades:.2f} decades; need >= {min_decades}"
        )
    window = t >= math.sqrt(t[0] * t[-1])
    if window.sum() < 3:
        raise InvalidArgumentError("fit window has fewer than 3 points")
    x = np.log10(t[window])
    yv = np.log10(mean_gap[window])
    A = np.vstack([x, np.ones_like(x)]).T
    coef, residuals, _, _ = np.linalg.lstsq(A, yv, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    n = len(x)
    if n > 2:
        resid_var = float(residuals[0]) / (n - 2) if residuals.size else 0.0
        sxx = float(np.sum((x - x.mean()) ** 2))
        se = math.sqrt(resid_var / sxx) if sxx > 0 else 0.0
    else:
        se = 0.0
    return {
        "slope": slope,
        "intercept": intercept,
        "ci95": [slope - 1.96 * se, slope + 1.96 * se],
        "n_points": n,
        "window_start": float(t[window][0]),
        "window_end": float(t[-1]),
    }


def theorem_instance(
    data_seed: int = 123,
    n_clients: int = 4,
    cycles: tuple = (1, 2, 2, 4),
    d: int = 3,
    points_per_client: int = 12,
    noise: float = 0.5,
    lam: float = 0.1,
    T: int = 5,
    batch_size: int = 1,
) -> AnalysisInstance:
    """The calibrated quadratic instance for the convergence-shape check."""
    model = LossModel(kind="quadratic", n_features=d, lam=lam)
    rng = RngStream(data_seed, ("theorem-data",))
    clients = _make_clients(
        model, [points_per_client] * n_clients, list(cycles), rng, noise
    )
    consts = estimate_constants(model, [c.data for c in clients], [np.zeros(d)], batch_size)
    lr = theorem_decay_schedule(consts.mu, consts.L, T)
    pooled = pooled_dataset(clients)
    w_star = closed_form_optimum(model, pooled)
    w0 = w_star + 2.0 * RngStream(data_seed, ("theorem-init",)).generator.standard_normal(d)
    return AnalysisInstance(
        model=model,
        clients=clients,
        w0=w0,
        T=T,
        lr=lr,
        seed=data_seed,
        batch_size=batch_size,
        label="theorem-shape",
    )


def verify_theorem_shape(
    inst: AnalysisInstance | None = None,
    n_seeds: int = 10,
    K: int = 1000,
    checkpoints: tuple = (100, 300, 1000),
    slope_range: tuple = (-1.3, -0.7),
    constant_seeds: int = 3,
    round_stride: int = 10,
) -> dict:
    """Seed-averaged optimality gap vs the bound, plus the tail decay rate.

    Empirical sigma2/G2 come from trajectory samples: for a stride of
    rounds, every client's local path is replayed with the round-start
    model as the paired deviation anchor.
    """
    from .fedtrain import TrainConfig, run  # local import to avoid cycles

    if inst is None:
        inst = theorem_instance()
    if inst.lr.kind != "theorem-decay":
        raise UnsupportedConfigurationError(
            "theorem verification requires the theorem-decay schedule"
        )
    _require_sgd_convex(inst.model, inst.lr, "theorem verification")
    if any(kq % (inst.T * c.cycle) for c in inst.clients for kq in checkpoints):
        raise InvalidArgumentError("checkpoints must be sync- and epoch-aligned")
    pooled = pooled_dataset(inst.clients)
    w_star = closed_form_optimum(inst.model, pooled)
    f_star = global_loss(inst.model, inst.clients, w_star)
    gamma_het = compute_gamma(inst.model, inst.clients)
    w0_gap = float(np.sum((as_model_vector(inst.w0) - w_star) ** 2))

    per_seed_logs = []
    w_samples: list[np.ndarray] = []
    anchors: list[np.ndarray] = []
    for s in range(n_seeds):
        cfg = TrainConfig(
            model=inst.model,
            clients=inst.clients,
            policy_kind="paper-uniform-slot",
            T=inst.T,
            K=K,
            lr=inst.lr,
            seed=inst.seed * 100 + s,
            w0=inst.w0,
            batch_size=inst.batch_size,
            f_star=f_star,
            snapshot_stride=1,
        )
        logs = run(cfg)
        per_seed_logs.append(logs)
        if s < constant_seeds:
            for r in range(0, K // inst.T, round_stride):
                w_r = inst.w0 if r == 0 else logs[r - 1].model
                for c in inst.clients:
                    _, path = local_train_path(
                        inst.model, c, w_r, inst.T, inst.lr, r * inst.T,
                        RngStream(cfg.seed, ("minibatch", c.client_id, r)),
                        inst.batch_size,
                    )
                    for point in path:
                        w_samples.append(point)
                        anchors.append(w_r)
    consts = estimate_constants(
        inst.model,
        [c.data for c in inst.clients],
        w_samples,
        inst.batch_size,
        anchors=anchors,
    )
    inputs = BoundInputs(
        mu=consts.mu,
        L=consts.L,
        sigma2=consts.sigma2,
        G2=consts.G2,
        gamma_het=gamma_het,
        T=inst.T,
        E_max=max(inst.cycles),
        w0_gap=w0_gap,
    )
    gap_matrix = np.array(
        [[log.optimality_gap for log in logs] for logs in per_seed_logs]
    )
    checks = []
    all_ok = True
    worst_ratio = 0.0
    for Kq in checkpoints:
        bound = theorem_bound(inputs, Kq)
        observed = float(gap_matrix[:, Kq // inst.T - 1].mean())
        ok = observed <= bound
        all_ok = all_ok and ok
        worst_ratio = max(worst_ratio, observed / bound)
        checks.append({"K": Kq, "observed": observed, "bound": bound, "pass": ok})
    fit = rate_fit(per_seed_logs)
    slope_ok = slope_range[0] <= fit["slope"] <= slope_range[1]
    details = {
        "bound_checks": checks,
        "rate_fit": fit,
        "slope_range": list(slope_range),
        "constants": {
            "mu": inputs.mu,
            "L": inputs.L,
            "sigma2": inputs.sigma2,
            "G2": inputs.G2,
            "gamma_het": gamma_het,
            "w0_gap": w0_gap,
            "provenance": dict(consts.protocol),
        },
        "n_seeds": n_seeds,
    }
    return _report(
        "theorem-bound",
        {**inst.describe(), "K": K, "n_seeds": n_seeds},
        "simulation",
        max(worst_ratio, 0.0),
        1.0,
        all_ok and slope_ok,
        details,
    )


def _random_gradient_triple(kind: str, gen: np.random.Generator):
    if kind == "quadratic":
        d = int(gen.integers(1, 7))
        model = LossModel(kind="quadratic", n_features=d, lam=float(gen.choice([0.0, 0.1, 0.5])))
        X = gen.standard_normal((int(gen.integers(2, 11)), d))
        y = gen.standard_normal(X.shape[0])
        data = Dataset(X, y, "regression")
    elif kind == "logistic":
        d = int(gen.integers(1, 5))
        c = int(gen.integers(2, 5))
        model = LossModel(kind="logistic", n_features=d, lam=float(gen.choice([0.0, 0.1])), n_classes=c)
        X = gen.standard_normal((int(gen.integers(2, 11)), d))
        y = gen.integers(0, c, X.shape[0])
        data = Dataset(X, y, "classification")
    else:
        d = int(gen.integers(1, 5))
        c = int(gen.integers(2, 4))
        h = int(gen.integers(2, 6))
        model = LossModel(kind="mlp", n_features=d, lam=float(gen.choice([0.0, 0.05])), n_classes=c, hidden=h)
        X = gen.standard_normal((int(gen.integers(2, 9)), d))
        y = gen.integers(0, c, X.shape[0])
        data = Dataset(X, y, "classification")
    w = 0.7 * gen.standard_normal(model.param_dim)
    b = int(gen.integers(1, len(data) + 1))
    batch = MinibatchSample(gen.choice(len(data), size=b, replace=False))
    return model, data, w, batch


def verify_gradients(
    seed: int = 7, n_triples: int = 100, step: float = 1e-6, tolerance: float = 1e-5
) -> dict:
    """Central finite differences vs analytic gradients, per model kind."""
    worst = 0.0
    per_kind = {}
    for kind in ("quadratic", "logistic", "mlp"):
        gen = RngStream(seed, ("gradcheck", kind)).generator
        kind_worst = 0.0
        for _ in range(n_triples):
            model, data, w, batch = _random_gradient_triple(kind, gen)
            analytic = stochastic_gradient(model, w, data, batch)
            fd = np.empty_like(analytic)
            for k in range(w.size):
                wp = w.copy()
                wp[k] += step
                wm = w.copy()
                wm[k] -= step
                fd[k] = (
                    loss_on_batch(model, wp, data, batch)
                    - loss_on_batch(model, wm, data, batch)
                ) / (2 * step)
            denom = max(
                float(np.linalg.norm(analytic)), float(np.linalg.norm(fd)), 1e-8
            )
            rel = float(np.linalg.norm(analytic - fd)) / denom
            kind_worst = max(kind_worst, rel)
        per_kind[kind] = kind_worst
        worst = max(worst, kind_worst)
    payload = {"check": "gradients", "seed": seed, "n_triples": n_triples, "step": step}
    return _report(
        "gradients",
        payload,
        "finite-difference",
        worst,
        tolerance,
        worst < tolerance,
        {"per_kind": per_kind},
    )


def verify_schedule_marginals(
    cycles: list[int] | None = None, epochs: int = 10000, seed: int = 31
) -> dict:
    """Per-client slot-0 participation frequency against 1/E_i at 4 sigma.

    Draws go through the same (seed, "schedule", client, epoch) streams
    the uniform-slot policy uses.
    """
    if cycles is None:
        cycles = [(1, 5, 10, 20)[i % 4] for i in range(40)]
    if epochs < 100:
        raise InvalidArgumentError("need at least 100 epochs")
    per_client = []
    worst = 0.0
    passed = True
    for cid, e in enumerate(cycles):
        hits = 0
        for epoch in range(epochs):
            stream = RngStream(seed, ("schedule", cid, epoch))
            if int(stream.generator.integers(0, e)) == 0:
                hits += 1
        freq = hits / epochs
        p = 1.0 / e
        sigma = math.sqrt(p * (1 - p) / epochs)
        dev = abs(freq - p)
        ok = dev <= 4.0 * sigma
        z = dev / sigma if sigma > 0 else 0.0
        worst = max(worst, z)
        passed = passed and ok
        per_client.append(
            {"client": cid, "cycle": e, "freq": freq, "target": p, "z": z, "pass": ok}
        )
    payload = {"check": "schedule-marginals", "cycles": cycles, "epochs": epochs, "seed": seed}
    return _report(
        "schedule-marginals",
        payload,
        "monte-carlo",
        worst,
        4.0,
        passed,
        {"per_client": per_client},
    )
