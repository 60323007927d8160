"""Per-round participation policies.

Four policies decide the participant set S_t of each global round:

* ``paper-uniform-slot``     -- at every energy-epoch boundary a client
  draws a slot J uniformly from {0, ..., E_i - 1} and participates only
  in the round starting J rounds into the epoch.  Decisions touch only
  client-local state and the client's own keyed RNG stream.
* ``eager-benchmark1``       -- participate as soon as energy is
  available: round r iff r mod E_i = 0.
* ``wait-for-all-benchmark2``-- everyone participates together once
  every E_max rounds, idle otherwise (faster clients discard surplus).
* ``full-participation``     -- everyone, every round; models the
  unconstrained setting (equivalent to all cycles being 1).

Slot draws are keyed by (seed, client, epoch), so any draw can be
re-created at random access and adding clients never perturbs other
clients' schedules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgumentError, RngStream, draw_uniform_integer
from .data import ClientProfile

__all__ = [
    "POLICY_KINDS",
    "SchedulePolicy",
    "UniformSlotPolicy",
    "EagerPolicy",
    "WaitForAllPolicy",
    "FullParticipationPolicy",
    "ParticipationTable",
    "make_policy",
    "decide_epoch",
    "build_participation_table",
]

POLICY_KINDS = (
    "paper-uniform-slot",
    "eager-benchmark1",
    "wait-for-all-benchmark2",
    "full-participation",
)


class SchedulePolicy:
    """Base participation policy; subclasses fill in per-round decisions."""

    kind: str = ""
    # Aggregation rule the trainer applies for this policy.
    aggregation: str = "fedavg"

    def participants(self, clients: list[ClientProfile], round_index: int) -> list[int]:
        raise NotImplementedError

    def effective_cycle(self, client: ClientProfile) -> int:
        """Cycle used for energy-feasibility audits."""
        return client.cycle


class UniformSlotPolicy(SchedulePolicy):
    """The energy-aware stochastic policy (uniform slot per energy epoch).

    By default every client starts its first energy epoch at round 0
    (all batteries full at t = 0).  With `stagger=True` each client's
    epoch phase is shifted by a per-client offset drawn uniformly from
    {0, ..., E_i - 1}; the client idles before its first epoch starts.
    """

    kind = "paper-uniform-slot"
    aggregation = "paper"

    def __init__(self, seed: int, T: int, stagger: bool = False):
        self.seed = seed
        self.T = T
        self.stagger = stagger
        self._slots: dict[tuple[int, int], int] = {}
        self._offsets: dict[int, int] = {}

    def slot(self, client: ClientProfile, epoch: int) -> int:
        """The drawn slot J for this client's energy epoch (cached)."""
        key = (client.client_id, epoch)
        if key not in self._slots:
            stream = RngStream(self.seed, ("schedule", client.client_id, epoch))
            self._slots[key] = draw_uniform_integer(stream, client.cycle)
        return self._slots[key]

    def start_offset(self, client: ClientProfile) -> int:
        if not self.stagger:
            return 0
        cid = client.client_id
        if cid not in self._offsets:
            stream = RngStream(self.seed, ("stagger", cid))
            self._offsets[cid] = draw_uniform_integer(stream, client.cycle)
        return self._offsets[cid]

    def participants(self, clients: list[ClientProfile], round_index: int) -> list[int]:
        out = []
        for c in clients:
            r = round_index - self.start_offset(c)
            if r < 0:
                continue
            epoch, offset = divmod(r, c.cycle)
            if self.slot(c, epoch) == offset:
                out.append(c.client_id)
        return out


class EagerPolicy(SchedulePolicy):
    """Benchmark 1: train immediately on every energy arrival."""

    kind = "eager-benchmark1"

    def participants(self, clients: list[ClientProfile], round_index: int) -> list[int]:
        return [c.client_id for c in clients if round_index % c.cycle == 0]


class WaitForAllPolicy(SchedulePolicy):
    """Benchmark 2: a joint update once every max-cycle rounds."""

    kind = "wait-for-all-benchmark2"

    def participants(self, clients: list[ClientProfile], round_index: int) -> list[int]:
        e_max = max(c.cycle for c in clients)
        if round_index % e_max == 0:
            return [c.client_id for c in clients]
        return []


class FullParticipationPolicy(SchedulePolicy):
    """Unconstrained FedAvg upper bound; ignores energy cycles."""

    kind = "full-participation"

    def participants(self, clients: list[ClientProfile], round_index: int) -> list[int]:
        return [c.client_id for c in clients]

    def effective_cycle(self, client: ClientProfile) -> int:
        return 1


def make_policy(kind: str, seed: int, T: int, stagger: bool = False) -> SchedulePolicy:
    # Staggering is a property of the uniform-slot epoch structure; the
    # other policies have no epoch phase to shift and ignore the flag.
    if kind == "paper-uniform-slot":
        return UniformSlotPolicy(seed, T, stagger=stagger)
    if kind == "eager-benchmark1":
        return EagerPolicy()
    if kind == "wait-for-all-benchmark2":
        return WaitForAllPolicy()
    if kind == "full-participation":
        return FullParticipationPolicy()
    raise InvalidArgumentError(f"unknown policy kind {kind!r}")


def decide_epoch(
    policy: SchedulePolicy, client: ClientProfile, t: int, rng: RngStream
) -> int:
    """Draw the participation slot for the energy epoch starting at t.

    Only defined for the uniform-slot policy at an epoch boundary
    (t mod E_i*T = 0); the client then participates exactly in the
    global round starting at t + J*T within this epoch.
    """
    if policy.kind != "paper-uniform-slot":
        raise InvalidArgumentError(
            f"decide_epoch applies to paper-uniform-slot, not {policy.kind}"
        )
    period = client.cycle * policy.T  # type: ignore[attr-defined]
    if t < 0 or t % period != 0:
        raise InvalidArgumentError(
            f"t={t} is not an energy-epoch boundary (period {period})"
        )
    return draw_uniform_integer(rng, client.cycle)


@dataclass
class ParticipationTable:
    """Per-round participation indicators, rows = global rounds."""

    indicators: np.ndarray  # (n_rounds, n_clients) uint8
    T: int
    cycles: tuple
    offsets: tuple | None = None

    @property
    def n_rounds(self) -> int:
        return self.indicators.shape[0]

    @property
    def n_clients(self) -> int:
        return self.indicators.shape[1]

    def indicator(self, client_id: int, t: int) -> int:
        """I[i][t] at iteration granularity (constant within a round)."""
        return int(self.indicators[t // self.T, client_id])

    def participation_counts(self) -> np.ndarray:
        return self.indicators.sum(axis=0)

    def check_energy_feasibility(self) -> None:
        """At most one participation per epoch-aligned window of E_i rounds."""
        offsets = self.offsets or (0,) * self.n_clients
        for i in range(self.n_clients):
            e = self.cycles[i]
            col = self.indicators[:, i]
            if col[: offsets[i]].sum() > 0:
                raise InvalidArgumentError(
                    f"client {i} participates before its first energy epoch"
                )
            for start in range(offsets[i], self.n_rounds, e):
                window = col[start : start + e]
                if window.sum() > 1:
                    raise InvalidArgumentError(
                        f"client {i} participates {int(window.sum())} times in "
                        f"rounds [{start}, {start + e})"
                    )

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("round," + ",".join(str(i) for i in range(self.n_clients)) + "\n")
            for r in range(self.n_rounds):
                fh.write(f"{r}," + ",".join(str(int(v)) for v in self.indicators[r]) + "\n")


def build_participation_table(
    policy: SchedulePolicy, clients: list[ClientProfile], n_rounds: int, T: int
) -> ParticipationTable:
    table = np.zeros((n_rounds, len(clients)), dtype=np.uint8)
    for r in range(n_rounds):
        for cid in policy.participants(clients, r):
            table[r, cid] = 1
    cycles = tuple(policy.effective_cycle(c) for c in clients)
    offsets = None
    if isinstance(policy, UniformSlotPolicy) and policy.stagger:
        offsets = tuple(policy.start_offset(c) for c in clients)
    return ParticipationTable(indicators=table, T=T, cycles=cycles, offsets=offsets)
