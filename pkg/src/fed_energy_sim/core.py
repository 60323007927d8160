"""Shared domain types: round clock, keyed RNG streams, model-vector checks.

All randomness in the simulator flows through :class:`RngStream`, a
counter-based (Philox) generator keyed by an arbitrary label path under a
single master seed.  Streams with distinct labels are statistically
independent, and any stream can be re-created at random access, so a
replay of e.g. client 7's minibatch draws for round 231 never depends on
what any other client consumed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelVector",
    "RoundClock",
    "RngStream",
    "InvalidArgumentError",
    "is_sync_step",
    "draw_uniform_integer",
    "as_model_vector",
    "ensure_finite",
    "check_same_dim",
]

# A model vector is a 1-D float64 array; all training state uses this form.
ModelVector = np.ndarray


class InvalidArgumentError(ValueError):
    """Raised when an operation precondition is violated."""


@dataclass(frozen=True)
class RoundClock:
    """Iteration bookkeeping for a synchronous run of K iterations.

    Synchronization steps are the iterations t with t mod T = 0; the
    global round starting at such a t spans {t, ..., t+T-1}.
    """

    T: int
    K: int
    t: int = 0

    def __post_init__(self) -> None:
        if self.T < 1:
            raise InvalidArgumentError(f"T must be >= 1, got {self.T}")
        if self.K < 0:
            raise InvalidArgumentError(f"K must be >= 0, got {self.K}")
        if self.K % self.T != 0:
            raise InvalidArgumentError(
                f"K must be a multiple of T, got K={self.K}, T={self.T}"
            )
        if self.t < 0:
            raise InvalidArgumentError(f"t must be >= 0, got {self.t}")

    @property
    def n_rounds(self) -> int:
        return self.K // self.T

    def round_start(self, round_index: int) -> int:
        """First iteration of the given global round."""
        return round_index * self.T

    def round_of(self, t: int) -> int:
        """Global round containing iteration t."""
        if t < 0:
            raise InvalidArgumentError(f"t must be >= 0, got {t}")
        return t // self.T

    def sync_steps(self) -> range:
        """All synchronization steps in [0, K]."""
        return range(0, self.K + 1, self.T)


def is_sync_step(clock: RoundClock, t: int) -> bool:
    """True iff iteration t is a synchronization step (t mod T = 0)."""
    if t < 0:
        raise InvalidArgumentError(f"t must be >= 0, got {t}")
    return t % clock.T == 0


def _key_entropy(seed: int, stream_id: tuple) -> list[int]:
    # Stable across platforms and numpy versions: the label path is hashed
    # with SHA-256 and the digest feeds SeedSequence as four 32-bit words.
    h = hashlib.sha256()
    h.update(repr(int(seed)).encode())
    for part in stream_id:
        h.update(b"\x1f")
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + repr(int(part)).encode())
        elif isinstance(part, str):
            h.update(b"s" + part.encode())
        else:
            raise InvalidArgumentError(
                f"stream id parts must be int or str, got {type(part).__name__}"
            )
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


@dataclass
class RngStream:
    """Independent random stream keyed by (master seed, label path).

    Identical (seed, stream_id) pairs yield identical draw sequences.
    A stream owns its generator: never draw from one stream concurrently.
    """

    seed: int
    stream_id: tuple = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.stream_id = tuple(self.stream_id)
        ss = np.random.SeedSequence(_key_entropy(self.seed, self.stream_id))
        self._gen = np.random.Generator(np.random.Philox(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, *parts: int | str) -> "RngStream":
        """Derive an independent stream with an extended label path."""
        return RngStream(self.seed, self.stream_id + tuple(parts))


def draw_uniform_integer(rng: RngStream, upper: int) -> int:
    """Draw J uniformly from {0, ..., upper-1}, advancing the stream."""
    if upper <= 0:
        raise InvalidArgumentError(f"upper must be >= 1, got {upper}")
    return int(rng.generator.integers(0, upper))


def as_model_vector(values) -> ModelVector:
    """Coerce to a 1-D float64 array (copying only if needed)."""
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 1:
        raise InvalidArgumentError(f"model vector must be 1-D, got shape {w.shape}")
    return w


def ensure_finite(w: np.ndarray, what: str = "model vector") -> np.ndarray:
    if not np.all(np.isfinite(w)):
        raise InvalidArgumentError(f"{what} contains non-finite entries")
    return w


def check_same_dim(a: np.ndarray, b: np.ndarray, what: str = "vectors") -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(
            f"dimension mismatch for {what}: {a.shape} vs {b.shape}"
        )
