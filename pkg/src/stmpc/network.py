"""Token-bucket traffic shaping, bounded packet loss and acknowledgment bookkeeping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np


class AssumptionViolation(RuntimeError):
    """A loss realization lost more than ``P`` consecutive packets."""


@dataclass(frozen=True)
class TokenBucketSpec:
    """Token bucket with fill rate ``g``, transmission cost ``c`` and size ``b``."""

    g: int
    c: int
    b: int

    def __post_init__(self):
        for name in ("g", "c", "b"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"{name} must be an integer")
        if not 1 <= self.g <= self.c <= self.b:
            raise ValueError(f"need 1 <= g <= c <= b, got g={self.g}, c={self.c}, b={self.b}")

    @property
    def M(self) -> int:
        """Base period: transmitting every ``M`` steps never depletes the bucket."""
        return math.ceil(self.c / self.g)

    @property
    def min_level(self) -> int:
        """Lowest level from which a transmission keeps the bucket nonnegative."""
        return self.c - self.g


def bucket_step(beta: int, transmitting: bool, spec: TokenBucketSpec) -> int:
    """One step of the bucket recursion; a negative result marks an inadmissible schedule."""
    if transmitting:
        return min(beta + spec.g - spec.c, spec.b)
    return min(beta + spec.g, spec.b)


@dataclass(frozen=True)
class LossSequence:
    """Binary delivery word; ``bits[i] == 1`` means packet ``i`` arrives."""

    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("loss sequence must be binary")
        object.__setattr__(self, "bits", bits)

    @property
    def tau(self) -> tuple:
        """Indices of successful transmissions, increasing."""
        return tuple(i for i, b in enumerate(self.bits) if b)

    def __len__(self):
        return len(self.bits)

    def __getitem__(self, i):
        return self.bits[i]

    def __str__(self):
        return "".join(map(str, self.bits))


def is_admissible(bits: Sequence[int], P: int, r: int) -> bool:
    """Membership test for the admissible set, straight from its definition."""
    tau = [i for i, b in enumerate(bits) if b]
    if not tau:
        return False
    if tau[0] > P - r:
        return False
    if any(b - a > P + 1 for a, b in zip(tau, tau[1:])):
        return False
    return len(bits) - tau[-1] <= P + 1


class AdmissibleSet(Sequence):
    """Lexicographically ordered admissible loss words of length ``N + P``.

    The position of a word in this sequence is its scenario index.
    """

    def __init__(self, N: int, P: int, r: int, words: Iterable[tuple]):
        self.N, self.P, self.r = N, P, r
        self.words = tuple(LossSequence(w) for w in words)
        self._index = {w.bits: i for i, w in enumerate(self.words)}
        self.bits = np.array([w.bits for w in self.words], dtype=np.int8).reshape(len(self.words), N + P)
        self.bits.setflags(write=False)

    def __len__(self):
        return len(self.words)

    def __getitem__(self, i):
        return self.words[i]

    def index_of(self, word) -> int:
        bits = word.bits if isinstance(word, LossSequence) else tuple(word)
        return self._index[bits]

    def __contains__(self, word):
        bits = word.bits if isinstance(word, LossSequence) else tuple(word)
        return bits in self._index


@lru_cache(maxsize=None)
def enumerate_admissible(N: int, P: int, r: int) -> AdmissibleSet:
    """All admissible loss words of length ``N + P`` given ``r`` losses since the last success.

    Generated depth first with 0 before 1, so the result is in lexicographic
    order. Partial words are pruned as soon as they cannot be completed.
    """
    if N < 1 or P < 0:
        raise ValueError("need N >= 1 and P >= 0")
    if not 0 <= r <= P:
        raise ValueError(f"counter r={r} outside [0, {P}]")
    L = N + P
    words = []

    def extend(prefix, run):
        # run: consecutive zeros since the last success, counting the r before index 0
        i = len(prefix)
        if i == L:
            if run <= P:
                words.append(tuple(prefix))
            return
        if run < P:
            prefix.append(0)
            extend(prefix, run + 1)
            prefix.pop()
        prefix.append(1)
        extend(prefix, 0)
        prefix.pop()

    extend([], r)
    return AdmissibleSet(N, P, r, words)


def split_by_first_bit(words: Iterable[LossSequence], first: int) -> list:
    return [w for w in words if w[0] == first]


@dataclass(frozen=True)
class LossHistory:
    """Consecutive-loss counter ``r`` and the last acknowledgment."""

    r: int = 0
    last_ack: int = 1


def update_counter(history: LossHistory, ack: int, P: int) -> LossHistory:
    if ack:
        return LossHistory(0, 1)
    r = history.r + 1
    if r > P:
        raise AssumptionViolation(f"{r} consecutive packet losses exceed the bound P={P}")
    return LossHistory(r, 0)


class LossModel:
    """Source of delivery outcomes, one per sampling instant.

    ``draw(r, solution)`` receives the controller's current counter and its
    latest solution and returns 1 (delivered) or 0 (lost).
    """

    def draw(self, r: int, solution=None) -> int:  # pragma: no cover - interface
        raise NotImplementedError


class ScriptedLoss(LossModel):
    """Replays a fixed bit word; cycles it when ``repeat`` is set."""

    def __init__(self, bits: Sequence[int], repeat: bool = True):
        self.bits = tuple(int(b) for b in bits)
        if not self.bits or any(b not in (0, 1) for b in self.bits):
            raise ValueError("scripted loss word must be a nonempty binary word")
        self.repeat = repeat
        self._k = 0

    def draw(self, r, solution=None):
        k = self._k
        self._k += 1
        if k >= len(self.bits):
            if not self.repeat:
                raise IndexError("scripted loss word exhausted")
            k %= len(self.bits)
        return self.bits[k]


class BoundedRandomLoss(LossModel):
    """I.i.d. losses with probability ``p_loss``; delivery is forced once ``r == P``."""

    def __init__(self, p_loss: float, P: int, seed=None):
        if not 0.0 <= p_loss <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        self.p_loss, self.P, self.seed = p_loss, P, seed
        self.rng = np.random.default_rng(seed)

    def draw(self, r, solution=None):
        if r >= self.P:
            return 1
        return int(self.rng.random() >= self.p_loss)


class AdversarialLoss(LossModel):
    """Lets ``choose(r, solution)`` pick the outcome.

    The default plays the first bit of the worst-case loss word the
    controller's inner maximization found, which is admissible by construction.
    """

    def __init__(self, P: int, choose: Callable | None = None):
        self.P = P
        self.choose = choose

    def draw(self, r, solution=None):
        if self.choose is not None:
            return int(self.choose(r, solution))
        if solution is None or solution.worst_sequence is None:
            return 1
        return int(solution.worst_sequence[0])


def parse_loss_trace(text: str) -> list:
    """Bits from a whitespace-separated trace; ``#`` starts a comment."""
    bits = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        for tok in line.split():
            if tok not in ("0", "1"):
                raise ValueError(f"invalid loss bit {tok!r}")
            bits.append(int(tok))
    return bits


def read_loss_trace(path) -> list:
    with open(path) as fh:
        return parse_loss_trace(fh.read())
