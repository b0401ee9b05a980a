"""MDP vocabulary shared by every other module: states, transitions, rewards."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union


class DomainError(ValueError):
    """Raised when an operation receives inputs outside its domain."""


class ConfigError(ValueError):
    """Raised for invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DivergenceError(RuntimeError):
    """Non-finite loss or targets during training."""


@dataclass(frozen=True)
class DenseVector:
    """Blowing/suction profile: ``2 * d`` coefficients, two sides of ``d`` each.

    ``targets`` holds the constrained mean of each side. ``offsets`` is the
    integer lattice position used by the profile environment; it is not part
    of the state's identity (values are always recomputed from it, so equal
    lattice points have bit-identical values).
    """

    values: tuple[float, ...]
    d: int
    targets: tuple[float, float]
    offsets: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.values) != 2 * self.d:
            raise DomainError(f"profile needs {2 * self.d} coefficients, got {len(self.values)}")
        key = ("dense", self.targets, self.values)
        object.__setattr__(self, "_key", key)
        object.__setattr__(self, "_hash", hash(key))

    def __hash__(self):
        return self._hash

    def side(self, j: int) -> tuple[float, ...]:
        return self.values[j * self.d:(j + 1) * self.d]

    def side_means(self) -> tuple[float, float]:
        return (math.fsum(self.side(0)) / self.d, math.fsum(self.side(1)) / self.d)


@dataclass(frozen=True)
class TokenSeq:
    """Variable-length token sequence, the molecular-graph analog."""

    tokens: tuple[int, ...]
    vocab: int = field(compare=False)
    max_len: int = field(compare=False)

    def __post_init__(self):
        if len(self.tokens) > self.max_len:
            raise DomainError(f"sequence length {len(self.tokens)} exceeds {self.max_len}")
        if any(t < 0 or t >= self.vocab for t in self.tokens):
            raise DomainError(f"token id outside vocabulary of size {self.vocab}")
        key = ("seq", self.tokens)
        object.__setattr__(self, "_key", key)
        object.__setattr__(self, "_hash", hash(key))

    def __hash__(self):
        return self._hash

    def __len__(self):
        return len(self.tokens)


State = Union[DenseVector, TokenSeq]


def state_key(state: State) -> tuple:
    """Canonical, totally ordered identity of a state (memo and dedup key)."""
    return state._key


@dataclass(frozen=True)
class Transition:
    """One replay-buffer entry.

    ``steps_left`` counts the steps remaining after ``next_state``; the episode
    ends when it reaches zero.
    """

    state: State
    action: int
    reward: float
    next_state: State
    terminal: bool
    steps_left: int = 0

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise DomainError(f"non-finite reward {self.reward}")


@dataclass(frozen=True)
class Delta:
    """Reward ``f(s_{t-1}) - f(s_t)``; the oracle value is a scalar to minimize."""


@dataclass(frozen=True)
class ImprovementFromStart:
    """Reward relative to the episode's start state for a two-valued oracle.

    The ``primary`` property is minimized, the ``secondary`` one held constant.
    In the molecular setting primary is the LUMO energy and secondary the
    HOMO-LUMO gap; indices select them from the oracle's output vector.
    """

    primary: int = 0
    secondary: int = 1


RewardMode = Union[Delta, ImprovementFromStart]


def _check_finite(*xs: float) -> None:
    for x in xs:
        if not math.isfinite(x):
            raise DomainError(f"non-finite input {x!r}")


def delta_reward(f_prev: float, f_next: float) -> float:
    _check_finite(f_prev, f_next)
    return f_prev - f_next


def telescoped_return(f_values: Sequence[float]) -> float:
    """Sum of per-step delta rewards along an episode's f-trajectory."""
    if len(f_values) == 0:
        raise DomainError("empty f-sequence")
    _check_finite(*f_values)
    return math.fsum(f_values[t - 1] - f_values[t] for t in range(1, len(f_values)))


def improvement_reward(primary_t: float, primary_0: float,
                       secondary_t: float, secondary_0: float) -> float:
    """``-|secondary_t - secondary_0| - (primary_t - primary_0)``; zero at the start state."""
    _check_finite(primary_t, primary_0, secondary_t, secondary_0)
    return -abs(secondary_t - secondary_0) - (primary_t - primary_0)


def improvement_increment(prev: Sequence[float], cur: Sequence[float], start: Sequence[float],
                          mode: ImprovementFromStart) -> float:
    """Per-step reward ``R(s_t) - R(s_{t-1})`` so an episode's return telescopes to ``R(s_T)``."""
    p, q = mode.primary, mode.secondary
    r_cur = improvement_reward(cur[p], start[p], cur[q], start[q])
    r_prev = improvement_reward(prev[p], start[p], prev[q], start[q])
    return r_cur - r_prev
