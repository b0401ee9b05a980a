"""Synthetic stand-ins for the three costly-reward tasks, plus featurization and
an instrumented (counting, memoizing) oracle.

* :class:`ProfileEnv` - per-side mean-constrained blowing/suction profile whose
  drag is a seeded quadratic with an alternation preference.
* :class:`SeqEnv` - token sequences scored by "sum of token weights minus
  structural penalties", the shape of penalized logP.
* :class:`ImproveEnv` - short episodes from random start sequences, rewarded by
  lowering one property while holding a second one fixed.
"""

from __future__ import annotations

import functools
import logging
import math
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    Delta,
    DenseVector,
    DomainError,
    ConfigError,
    ImprovementFromStart,
    State,
    TokenSeq,
    improvement_reward,
    state_key,
)
from .nn import make_rng

log = logging.getLogger(__name__)

NOOP = 0

# k-gram hashing constants (documented so features can be recomputed elsewhere)
HASH_MULT = 1_000_003
HASH_MOD = 2 ** 32


def kgram_index(gram: Sequence[int], width: int) -> int:
    h = len(gram)
    for t in gram:
        h = (h * HASH_MULT + t + 1) % HASH_MOD
    return h % width


@functools.lru_cache(maxsize=32)
def _kgram_tables(vocab: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    uni = np.array([kgram_index((t,), width) for t in range(vocab)])
    bi = np.array([[kgram_index((a, b), width) for b in range(vocab)] for a in range(vocab)])
    return uni, bi


def featurize(state: State, width: int = 64) -> np.ndarray:
    """Raw feature vector of a state.

    Profiles: the coefficients followed by the two per-side targets.
    Sequences: counts of hashed 1- and 2-grams folded into ``width`` slots.
    """
    if isinstance(state, DenseVector):
        return np.array(state.values + state.targets, dtype=float)
    out = np.zeros(width)
    if not state.tokens:
        return out
    uni, bi = _kgram_tables(state.vocab, width)
    toks = np.asarray(state.tokens)
    np.add.at(out, uni[toks], 1.0)
    np.add.at(out, bi[toks[:-1], toks[1:]], 1.0)
    return out


class InstrumentedOracle:
    """Wraps the true evaluation function with exact miss counting and memoization.

    Only cache misses reach ``fn`` and increment ``calls``. ``latency_ms``
    emulates an expensive simulator by sleeping on every miss.
    """

    def __init__(self, fn: Callable[[State], object], latency_ms: float = 0.0):
        self.fn = fn
        self.latency_ms = latency_ms
        self.calls = 0
        self._memo: dict = {}
        self._lock = threading.Lock()

    def __call__(self, state: State):
        key = state_key(state)
        with self._lock:
            if key in self._memo:
                return self._memo[key]
        try:
            value = self.fn(state)
        except Exception:
            log.error("oracle failed on state %r", key)
            raise
        if self.latency_ms > 0:
            time.sleep(self.latency_ms / 1000.0)
        with self._lock:
            if key not in self._memo:
                self._memo[key] = value
                self.calls += 1
            return self._memo[key]

    def is_cached(self, state: State) -> bool:
        return state_key(state) in self._memo

    def unmetered(self, state: State):
        """Ground truth for monitoring/audit; never counted, never cached."""
        return self.fn(state)

    def known_keys(self) -> set:
        return set(self._memo)


def oracle_evaluate(oracle: InstrumentedOracle, state: State):
    return oracle(state)


# --------------------------------------------------------------------------- profile


class SyntheticDrag:
    """Seeded quadratic drag model over a ``2 * d`` profile.

    In scaled units ``z = s / scale`` with ``m`` the overall mean of ``z`` and
    ``c`` the profile with each side's mean removed::

        f = c0 - a * m + (w + (m - m_ref) * v).c + c'Ac + b * sum_sides sum_i (c[i+1] - c[i])**2

    Raising the mean always lowers drag. ``A = mu * I + rho * G G'/n`` is
    positive definite and ``b < 0`` rewards alternating neighbours; ``mu > 4|b|``
    keeps the shape term convex. The best shape depends on the mean through
    ``v``, so what is learned at one constraint does not transfer to another.
    """

    def __init__(self, d: int, seed: int = 0, scale: float = 1e-3, c0: float = 30.0,
                 a: float = 2.0, mu: float = 0.6, rho: float = 0.4, b: float = -0.12,
                 w_scale: float = 0.25, v_scale: float = 1.5, m_ref: float = 2.0):
        if mu <= 4 * abs(b):
            raise ConfigError("env.drag.mu", "must exceed 4*|b| for a bounded optimum")
        n = 2 * d
        rng = make_rng((seed, 7001))
        self.d, self.scale, self.c0, self.a, self.b, self.m_ref = d, scale, c0, a, b, m_ref
        self.w = rng.normal(0.0, w_scale, size=n)
        g = rng.normal(0.0, 1.0, size=(n, n))
        self.A = mu * np.eye(n) + rho * (g @ g.T) / n
        self.v = rng.normal(0.0, v_scale, size=n)
        lap = np.zeros((n, n))
        for j in range(2):
            for i in range(d - 1):
                p, q = j * d + i, j * d + i + 1
                lap[p, p] += 1
                lap[q, q] += 1
                lap[p, q] -= 1
                lap[q, p] -= 1
        self.Q = self.A + b * lap

    def value(self, values) -> float:
        z = np.asarray(values, dtype=float) / self.scale
        if z.shape != (2 * self.d,):
            raise DomainError(f"profile of length {z.shape} for d={self.d}")
        m = z.mean()
        c = z.reshape(2, self.d)
        c = (c - c.mean(axis=1, keepdims=True)).ravel()
        lin = self.w + (m - self.m_ref) * self.v
        return float(self.c0 - self.a * m + lin @ c + c @ self.Q @ c)

    def __call__(self, state: DenseVector) -> float:
        return self.value(state.values)


def synthetic_drag(state: DenseVector, oracle_seed: int = 0, **params) -> float:
    return SyntheticDrag(state.d, oracle_seed, **params)(state)


@dataclass
class ProfileEnv:
    """Each step modifies at most one coefficient by ``delta`` and re-projects
    that side onto its mean; episodes start from the uniform profile."""

    d: int = 15
    delta: float = 2.5e-4
    constraint: tuple[float, float] = (0.0019, 0.0021)
    horizon: int = 30
    oracle_seed: int = 0
    init_constraint: tuple[float, float] = (0.0019, 0.0021)
    feature_center: float = 2e-3
    feature_scale: float = 1e-3
    drag_params: dict | None = None
    # bound on |offset| in lattice units; moves leaving the grid are illegal
    max_offset: int | None = None

    reward_mode = Delta()
    output_dim = 1

    def __post_init__(self):
        lo, hi = self.constraint
        if lo > hi:
            raise ConfigError("env.constraint", f"lo {lo} > hi {hi}")
        if self.d < 1:
            raise ConfigError("env.d", "must be >= 1")
        if self.max_offset is not None and self.max_offset < 1:
            raise ConfigError("env.max_offset", "must be >= 1")
        self.constraint = (float(lo), float(hi))
        self.drag = SyntheticDrag(self.d, self.oracle_seed, **(self.drag_params or {}))
        self.n_actions = 4 * self.d + 1

    @property
    def feature_dim(self) -> int:
        return 2 * self.d + 2

    def oracle_fn(self, state: DenseVector) -> float:
        return self.drag(state)

    def make_state(self, targets: tuple[float, float], offsets: Sequence[int]) -> DenseVector:
        # offsets are integers summing to zero per side; coefficient = target + delta * offset / d
        d = self.d
        vals = tuple(targets[i // d] + self.delta * offsets[i] / d for i in range(2 * d))
        return DenseVector(vals, d, (float(targets[0]), float(targets[1])), tuple(offsets))

    def uniform(self, m0: float, m1: float) -> DenseVector:
        return self.make_state((m0, m1), (0,) * (2 * self.d))

    def reset(self, rng: np.random.Generator, interval: tuple[float, float] | None = None) -> DenseVector:
        lo, hi = interval or self.constraint
        if lo > hi:
            raise ConfigError("env.constraint", f"lo {lo} > hi {hi}")
        m0, m1 = (lo, lo) if lo == hi else tuple(float(v) for v in rng.uniform(lo, hi, size=2))
        return self.uniform(m0, m1)

    def step(self, state: DenseVector, action: int) -> DenseVector:
        if action == NOOP:
            return state
        new = self._moved(state, action)
        if not self._on_grid(new):
            raise DomainError(f"action {action} leaves the grid |offset| <= {self.max_offset}")
        return self.make_state(state.targets, new)

    def _moved(self, state: DenseVector, action: int) -> list[int]:
        if not 0 < action < self.n_actions:
            raise DomainError(f"action {action} outside [0, {self.n_actions})")
        i, sign = (action - 1) // 2, (1 if (action - 1) % 2 == 0 else -1)
        side = i // self.d
        new = list(self._offsets(state))
        for k in range(side * self.d, (side + 1) * self.d):
            new[k] -= sign
        new[i] += sign * self.d
        return new

    def _on_grid(self, offsets) -> bool:
        return self.max_offset is None or max(abs(o) for o in offsets) <= self.max_offset

    def legal(self, state: DenseVector, action: int) -> bool:
        return action == NOOP or self._on_grid(self._moved(state, action))

    def successors(self, state: DenseVector) -> list[tuple[int, DenseVector]]:
        return [(a, self.step(state, a)) for a in range(self.n_actions) if self.legal(state, a)]

    def _offsets(self, state: DenseVector) -> tuple[int, ...]:
        if state.offsets is None:
            raise DomainError("profile state is not on the action lattice")
        return state.offsets

    def sample_initial(self, n: int, rng: np.random.Generator) -> list[DenseVector]:
        """Random profiles: a uniform start at a mean from ``init_constraint``
        followed by a random-length random walk."""
        out = []
        for _ in range(n):
            s = self.reset(rng, self.init_constraint)
            for _ in range(int(rng.integers(0, self.horizon + 1))):
                a = int(rng.integers(1, self.n_actions))
                if self.legal(s, a):
                    s = self.step(s, a)
            out.append(s)
        return out

    def encode(self, state: DenseVector) -> np.ndarray:
        return (featurize(state) - self.feature_center) / self.feature_scale

    def objective(self, value, start_value) -> float:
        return float(value)

    def grid_optimum(self, targets: tuple[float, float], levels: int = 5) -> tuple[float, DenseVector]:
        """Exhaustive search over the constrained ``levels``-level coefficient grid.

        Grid coefficients are ``target + j * delta / d`` for ``|j| <= levels // 2``
        (in lattice units ``offset = j``); only mean-preserving combinations are kept.
        """
        import itertools

        half = levels // 2
        per_side = [c for c in itertools.product(range(-half, half + 1), repeat=self.d) if sum(c) == 0]
        best = (math.inf, None)
        for left in per_side:
            for right in per_side:
                s = self.make_state(targets, left + right)
                f = self.drag(s)
                if f < best[0]:
                    best = (f, s)
        return best


# --------------------------------------------------------------------------- sequences


class SequenceProperty:
    """``sum(w[t]) - c1 * n_distinct - c2 * max(0, longest_run - run_threshold)``."""

    def __init__(self, vocab: int, seed: int = 0, c1: float = 0.5, c2: float = 3.0,
                 run_threshold: int = 3, weight_scale: float = 1.0):
        rng = make_rng((seed, 7002))
        self.weights = rng.normal(0.5, weight_scale, size=vocab)
        self.c1, self.c2, self.run_threshold = c1, c2, run_threshold

    def __call__(self, state: TokenSeq) -> float:
        toks = state.tokens
        if not toks:
            return 0.0
        base = math.fsum(float(self.weights[t]) for t in toks)
        longest = run = 1
        for prev, cur in zip(toks, toks[1:]):
            run = run + 1 if cur == prev else 1
            longest = max(longest, run)
        return base - self.c1 * len(set(toks)) - self.c2 * max(0, longest - self.run_threshold)


def seq_property(state: TokenSeq, seed: int = 0, **params) -> float:
    return SequenceProperty(state.vocab, seed, **params)(state)


@dataclass
class SeqEnv:
    """Append / remove-last / increment-position edits on a token sequence.

    Action ids: 0 no-op; ``1..V`` append token ``a-1``; ``V+1`` remove last;
    ``V+2+i`` replace position ``i`` by the next token (mod V).
    The oracle value is the negated property, so delta rewards are property gains.
    """

    vocab: int = 8
    max_len: int = 12
    horizon: int = 40
    oracle_seed: int = 0
    width: int = 64
    init_max_len: int = 4
    feature_scale: float = 2.0
    property_params: dict | None = None

    reward_mode = Delta()
    output_dim = 1

    def __post_init__(self):
        if self.vocab < 1 or self.max_len < 1:
            raise ConfigError("env", "vocab and max_len must be >= 1")
        self.prop = SequenceProperty(self.vocab, self.oracle_seed, **(self.property_params or {}))
        self.n_actions = self.vocab + 2 + self.max_len

    @property
    def feature_dim(self) -> int:
        return self.width

    def oracle_fn(self, state: TokenSeq) -> float:
        return -self.prop(state)

    def seq(self, tokens) -> TokenSeq:
        return TokenSeq(tuple(int(t) for t in tokens), self.vocab, self.max_len)

    def reset(self, rng: np.random.Generator) -> TokenSeq:
        return self.seq(())

    def legal(self, state: TokenSeq, action: int) -> bool:
        n = len(state.tokens)
        if action == NOOP:
            return True
        if 1 <= action <= self.vocab:
            return n < self.max_len
        if action == self.vocab + 1:
            return n > 0
        i = action - self.vocab - 2
        return 0 <= i < n and self.vocab > 1

    def step(self, state: TokenSeq, action: int) -> TokenSeq:
        if not 0 <= action < self.n_actions or not self.legal(state, action):
            raise DomainError(f"illegal action {action} for sequence of length {len(state)}")
        toks = state.tokens
        if action == NOOP:
            return state
        if action <= self.vocab:
            return self.seq(toks + (action - 1,))
        if action == self.vocab + 1:
            return self.seq(toks[:-1])
        i = action - self.vocab - 2
        return self.seq(toks[:i] + ((toks[i] + 1) % self.vocab,) + toks[i + 1:])

    def successors(self, state: TokenSeq) -> list[tuple[int, TokenSeq]]:
        return [(a, self.step(state, a)) for a in range(self.n_actions) if self.legal(state, a)]

    def random_sequence(self, rng: np.random.Generator, lo: int, hi: int) -> TokenSeq:
        n = int(rng.integers(lo, hi + 1))
        return self.seq(rng.integers(0, self.vocab, size=n))

    def sample_initial(self, n: int, rng: np.random.Generator) -> list[TokenSeq]:
        return [self.random_sequence(rng, 0, self.init_max_len) for _ in range(n)]

    def encode(self, state: TokenSeq) -> np.ndarray:
        return featurize(state, self.width) / self.feature_scale

    def objective(self, value, start_value) -> float:
        return float(value)


class TwoPropertyOracle:
    """Two smooth functions of the k-gram features, standing in for (LUMO, gap)."""

    def __init__(self, width: int, seed: int = 0, nonlinear: float = 0.5):
        rng = make_rng((seed, 7003))
        self.width = width
        self.lin = rng.normal(0.0, 1.0, size=(2, width))
        self.proj = rng.normal(0.0, 1.0 / math.sqrt(width), size=(2, width))
        self.nonlinear = nonlinear

    def __call__(self, state: TokenSeq) -> tuple[float, float]:
        phi = featurize(state, self.width)
        out = self.lin @ phi / 4.0 + self.nonlinear * np.tanh(self.proj @ phi)
        return (float(out[0]), float(out[1]))


def improve_oracle(state: TokenSeq, width: int = 64, seed: int = 0) -> tuple[float, float]:
    return TwoPropertyOracle(width, seed)(state)


@dataclass
class ImproveEnv(SeqEnv):
    """Five-step edits of a random start sequence; reward relative to the start."""

    horizon: int = 5
    start_len: tuple[int, int] = (3, 8)

    reward_mode = ImprovementFromStart(primary=0, secondary=1)
    output_dim = 2

    def __post_init__(self):
        super().__post_init__()
        self.pair = TwoPropertyOracle(self.width, self.oracle_seed)

    def oracle_fn(self, state: TokenSeq) -> tuple[float, float]:
        return self.pair(state)

    def reset(self, rng: np.random.Generator) -> TokenSeq:
        return self.random_sequence(rng, *self.start_len)

    def sample_initial(self, n: int, rng: np.random.Generator) -> list[TokenSeq]:
        return [self.random_sequence(rng, *self.start_len) for _ in range(n)]

    def objective(self, value, start_value) -> float:
        """Negated improvement, so lower is better as for the other tasks."""
        m = self.reward_mode
        return -improvement_reward(value[m.primary], start_value[m.primary],
                                   value[m.secondary], start_value[m.secondary])


ENVIRONMENTS = {"profile": ProfileEnv, "seq": SeqEnv, "improve": ImproveEnv}
