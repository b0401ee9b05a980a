"""Double DQN over successor states.

``Q(s, a)`` is the online network's value of the successor reached by ``a``
(its features plus the fraction of the episode still remaining), so one
single-output network serves any number of legal actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .core import ConfigError, DivergenceError, DomainError, State, Transition


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("agent.buffer_capacity", "must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0

    def add(self, item: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._cursor] = item
        self._cursor = (self._cursor + 1) % self.capacity

    def __len__(self):
        return len(self._items)

    def items(self) -> list[Transition]:
        """Contents from oldest to newest."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._cursor:] + self._items[:self._cursor]

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


@dataclass(frozen=True)
class EpsilonSchedule:
    """Blend of a linear and an exponential decay, both pinned to the same endpoints:

    ``eps(t) = eps0 * (lam * (1 - beta * t) + (1 - lam) * alpha ** t)`` with
    ``alpha = (eps_end / eps0) ** (1 / t_end)`` and ``beta = (1 - eps_end / eps0) / t_end``.
    """

    eps0: float = 1.0
    lam: float = 0.0
    t_end: int = 4800
    eps_end: float = 0.01

    def __post_init__(self):
        if self.t_end <= 0:
            raise DomainError("epsilon schedule needs t_end > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise DomainError("lambda must lie in [0, 1]")
        if self.eps0 <= 0:
            raise DomainError("eps0 must be positive")

    @property
    def alpha(self) -> float:
        return (self.eps_end / self.eps0) ** (1.0 / self.t_end)

    @property
    def beta(self) -> float:
        return (1.0 - self.eps_end / self.eps0) / self.t_end

    def __call__(self, t: float) -> float:
        return epsilon_at(self, t)


def epsilon_at(schedule: EpsilonSchedule, t: float) -> float:
    if t < 0:
        raise DomainError("episode index must be >= 0")
    if t > schedule.t_end:
        return schedule.eps_end
    s = schedule
    return s.eps0 * (s.lam * (1.0 - s.beta * t) + (1.0 - s.lam) * s.alpha ** t)


def enumerate_successors(env, state: State) -> list[tuple[int, State]]:
    return env.successors(state)


class StateFeatures:
    """Memoized successor lists and encoded features for one environment.

    Both are pure functions of the state, so caching never changes results.
    """

    def __init__(self, env, max_entries: int = 100_000, dtype=np.float32):
        self.env = env
        self.dtype = dtype
        self.max_entries = max_entries
        self._succ: dict = {}
        self._feat: dict = {}

    def successors(self, state: State) -> tuple[list[tuple[int, State]], np.ndarray]:
        """Legal ``(action, successor)`` pairs and the successors' encoded features."""
        out = self._succ.get(state)
        if out is None:
            if len(self._succ) >= self.max_entries:
                self._succ.clear()
            succ = self.env.successors(state)
            feats = np.vstack([self.encode(s) for _, s in succ]) if succ else np.zeros((0, self.env.feature_dim))
            feats = feats.astype(self.dtype)
            out = self._succ[state] = (succ, feats)
        return out

    def encode(self, state: State) -> np.ndarray:
        out = self._feat.get(state)
        if out is None:
            if len(self._feat) >= self.max_entries:
                self._feat.clear()
            out = self._feat[state] = self.env.encode(state)
        return out

    def with_steps(self, feats: np.ndarray, steps_left) -> np.ndarray:
        x = np.empty((feats.shape[0], feats.shape[1] + 1), dtype=self.dtype)
        x[:, :-1] = feats
        x[:, -1] = np.asarray(steps_left, dtype=float) / self.env.horizon
        return x

    def q_inputs(self, states: Sequence[State], steps_left) -> np.ndarray:
        return self.with_steps(np.vstack([self.encode(s) for s in states]), steps_left)

    def successor_inputs(self, state: State, steps_left: int) -> tuple[list[tuple[int, State]], np.ndarray]:
        succ, feats = self.successors(state)
        return succ, self.with_steps(feats, steps_left)


@dataclass
class QFunction:
    online: nn.Network
    target: nn.Network
    gamma: float = 0.95
    opt: nn.AdamState | None = None
    updates: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("agent.gamma", "must lie in [0, 1]")
        if self.opt is None:
            self.opt = nn.init_adam(self.online)


def make_q(n_inputs: int, hidden: Sequence[int], seed, gamma: float = 0.95, lr: float = 1e-3,
           dtype=np.float32) -> QFunction:
    online = nn.init_network((n_inputs,) + tuple(hidden) + (1,), seed, dtype)
    return QFunction(online, online.copy(), gamma, nn.init_adam(online, lr=lr))


def sync_target(q: QFunction) -> QFunction:
    q.target = q.online.copy()
    return q


def select_action(q: QFunction, successor_features, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy index into the successor list (greedy ties: lowest index)."""
    x = np.asarray(successor_features, dtype=float)
    if len(x) == 0:
        raise DomainError("no successors to choose from")
    if rng.random() < epsilon:
        return int(rng.integers(len(x)))
    values = nn.forward(q.online, x)[:, 0]
    return int(np.argmax(values))


def compute_targets(batch: Sequence[Transition], q: QFunction, features: StateFeatures) -> np.ndarray:
    """Double DQN: the online net picks the next successor, the target net values it."""
    targets = np.array([t.reward for t in batch], dtype=float)
    live = [i for i, t in enumerate(batch) if not t.terminal]
    if live and q.gamma > 0:
        blocks, sizes, left = [], [], []
        for i in live:
            t = batch[i]
            feats = features.successors(t.next_state)[1]
            if len(feats) == 0:
                raise DomainError("non-terminal transition without successors")
            blocks.append(feats)
            sizes.append(len(feats))
            left.append(t.steps_left - 1)
        x = features.with_steps(np.vstack(blocks), np.repeat(left, sizes))
        online = nn.forward(q.online, x)[:, 0]
        target = nn.forward(q.target, x)[:, 0]
        seg = np.repeat(np.arange(len(live)), sizes)
        # sort by segment, then value descending; stable, so ties keep the lowest index
        order = np.lexsort((-online, seg))
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        targets[live] += q.gamma * target[order[starts]]
    if not np.all(np.isfinite(targets)):
        raise DivergenceError("non-finite Q targets")
    return targets


def optimize_step(q: QFunction, buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator,
                  features: StateFeatures, sync_every: int = 0) -> float | None:
    """One Adam step on the online net; ``None`` when the buffer is too small."""
    if len(buffer) < batch_size:
        return None
    batch = buffer.sample(batch_size, rng)
    y = compute_targets(batch, q, features)
    x = features.q_inputs([t.next_state for t in batch], [t.steps_left for t in batch])
    loss, grads = nn.loss_and_grad(q.online, x, y)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite Q loss")
    q.online, q.opt = nn.adam_step(q.online, grads, q.opt)
    q.updates += 1
    if sync_every and q.updates % sync_every == 0:
        sync_target(q)
    return loss
