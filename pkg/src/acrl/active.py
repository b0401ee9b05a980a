"""Active acquisition of ground-truth labels from the agent's recent experience."""

from __future__ import annotations

import csv
import logging
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import ConfigError, DomainError, State, state_key
from .reward_model import Committee, LabeledDataset, mean_input_gradient_norm, member_outputs, population_std

log = logging.getLogger(__name__)

STRATEGIES = ("random", "std", "binned", "value", "gradnorm")

ACQUISITION_LOG_HEADER = ["episode", "strategy", "candidate_count", "selected_count",
                          "oracle_calls", "wall_seconds"]


@dataclass(frozen=True)
class AcquisitionStrategy:
    kind: str = "std"
    budget: int = 50
    window: int = 2000
    every: int = 100
    num_bins: int = 5

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError("reward_model.strategy", f"unknown strategy {self.kind!r}")
        if self.budget < 1:
            raise ConfigError("reward_model.budget", "must be >= 1")
        if self.window < self.budget:
            raise ConfigError("reward_model.window", "window must hold at least one budget of states")
        if self.num_bins < 1:
            raise ConfigError("reward_model.num_bins", "must be >= 1")
        if self.every < 1:
            raise ConfigError("reward_model.retrain_every", "must be >= 1")


class ExperienceWindow:
    """The last ``capacity`` distinct visited states; a revisit refreshes recency."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._states: OrderedDict = OrderedDict()

    def add(self, state: State) -> None:
        key = state_key(state)
        if key in self._states:
            self._states.move_to_end(key)
            return
        self._states[key] = state
        if len(self._states) > self.capacity:
            self._states.popitem(last=False)

    def __len__(self):
        return len(self._states)

    def states(self) -> list[State]:
        return list(self._states.values())


def assign_bins(values: np.ndarray, num_bins: int) -> np.ndarray:
    """Equal-width bins over ``[min, max]``, half-open, the maximum in the last bin."""
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(len(values), dtype=int)
    # scale before dividing so values on an edge land exactly on it
    bins = np.floor((values - lo) * num_bins / (hi - lo)).astype(int)
    return np.clip(bins, 0, num_bins - 1)


def score_candidates(strategy: AcquisitionStrategy, committee: Committee, features,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Acquisition scores per candidate, and bin ids for the binned strategy."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise DomainError("no candidates to score")
    kind = strategy.kind
    if kind == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return rng.random(len(x)), None
    if kind == "gradnorm":
        return mean_input_gradient_norm(committee, x), None
    outs = member_outputs(committee, x)
    # multi-output models: average over outputs
    means = outs.mean(axis=0).mean(axis=1)
    stds = population_std(outs).mean(axis=1)
    if kind == "std":
        return stds, None
    if kind == "value":
        return means, None
    return stds, assign_bins(means, strategy.num_bins)


def _top(scores: np.ndarray, n: int) -> list[int]:
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    return [int(i) for i in order[:n]]


def select(scores, strategy: AcquisitionStrategy, n: int, rng: np.random.Generator | None = None,
           bins: np.ndarray | None = None) -> list[int]:
    """Indices of the ``n`` chosen candidates (ties go to the lowest index)."""
    scores = np.asarray(scores, dtype=float)
    if n > len(scores):
        raise DomainError(f"cannot select {n} of {len(scores)} candidates")
    if strategy.kind == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return [int(i) for i in rng.choice(len(scores), size=n, replace=False)]
    if strategy.kind != "binned":
        return _top(scores, n)
    if bins is None:
        raise DomainError("binned selection needs bin assignments")
    queues = {}
    for i in _top(scores, len(scores)):
        queues.setdefault(int(bins[i]), []).append(i)
    picked: list[int] = []
    order = sorted(queues)
    while len(picked) < n:
        for b in order:
            if queues[b] and len(picked) < n:
                picked.append(queues[b].pop(0))
    return picked


@dataclass
class AcquisitionResult:
    rows: list[list[tuple]]   # per member: (key, features, label)
    candidate_count: int
    selected_count: int
    oracle_calls: int
    wall_seconds: float
    failed: int = 0


def acquisition_round(window: ExperienceWindow, committee: Committee, oracle,
                      strategy: AcquisitionStrategy, encode: Callable[[State], np.ndarray],
                      datasets: Sequence[LabeledDataset], rng: np.random.Generator,
                      workers: int = 1) -> AcquisitionResult:
    """Score and select once per member, label the union of picks once each.

    Each member only considers window states absent from its own dataset and
    receives the rows it selected, in sorted state-key order.
    """
    states = window.states()
    if not states:
        raise DomainError("empty experience window")
    t0 = time.perf_counter()
    calls0 = oracle.calls
    feats = np.vstack([encode(s) for s in states])
    keys = [state_key(s) for s in states]
    shared = None if strategy.kind == "random" else score_candidates(strategy, committee, feats)
    picks: list[list[int]] = []
    selected = 0
    for ds in datasets:
        cand = [i for i, k in enumerate(keys) if k not in ds]
        if not cand:
            picks.append([])
            continue
        n = min(strategy.budget, len(cand))
        if shared is None:
            scores, bins = score_candidates(strategy, committee, feats[cand], rng)
        else:
            scores = shared[0][cand]
            bins = None if shared[1] is None else shared[1][cand]
        chosen = [cand[j] for j in select(scores, strategy, n, rng, bins)]
        picks.append(chosen)
        selected += len(chosen)

    union = sorted({i for p in picks for i in p}, key=lambda i: keys[i])
    labels: dict[int, object] = {}
    failed = 0

    def query(i):
        try:
            return i, oracle(states[i])
        except Exception as exc:  # noqa: BLE001 - one bad state must not abort the round
            log.warning("skipping state %r: %s", keys[i], exc)
            return i, None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(query, union))
    else:
        results = [query(i) for i in union]
    for i, value in results:
        if value is None:
            failed += 1
        else:
            labels[i] = value

    rows = []
    for p in picks:
        mine = sorted((i for i in p if i in labels), key=lambda i: keys[i])
        rows.append([(keys[i], feats[i], labels[i]) for i in mine])
    return AcquisitionResult(rows, len(states), selected, oracle.calls - calls0,
                             time.perf_counter() - t0, failed)


class AcquisitionLog:
    def __init__(self, path):
        self.path = Path(path)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(ACQUISITION_LOG_HEADER)

    def write(self, episode: int, strategy: AcquisitionStrategy, result: AcquisitionResult) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([episode, strategy.kind, result.candidate_count,
                                     result.selected_count, result.oracle_calls,
                                     f"{result.wall_seconds:.6f}"])
