"""Query-by-committee reward model: ``k`` regressors over differently split data.

The committee mean is the reward estimate; the population standard deviation
of member outputs is the uncertainty used for acquisition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .core import DomainError

INITIAL = "initial"
ACQUIRED = "acquired"


class LabeledDataset:
    """Rows of (features, label, provenance), deduplicated by state key."""

    def __init__(self, n_features: int, n_outputs: int = 1):
        self.n_features = n_features
        self.n_outputs = n_outputs
        self._x: list[np.ndarray] = []
        self._y: list[np.ndarray] = []
        self.provenance: list[str] = []
        self.keys: list = []
        self._keyset: set = set()
        self._cache = None

    def __len__(self):
        return len(self._x)

    def __contains__(self, key) -> bool:
        return key in self._keyset

    def add(self, x, y, provenance: str = INITIAL, key=None) -> bool:
        """Append one row; returns False (and adds nothing) for a known key."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
        if x.shape[0] != self.n_features:
            raise DomainError(f"row has {x.shape[0]} features, dataset expects {self.n_features}")
        if y.shape[0] != self.n_outputs or not np.all(np.isfinite(y)):
            raise DomainError(f"label {y} is not {self.n_outputs} finite value(s)")
        if provenance not in (INITIAL, ACQUIRED):
            raise DomainError(f"unknown provenance {provenance!r}")
        if key is not None:
            if key in self._keyset:
                return False
            self._keyset.add(key)
        self._x.append(x)
        self._y.append(y)
        self.provenance.append(provenance)
        self.keys.append(key)
        return True

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        # extend the cached arrays with rows added since the last call
        n = len(self._x)
        if self._cache is None:
            cx, cy = np.zeros((0, self.n_features)), np.zeros((0, self.n_outputs))
        else:
            cx, cy = self._cache
        if len(cx) < n:
            cx = np.concatenate([cx, np.asarray(self._x[len(cx):])])
            cy = np.concatenate([cy, np.asarray(self._y[len(cy):])])
            self._cache = (cx, cy)
        return cx, cy

    def copy(self) -> "LabeledDataset":
        out = LabeledDataset(self.n_features, self.n_outputs)
        out._x, out._y = list(self._x), list(self._y)
        out.provenance, out.keys = list(self.provenance), list(self.keys)
        out._keyset = set(self._keyset)
        out._cache = self._cache
        return out

    def count(self, provenance: str) -> int:
        return sum(p == provenance for p in self.provenance)

    def header(self) -> list[str]:
        labels = ["label"] if self.n_outputs == 1 else [f"label{j}" for j in range(self.n_outputs)]
        return [f"f{i}" for i in range(self.n_features)] + labels + ["provenance"]

    def write_csv(self, path, start: int = 0) -> None:
        """Write rows ``start:`` to ``path``; with ``start > 0`` rows are appended."""
        path = Path(path)
        fresh = start == 0 or not path.exists()
        with path.open("w" if fresh else "a", newline="") as fh:
            w = csv.writer(fh)
            if fresh:
                w.writerow(self.header())
                start = 0
            for x, y, p in zip(self._x[start:], self._y[start:], self.provenance[start:]):
                w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y] + [p])

    @classmethod
    def read_csv(cls, path) -> "LabeledDataset":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        n_feat = sum(h.startswith("f") for h in header)
        n_out = len(header) - n_feat - 1
        ds = cls(n_feat, n_out)
        for r in rows[1:]:
            ds.add([float(v) for v in r[:n_feat]], [float(v) for v in r[n_feat:n_feat + n_out]], r[-1])
        return ds


@dataclass
class ModelHyper:
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    # fine-tune the previous members instead of retraining from scratch
    fine_tune: bool = False
    fine_tune_steps: int = 200


@dataclass(frozen=True)
class Committee:
    """``members`` are plain networks whose output layer already includes the
    label de-normalization; ``label_shift``/``label_scale`` are kept for fine-tuning."""

    members: tuple[nn.Network, ...]
    split_seeds: tuple[int, ...]
    split_fraction: float = 1.0
    label_shift: tuple[np.ndarray, ...] = field(default=())
    label_scale: tuple[np.ndarray, ...] = field(default=())
    version: int = 0

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def n_inputs(self) -> int:
        return self.members[0].sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.members[0].sizes[-1]


def member_datasets(dataset: LabeledDataset, k: int) -> list[LabeledDataset]:
    """Independent per-member copies sharing the initial rows."""
    return [dataset.copy() for _ in range(k)]


def train_indices(n_rows: int, n_initial: int, split_fraction: float, split_seed: int) -> np.ndarray:
    """Seeded share of the initial rows plus every acquired row."""
    perm = nn.make_rng((split_seed, 11)).permutation(n_initial)
    n_train = max(1, int(round(split_fraction * n_initial))) if n_initial else 0
    return np.concatenate([np.sort(perm[:n_train]), np.arange(n_initial, n_rows)]).astype(int)


def validation_indices(n_initial: int, split_fraction: float, split_seed: int) -> np.ndarray:
    perm = nn.make_rng((split_seed, 11)).permutation(n_initial)
    n_train = max(1, int(round(split_fraction * n_initial))) if n_initial else 0
    return np.sort(perm[n_train:])


def _fold(net: nn.Network, shift: np.ndarray, scale: np.ndarray) -> nn.Network:
    params = list(net.params)
    params[-2] = params[-2] * scale
    params[-1] = params[-1] * scale + shift
    return nn.Network(net.sizes, tuple(params))


def _unfold(net: nn.Network, shift: np.ndarray, scale: np.ndarray) -> nn.Network:
    params = list(net.params)
    params[-2] = params[-2] / scale
    params[-1] = (params[-1] - shift) / scale
    return nn.Network(net.sizes, tuple(params))


def _fit_member(ds: LabeledDataset, idx: np.ndarray, hyper: ModelHyper, seed,
                previous: nn.Network | None, prev_shift=None, prev_scale=None):
    x, y = ds.arrays()
    x, y = x[idx], y[idx]
    if previous is None:
        shift = y.mean(axis=0)
        scale = y.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        net = nn.init_network((x.shape[1],) + tuple(hyper.hidden) + (y.shape[1],), (seed, 1))
        net, _ = nn.train(net, x, (y - shift) / scale, hyper.epochs, hyper.batch_size, hyper.lr, (seed, 2))
    else:
        shift, scale = prev_shift, prev_scale
        net = _unfold(previous, shift, scale)
        epochs = max(1, -(-hyper.fine_tune_steps * hyper.batch_size // len(x)))
        net, _ = nn.train(net, x, (y - shift) / scale, epochs, hyper.batch_size, hyper.lr, (seed, 3),
                          max_steps=hyper.fine_tune_steps)
    return _fold(net, shift, scale), shift, scale


def retrain(committee: Committee, datasets: Sequence[LabeledDataset], hyper: ModelHyper, seed,
            n_initial: int | None = None) -> Committee:
    """New committee trained on the current member datasets.

    From scratch by default; with ``hyper.fine_tune`` each member continues
    from its current parameters for ``fine_tune_steps`` minibatch updates.
    """
    if len(datasets) != committee.k:
        raise DomainError(f"{len(datasets)} datasets for {committee.k} members")
    members, shifts, scales = [], [], []
    for i, ds in enumerate(datasets):
        if len(ds) == 0:
            raise DomainError(f"member {i} has an empty dataset")
        n_init = ds.count(INITIAL) if n_initial is None else n_initial
        idx = train_indices(len(ds), n_init, committee.split_fraction, committee.split_seeds[i])
        prev = committee.members[i] if hyper.fine_tune and committee.label_scale else None
        net, shift, scale = _fit_member(
            ds, idx, hyper, (seed, i), prev,
            committee.label_shift[i] if prev is not None else None,
            committee.label_scale[i] if prev is not None else None)
        members.append(net)
        shifts.append(shift)
        scales.append(scale)
    return Committee(tuple(members), committee.split_seeds, committee.split_fraction,
                     tuple(shifts), tuple(scales), committee.version + 1)


def build_committee(dataset: LabeledDataset, k: int = 3, split_fraction: float = 0.8,
                    hyper: ModelHyper | None = None, seed: int = 0) -> Committee:
    if k < 1:
        raise DomainError("committee needs k >= 1")
    if not 0 < split_fraction <= 1:
        raise DomainError(f"split_fraction {split_fraction} outside (0, 1]")
    if len(dataset) == 0:
        raise DomainError("empty dataset")
    hyper = hyper or ModelHyper()
    seeds = tuple(int(s) for s in nn.make_rng((seed, 10)).integers(0, 2**31, size=k))
    shell = Committee(tuple([None] * k), seeds, split_fraction, version=-1)
    from_scratch = ModelHyper(**{**hyper.__dict__, "fine_tune": False})
    return retrain(shell, member_datasets(dataset, k), from_scratch, seed)


def from_networks(nets: Iterable[nn.Network]) -> Committee:
    """Committee over given networks with identity label scaling."""
    nets = tuple(nets)
    return Committee(nets, tuple(range(len(nets))))


def member_outputs(committee: Committee, x) -> np.ndarray:
    """Member outputs sorted along the member axis, shape ``(k, n, n_out)``.

    Sorting makes the mean and std independent of member order bit for bit.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != committee.n_inputs:
        raise DomainError(f"features of width {x.shape[1]} for committee expecting {committee.n_inputs}")
    outs = np.stack([nn.forward(m, x) for m in committee.members])
    return np.sort(outs, axis=0)


def _shape(values: np.ndarray, x) -> np.ndarray | float:
    single = np.asarray(x).ndim == 1
    if values.shape[-1] == 1:
        values = values[..., 0]
    if single:
        values = values[0]
        return float(values) if np.ndim(values) == 0 else values
    return values


def population_std(outs: np.ndarray) -> np.ndarray:
    """Divide-by-k std over the member axis; exactly zero where all members agree."""
    std = outs.std(axis=0)
    agree = outs[-1] == outs[0]
    lost = ~agree & (std == 0)
    if lost.any():
        # squared deviations underflowed; rescale by the largest deviation
        dev = outs - outs.mean(axis=0)
        scale = np.abs(dev).max(axis=0)
        safe = np.where(lost, scale, 1.0)
        std = np.where(lost, safe * np.sqrt(np.mean((dev / safe) ** 2, axis=0)), std)
    return np.where(agree, 0.0, std)


def predict_mean(committee: Committee, x):
    """Committee-mean prediction: a float for one input and a scalar-output model."""
    return _shape(member_outputs(committee, x).mean(axis=0), x)


def predict_std(committee: Committee, x):
    """Population (divide-by-k) standard deviation of member outputs."""
    return _shape(population_std(member_outputs(committee, x)), x)


def mean_input_gradient_norm(committee: Committee, x) -> np.ndarray:
    """Frobenius norm of ``d mean(output) / d features`` per row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    jac = sum(nn.input_jacobian(m, x) for m in committee.members) / committee.k
    return np.sqrt((jac ** 2).sum(axis=(1, 2)))


def append_acquired(datasets: Sequence[LabeledDataset], rows_per_member) -> list[LabeledDataset]:
    """Extend member ``i`` with exactly the rows its own acquisition pass chose.

    ``rows_per_member[i]`` is an iterable of ``(key, features, label)``.
    """
    if len(rows_per_member) != len(datasets):
        raise DomainError(f"{len(rows_per_member)} row sets for {len(datasets)} members")
    out = []
    for ds, rows in zip(datasets, rows_per_member):
        ds = ds.copy()
        for key, x, y in rows:
            ds.add(x, y, ACQUIRED, key)
        out.append(ds)
    return out


def save_committee(committee: Committee, directory, prefix: str = "member") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(committee.members):
        p = directory / f"{prefix}{i}.json"
        nn.save_network(m, p)
        paths.append(p)
    return paths


def load_committee(paths: Sequence) -> Committee:
    return from_networks(nn.load_network(p) for p in paths)
