"""Small dense regression networks: ReLU hidden layers, linear output, MSE loss, Adam.

Weights are stored ``(fan_in, fan_out)`` so a batch ``X`` of shape ``(n, fan_in)``
maps through ``X @ W + b``. Parameters live in one flat list
``[W0, b0, W1, b1, ...]`` which is also the layout of gradients and Adam moments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DivergenceError, DomainError

CHECKPOINT_FORMAT = "acrl-mlp-v1"


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator determined by ``seed`` alone.

    ``seed`` may be an int or a sequence of ints (used to derive independent
    streams, e.g. ``(run_seed, member_index)``).
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class Network:
    sizes: tuple[int, ...]
    params: tuple[np.ndarray, ...]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def weights(self, i: int) -> np.ndarray:
        return self.params[2 * i]

    def bias(self, i: int) -> np.ndarray:
        return self.params[2 * i + 1]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "Network":
        return Network(self.sizes, tuple(p.copy() for p in self.params))

    def equals(self, other: "Network") -> bool:
        return self.sizes == other.sizes and all(
            np.array_equal(a, b) for a, b in zip(self.params, other.params))


def init_network(layer_sizes: Sequence[int], seed, dtype=np.float64) -> Network:
    """He-style uniform weights (``sqrt(6 / fan_in)`` bound, ``sqrt(3 / fan_in)`` on the
    output layer) and zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise DomainError("a network needs at least an input and an output layer")
    if any(s < 1 for s in sizes):
        raise DomainError(f"layer sizes must be positive, got {sizes}")
    rng = make_rng(seed)
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = 3.0 if i == len(sizes) - 2 else 6.0
        bound = np.sqrt(gain / fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        params.append(np.zeros(fan_out, dtype=dtype))
    return Network(sizes, tuple(params))


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=net.params[0].dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.sizes[0]:
        raise DomainError(f"input of shape {x.shape} does not match input layer {net.sizes[0]}")
    return x, single


def _forward(params, n_layers: int, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ params[2 * i] + params[2 * i + 1]
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(h)
    return h, acts


def forward(net: Network, x) -> np.ndarray:
    """Output for one input vector (1-D result) or a batch (2-D result)."""
    xb, single = _as_batch(net, x)
    out, _ = _forward(net.params, net.n_layers, xb)
    return out[0] if single else out


def _backward(params, n_layers: int, acts: list[np.ndarray], dout: np.ndarray,
              want_input: bool = False):
    grads = [None] * (2 * n_layers)
    delta = dout
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0 or want_input:
            delta = delta @ params[2 * i].T
            if i > 0:
                delta = delta * (acts[i] > 0.0)
    return grads, delta


def loss_and_grad(net: Network, x, y) -> tuple[float, list[np.ndarray]]:
    """Mean squared error over the batch (and output dims) and its exact gradient."""
    xb, _ = _as_batch(net, x)
    if xb.shape[0] == 0:
        raise DomainError("empty batch")
    yb = np.asarray(y, dtype=xb.dtype).reshape(xb.shape[0], net.sizes[-1])
    pred, acts = _forward(net.params, net.n_layers, xb)
    err = pred - yb
    loss = float(np.mean(err * err))
    grads, _ = _backward(net.params, net.n_layers, acts, err * (2.0 / err.size))
    return loss, grads


def input_jacobian(net: Network, x) -> np.ndarray:
    """``d output / d input`` per sample, shape ``(n, n_out, n_in)``."""
    xb, _ = _as_batch(net, x)
    _, acts = _forward(net.params, net.n_layers, xb)
    n_out = net.sizes[-1]
    jac = np.empty((xb.shape[0], n_out, xb.shape[1]))
    for k in range(n_out):
        seed = np.zeros((xb.shape[0], n_out))
        seed[:, k] = 1.0
        _, dx = _backward(net.params, net.n_layers, acts, seed, want_input=True)
        jac[:, k, :] = dx
    return jac


@dataclass(frozen=True)
class AdamState:
    """First and second moments, kept as flat vectors over all parameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(net: Network, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    n = net.param_count()
    dtype = net.params[0].dtype
    return AdamState(np.zeros(n, dtype), np.zeros(n, dtype), 0, lr, beta1, beta2, eps)


def adam_step(net: Network, grads: Sequence[np.ndarray], opt: AdamState) -> tuple[Network, AdamState]:
    """One bias-corrected Adam update; returns new network and optimizer state."""
    if len(grads) != len(net.params) or opt.m.shape != (net.param_count(),):
        raise DomainError("gradient/optimizer layout does not match the network")
    for p, g in zip(net.params, grads):
        if g.shape != p.shape:
            raise DomainError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    t = opt.step + 1
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    dtype = net.params[0].dtype
    g = np.concatenate([x.ravel() for x in grads]).astype(dtype, copy=False)
    flat = np.concatenate([x.ravel() for x in net.params])
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * (g * g)
    flat = (flat - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(dtype, copy=False)
    params, i = [], 0
    for p in net.params:
        params.append(flat[i:i + p.size].reshape(p.shape))
        i += p.size
    new_opt = AdamState(m, v, t, opt.lr, opt.beta1, opt.beta2, opt.eps)
    return Network(net.sizes, tuple(params)), new_opt


def train(net: Network, x, y, epochs: int, batch_size: int, lr: float, seed,
          max_steps: int | None = None) -> tuple[Network, list[float]]:
    """Shuffled minibatch Adam on MSE.

    Returns the trained network and the mean loss of each epoch. With
    ``max_steps`` the run stops after that many minibatch updates (the last
    epoch may be partial); this is how fine-tuning on a growing dataset keeps
    a bounded cost.
    """
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        raise DomainError("empty training set")
    y = np.asarray(y, dtype=float).reshape(len(x), -1)
    rng = make_rng(seed)
    opt = init_adam(net, lr=lr)
    history: list[float] = []
    n = len(x)
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        seen = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grad(net, x[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss after {steps} steps")
            net, opt = adam_step(net, grads, opt)
            total += loss * len(idx)
            seen += len(idx)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        history.append(total / seen)
        if max_steps is not None and steps >= max_steps:
            break
    return net, history


def mse(net: Network, x, y) -> float:
    x = np.asarray(x, dtype=float)
    pred = forward(net, x)
    return float(np.mean((pred - np.asarray(y, dtype=float).reshape(pred.shape)) ** 2))


def save_network(net: Network, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "layer_sizes": list(net.sizes),
        "dtype": str(net.params[0].dtype),
        "params": [p.ravel(order="C").tolist() for p in net.params],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_network(path) -> Network:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DomainError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint")
    sizes = tuple(doc["layer_sizes"])
    dtype = np.dtype(doc.get("dtype", "float64"))
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.append(np.array(doc["params"][2 * i], dtype=dtype).reshape(fan_in, fan_out))
        params.append(np.array(doc["params"][2 * i + 1], dtype=dtype))
    return Network(sizes, tuple(params))
