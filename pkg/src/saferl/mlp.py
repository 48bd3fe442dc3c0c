"""Small dense networks with hand-written forward and backward passes.

tanh hidden layers, linear output.  Inputs are batched row-wise: x has shape
(B, d_in), weights (d_in, d_out).  Gradients are exact and are checked
against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DenseNet",
    "net_init",
    "net_forward",
    "net_backward",
    "Adam",
    "clip_by_global_norm",
    "flatten_arrays",
    "unflatten_arrays",
]


@dataclass
class DenseNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def _orthogonal(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))  # unique decomposition, keeps determinism meaningful
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def net_init(
    sizes: tuple[int, ...],
    rng: np.random.Generator,
    hidden_gain: float = np.sqrt(2.0),
    out_gain: float = 1.0,
) -> DenseNet:
    """Orthogonal weight init (scaled), zero biases."""
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        gain = out_gain if i == len(sizes) - 2 else hidden_gain
        weights.append(_orthogonal(sizes[i], sizes[i + 1], gain, rng))
        biases.append(np.zeros(sizes[i + 1]))
    return DenseNet(weights, biases)


def net_forward(net: DenseNet, x: np.ndarray):
    """Returns (output, cache); cache feeds net_backward."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    activations = [x]
    h = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if i == n_layers - 1 else np.tanh(z)
        activations.append(h)
    return h, activations


def net_backward(net: DenseNet, cache: list[np.ndarray], dout: np.ndarray):
    """Backprop dout (B, d_out) through the net.

    Returns (grads, dx) with grads ordered like net.params().
    """
    n_layers = len(net.weights)
    grads_w: list[np.ndarray] = [None] * n_layers
    grads_b: list[np.ndarray] = [None] * n_layers
    dh = np.atleast_2d(np.asarray(dout, dtype=float))
    for i in range(n_layers - 1, -1, -1):
        # output layer is linear; hidden activations are tanh
        dz = dh if i == n_layers - 1 else dh * (1.0 - cache[i + 1] ** 2)
        grads_w[i] = cache[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        dh = dz @ net.weights[i].T
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads.append(gw)
        grads.append(gb)
    return grads, dh


class Adam:
    """Standard Adam with bias correction; lr 0 leaves parameters untouched."""

    def __init__(self, shapes, lr: float, beta1=0.9, beta2=0.999, eps=1e-5):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their joint 2-norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def flatten_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])


def unflatten_arrays(flat: np.ndarray, templates: list[np.ndarray]) -> list[np.ndarray]:
    out = []
    offset = 0
    for t in templates:
        size = int(np.prod(t.shape)) if t.shape else 1
        out.append(np.asarray(flat[offset : offset + size]).reshape(t.shape))
        offset += size
    if offset != flat.size:
        raise ValueError("flat vector size does not match templates")
    return out
