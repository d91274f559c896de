"""Small tanh multilayer perceptrons with hand-written backprop, plus optimisers."""
from __future__ import annotations

import numpy as np


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


class MLP:
    """Fully connected net, tanh after every hidden layer, linear head.

    Parameters live in ``self.params`` as ``[W0, b0, W1, b1, ...]`` with
    ``W`` shaped ``(fan_in, fan_out)``.
    """

    def __init__(self, sizes, rng=None, out_gain: float = 1.0, hidden_gain: float = np.sqrt(2)):
        self.sizes = list(sizes)
        self.params = []
        if rng is None:
            return
        n = len(self.sizes) - 1
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = out_gain if k == n - 1 else hidden_gain
            self.params += [orthogonal(rng, a, b, gain), np.zeros(b)]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for k in range(self.n_layers):
            h = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, dout: np.ndarray) -> list:
        grads = [None] * len(self.params)
        g = dout
        for k in reversed(range(self.n_layers)):
            if k < self.n_layers - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k:
                g = g @ self.params[2 * k].T
        return grads


def pack(arrays):
    """Copy ``arrays`` into one contiguous vector; return it and reshaped views into it."""
    flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])
    views, o = [], 0
    for a in arrays:
        views.append(flat[o:o + a.size].reshape(a.shape))
        o += a.size
    return flat, views


def flat_grad(grads) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-5):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr=None):
        """Descend along ``grads`` (gradients of a loss to minimise)."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-2):
        self.params = params
        self.lr = lr

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        for p, g in zip(self.params, grads):
            p -= lr * g


def clip_grad_norm(grads, max_norm: float):
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = [g * s for g in grads]
    return grads, norm
