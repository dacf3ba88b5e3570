"""Fully connected ReLU network with hand-written backprop.

Parameters are a flat list ``[W0, b0, W1, b1, ...]`` with ``W_i`` of shape
``(fan_in, fan_out)``; inputs are batches of row vectors.
"""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from ..errors import ContractViolation

HIDDEN = (64, 64, 64, 64, 64)


def init_mlp(rng, in_dim: int, out_dim: int, hidden: Sequence[int] = HIDDEN, out_scale: float = 1.0) -> List[np.ndarray]:
    sizes = [in_dim, *hidden, out_dim]
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        gain = out_scale if last else np.sqrt(2.0)
        W = rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))
        params += [W, np.zeros(fan_out)]
    return params


def layer_shapes(params) -> List[tuple]:
    return [p.shape for p in params]


def mlp_forward(params, x) -> np.ndarray:
    h = np.asarray(x, dtype=float)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    if h.shape[1] != params[0].shape[0]:
        raise ContractViolation(f"input dim {h.shape[1]} != network input {params[0].shape[0]}")
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def forward_cached(params, x):
    """Forward pass keeping the activations needed by :func:`backward`."""
    h = np.atleast_2d(np.asarray(x, dtype=float))
    if h.shape[1] != params[0].shape[0]:
        raise ContractViolation(f"input dim {h.shape[1]} != network input {params[0].shape[0]}")
    inputs = []
    n_layers = len(params) // 2
    for i in range(n_layers):
        inputs.append(h)
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h, inputs


def backward(params, inputs, grad_out) -> List[np.ndarray]:
    grads = [None] * len(params)
    g = grad_out
    n_layers = len(params) // 2
    for i in reversed(range(n_layers)):
        x = inputs[i]
        grads[2 * i] = x.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ params[2 * i].T) * (x > 0)
    return grads


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [g * scale for g in grads]
    return grads, total
