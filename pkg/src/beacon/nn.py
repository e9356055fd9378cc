"""Small dense networks with hand-written reverse-mode gradients, plus Adam.

Inputs may be a single vector or a batch (one sample per row); parameter
gradients are summed over the batch in row order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAK = 0.01


@dataclass
class MlpParams:
    weights: list
    biases: list

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def zeros_like(self):
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def size(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def mlp_init(rng_seed, layer_sizes, zero_last=False):
    """Gaussian weights scaled by ``1/sqrt(fan_in)``, zero biases.

    With ``zero_last`` the output layer is exactly zero, so the network
    outputs 0 for every input.
    """
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    if any(int(n) < 1 for n in layer_sizes):
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(rng_seed)
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        if zero_last and i == n_layers - 1:
            w = np.zeros((fan_out, fan_in))
        else:
            w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _leaky(a):
    return np.where(a > 0, a, LEAK * a)


def mlp_apply(params, x):
    """Forward pass. Returns ``(output, backward)``.

    ``backward(grad_out)`` returns ``(param_grads, grad_in)`` where
    ``param_grads`` is an ``MlpParams`` of gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weights[0].shape[1]:
        raise ValueError(f"input length {x.shape[-1]} does not match layer size {params.weights[0].shape[1]}")
    single = x.ndim == 1
    h = x[None, :] if single else x
    acts = [h]
    pre = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w.T + b
        pre.append(a)
        h = a if i == last else _leaky(a)
        acts.append(h)
    out = h[0] if single else h

    def backward(grad_out):
        g = np.asarray(grad_out, dtype=np.float64)
        g = g[None, :] if single else g
        gw = [None] * len(params.weights)
        gb = [None] * len(params.weights)
        for i in range(last, -1, -1):
            if i != last:
                g = np.where(pre[i] > 0, g, LEAK * g)
            gw[i] = g.T @ acts[i]
            gb[i] = g.sum(axis=0)
            g = g @ params.weights[i]
        grad_in = g[0] if single else g
        return MlpParams(gw, gb), grad_in

    return out, backward


def flatten(params):
    """Layer-major, weights (row-major) before biases."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(template, flat, copy=True):
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != template.size:
        raise ValueError(f"expected {template.size} values, got {flat.size}")
    weights, biases = [], []
    pos = 0
    for w, b in zip(template.weights, template.biases):
        wv = flat[pos:pos + w.size].reshape(w.shape)
        weights.append(wv.copy() if copy else wv)
        pos += w.size
        bv = flat[pos:pos + b.size]
        biases.append(bv.copy() if copy else bv)
        pos += b.size
    return MlpParams(weights, biases)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_update(state, params, grads, lr, work=None):
    """In-place Adam update of ``params`` and ``state``; ``work`` is optional
    scratch space of the same shape."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and optimizer state shapes differ")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("non-finite gradient")
    tmp = np.empty_like(params) if work is None else work
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    np.multiply(m, b1, out=m)
    np.multiply(grads, 1.0 - b1, out=tmp)
    np.add(m, tmp, out=m)
    np.multiply(v, b2, out=v)
    np.multiply(grads, grads, out=tmp)
    np.multiply(tmp, 1.0 - b2, out=tmp)
    np.add(v, tmp, out=v)
    # p -= lr * (m / bc1) / (sqrt(v / bc2) + eps)
    np.multiply(v, 1.0 / (1.0 - b2 ** state.t), out=tmp)
    np.sqrt(tmp, out=tmp)
    np.add(tmp, state.eps, out=tmp)
    np.divide(m, tmp, out=tmp)
    np.multiply(tmp, lr / (1.0 - b1 ** state.t), out=tmp)
    np.subtract(params, tmp, out=params)


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam step. Returns ``(new_state, new_params)``;
    the inputs are left untouched."""
    new_state = state.copy()
    new_params = np.array(params, dtype=np.float64)
    adam_update(new_state, new_params, np.asarray(grads, dtype=np.float64), lr)
    return new_state, new_params


def grad_check(loss, params, h=1e-5):
    """Max relative error between central differences and ``loss``'s gradient.

    ``loss(p)`` must return ``(value, gradient)``.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    p = np.array(params, dtype=np.float64)
    _, g = loss(p)
    g = np.asarray(g, dtype=np.float64)
    worst = 0.0
    for i in range(p.size):
        old = p[i]
        p[i] = old + h
        fp, _ = loss(p)
        p[i] = old - h
        fm, _ = loss(p)
        p[i] = old
        g_fd = (fp - fm) / (2 * h)
        err = abs(g_fd - g[i]) / (abs(g_fd) + abs(g[i]) + 1e-12)
        worst = max(worst, err)
    return worst
