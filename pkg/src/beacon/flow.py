"""Conditional NICE-style normalizing flow.

``K`` additive coupling layers alternate between the even and odd entries of
the flattened field, then a learned diagonal scaling maps to the latent.
Every coupling net sees the other half plus a shared embedding of the
conditioning channels (masked observation, mask, optional seismic image).
The log-determinant is ``sum(log_scale)`` regardless of the couplings.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .nn import MlpParams, flatten as mlp_flatten, mlp_apply, mlp_init, unflatten as mlp_unflatten


class FlowError(FloatingPointError):
    pass


@dataclass
class Conditioning:
    masked_obs: np.ndarray
    mask: np.ndarray
    seismic: np.ndarray | None = None

    def __post_init__(self):
        self.masked_obs = np.asarray(self.masked_obs, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.masked_obs.shape != self.mask.shape:
            raise ValueError("masked_obs and mask dims differ")
        if self.seismic is not None:
            self.seismic = np.asarray(self.seismic, dtype=np.float64)
            if self.seismic.shape != self.mask.shape:
                raise ValueError("seismic dims differ from mask")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if np.any(self.masked_obs[self.mask == 0] != 0):
            raise ValueError("masked_obs must be zero where mask is zero")

    @property
    def shape(self):
        return self.mask.shape

    def vector(self):
        """Conditioner input ``[masked_obs, mask, seismic-or-zeros]`` flattened."""
        seis = self.seismic if self.seismic is not None else np.zeros(self.mask.shape)
        return np.concatenate([self.masked_obs.ravel(), self.mask.ravel(), seis.ravel()])

    @classmethod
    def void(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))


@lru_cache(maxsize=16)
def _split(d):
    return np.arange(0, d, 2), np.arange(1, d, 2)


@dataclass
class FlowParams:
    couplings: list
    conditioner: MlpParams
    log_scale: np.ndarray
    x_shape: tuple
    cond_shape: tuple

    @property
    def dim(self):
        return int(np.prod(self.x_shape))

    @property
    def embed_dim(self):
        return self.conditioner.weights[-1].shape[0]

    def halves(self, i):
        """``(active, transformed)`` index arrays for coupling ``i``."""
        even, odd = _split(self.dim)
        return (even, odd) if i % 2 == 0 else (odd, even)

    def copy(self):
        return FlowParams([c.copy() for c in self.couplings], self.conditioner.copy(),
                          self.log_scale.copy(), self.x_shape, self.cond_shape)

    def zeros_like(self):
        return FlowParams([c.zeros_like() for c in self.couplings], self.conditioner.zeros_like(),
                          np.zeros_like(self.log_scale), self.x_shape, self.cond_shape)


def flow_init(rng_seed, x_shape, cond_shape=None, n_couplings=6, hidden=128, embed_dim=64, cond_hidden=128):
    """Flow that is the identity map at initialization (zeroed coupling outputs,
    zero log-scale). The conditioner gets a regular random init."""
    if n_couplings < 2:
        raise ValueError("need at least 2 coupling layers")
    x_shape = tuple(int(n) for n in x_shape)
    cond_shape = x_shape if cond_shape is None else tuple(int(n) for n in cond_shape)
    d = int(np.prod(x_shape))
    if d < 2:
        raise ValueError("flow needs at least 2 dimensions")
    dc = 3 * int(np.prod(cond_shape))
    seeds = np.random.SeedSequence(rng_seed).spawn(n_couplings + 1)
    conditioner = mlp_init(seeds[0], [dc, cond_hidden, embed_dim])
    n_even = (d + 1) // 2
    n_odd = d // 2
    couplings = []
    for i in range(n_couplings):
        n_a, n_b = (n_even, n_odd) if i % 2 == 0 else (n_odd, n_even)
        couplings.append(mlp_init(seeds[i + 1], [n_a + embed_dim, hidden, n_b], zero_last=True))
    return FlowParams(couplings, conditioner, np.zeros(d), x_shape, cond_shape)


def flatten_flow(params):
    """Couplings in order, then conditioner, then log-scale."""
    parts = [mlp_flatten(c) for c in params.couplings]
    parts.append(mlp_flatten(params.conditioner))
    parts.append(params.log_scale)
    return np.concatenate(parts)


def unflatten_flow(template, flat, copy=True):
    """Inverse of ``flatten_flow``. With ``copy=False`` the returned arrays are
    views into ``flat``."""
    flat = np.asarray(flat, dtype=np.float64)
    n = flat_size(template)
    if flat.size != n:
        raise ValueError(f"expected {n} flow parameters, got {flat.size}")
    pos = 0
    couplings = []
    for c in template.couplings:
        couplings.append(mlp_unflatten(c, flat[pos:pos + c.size], copy))
        pos += c.size
    cond = mlp_unflatten(template.conditioner, flat[pos:pos + template.conditioner.size], copy)
    pos += template.conditioner.size
    log_scale = flat[pos:].copy() if copy else flat[pos:]
    return FlowParams(couplings, cond, log_scale, template.x_shape, template.cond_shape)


def flat_size(params):
    return sum(c.size for c in params.couplings) + params.conditioner.size + params.log_scale.size


def _check(a, what):
    if not np.all(np.isfinite(a)):
        raise FlowError(f"non-finite values in {what}")


def _cond_matrix(params, conds):
    rows = [c.vector() for c in conds]
    for c in conds:
        if tuple(c.shape) != params.cond_shape:
            raise ValueError(f"conditioning dims {c.shape} do not match flow {params.cond_shape}")
    return np.stack(rows)


def _x_matrix(params, xs):
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    for x in xs:
        if x.size != params.dim:
            raise ValueError(f"input has {x.size} entries, flow expects {params.dim}")
    return np.stack([x.ravel() for x in xs])


def embed_condition(params, cond):
    emb, _ = mlp_apply(params.conditioner, _cond_matrix(params, [cond])[0])
    return emb


def forward_batch(params, X, C):
    """``X`` is ``(B, D)``, ``C`` is ``(B, 3*Dc)``. Returns ``(Z, logdet, backward)``.

    ``backward(gZ, logdet_weight)`` returns ``(FlowParams, gX, gC)``: the
    gradients of ``sum(gZ * Z) + logdet_weight * logdet``.
    """
    emb, back_cond = mlp_apply(params.conditioner, C)
    _check(emb, "conditioning embedding")
    h = np.array(X, dtype=np.float64)
    backs = []
    for i, net in enumerate(params.couplings):
        a, b = params.halves(i)
        t, back = mlp_apply(net, np.concatenate([h[:, a], emb], axis=1))
        h[:, b] += t
        backs.append(back)
    _check(h, "coupling outputs")
    scale = np.exp(params.log_scale)
    Z = h * scale
    _check(Z, "latent")
    logdet = float(np.sum(params.log_scale))

    def backward(gZ, logdet_weight):
        g_ls = np.sum(gZ * Z, axis=0) + logdet_weight
        gh = gZ * scale
        g_emb = np.zeros_like(emb)
        g_couplings = [None] * len(params.couplings)
        for i in range(len(params.couplings) - 1, -1, -1):
            a, b = params.halves(i)
            g_net, g_in = backs[i](gh[:, b])
            g_couplings[i] = g_net
            gh[:, a] += g_in[:, :a.size]
            g_emb += g_in[:, a.size:]
        g_cond, gC = back_cond(g_emb)
        grads = FlowParams(g_couplings, g_cond, g_ls, params.x_shape, params.cond_shape)
        return grads, gh, gC

    return Z, logdet, backward


def inverse_batch(params, Z, C):
    emb, _ = mlp_apply(params.conditioner, C)
    h = np.asarray(Z, dtype=np.float64) * np.exp(-params.log_scale)
    for i in range(len(params.couplings) - 1, -1, -1):
        a, b = params.halves(i)
        t, _ = mlp_apply(params.couplings[i], np.concatenate([h[:, a], emb], axis=1))
        h[:, b] -= t
    _check(h, "inverse output")
    return h


def flow_forward(params, x, cond):
    """Returns ``(z, logdet)`` for one sample; ``z`` is a flat vector."""
    Z, logdet, _ = forward_batch(params, _x_matrix(params, [x]), _cond_matrix(params, [cond]))
    return Z[0], logdet


def flow_inverse(params, z, cond):
    """Exact inverse of ``flow_forward``, reshaped to the field grid, unclamped."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size != params.dim:
        raise ValueError(f"latent has {z.size} entries, flow expects {params.dim}")
    return inverse_batch(params, z[None, :], _cond_matrix(params, [cond]))[0].reshape(params.x_shape)


def nll_loss(params, x, cond):
    """``0.5*||z||^2 - logdet`` for one sample."""
    z, logdet = flow_forward(params, x, cond)
    return 0.5 * float(z @ z) - logdet


@dataclass
class CondGrads:
    """Per-sample gradients of the mean loss w.r.t. the conditioning channels,
    each shaped ``(B, *cond_shape)``."""

    masked_obs: np.ndarray
    mask: np.ndarray
    seismic: np.ndarray


def batch_loss_and_grads(params, X, C):
    """Mean loss over rows of ``X``/``C`` and its gradients ``(loss, FlowParams, gX, gC)``."""
    n = X.shape[0]
    Z, logdet, backward = forward_batch(params, X, C)
    per_sample = 0.5 * np.sum(Z * Z, axis=1) - logdet
    _check(per_sample, "loss")
    grads, gX, gC = backward(Z / n, -1.0)
    return float(per_sample.mean()), grads, gX, gC


def split_cond_grads(params, gC):
    dc = int(np.prod(params.cond_shape))
    shape = (gC.shape[0],) + params.cond_shape
    return CondGrads(gC[:, :dc].reshape(shape), gC[:, dc:2 * dc].reshape(shape), gC[:, 2 * dc:].reshape(shape))


def loss_gradients(params, batch):
    """Gradients of the mean loss over ``batch`` (pairs of field, Conditioning).

    Returns ``(FlowParams of gradients, CondGrads)``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    X = _x_matrix(params, [x for x, _ in batch])
    C = _cond_matrix(params, [c for _, c in batch])
    try:
        _, grads, _, gC = batch_loss_and_grads(params, X, C)
    except FlowError:
        for i, (x, c) in enumerate(batch):
            try:
                batch_loss_and_grads(params, X[i:i + 1], C[i:i + 1])
            except FlowError as exc:
                raise FlowError(f"sample {i}: {exc}") from exc
        raise
    flat = np.concatenate([flatten_flow(grads), gC.ravel()])
    if not np.all(np.isfinite(flat)):
        raise FlowError("non-finite gradient")
    return grads, split_cond_grads(params, gC)


def sample_latent(params, n, rng_seed):
    return np.random.default_rng(rng_seed).standard_normal((n, params.dim))


def sample_posterior(params, cond, n, rng_seed, clamp=True):
    """Draw ``n`` fields ``f^{-1}(z; cond)`` with ``z ~ N(0, I)``.

    Returns an array of shape ``(n, *x_shape)``; clamped to [0, 1] unless
    ``clamp`` is False.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    Z = sample_latent(params, n, rng_seed)
    C = np.repeat(_cond_matrix(params, [cond]), n, axis=0)
    X = inverse_batch(params, Z, C).reshape((n,) + params.x_shape)
    return np.clip(X, 0.0, 1.0) if clamp else X
