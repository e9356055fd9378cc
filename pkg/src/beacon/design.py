"""Well-placement density and the budgeted random column mask.

The density over candidate columns is ``w = softmax(logits)``. A mask draws
each column independently with probability ``p_i = min(1, s * w_i)``
(higher weight means more likely to be observed), and already-drilled
columns are always on. A selected column observes its whole depth profile.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import Conditioning


class BudgetExhausted(ValueError):
    pass


def softmax(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


@dataclass
class WellDesignState:
    logits: np.ndarray
    budget: int = 1
    drilled: list = field(default_factory=list)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.drilled = [int(c) for c in self.drilled]
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if len(set(self.drilled)) != len(self.drilled):
            raise ValueError("drilled columns must be distinct")
        if any(c < 0 or c >= self.n_candidates for c in self.drilled):
            raise ValueError("drilled column out of range")

    @property
    def n_candidates(self):
        return self.logits.size

    @property
    def density(self):
        return softmax(self.logits)

    @classmethod
    def uniform(cls, n_candidates, budget=1, drilled=()):
        return cls(np.zeros(n_candidates), budget, list(drilled))

    def copy(self):
        return WellDesignState(self.logits.copy(), self.budget, list(self.drilled))


@dataclass(frozen=True)
class InclusionProbs:
    p: np.ndarray
    clip_active: np.ndarray
    w: np.ndarray
    budget: int


def inclusion_probs(state):
    if state.n_candidates < 1:
        raise ValueError("need at least one candidate column")
    w = state.density
    raw = state.budget * w
    return InclusionProbs(np.minimum(1.0, raw), raw >= 1.0, w, state.budget)


@dataclass(frozen=True)
class Mask:
    columns: np.ndarray
    rows: int
    forced: frozenset = frozenset()

    @property
    def field(self):
        return np.repeat(self.columns[None, :].astype(np.float64), self.rows, axis=0)

    @classmethod
    def from_columns(cls, n_candidates, rows, active, forced=()):
        cols = np.zeros(n_candidates, dtype=np.int8)
        cols[list(active)] = 1
        return cls(cols, rows, frozenset(int(c) for c in forced))


def sample_mask(probs, drilled, rng, rows=1):
    """Column ``i`` is on iff ``u_i < p_i`` (``u_i ~ U(0, 1)``) or ``i`` is drilled.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng)
    u = rng.random(probs.p.size)
    cols = (u < probs.p).astype(np.int8)
    drilled = [int(c) for c in drilled]
    cols[drilled] = 1
    return Mask(cols, int(rows), frozenset(drilled))


def apply_mask(mask, y_full, seismic=None):
    """Observed values at active columns; seismic passes through unmasked."""
    y_full = np.asarray(y_full, dtype=np.float64)
    if y_full.shape != (mask.rows, mask.columns.size):
        raise ValueError(f"observation dims {y_full.shape} do not match mask {(mask.rows, mask.columns.size)}")
    m = mask.field
    return Conditioning(m * y_full, m, seismic)


def design_gradient(grad_masked_obs, grad_mask, y_full, probs, mask):
    """Straight-through gradient of the loss w.r.t. the design logits.

    The sampled indicator is treated as having unit derivative w.r.t. its
    inclusion probability, so for column ``c`` the probability gradient is
    ``sum_rows(dL/d(masked_obs) * y + dL/d(mask))``. Clipped and drilled
    columns pass no gradient.
    """
    grad_masked_obs = np.asarray(grad_masked_obs, dtype=np.float64)
    grad_mask = np.asarray(grad_mask, dtype=np.float64)
    y_full = np.asarray(y_full, dtype=np.float64)
    n = probs.p.size
    if mask.columns.size != n:
        raise ValueError("mask and inclusion probabilities have different column counts")
    if grad_masked_obs.shape != y_full.shape or grad_mask.shape != y_full.shape or y_full.shape[1] != n:
        raise ValueError("gradient and observation dims disagree")
    g_p = np.sum(grad_masked_obs * y_full + grad_mask, axis=0)
    g_p[probs.clip_active] = 0.0
    if mask.forced:
        g_p[list(mask.forced)] = 0.0
    w = probs.w
    return probs.budget * (w * g_p - w * np.dot(w, g_p))


def select_well(state):
    """Highest-density undrilled column; ties go to the lowest index."""
    free = np.ones(state.n_candidates, dtype=bool)
    free[state.drilled] = False
    if not free.any():
        raise BudgetExhausted("budget exhausted")
    w = np.where(free, state.density, -np.inf)
    return int(np.argmax(w))
