"""Error metrics, run reports, and closed-form linear-Gaussian references.

Information quantities are in nats.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .design import apply_mask, inclusion_probs, sample_mask
from .flow import forward_batch, _cond_matrix, _x_matrix


def rmse(estimate, truth):
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f"dims differ: {estimate.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((estimate - truth) ** 2)))


def ensemble_stats(members):
    """Pointwise mean, unbiased std, and the grid-averaged std."""
    arr = np.asarray(members.as_array() if hasattr(members, "as_array") else members, dtype=np.float64)
    if arr.shape[0] < 2:
        raise ValueError("need at least 2 members for a spread estimate")
    mean = arr.mean(axis=0)
    std = arr.std(axis=0, ddof=1)
    return mean, std, float(std.mean())


@dataclass
class IterationMetrics:
    k: int
    rmse: float
    mean_posterior_std: float
    drilled_column: int
    final_train_loss: float


@dataclass
class Report:
    method: str
    seed: int
    rows: list = field(default_factory=list)
    density: np.ndarray | None = None
    drilled: list = field(default_factory=list)
    config_digest: str = ""
    config: dict = field(default_factory=dict)

    def rmse_curve(self):
        return [r.rmse for r in self.rows]

    def std_curve(self):
        return [r.mean_posterior_std for r in self.rows]


@dataclass
class LinGaussModel:
    """``x ~ N(prior_mean, prior_cov)``, ``y = A x + N(0, noise_var I)``."""

    A: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    noise_var: float

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.prior_mean = np.asarray(self.prior_mean, dtype=np.float64)
        self.prior_cov = np.atleast_2d(np.asarray(self.prior_cov, dtype=np.float64))
        d = self.prior_mean.size
        if self.A.shape[1] != d or self.prior_cov.shape != (d, d):
            raise ValueError("inconsistent model dims")
        if self.noise_var <= 0:
            raise ValueError("noise variance must be > 0")
        if not np.allclose(self.prior_cov, self.prior_cov.T):
            raise ValueError("prior covariance must be symmetric")
        try:
            linalg.cholesky(self.prior_cov, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("prior covariance must be positive definite") from exc

    def sample(self, n, rng):
        rng = np.random.default_rng(rng)
        L = linalg.cholesky(self.prior_cov, lower=True)
        x = self.prior_mean + rng.standard_normal((n, self.prior_mean.size)) @ L.T
        y = x @ self.A.T + np.sqrt(self.noise_var) * rng.standard_normal((n, self.A.shape[0]))
        return x, y


def lin_gauss_posterior(model, y):
    """Conjugate update; returns ``(mean, cov)``."""
    y = np.asarray(y, dtype=np.float64)
    s2 = model.noise_var
    try:
        prior_prec = linalg.cho_solve(linalg.cho_factor(model.prior_cov, lower=True), np.eye(model.prior_mean.size))
        precision = prior_prec + model.A.T @ model.A / s2
        cf = linalg.cho_factor(precision, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("singular posterior system") from exc
    cov = linalg.cho_solve(cf, np.eye(precision.shape[0]))
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (prior_prec @ model.prior_mean + model.A.T @ y / s2)
    return mean, cov


def lin_gauss_eig(model, mask_rows=None):
    """Expected information gain of observing the selected rows of ``A``.

    ``mask_rows`` is a boolean vector or an index list; None means all rows.
    """
    if mask_rows is None:
        Am = model.A
    else:
        sel = np.asarray(mask_rows)
        Am = model.A[sel] if sel.dtype == bool else model.A[sel.astype(int)]
    if Am.shape[0] == 0:
        return 0.0
    # Sylvester: det(I_d + Am^T Am S / s2) == det(I_m + Am S Am^T / s2)
    G = np.eye(Am.shape[0]) + Am @ model.prior_cov @ Am.T / model.noise_var
    G = 0.5 * (G + G.T)
    try:
        L = linalg.cholesky(G, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("information matrix is not positive definite") from exc
    return float(np.sum(np.log(np.diag(L))))


def mc_eig_bound(flow, pairs, design, n_masks, rng_seed):
    """Negative mean flow loss over pairs and sampled masks.

    Equals the expected conditional log-density up to a constant, so it is a
    lower bound on EIG minus the prior entropy. Only meaningful for comparing
    designs under a fixed prior.
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    probs = inclusion_probs(design)
    rng = np.random.default_rng(rng_seed)
    xs, conds = [], []
    for pair in pairs:
        rows = np.shape(pair.y_full)[0]
        for _ in range(n_masks):
            mask = sample_mask(probs, design.drilled, rng, rows=rows)
            xs.append(pair.x)
            conds.append(apply_mask(mask, pair.y_full, pair.seismic))
    Z, logdet, _ = forward_batch(flow, _x_matrix(flow, xs), _cond_matrix(flow, conds))
    return float(np.mean(logdet - 0.5 * np.sum(Z * Z, axis=1)))
