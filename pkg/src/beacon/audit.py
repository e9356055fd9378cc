"""Self-checks: the gradient audit and the linear-Gaussian validation runs.

Each check returns a ``Check`` with the measured error and its tolerance so
callers (the command line, the test-suite) can report and gate on it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flow as fl
from .design import WellDesignState, design_gradient, inclusion_probs, Mask
from .nn import AdamState, adam_update, grad_check, mlp_apply, mlp_init, flatten, unflatten
from .oracle import LinGaussModel, lin_gauss_eig, lin_gauss_posterior


@dataclass
class Check:
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.error:.3e} (tol {self.tol:.0e})"


def _perturbed_flow(seed, x_shape, cond_shape, scale=0.3):
    """Small flow with non-trivial couplings (the fresh init is the identity)."""
    params = fl.flow_init(seed, x_shape, cond_shape, n_couplings=4, hidden=8, embed_dim=4, cond_hidden=8)
    theta = fl.flatten_flow(params)
    theta += scale * np.random.default_rng(seed).standard_normal(theta.size)
    return fl.unflatten_flow(params, theta)


def _random_cond(rng, shape):
    mask = (rng.random(shape) < 0.5).astype(float)
    return fl.Conditioning(mask * rng.standard_normal(shape), mask, rng.standard_normal(shape))


def gradient_audit(seed=0, h=1e-5):
    """Finite-difference audit of every hand-written gradient plus the flow's
    inverse and log-determinant."""
    rng = np.random.default_rng(seed)
    checks = []

    # dense net: parameters and input
    net = mlp_init(seed, [5, 7, 6, 3])
    x = rng.standard_normal((4, 5))
    r = rng.standard_normal((4, 3))

    def mlp_param_loss(theta):
        out, back = mlp_apply(unflatten(net, theta), x)
        g, _ = back(r)
        return float(np.sum(out * r)), flatten(g)

    def mlp_input_loss(v):
        out, back = mlp_apply(net, v.reshape(x.shape))
        _, gx = back(r)
        return float(np.sum(out * r)), gx.ravel()

    checks.append(Check("mlp parameters", grad_check(mlp_param_loss, flatten(net), h), 1e-4))
    checks.append(Check("mlp input", grad_check(mlp_input_loss, x.ravel(), h), 1e-4))

    # flow: parameters, targets and conditioning
    x_shape = (2, 4)
    params = _perturbed_flow(seed, x_shape, x_shape)
    X = rng.standard_normal((3, 8))
    conds = [_random_cond(rng, x_shape) for _ in range(3)]
    C = fl._cond_matrix(params, conds)

    def flow_param_loss(theta):
        loss, g, _, _ = fl.batch_loss_and_grads(fl.unflatten_flow(params, theta), X, C)
        return loss, fl.flatten_flow(g)

    def flow_x_loss(v):
        loss, _, gX, _ = fl.batch_loss_and_grads(params, v.reshape(X.shape), C)
        return loss, gX.ravel()

    def flow_cond_loss(v):
        loss, _, _, gC = fl.batch_loss_and_grads(params, X, v.reshape(C.shape))
        return loss, gC.ravel()

    checks.append(Check("flow parameters", grad_check(flow_param_loss, fl.flatten_flow(params), h), 1e-4))
    checks.append(Check("flow targets", grad_check(flow_x_loss, X.ravel(), h), 1e-4))
    checks.append(Check("flow conditioning", grad_check(flow_cond_loss, C.ravel(), h), 1e-4))

    # design chain: p = min(1, s*softmax(logits)) off the clipping kink
    logits0 = 0.3 * rng.standard_normal(6)
    c = rng.standard_normal(6)
    rows = 3
    mask = Mask(np.ones(6, dtype=np.int8), rows)

    def design_loss(logits):
        probs = inclusion_probs(WellDesignState(logits, budget=2))
        grad_mask = np.repeat(c[None, :] / rows, rows, axis=0)
        g = design_gradient(np.zeros((rows, 6)), grad_mask, np.zeros((rows, 6)), probs, mask)
        return float(c @ probs.p), g

    checks.append(Check("design logits", grad_check(design_loss, logits0, h), 1e-4))

    # exact inverse and analytic log-determinant
    cond = conds[0]
    xs = rng.standard_normal((5, 8))
    worst = 0.0
    for row in xs:
        z, _ = fl.flow_forward(params, row, cond)
        worst = max(worst, float(np.max(np.abs(fl.flow_inverse(params, z, cond).ravel() - row))))
    checks.append(Check("inverse round trip", worst, 1e-8))

    z0, logdet = fl.flow_forward(params, xs[0], cond)
    eps = 1e-6
    J = np.empty((8, 8))
    for j in range(8):
        e = np.zeros(8)
        e[j] = eps
        zp, _ = fl.flow_forward(params, xs[0] + e, cond)
        zm, _ = fl.flow_forward(params, xs[0] - e, cond)
        J[:, j] = (zp - zm) / (2 * eps)
    _, numeric = np.linalg.slogdet(J)
    checks.append(Check("log-determinant vs Jacobian", abs(numeric - logdet), 1e-5))
    return checks


# --- linear-Gaussian references ------------------------------------------------

def random_spd(rng, d, jitter=0.5):
    B = rng.standard_normal((d, d))
    return B @ B.T / d + jitter * np.eye(d)


def _train(params, X, C, epochs, batch_size, lr, seed):
    theta = fl.flatten_flow(params)
    view = fl.unflatten_flow(params, theta, copy=False)
    adam = AdamState.zeros(theta.size)
    work = np.empty_like(theta)
    n = X.shape[0]
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g, _, _ = fl.batch_loss_and_grads(view, X[idx], C[idx])
            adam_update(adam, theta, fl.flatten_flow(g), lr, work)
        if epoch > 0 and epoch % max(1, epochs // 3) == 0:
            lr *= 0.5
    return fl.unflatten_flow(params, theta)


@dataclass
class PosteriorResult:
    mean_rel_error: float
    std_rel_error: float
    n_train: int


def posterior_oracle(seed=0, d=8, n_train=50000, epochs=16, n_test=5, n_samples=4000, hidden=64):
    """Amortized posterior of a flow trained on ``(x, y)`` draws against the
    conjugate closed form.

    Errors are the worst case over ``n_test`` fresh observations: the mean
    error is ``|m_flow - m| / |m|`` and the std error the largest per-entry
    relative deviation of the marginal stds.
    """
    rng = np.random.default_rng([seed, 0])
    model = LinGaussModel(rng.standard_normal((d, d)) / np.sqrt(d), rng.uniform(-1.5, 1.5, d),
                          random_spd(rng, d), 0.25)
    x, y = model.sample(n_train, [seed, 1])
    x_mu, x_sd = x.mean(axis=0), x.std(axis=0)
    y_mu, y_sd = y.mean(axis=0), y.std(axis=0)

    shape = (d,)
    ones = np.ones(shape)

    def cond_rows(yy):
        yy = np.atleast_2d((yy - y_mu) / y_sd)
        return np.concatenate([yy, np.broadcast_to(ones, yy.shape), np.zeros_like(yy)], axis=1)

    params = fl.flow_init([seed, 2], shape, shape, n_couplings=6, hidden=hidden, embed_dim=16, cond_hidden=hidden)
    params = _train(params, (x - x_mu) / x_sd, cond_rows(y), epochs, 100, 3e-3, seed)

    x_test, y_test = model.sample(n_test, [seed, 3])
    mean_err = std_err = 0.0
    for i in range(n_test):
        m, cov = lin_gauss_posterior(model, y_test[i])
        Z = np.random.default_rng([seed, 4, i]).standard_normal((n_samples, d))
        U = fl.inverse_batch(params, Z, np.repeat(cond_rows(y_test[i]), n_samples, axis=0))
        samples = x_mu + x_sd * U
        mean_err = max(mean_err, float(np.linalg.norm(samples.mean(axis=0) - m) / np.linalg.norm(m)))
        sd = np.sqrt(np.diag(cov))
        std_err = max(std_err, float(np.max(np.abs(samples.std(axis=0, ddof=1) - sd) / sd)))
    return PosteriorResult(mean_err, std_err, n_train)


@dataclass
class EigResult:
    eig: tuple
    density: tuple

    @property
    def best(self):
        return int(np.argmax(self.eig))

    @property
    def ranked_first(self):
        return int(np.argmax(self.density)) == self.best


def two_candidate_model(seed, d=4):
    """Two candidate sensors; candidate ``c`` observes ``A_c x`` plus unit-scale noise.

    The sensors have random gains so which one is more informative varies
    with the seed.
    """
    rng = np.random.default_rng([seed, 10])
    gains = rng.uniform(0.3, 1.5, 2)
    blocks = [g * rng.standard_normal((d, d)) / np.sqrt(d) for g in gains]
    return LinGaussModel(np.vstack(blocks), np.zeros(d), random_spd(rng, d), 0.25)


def eig_ordering_run(seed, d=4, n_train=1000, epochs=40, lr_design=0.05):
    """Jointly train a flow and a two-column density on the toy; compare the
    learned density with the closed-form information gain of each column."""
    from .twin import TrainSettings, TrainingPair, joint_train

    model = two_candidate_model(seed, d)
    eig = tuple(lin_gauss_eig(model, np.arange(c * d, (c + 1) * d)) for c in range(2))
    x, y = model.sample(n_train, [seed, 11])
    x = x / np.sqrt(np.diag(model.prior_cov))
    y = y / y.std(axis=0).mean()
    # column c of the observation grid holds candidate c's readings
    pairs = [TrainingPair(x[i], y[i].reshape(2, d).T) for i in range(n_train)]
    params = fl.flow_init([seed, 12], (d,), (d, 2), n_couplings=4, hidden=32, embed_dim=16, cond_hidden=32)
    design = WellDesignState.uniform(2, budget=1)
    settings = TrainSettings(epochs=epochs, batch_size=50, lr_theta=3e-3, lr_design=lr_design, seed=seed)
    result = joint_train(pairs, params, design, settings, rng_seed=seed)
    return EigResult(eig, tuple(float(w) for w in result.design.density))
