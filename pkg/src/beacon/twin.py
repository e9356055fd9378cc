"""Sequential monitoring loop: forecast, train, drill, observe, assimilate.

Each iteration forecasts the current prior ensemble one monitoring interval,
builds noisy fully-sampled training observations, jointly trains the
conditional flow and the well density, drills one new well, conditions the
flow on the simulated field data at all drilled wells, and uses the
posterior samples as the next prior. The random baseline runs the same loop
with a uniform, untrained density and a random well choice.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import sim
from .design import Mask, WellDesignState, design_gradient, inclusion_probs, select_well
from .flow import FlowError, FlowParams, batch_loss_and_grads, flat_size, flatten_flow, flow_init, inverse_batch, split_cond_grads, unflatten_flow
from .nn import AdamState, adam_update
from .oracle import IterationMetrics, Report, ensemble_stats, rmse

log = logging.getLogger(__name__)

# RNG stream tags; every draw is keyed by (seed, tag, iteration, index)
PERM, TRUTH_PERM, OBS_NOISE, OBS_SEISMIC, MASKS, SHUFFLE = 1, 2, 3, 4, 5, 6
FIELD_NOISE, FIELD_SEISMIC, POSTERIOR, RANDOM_WELL, FLOW_INIT, JITTER = 7, 8, 9, 10, 11, 12


def stream(*key):
    return np.random.default_rng([int(k) for k in key])


@dataclass
class TwinConfig:
    rows: int = 32
    cols: int = 32
    ensemble_size: int = 64
    iterations: int = 4
    budget: int = 1
    epochs: int = 100
    batch_size: int = 16
    lr_theta: float = 3e-3
    lr_design: float = 1e-2
    noise_sigma: float = 0.02
    injection_row: int = 16
    injection_col: int = 1
    injection_rate: float = 4.0
    dt: float = 0.2
    steps_per_interval: int = 10
    spinup_intervals: int = 4
    seismic_blur_radius: int = 2
    seismic_sigma: float = 0.1
    use_seismic: bool = False
    perm_base_mean: float = 0.0
    perm_base_std: float = 1.0
    perm_layer_thickness: int = 4
    perm_pert_std: float = 0.3
    perm_smoothing_radius: int = 2
    n_couplings: int = 4
    hidden: int = 32
    embed_dim: int = 32
    cond_hidden: int = 32
    std_floor: float = 1e-3
    jitter: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        counts = ["rows", "cols", "ensemble_size", "iterations", "budget", "epochs", "batch_size",
                  "steps_per_interval", "n_couplings", "hidden", "embed_dim", "cond_hidden"]
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rows < 4 or self.cols < 4:
            raise ValueError("grid too small")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be >= 2")
        if self.lr_theta < 0 or self.lr_design < 0:
            raise ValueError("learning rates must be >= 0")
        if self.spinup_intervals < 0:
            raise ValueError("spinup_intervals must be >= 0")
        if not (0 <= self.injection_row < self.rows and 0 <= self.injection_col < self.cols):
            raise ValueError("injection cell outside the grid")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be > 0")
        if self.iterations * self.budget > self.cols:
            raise ValueError("more wells requested than candidate columns")

    @property
    def shape(self):
        return (self.rows, self.cols)

    def sim_params(self):
        return sim.SimParams(
            injection_cell=(self.injection_row, self.injection_col),
            injection_rate=self.injection_rate,
            dt=self.dt,
            steps_per_interval=self.steps_per_interval,
            noise_sigma=self.noise_sigma,
            seismic_blur_radius=self.seismic_blur_radius,
            seismic_sigma=self.seismic_sigma,
        )

    def perm_generator(self):
        return sim.PermGenerator(self.perm_base_mean, self.perm_base_std, self.perm_layer_thickness,
                                 self.perm_pert_std, self.perm_smoothing_radius)

    def as_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainSettings:
    """The subset of the configuration ``joint_train`` reads."""

    epochs: int = 100
    batch_size: int = 16
    lr_theta: float = 3e-3
    lr_design: float = 1e-2
    jitter: float = 0.0
    seed: int = 0


def config_fields():
    return {f.name: f for f in fields(TwinConfig)}


@dataclass
class TrainingPair:
    x: np.ndarray
    y_full: np.ndarray
    seismic: np.ndarray | None = None


@dataclass
class TwinState:
    k: int
    prior: sim.PlumeEnsemble
    design: WellDesignState
    flow: FlowParams
    flow_adam: AdamState
    truth: np.ndarray
    truth_perm: np.ndarray
    history: list = field(default_factory=list)
    design_density: np.ndarray | None = None


class TwinError(RuntimeError):
    pass


@dataclass
class Standardizer:
    """Per-cell affine map to roughly unit-scale coordinates for the flow.

    Fields are centred on the forecast mean and divided by the forecast std
    (floored). Observations share the centring but use one global scale, the
    RMS forecast std combined with the noise level, so cells the ensemble
    agrees on carry only small noise into the conditioner.
    """

    mean: np.ndarray
    x_scale: np.ndarray
    y_scale: float
    seis_mean: np.ndarray | None = None
    seis_scale: float | None = None

    @classmethod
    def fit(cls, pairs, noise_sigma, floor):
        X = np.stack([p.x for p in pairs])
        mean = X.mean(axis=0)
        x_scale = np.maximum(X.std(axis=0), floor)
        y_scale = float(np.sqrt(np.mean(X.var(axis=0)) + noise_sigma ** 2))
        seis_mean = seis_scale = None
        if pairs[0].seismic is not None:
            S = np.stack([p.seismic for p in pairs])
            seis_mean = S.mean(axis=0)
            seis_scale = float(np.sqrt(np.mean(S.var(axis=0)) + floor ** 2))
        return cls(mean, x_scale, y_scale, seis_mean, seis_scale)

    def x(self, x):
        return (x - self.mean) / self.x_scale

    def x_back(self, u):
        return self.mean + self.x_scale * u

    def y(self, y):
        return (y - self.mean) / self.y_scale

    def seismic(self, s):
        if s is None or self.seis_mean is None:
            return None
        return (s - self.seis_mean) / self.seis_scale

    def pair(self, p):
        return TrainingPair(self.x(p.x), self.y(p.y_full), self.seismic(p.seismic))


def make_training_set(forecast, cfg, rng_seed):
    """One noisy full observation (and seismic image) per forecast member."""
    params = cfg.sim_params()
    k = forecast.step
    pairs = []
    for i, x in enumerate(forecast.members):
        y = sim.corrupt_observation(x, cfg.noise_sigma, [rng_seed, OBS_NOISE, k, i])
        seis = sim.seismic_surrogate(x, params, [rng_seed, OBS_SEISMIC, k, i]) if cfg.use_seismic else None
        pairs.append(TrainingPair(np.array(x, dtype=np.float64), y, seis))
    return pairs


def _cond_rows(ys, seis, mask_fields):
    B = ys.shape[0]
    mo = (mask_fields * ys).reshape(B, -1)
    m = mask_fields.reshape(B, -1)
    s = seis.reshape(B, -1) if seis is not None else np.zeros_like(m)
    return np.concatenate([mo, m, s], axis=1)


@dataclass
class TrainResult:
    flow: FlowParams
    design: WellDesignState
    final_loss: float
    epoch_losses: list
    flow_adam: AdamState
    design_adam: AdamState


def joint_train(pairs, flow, design, cfg, flow_adam=None, rng_seed=None, k=0, jitter=None):
    """Joint maximum-likelihood training of the flow and the well density.

    Every epoch reshuffles the pairs; each sample gets a fresh mask drawn from
    the current density with drilled columns forced on. The flow follows Adam
    at ``lr_theta`` and the logits follow Adam at ``lr_design`` on the
    straight-through gradient. ``jitter`` (scalar or per-entry array, default
    ``cfg.jitter``) is the std of Gaussian noise added to the targets each
    epoch, which keeps the likelihood bounded on entries that are identical
    across the training set. Returns a ``TrainResult``.
    """
    if not pairs:
        raise ValueError("no training pairs")
    seed = cfg.seed if rng_seed is None else rng_seed
    rows, cols = np.shape(pairs[0].y_full)
    X = np.stack([np.ravel(p.x) for p in pairs])
    Y = np.stack([p.y_full for p in pairs])
    S = np.stack([p.seismic for p in pairs]) if pairs[0].seismic is not None else None
    n = len(pairs)
    jitter = np.ravel(cfg.jitter if jitter is None else jitter)
    theta = flatten_flow(flow)
    params = unflatten_flow(flow, theta, copy=False)
    work = np.empty_like(theta)
    logits = design.logits.copy()
    flow_adam = AdamState.zeros(theta.size) if flow_adam is None else flow_adam.copy()
    design_adam = AdamState.zeros(logits.size)
    drilled = list(design.drilled)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = stream(seed, SHUFFLE, k, epoch).permutation(n)
        mask_rng = stream(seed, MASKS, k, epoch)
        jitter_rng = stream(seed, JITTER, k, epoch)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probs = inclusion_probs(WellDesignState(logits, design.budget, drilled))
            u = mask_rng.random((idx.size, cols))
            cols_on = (u < probs.p).astype(np.float64)
            cols_on[:, drilled] = 1.0
            mask_fields = np.repeat(cols_on[:, None, :], rows, axis=1)
            C = _cond_rows(Y[idx], None if S is None else S[idx], mask_fields)
            Xb = X[idx]
            if np.any(jitter > 0):
                Xb = Xb + jitter * jitter_rng.standard_normal(Xb.shape)
            where = f"epoch {epoch}, batch {start // cfg.batch_size}"
            try:
                loss, grads, _, gC = batch_loss_and_grads(params, Xb, C)
                adam_update(flow_adam, theta, flatten_flow(grads), cfg.lr_theta, work)
            except FloatingPointError as exc:
                raise FlowError(f"{where}: {exc}") from exc
            total += loss * idx.size
            if cfg.lr_design > 0:
                cg = split_cond_grads(params, gC)
                g_logits = np.zeros_like(logits)
                for j, i in enumerate(idx):
                    m = Mask(cols_on[j].astype(np.int8), rows, frozenset(drilled))
                    g_logits += design_gradient(cg.masked_obs[j], cg.mask[j], Y[i], probs, m)
                adam_update(design_adam, logits, g_logits, cfg.lr_design)
        epoch_losses.append(total / n)
    new_flow = unflatten_flow(flow, theta)
    new_design = WellDesignState(logits, design.budget, drilled)
    final = epoch_losses[-1] if epoch_losses else float("nan")
    return TrainResult(new_flow, new_design, final, epoch_losses, flow_adam, design_adam)


def initial_state(cfg):
    """Ground truth and prior ensemble with distinct permeability draws.

    All plumes start empty and, when ``spinup_intervals > 0``, are injected
    for that many intervals with their own permeability before monitoring.
    """
    gen = cfg.perm_generator()
    params = cfg.sim_params()
    perms = [sim.sample_permeability([cfg.seed, PERM, i], cfg.rows, cfg.cols, gen) for i in range(cfg.ensemble_size)]
    truth_perm = sim.sample_permeability([cfg.seed, TRUTH_PERM], cfg.rows, cfg.cols, gen)
    members = [np.zeros(cfg.shape) for _ in perms]
    truth = np.zeros(cfg.shape)
    ens = sim.PlumeEnsemble(members, perms, 0)
    try:
        for _ in range(cfg.spinup_intervals):
            ens = sim.forecast_ensemble(ens, params)
            truth = sim.forecast_member(truth, truth_perm, params)
    except (sim.SimulationError, ValueError) as exc:
        raise TwinError(f"forecast (spin-up): {exc}") from exc
    ens.step = 0
    flow = flow_init([cfg.seed, FLOW_INIT], cfg.shape, cfg.shape, cfg.n_couplings, cfg.hidden, cfg.embed_dim, cfg.cond_hidden)
    return TwinState(
        k=0,
        prior=ens,
        design=WellDesignState.uniform(cfg.cols, cfg.budget),
        flow=flow,
        flow_adam=AdamState.zeros(flat_size(flow)),
        truth=truth,
        truth_perm=truth_perm,
    )


def field_observation(truth, cfg, k, drilled):
    """Noisy field data at drilled columns plus a seismic image of the truth.

    The noise draw covers the whole grid so runs sharing a column share the
    same data there.
    """
    y = sim.corrupt_observation(truth, cfg.noise_sigma, [cfg.seed, FIELD_NOISE, k])
    seis = sim.seismic_surrogate(truth, cfg.sim_params(), [cfg.seed, FIELD_SEISMIC, k]) if cfg.use_seismic else None
    mask = np.zeros(cfg.shape)
    mask[:, list(drilled)] = 1.0
    return y, mask, seis


def _random_well(cfg, k, drilled):
    free = [c for c in range(cfg.cols) if c not in set(drilled)]
    if not free:
        raise TwinError("budget exhausted")
    return int(stream(cfg.seed, RANDOM_WELL, k).choice(free))


def run_iteration(state, cfg, method="beacon"):
    """Advance the twin by one monitoring interval. Returns the new state."""
    params = cfg.sim_params()
    k = state.k + 1
    try:
        forecast = sim.forecast_ensemble(state.prior, params)
        truth = sim.forecast_member(state.truth, state.truth_perm, params)
    except (sim.SimulationError, ValueError) as exc:
        raise TwinError(f"forecast (k={k}): {exc}") from exc

    raw_pairs = make_training_set(forecast, cfg, cfg.seed)
    scaler = Standardizer.fit(raw_pairs, cfg.noise_sigma, cfg.std_floor)
    pairs = [scaler.pair(p) for p in raw_pairs]

    design = WellDesignState.uniform(cfg.cols, cfg.budget, state.design.drilled)
    train_cfg = cfg if method == "beacon" else _replace(cfg, lr_design=0.0)
    try:
        result = joint_train(pairs, state.flow, design, train_cfg, state.flow_adam, cfg.seed, k,
                             jitter=cfg.jitter / scaler.x_scale)
    except FlowError as exc:
        raise TwinError(f"training (k={k}): {exc}") from exc

    drilled = list(state.design.drilled)
    for _ in range(cfg.budget):
        if method == "beacon":
            col = select_well(WellDesignState(result.design.logits, cfg.budget, drilled))
        else:
            col = _random_well(cfg, k, drilled)
        drilled.append(col)

    y, mask, seis = field_observation(truth, cfg, k, drilled)
    C = _cond_rows(scaler.y(y)[None], None if seis is None else scaler.seismic(seis)[None], mask[None])
    Z = stream(cfg.seed, POSTERIOR, k).standard_normal((cfg.ensemble_size, result.flow.dim))
    U = inverse_batch(result.flow, Z, np.repeat(C, cfg.ensemble_size, axis=0))
    post = np.clip(scaler.x_back(U.reshape((-1,) + cfg.shape)), 0.0, 1.0)
    members = [post[i] for i in range(post.shape[0])]
    posterior = sim.PlumeEnsemble(members, list(state.prior.perms), k)

    mean, _, mean_std = ensemble_stats(post)
    metrics = IterationMetrics(k, rmse(mean, truth), mean_std, drilled[-1], result.final_loss)
    log.info("k=%d method=%s well=%d rmse=%.4f std=%.4f loss=%.3f", k, method, drilled[-1],
             metrics.rmse, metrics.mean_posterior_std, metrics.final_train_loss)
    return TwinState(
        k=k,
        prior=posterior,
        design=WellDesignState(result.design.logits, cfg.budget, drilled),
        flow=result.flow,
        flow_adam=result.flow_adam,
        truth=truth,
        truth_perm=state.truth_perm,
        history=state.history + [metrics],
        design_density=result.design.density,
    )


def _replace(cfg, **changes):
    d = cfg.as_dict()
    d.update(changes)
    return TwinConfig(**d)


def make_report(state, cfg, method):
    density = state.design_density if state.design_density is not None else state.design.density
    return Report(method=method, seed=cfg.seed, rows=list(state.history), density=np.asarray(density),
                  drilled=list(state.design.drilled), config_digest=cfg.digest(), config=cfg.as_dict())


def run_experiment(cfg, method="beacon", state=None, on_iteration=None):
    """Run ``cfg.iterations`` twin iterations (continuing from ``state`` if given).

    ``on_iteration(state)`` is called after every iteration, e.g. to write
    checkpoints.
    """
    if method not in ("beacon", "random"):
        raise ValueError(f"unknown method {method!r}")
    if state is None:
        state = initial_state(cfg)
    while state.k < cfg.iterations:
        state = run_iteration(state, cfg, method)
        if on_iteration is not None:
            on_iteration(state)
    return make_report(state, cfg, method)


def run_baseline(cfg, state=None, on_iteration=None):
    return run_experiment(cfg, "random", state, on_iteration)
