"""Synthetic reservoir physics for a 2D vertical slice.

Fields are plain 2D ``float64`` arrays indexed ``[row, col]`` (row = depth,
col = lateral position). Permeability fields are layered log-normal, the
pressure equation is a 5-point finite-volume Darcy problem with no-flow
boundaries, and the plume is a passive tracer moved by first-order upwind
transport.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class SimulationError(RuntimeError):
    """Raised when a physics step cannot produce a valid result."""


class SolverError(SimulationError):
    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


@dataclass(frozen=True)
class PermGenerator:
    """Parameters of the layered log-normal permeability generator."""

    base_mean: float = 0.0
    base_std: float = 1.0
    layer_thickness: int = 2
    pert_std: float = 0.3
    smoothing_radius: int = 2


@dataclass(frozen=True)
class SimParams:
    injection_cell: tuple = (16, 1)
    injection_rate: float = 1.0
    dt: float = 0.5
    steps_per_interval: int = 8
    noise_sigma: float = 0.02
    seismic_blur_radius: int = 2
    seismic_sigma: float = 0.1

    def __post_init__(self):
        if self.injection_rate < 0:
            raise ValueError("injection_rate must be >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.steps_per_interval < 1:
            raise ValueError("steps_per_interval must be >= 1")
        if self.noise_sigma < 0 or self.seismic_sigma < 0:
            raise ValueError("noise levels must be >= 0")
        if self.seismic_blur_radius < 0:
            raise ValueError("seismic_blur_radius must be >= 0")


@dataclass(frozen=True)
class VelocityField:
    """Face-centred Darcy velocities.

    ``vx[r, c]`` is the rightward velocity through the west face of cell
    ``(r, c)`` (shape ``rows x cols+1``); ``vy[r, c]`` is the downward
    velocity through the north face (shape ``rows+1 x cols``). Boundary faces
    are always zero.
    """

    vx: np.ndarray
    vy: np.ndarray

    @property
    def shape(self):
        return self.vx.shape[0], self.vy.shape[1]

    def max_speed(self):
        return max(np.abs(self.vx).max(initial=0.0), np.abs(self.vy).max(initial=0.0))

    @classmethod
    def zeros(cls, rows, cols):
        return cls(np.zeros((rows, cols + 1)), np.zeros((rows + 1, cols)))


@dataclass
class PlumeEnsemble:
    members: list
    perms: list
    step: int = 0

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("ensemble must have at least one member")
        if len(self.members) != len(self.perms):
            raise ValueError("members and perms must pair 1:1")
        shape = np.shape(self.members[0])
        if any(np.shape(m) != shape for m in self.members):
            raise ValueError("ensemble members must share grid dims")

    def __len__(self):
        return len(self.members)

    @property
    def shape(self):
        return np.shape(self.members[0])

    def as_array(self):
        return np.stack(self.members)


def check_field(a, name="field"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def check_plume(s):
    s = check_field(s, "saturation")
    if s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("saturation must lie in [0, 1]")
    return s


def sample_permeability(rng_seed, rows, cols, gen=PermGenerator()):
    """Draw ``k(r, c) = exp(base(r) + g(r, c))``.

    ``base`` is constant over blocks of ``layer_thickness`` rows; ``g`` is a
    box-smoothed white-noise field rescaled to standard deviation
    ``pert_std``.
    """
    if rows < 4 or cols < 4:
        raise ValueError("grid too small")
    rng = np.random.default_rng(rng_seed)
    thickness = max(1, int(gen.layer_thickness))
    n_layers = -(-rows // thickness)
    levels = gen.base_mean + gen.base_std * rng.standard_normal(n_layers)
    base = np.repeat(levels, thickness)[:rows]
    noise = rng.standard_normal((rows, cols))
    r = int(gen.smoothing_radius)
    if r > 0:
        noise = ndimage.uniform_filter(noise, size=2 * r + 1, mode="reflect") * (2 * r + 1)
    return np.exp(base[:, None] + gen.pert_std * noise)


def _transmissibilities(perm):
    # harmonic mean across each interior face, unit cell size
    tx = 2.0 * perm[:, :-1] * perm[:, 1:] / (perm[:, :-1] + perm[:, 1:])
    ty = 2.0 * perm[:-1, :] * perm[1:, :] / (perm[:-1, :] + perm[1:, :])
    return tx, ty


def darcy_operator(perm):
    """Sparse matrix of ``-div(k grad p)`` with no-flow boundaries (singular)."""
    from scipy import sparse

    rows, cols = perm.shape
    tx, ty = _transmissibilities(perm)
    idx = np.arange(rows * cols).reshape(rows, cols)
    i = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    j = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    t = np.concatenate([tx.ravel(), ty.ravel()])
    n = rows * cols
    diag = np.bincount(i, t, minlength=n) + np.bincount(j, t, minlength=n)
    data = np.concatenate([-t, -t, diag])
    ii = np.concatenate([i, j, np.arange(n)])
    jj = np.concatenate([j, i, np.arange(n)])
    return sparse.csr_matrix((data, (ii, jj)), shape=(n, n))


def pcg(A, b, tol=1e-10, max_iter=None):
    """Jacobi-preconditioned conjugate gradients for SPD ``A``.

    Stops when ``||r|| <= tol * ||b||``. Returns ``(x, iterations)``.
    """
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros(n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0
    inv_diag = 1.0 / A.diagonal()
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {max_iter} iterations", iterations=max_iter)


def solve_darcy(perm, source, pin=(0, 0), tol=1e-10):
    """Solve ``div(k grad p) = -source``, pinning ``p[pin] = 0``.

    Returns ``(pressure, VelocityField)`` with face velocities ``-k grad p``.
    """
    perm = check_field(perm, "perm")
    source = check_field(source, "source")
    if perm.shape != source.shape:
        raise ValueError("perm and source dims differ")
    if np.any(perm <= 0):
        raise ValueError("permeability must be strictly positive")
    rows, cols = perm.shape
    n = rows * cols
    A = darcy_operator(perm)
    b = source.ravel().copy()
    ref = pin[0] * cols + pin[1]
    keep = np.ones(n, dtype=bool)
    keep[ref] = False
    A_red = A[keep][:, keep]
    p = np.zeros(n)
    p[keep], _ = pcg(A_red.tocsr(), b[keep], tol=tol, max_iter=10 * n)
    pressure = p.reshape(rows, cols)
    return pressure, darcy_velocity(perm, pressure)


def darcy_velocity(perm, pressure):
    rows, cols = perm.shape
    tx, ty = _transmissibilities(perm)
    vx = np.zeros((rows, cols + 1))
    vy = np.zeros((rows + 1, cols))
    vx[:, 1:-1] = tx * (pressure[:, :-1] - pressure[:, 1:])
    vy[1:-1, :] = ty * (pressure[:-1, :] - pressure[1:, :])
    return VelocityField(vx, vy)


def darcy_residual(perm, source, pressure, pin=(0, 0)):
    """Norm of ``A p - b`` over the pinned system (pinned row excluded)."""
    A = darcy_operator(perm)
    res = A @ pressure.ravel() - source.ravel()
    res[pin[0] * perm.shape[1] + pin[1]] = 0.0
    return float(np.linalg.norm(res))


def injection_source(shape, params):
    """Injector at ``params.injection_cell`` balanced by a producer spread over
    the column farthest from it."""
    rows, cols = shape
    q = np.zeros(shape)
    r, c = params.injection_cell
    if not (0 <= r < rows and 0 <= c < cols):
        raise ValueError(f"injection cell {params.injection_cell} outside the {rows}x{cols} grid")
    far = cols - 1 if c < cols / 2 else 0
    q[:, far] -= params.injection_rate / rows
    q[r, c] += params.injection_rate
    return q


def check_cfl(vel, dt):
    courant = dt * vel.max_speed()
    if courant > 1.0:
        raise SimulationError(f"CFL violated, reduce dt (courant number {courant:.3g})")
    return courant


def advance_plume(sat, vel, params, clamp=True):
    """Explicit upwind transport over one monitoring interval.

    Injection adds ``injection_rate * dt`` of saturation per substep at the
    injection cell. Boundaries are closed, so before clamping the total mass
    changes only by the injected amount.
    """
    s = check_plume(sat).copy()
    if vel.shape != s.shape:
        raise ValueError("velocity dims do not match saturation grid")
    dt = params.dt
    check_cfl(vel, dt)
    vx, vy = vel.vx, vel.vy
    r0, c0 = params.injection_cell
    for _ in range(params.steps_per_interval):
        fx = np.zeros_like(vx)
        fy = np.zeros_like(vy)
        u = vx[:, 1:-1]
        fx[:, 1:-1] = np.where(u > 0, u * s[:, :-1], u * s[:, 1:])
        w = vy[1:-1, :]
        fy[1:-1, :] = np.where(w > 0, w * s[:-1, :], w * s[1:, :])
        s = s - dt * (fx[:, 1:] - fx[:, :-1] + fy[1:, :] - fy[:-1, :])
        s[r0, c0] += dt * params.injection_rate
    if clamp:
        s = np.clip(s, 0.0, 1.0)
    return s


def forecast_member(sat, perm, params):
    pressure, vel = solve_darcy(perm, injection_source(np.shape(perm), params))
    return advance_plume(sat, vel, params)


def forecast_ensemble(prior, params):
    """Advance every member one monitoring interval with its own permeability."""
    out = []
    for i, (sat, perm) in enumerate(zip(prior.members, prior.perms)):
        try:
            out.append(forecast_member(sat, perm, params))
        except (SimulationError, ValueError) as exc:
            raise type(exc)(f"member {i}: {exc}") from exc
    return PlumeEnsemble(out, list(prior.perms), prior.step + 1)


def corrupt_observation(x, noise_sigma, rng_seed):
    """``x + eps`` with i.i.d. Gaussian noise; the result is not clamped."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    x = check_field(x)
    if noise_sigma == 0:
        return x.copy()
    rng = np.random.default_rng(rng_seed)
    return x + noise_sigma * rng.standard_normal(x.shape)


def box_blur(x, radius):
    if radius == 0:
        return np.array(x, dtype=np.float64)
    return ndimage.uniform_filter(np.asarray(x, dtype=np.float64), size=2 * radius + 1, mode="nearest")


def seismic_surrogate(x, params, rng_seed):
    """Blurred, noisy image of the plume standing in for an imaged seismic volume."""
    x = check_field(x)
    img = box_blur(x, params.seismic_blur_radius)
    if params.seismic_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        img = img + params.seismic_sigma * rng.standard_normal(img.shape)
    return img

