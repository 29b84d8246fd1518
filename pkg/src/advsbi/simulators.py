"""Forward models: Two Moons, SLCP, a linear-Gaussian verification task, and
a 1-D shallow-water (Saint-Venant) solver with noisy Fourier observations."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.fft import fft2
from scipy.linalg import solve_banded

from .distributions import (
    MultivariateNormal,
    RngStream,
    UniformBox,
    depth_profile_prior,
)


@dataclass(frozen=True)
class SimTask:
    """A prior/simulator pair, with an analytic likelihood when tractable."""

    name: str
    theta_dim: int
    x_dim: int
    prior: object
    simulate: Callable[[np.ndarray, RngStream], np.ndarray]
    log_likelihood: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


# ---------------------------------------------------------------------------
# Two Moons
# ---------------------------------------------------------------------------

TWO_MOONS_RADIUS_MEAN = 0.1
TWO_MOONS_RADIUS_STD = 0.01
TWO_MOONS_OFFSET = 0.25


def two_moons_shift(theta: np.ndarray) -> np.ndarray:
    """Parameter-dependent translation of the crescent."""
    theta = np.atleast_2d(theta)
    s = np.empty_like(theta)
    s[:, 0] = -np.abs(theta[:, 0] + theta[:, 1]) / np.sqrt(2.0)
    s[:, 1] = (theta[:, 1] - theta[:, 0]) / np.sqrt(2.0)
    return s


def two_moons_from_noise(theta: np.ndarray, angle: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Deterministic part of the simulator given the internal noise draws."""
    theta = np.atleast_2d(theta)
    p = np.stack(
        [radius * np.cos(angle) + TWO_MOONS_OFFSET, radius * np.sin(angle)], axis=-1
    )
    return p + two_moons_shift(theta)


def two_moons_simulate(theta: np.ndarray, rng: RngStream) -> np.ndarray:
    theta = np.atleast_2d(theta)
    n = theta.shape[0]
    angle = rng.uniform(-np.pi / 2.0, np.pi / 2.0, n)
    radius = rng.normal(n, TWO_MOONS_RADIUS_MEAN, TWO_MOONS_RADIUS_STD)
    return two_moons_from_noise(theta, angle, radius)


# ---------------------------------------------------------------------------
# SLCP: simple likelihood, complex posterior
# ---------------------------------------------------------------------------

_SLCP_JITTER = 1e-8


def slcp_moments(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean [n,2] and lower Cholesky factor [n,2,2] of the observation Gaussian."""
    theta = np.atleast_2d(theta)
    m = theta[:, :2]
    s1 = theta[:, 2] ** 2
    s2 = theta[:, 3] ** 2
    rho = np.tanh(theta[:, 4])
    l11 = np.sqrt(s1**2 + _SLCP_JITTER)
    l21 = rho * s1 * s2 / l11
    l22 = np.sqrt(np.maximum(s2**2 + _SLCP_JITTER - l21**2, _SLCP_JITTER))
    chol = np.zeros((theta.shape[0], 2, 2))
    chol[:, 0, 0] = l11
    chol[:, 1, 0] = l21
    chol[:, 1, 1] = l22
    return m, chol


def slcp_simulate(theta: np.ndarray, rng: RngStream) -> np.ndarray:
    """Four i.i.d. draws from N(m(theta), Sigma(theta)), concatenated to [n, 8]."""
    theta = np.atleast_2d(theta)
    n = theta.shape[0]
    m, chol = slcp_moments(theta)
    eps = rng.normal((n, 4, 2))
    draws = m[:, None, :] + np.einsum("nij,nkj->nki", chol, eps)
    return draws.reshape(n, 8)


# ---------------------------------------------------------------------------
# Gaussian-linear verification task (conjugate posterior available)
# ---------------------------------------------------------------------------

GL_NOISE_VAR = 0.1


def gaussian_linear_simulate(theta: np.ndarray, rng: RngStream) -> np.ndarray:
    theta = np.atleast_2d(theta)
    return theta + np.sqrt(GL_NOISE_VAR) * rng.normal(theta.shape)


def gaussian_linear_log_likelihood(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    theta = np.atleast_2d(theta)
    d = theta.shape[1]
    quad = np.sum((np.asarray(x) - theta) ** 2, axis=1) / GL_NOISE_VAR
    return -0.5 * (quad + d * np.log(2.0 * np.pi * GL_NOISE_VAR))


# ---------------------------------------------------------------------------
# 1-D shallow water
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShallowWaterConfig:
    """Grid, stepping and physics constants for the Saint-Venant solver.

    The defaults follow the reference constants (dt = 300 s over 3600 s of
    simulated time, i.e. 12 steps); ``experiment_scale`` and ``desk_scale``
    trade step size for step count at fixed total time.
    """

    n_grid: int = 100
    n_steps: int = 12
    dt: float = 300.0
    dx: float = 0.01
    implicit_weight: float = 0.5
    drag: float = 0.001
    gravity: float = 9.81
    dry_depth: float = -10.0
    amplitude: float = 0.2
    disturbance_index: int = 2
    noise_scale: float = 0.25

    def __post_init__(self):
        if self.n_grid < 8:
            raise ValueError("need at least 8 grid points")
        if self.n_steps < 1:
            raise ValueError("need at least one step")
        if self.dt <= 0 or self.dx <= 0 or self.gravity <= 0:
            raise ValueError("dt, dx and gravity must be positive")
        if not 0.0 <= self.implicit_weight <= 1.0:
            raise ValueError("implicit_weight must lie in [0, 1]")
        if not np.isfinite(self.amplitude):
            raise ValueError("amplitude must be finite")
        if not 0 <= self.disturbance_index < self.n_grid:
            raise ValueError("disturbance_index out of range")

    @property
    def x_dim(self) -> int:
        return 2 * self.n_steps * self.n_grid

    @classmethod
    def experiment_scale(cls, **kw) -> "ShallowWaterConfig":
        """100 steps over the same 3600 s window (10k-entry wave field)."""
        kw.setdefault("n_steps", 100)
        kw.setdefault("dt", 36.0)
        return cls(**kw)

    @classmethod
    def desk_scale(cls, **kw) -> "ShallowWaterConfig":
        """Reduced 50 x 50 grid for laptop-scale training runs."""
        kw.setdefault("n_grid", 50)
        kw.setdefault("n_steps", 50)
        kw.setdefault("dt", 72.0)
        return cls(**kw)


def shallow_water_solve(depth: np.ndarray, cfg: ShallowWaterConfig) -> np.ndarray:
    """Integrate the linearized Saint-Venant equations over a variable basin.

    Staggered grid: surface elevation eta at the cfg.n_grid cell centers,
    velocity u at the cell faces.  The gravity/continuity coupling is
    theta-weighted between time levels (weight = cfg.implicit_weight) and
    bottom drag is treated implicitly, which leaves one symmetric tridiagonal
    solve for eta per step.  Faces touching a non-positive depth (including
    the dry ghost cells outside the domain) carry zero flux, closing the
    basin.  Returns eta after each of the cfg.n_steps steps, shape [T, N].
    """
    h_cells = np.asarray(depth, dtype=np.float64)
    if h_cells.shape != (cfg.n_grid,):
        raise ValueError(f"depth must have shape ({cfg.n_grid},)")
    if not np.all(np.isfinite(h_cells)):
        raise ValueError("depth profile contains non-finite values")

    n = cfg.n_grid
    w = cfg.implicit_weight
    g, dt, dx = cfg.gravity, cfg.dt, cfg.dx

    # face depths; ghost cells beyond both boundaries are dry by construction
    padded = np.concatenate(([cfg.dry_depth], h_cells, [cfg.dry_depth]))
    h_face = 0.5 * (padded[:-1] + padded[1:])
    open_face = (padded[:-1] > 0.0) & (padded[1:] > 0.0) & (h_face > 0.0)
    h_face = np.where(open_face, h_face, 0.0)
    beta = np.where(open_face, 1.0 / (1.0 + dt * cfg.drag / np.where(open_face, h_face, 1.0)), 0.0)
    lam = (g * w**2 * dt**2 / dx**2) * h_face * beta  # zero on closed faces

    # tridiagonal system matrix is constant across steps
    diag = 1.0 + lam[1:] + lam[:-1]
    lower = -lam[1:-1]
    upper = -lam[1:-1]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper
    ab[1, :] = diag
    ab[2, :-1] = lower

    eta = np.zeros(n)
    eta[cfg.disturbance_index] = cfg.amplitude
    u = np.zeros(n + 1)

    field = np.empty((cfg.n_steps, n))
    grad_coef = g * dt / dx
    for step in range(cfg.n_steps):
        deta = np.zeros(n + 1)
        deta[1:-1] = eta[1:] - eta[:-1]
        # explicit part of the theta-weighted face flux
        u_expl = beta * (u - grad_coef * (1.0 - w) * deta)
        a_flux = h_face * (w * u_expl + (1.0 - w) * u)
        rhs = eta - (dt / dx) * (a_flux[1:] - a_flux[:-1])
        eta_new = solve_banded((1, 1), ab, rhs)
        deta_new = np.zeros(n + 1)
        deta_new[1:-1] = eta_new[1:] - eta_new[:-1]
        u = u_expl - beta * grad_coef * w * deta_new
        u[~open_face] = 0.0
        eta = eta_new
        if not np.all(np.isfinite(eta)):
            raise RuntimeError(
                f"shallow-water solver blew up at step {step + 1}/{cfg.n_steps}"
            )
        field[step] = eta
    return field


def fourier_observe(field: np.ndarray, cfg: ShallowWaterConfig, rng: RngStream) -> np.ndarray:
    """2-D DFT of the wave field; noisy real and imaginary parts, concatenated."""
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (cfg.n_steps, cfg.n_grid):
        raise ValueError(f"field must have shape ({cfg.n_steps}, {cfg.n_grid})")
    spectrum = fft2(field)
    flat = np.concatenate([spectrum.real.ravel(), spectrum.imag.ravel()])
    if cfg.noise_scale > 0.0:
        flat = flat + cfg.noise_scale * rng.normal(flat.shape)
    return flat


def _shallow_water_one(args):
    depth, cfg, seed, key = args
    rng = RngStream(seed, key)
    return fourier_observe(shallow_water_solve(depth, cfg), cfg, rng)


def worker_count() -> int:
    """Simulation fan-out width, from the only environment knob we honor."""
    try:
        return max(1, int(os.environ.get("ADVSBI_WORKERS", "1")))
    except ValueError:
        return 1


def shallow_water_simulate(theta: np.ndarray, rng: RngStream, cfg: ShallowWaterConfig) -> np.ndarray:
    """Batch simulator.  Each row runs on its own substream (stream id =
    batch index), so results are identical whether rows run serially or on a
    worker pool."""
    theta = np.atleast_2d(theta)
    jobs = [(theta[i], cfg, rng.seed, rng.key + (i,)) for i in range(theta.shape[0])]
    workers = worker_count()
    if workers > 1 and len(jobs) > 2 * workers:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_shallow_water_one, jobs, chunksize=8))
    else:
        rows = [_shallow_water_one(j) for j in jobs]
    return np.stack(rows)


# ---------------------------------------------------------------------------
# task registry
# ---------------------------------------------------------------------------


def two_moons_task() -> SimTask:
    from .reference import two_moons_log_likelihood  # local import to avoid cycle

    return SimTask(
        name="two_moons",
        theta_dim=2,
        x_dim=2,
        prior=UniformBox([-1.0, -1.0], [1.0, 1.0]),
        simulate=two_moons_simulate,
        log_likelihood=two_moons_log_likelihood,
    )


def slcp_task() -> SimTask:
    from .reference import slcp_log_likelihood

    return SimTask(
        name="slcp",
        theta_dim=5,
        x_dim=8,
        prior=UniformBox([-3.0] * 5, [3.0] * 5),
        simulate=slcp_simulate,
        log_likelihood=slcp_log_likelihood,
    )


def gaussian_linear_task(dim: int = 2) -> SimTask:
    return SimTask(
        name="gaussian_linear",
        theta_dim=dim,
        x_dim=dim,
        prior=MultivariateNormal(np.zeros(dim), np.eye(dim)),
        simulate=gaussian_linear_simulate,
        log_likelihood=gaussian_linear_log_likelihood,
    )


def shallow_water_task(cfg: ShallowWaterConfig | None = None) -> SimTask:
    cfg = cfg or ShallowWaterConfig.desk_scale()
    return SimTask(
        name="shallow_water",
        theta_dim=cfg.n_grid,
        x_dim=cfg.x_dim,
        prior=depth_profile_prior(cfg.n_grid),
        simulate=lambda theta, rng: shallow_water_simulate(theta, rng, cfg),
        log_likelihood=None,
    )


def get_task(name: str, **kwargs) -> SimTask:
    if name == "two_moons":
        return two_moons_task()
    if name == "slcp":
        return slcp_task()
    if name == "gaussian_linear":
        return gaussian_linear_task(**kwargs)
    if name == "shallow_water":
        return shallow_water_task(**kwargs)
    raise ValueError(f"unknown task {name!r}")
