"""Seedable random streams and the probability distributions the priors,
noise sources and correction machinery require."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

_LOG_2PI = float(np.log(2.0 * np.pi))


class RngStream:
    """Deterministic random source addressable by (seed, stream path).

    Substreams derived with distinct ids are statistically independent, so
    batch items can draw in parallel and still reproduce bit-for-bit
    regardless of scheduling.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        )

    def substream(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(ids))

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def state(self) -> dict:
        """JSON-serializable generator state for checkpointing."""
        return {"seed": self.seed, "key": list(self.key), "bg": self._gen.bit_generator.state}

    def restore(self, state: dict) -> None:
        if state["seed"] != self.seed or tuple(state["key"]) != self.key:
            raise ValueError("checkpointed rng state belongs to a different stream")
        self._gen.bit_generator.state = state["bg"]

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], tuple(state["key"]))
        rng._gen.bit_generator.state = state["bg"]
        return rng


def cholesky(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises ValueError for non-SPD input."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("cholesky expects a square matrix")
    if not np.allclose(m, m.T, atol=1e-10):
        raise ValueError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc


class MultivariateNormal:
    """Gaussian with dense covariance; exact log-density via Cholesky."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        if self.cov.shape != (self.dim, self.dim):
            raise ValueError("covariance shape does not match mean")
        self.chol = cholesky(self.cov)
        self._log_det = 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("need n >= 1 samples")
        z = rng.normal((n, self.dim))
        return self.mean + z @ self.chol.T

    def log_prob(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[1] != self.dim:
            raise ValueError(f"points must have dimension {self.dim}")
        # solve L y = (x - mu)^T, then |y|^2 = (x-mu)^T Sigma^-1 (x-mu)
        diff = (pts - self.mean).T
        y = solve_triangular(self.chol, diff, lower=True)
        quad = np.sum(y * y, axis=0)
        out = -0.5 * (quad + self.dim * _LOG_2PI + self._log_det)
        return out[0] if squeeze else out


def mvn_sample(dist: MultivariateNormal, rng: RngStream, n: int) -> np.ndarray:
    return dist.sample(rng, n)


def mvn_log_prob(dist: MultivariateNormal, x) -> np.ndarray:
    return dist.log_prob(x)


class UniformBox:
    """Uniform distribution over an axis-aligned box."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape:
            raise ValueError("bound shapes differ")
        if not np.all(self.lower < self.upper):
            raise ValueError("need lower < upper element-wise")
        self._log_volume = float(np.sum(np.log(self.upper - self.lower)))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("need n >= 1 samples")
        return rng.uniform(0.0, 1.0, (n, self.dim)) * (self.upper - self.lower) + self.lower

    def log_prob(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        pts = np.atleast_2d(x)
        inside = np.all((pts >= self.lower) & (pts <= self.upper), axis=1)
        out = np.where(inside, -self._log_volume, -np.inf)
        return out[0] if squeeze else out


def uniform_sample(dist: UniformBox, rng: RngStream, n: int) -> np.ndarray:
    return dist.sample(rng, n)


def uniform_log_prob(dist: UniformBox, x) -> np.ndarray:
    return dist.log_prob(x)


def standard_normal(dim: int) -> MultivariateNormal:
    """p(z) for generator latents."""
    return MultivariateNormal(np.zeros(dim), np.eye(dim))


def squared_exponential_cov(
    dim: int, sigma: float = 15.0, tau: float = 100.0, jitter: float = 1e-8
) -> np.ndarray:
    """Sigma_ij = sigma * exp(-(i-j)^2 / tau), plus a small diagonal jitter.

    The jitter guards numerical semi-definiteness of the long-range kernel at
    large dim; it sits far below sampling noise.
    """
    idx = np.arange(dim, dtype=np.float64)
    cov = sigma * np.exp(-((idx[:, None] - idx[None, :]) ** 2) / tau)
    return cov + jitter * np.eye(dim)


def depth_profile_prior(
    dim: int = 100, mu: float = 10.0, sigma: float = 15.0, tau: float = 100.0
) -> MultivariateNormal:
    """Smooth basin-depth prior: N(mu * 1, squared-exponential covariance)."""
    return MultivariateNormal(np.full(dim, mu), squared_exponential_cov(dim, sigma, tau))
