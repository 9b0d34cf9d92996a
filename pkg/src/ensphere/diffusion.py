"""Conditional diffusion sampling: schedules, preconditioning, solver, churn and rollout.

Noise levels follow the power-law (rho) schedule of Karras et al. (2022). The
sampler integrates the probability-flow ODE with the data-prediction
DPM-Solver++(2S) update, using the geometric mean of consecutive noise levels
as the midpoint, and finishes with a single Euler step to sigma = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import LatLonGrid
from .perturbations import get_transform, sample_noise_coefficients
from .sht import exact_lmax

SIGMA_DATA = 1.0


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_max: float = 80.0
    sigma_min: float = 0.03
    rho: float = 7.0
    n_steps: int = 20

    def __post_init__(self):
        if not self.sigma_max > self.sigma_min > 0:
            raise ValueError("need sigma_max > sigma_min > 0")
        if self.n_steps < 2:
            raise ValueError("schedule needs at least two noise levels")
        if self.rho <= 0:
            raise ValueError("rho must be positive")

    def sigma(self, i: int) -> float:
        if not 0 <= i <= self.n_steps - 1:
            raise IndexError(f"schedule index {i} outside 0..{self.n_steps - 1}")
        if i == 0:
            return float(self.sigma_max)
        if i == self.n_steps - 1:
            return float(self.sigma_min)
        return float(_power_interp(self.sigma_max, self.sigma_min, self.rho, i / (self.n_steps - 1)))

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma(i) for i in range(self.n_steps)])


def _power_interp(hi, lo, rho, u):
    a = hi ** (1.0 / rho)
    return (a + u * (lo ** (1.0 / rho) - a)) ** rho


@dataclass(frozen=True)
class TrainNoiseDist:
    sigma_max: float = 88.0
    sigma_min: float = 0.02
    rho: float = 7.0

    def __post_init__(self):
        if not self.sigma_max > self.sigma_min > 0:
            raise ValueError("need sigma_max > sigma_min > 0")


SAMPLING_SCHEDULE = NoiseSchedule()
TRAINING_DIST = TrainNoiseDist()


def schedule_sigma(sched: NoiseSchedule, i: int) -> float:
    return sched.sigma(i)


def sample_train_sigma(dist: TrainNoiseDist, u):
    """Inverse CDF of the training noise distribution; u=0 gives sigma_max, u=1 sigma_min."""
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u > 1)):
        raise ValueError("u must lie in [0, 1]")
    out = _power_interp(dist.sigma_max, dist.sigma_min, dist.rho, u)
    out = np.where(u == 0, dist.sigma_max, np.where(u == 1, dist.sigma_min, out))
    return out if out.ndim else float(out)


def train_sigma_cdf(dist: TrainNoiseDist, sigma):
    """P(S >= sigma) mapped to u, i.e. the inverse of ``sample_train_sigma``."""
    a = dist.sigma_max ** (1.0 / dist.rho)
    b = dist.sigma_min ** (1.0 / dist.rho)
    return (np.asarray(sigma, dtype=float) ** (1.0 / dist.rho) - a) / (b - a)


# -- preconditioning ------------------------------------------------------------------


def c_skip(sigma, sigma_data: float = SIGMA_DATA):
    return sigma_data**2 / (np.square(sigma) + sigma_data**2)


def c_out(sigma, sigma_data: float = SIGMA_DATA):
    return sigma * sigma_data / np.sqrt(np.square(sigma) + sigma_data**2)


def c_in(sigma, sigma_data: float = SIGMA_DATA):
    return 1.0 / np.sqrt(np.square(sigma) + sigma_data**2)


def c_noise(sigma):
    return 0.25 * np.log(sigma)


def loss_weight(sigma, sigma_data: float = SIGMA_DATA):
    """lambda(sigma), which makes the effective training target unit-variance."""
    return (np.square(sigma) + sigma_data**2) / np.square(sigma * sigma_data)


Denoiser = Callable[[np.ndarray, object, float], np.ndarray]


def precondition(inner: Callable, sigma_data: float = SIGMA_DATA) -> Denoiser:
    """Wrap a raw network ``inner(x, conditioning, noise_cond)`` into a denoiser ``D(z, conditioning, sigma)``."""

    def denoiser(z, conditioning, sigma):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        z = np.asarray(z, dtype=float)
        raw = inner(c_in(sigma, sigma_data) * z, conditioning, c_noise(sigma))
        return c_skip(sigma, sigma_data) * z + c_out(sigma, sigma_data) * np.asarray(raw)

    return denoiser


@dataclass
class ToyDenoiser:
    """Optimal denoiser for a Gaussian target N(mean, std**2) per cell.

    ``mean`` may be a callable of the conditioning. ``calls`` counts evaluations.
    """

    mean: object = 0.0
    std: object = 1.0
    calls: int = 0

    def __call__(self, z, conditioning, sigma):
        self.calls += 1
        mu = self.mean(conditioning) if callable(self.mean) else self.mean
        s2 = np.square(self.std)
        return mu + s2 / (s2 + sigma**2) * (np.asarray(z) - mu)

    def flow_map(self, z, sigma_from, sigma_to):
        """Exact probability-flow transport of ``z`` between noise levels (conditioning-free mean)."""
        s2 = np.square(self.std)
        return self.mean + np.sqrt((s2 + sigma_to**2) / (s2 + sigma_from**2)) * (np.asarray(z) - self.mean)


# -- noise sources --------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianNoise:
    """Independent unit normals per cell."""

    def __call__(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.standard_normal(shape)


@dataclass(frozen=True)
class SphericalNoise:
    """Unit-variance isotropic noise with a flat angular spectrum on ``grid``."""

    grid: LatLonGrid
    l_max: int | None = None

    def __call__(self, rng: np.random.Generator, shape) -> np.ndarray:
        shape = tuple(shape)
        if shape[-2:] != self.grid.shape:
            raise ValueError(f"noise shape {shape} does not end with grid shape {self.grid.shape}")
        L = exact_lmax(self.grid) if self.l_max is None else self.l_max
        C, S = sample_noise_coefficients(L, 1.0, rng, shape[:-2])
        return get_transform(self.grid, L).synthesize(C, S)


@dataclass(frozen=True)
class ChurnConfig:
    s_churn: float = 2.5
    s_tmin: float = 0.75
    s_tmax: float = 80.0
    s_noise: float = 1.05

    def __post_init__(self):
        if self.s_churn < 0:
            raise ValueError("s_churn must be non-negative")
        if not self.s_tmin < self.s_tmax:
            raise ValueError("need s_tmin < s_tmax")


NO_CHURN = ChurnConfig(s_churn=0.0)


def churn_gamma(sigma: float, cfg: ChurnConfig, n_steps: int) -> float:
    if cfg.s_tmin <= sigma <= cfg.s_tmax:
        return min(cfg.s_churn / n_steps, np.sqrt(2.0) - 1.0)
    return 0.0


def churn_inflate(z, sigma, cfg: ChurnConfig, n_steps: int, noise, rng) -> tuple[np.ndarray, float]:
    """Raise the noise level of ``z`` from ``sigma`` to ``sigma * (1 + gamma)`` with fresh noise."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    gamma = churn_gamma(sigma, cfg, n_steps)
    if gamma == 0.0:
        return z, sigma
    sigma_hat = sigma * (1.0 + gamma)
    eps = noise(rng, np.shape(z))
    return z + cfg.s_noise * np.sqrt(sigma_hat**2 - sigma**2) * eps, sigma_hat


def solver_step(z, sigma_s: float, sigma_t: float, denoiser: Denoiser, conditioning=None) -> np.ndarray:
    """One DPM-Solver++(2S) step from ``sigma_s`` to ``sigma_t``; Euler (``D(z)``) when ``sigma_t == 0``."""
    if not sigma_s > sigma_t >= 0:
        raise ValueError(f"solver step must decrease sigma: {sigma_s} -> {sigma_t}")
    d_s = denoiser(z, conditioning, sigma_s)
    if sigma_t == 0:
        return d_s
    sigma_m = np.sqrt(sigma_s * sigma_t)
    r = sigma_m / sigma_s
    u = r * z + (1.0 - r) * d_s
    d_m = denoiser(u, conditioning, sigma_m)
    q = sigma_t / sigma_s
    return q * z + (1.0 - q) * d_m


def _generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_residual(
    conditioning,
    shape,
    denoiser: Denoiser,
    schedule: NoiseSchedule = SAMPLING_SCHEDULE,
    churn: ChurnConfig = ChurnConfig(),
    noise=GaussianNoise(),
    seed=None,
    final_euler: bool = True,
) -> np.ndarray:
    """Draw one residual by integrating from pure noise at sigma_max.

    Churn is applied once per step, before that step's first evaluation. The
    denoiser is called ``2N - 1`` times; with ``final_euler=False`` the state
    at sigma_min is returned after ``2N - 2`` calls.
    """
    rng = _generator(seed)
    sigmas = schedule.sigmas
    z = sigmas[0] * noise(rng, shape)
    for i in range(len(sigmas) - 1):
        z, s_hat = churn_inflate(z, sigmas[i], churn, schedule.n_steps, noise, rng)
        z = solver_step(z, s_hat, sigmas[i + 1], denoiser, conditioning)
    if not final_euler:
        return z
    z, s_hat = churn_inflate(z, sigmas[-1], churn, schedule.n_steps, noise, rng)
    return solver_step(z, s_hat, 0.0, denoiser, conditioning)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel scales: ``residual_std`` is the diagonal of S."""

    residual_std: np.ndarray
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "residual_std", np.asarray(self.residual_std, dtype=float))
        for name in ("residual_std", "input_std"):
            v = getattr(self, name)
            if v is not None and np.any(np.asarray(v) <= 0):
                raise ValueError(f"{name} must be positive")

    def normalize_inputs(self, x):
        if self.input_mean is None or self.input_std is None:
            return np.asarray(x)
        return (np.asarray(x) - _channel(self.input_mean, x)) / _channel(self.input_std, x)


def _channel(v, x):
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (np.ndim(x) - v.ndim))


class RolloutError(FloatingPointError):
    def __init__(self, step: int, member: int):
        super().__init__(f"non-finite state at rollout step {step} (member {member})")
        self.step = step
        self.member = member


def step_seed(seed: int, member: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(member, step))


def rollout(
    x0,
    x_prev,
    n_steps: int,
    stats: NormalizationStats,
    denoiser: Denoiser,
    schedule: NoiseSchedule = SAMPLING_SCHEDULE,
    churn: ChurnConfig = ChurnConfig(),
    noise=GaussianNoise(),
    seed: int = 0,
    member: int = 0,
    precip_channels=None,
) -> np.ndarray:
    """Autoregressive trajectory ``X^1..X^T`` of shape ``(T, C, ...)``.

    Each step samples a normalised residual conditioned on the two previous
    states, scales it by the residual std and adds it to the previous state;
    precipitation channels take the scaled residual directly.
    """
    if n_steps < 1:
        raise ValueError("rollout needs at least one step")
    x_tm1 = np.asarray(x0, dtype=float)
    x_tm2 = np.asarray(x_prev, dtype=float)
    if x_tm1.shape != x_tm2.shape:
        raise ValueError("the two initial states differ in shape")
    scale = _channel(stats.residual_std, x_tm1)
    precip = np.zeros(x_tm1.shape[0], dtype=bool) if precip_channels is None else np.asarray(precip_channels, bool)
    keep = _channel(~precip, x_tm1).astype(float)
    out = np.empty((n_steps,) + x_tm1.shape)
    for t in range(n_steps):
        rng = np.random.default_rng(step_seed(seed, member, t))
        z = sample_residual((x_tm1, x_tm2), x_tm1.shape, denoiser, schedule, churn, noise, rng)
        x_t = keep * x_tm1 + scale * z
        if not np.all(np.isfinite(x_t)):
            raise RolloutError(t + 1, member)
        out[t] = x_t
        x_tm2, x_tm1 = x_tm1, x_t
    return out


def noise_level_encoding(sigma, n_frequencies: int = 32, base_period: float = 16.0) -> np.ndarray:
    """Sin/cos features of log(sigma) at frequencies k / base_period, k = 1..n; shape ``(..., 2n)``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    k = np.arange(1, n_frequencies + 1)
    phase = 2.0 * np.pi * np.log(sigma)[..., None] * k / base_period
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def denoising_loss(y, z, sigma, level_weights, area_weights) -> float:
    """``lambda(sigma) * mean_{j,i} w_j a_i (y - z)**2`` for fields ``(..., J, n_lat, n_lon)``.

    Leading batch dims are averaged; ``sigma`` may vary over them.
    """
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if y.shape != z.shape:
        raise ValueError(f"prediction {y.shape} and target {z.shape} differ in shape")
    w = np.asarray(level_weights, dtype=float)
    a = np.asarray(area_weights, dtype=float)
    if y.ndim < 3 or w.shape != (y.shape[-3],) or a.shape != y.shape[-2:]:
        raise ValueError("weights do not match the (J, lat, lon) layout")
    per_sample = np.mean(w[:, None, None] * a * (y - z) ** 2, axis=(-3, -2, -1))
    return float(np.mean(loss_weight(np.asarray(sigma, dtype=float)) * per_sample))
