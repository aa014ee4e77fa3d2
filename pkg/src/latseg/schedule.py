"""Variance-preserving noise schedules and per-parameterization reconstruction.

Conventions:
    - t = 0 is clean data, t = T is the terminal noise level.
    - alpha[t]^2 + sigma[t]^2 = 1 for every t (variance preserving).
    - Schedule arrays are float64; operations on numpy inputs promote to
      float64 (stable round trips), operations on torch tensors stay in the
      tensor's dtype (training precision).

The forward process is z_t = alpha_t * z + sigma_t * eps.  The model output
is interpreted by `Parameterization` and mapped back to a clean-latent
estimate by `reconstruct`; `amplification_factor` is the sensitivity
|d zhat / d pred| of that map, the quantity that makes noise prediction
unstable for single-step reconstruction at large t.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch

from .errors import ConfigError, NumericsError, ShapeError

Array = Union[np.ndarray, torch.Tensor]

VP_TOLERANCE = 1e-10
ALPHA_FLOOR = 1e-12


class ScheduleKind(str, enum.Enum):
    LINEAR = "linear"
    SCALED_LINEAR = "scaled_linear"


class Parameterization(str, enum.Enum):
    """Training target of the denoiser: injected noise, velocity, or clean latent."""

    EPSILON = "epsilon"
    V = "v"
    X0 = "x0"


@dataclass(frozen=True)
class BetaScheduleConfig:
    kind: ScheduleKind = ScheduleKind.LINEAR
    beta_start: float = 0.0001
    beta_end: float = 0.02
    num_steps: int = 1000

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", ScheduleKind(self.kind))
        except ValueError as exc:
            known = ", ".join(k.value for k in ScheduleKind)
            raise ConfigError(
                f"schedule.kind must be one of {{{known}}}, got {self.kind!r}"
            ) from exc
        if not 0.0 < self.beta_start < 1.0:
            raise ConfigError(f"schedule.beta_start must lie in (0, 1), got {self.beta_start}")
        if not 0.0 < self.beta_end < 1.0:
            raise ConfigError(f"schedule.beta_end must lie in (0, 1), got {self.beta_end}")
        if self.beta_start > self.beta_end:
            raise ConfigError(
                f"schedule.beta_start must not exceed schedule.beta_end "
                f"({self.beta_start} > {self.beta_end})"
            )
        if self.num_steps < 1:
            raise ConfigError(f"schedule.num_steps must be >= 1, got {self.num_steps}")

    def label(self) -> str:
        return f"{self.kind.value} {self.beta_start:g}-{self.beta_end:g}"


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed (alpha_t, sigma_t) trajectories, index 0..T inclusive."""

    alpha: np.ndarray
    sigma: np.ndarray
    config: BetaScheduleConfig = field(default_factory=BetaScheduleConfig)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        alpha.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)
        if alpha.shape != sigma.shape or alpha.ndim != 1:
            raise ShapeError(
                f"alpha and sigma must be equal-length 1-D arrays, "
                f"got {alpha.shape} and {sigma.shape}"
            )
        if alpha[0] != 1.0 or sigma[0] != 0.0:
            raise NumericsError(
                f"index 0 must be the clean endpoint (alpha=1, sigma=0), "
                f"got ({alpha[0]}, {sigma[0]})"
            )
        vp = np.abs(alpha**2 + sigma**2 - 1.0)
        if vp.max() > VP_TOLERANCE:
            raise NumericsError(
                f"variance-preserving identity violated: max |a^2+s^2-1| = {vp.max():.3e}"
            )
        if not np.all(np.diff(alpha) < 0):
            raise NumericsError("alpha must be strictly decreasing in t")
        if not np.all(np.diff(sigma) > 0):
            raise NumericsError("sigma must be strictly increasing in t")

    @property
    def num_steps(self) -> int:
        return len(self.alpha) - 1


def schedule_betas(config: BetaScheduleConfig) -> np.ndarray:
    """Per-step beta_1..beta_T; endpoints are preserved exactly for both kinds.

    A one-step schedule has a single beta, taken from beta_start.
    """
    b0, b1, steps = config.beta_start, config.beta_end, config.num_steps
    if config.kind is ScheduleKind.LINEAR:
        betas = np.linspace(b0, b1, steps, dtype=np.float64)
    else:
        betas = np.linspace(np.sqrt(b0), np.sqrt(b1), steps, dtype=np.float64) ** 2
        # squaring a rounded sqrt may miss the endpoint by an ulp
        betas[0] = b0
        betas[-1] = b1
    return betas


def build_schedule(config: BetaScheduleConfig) -> NoiseSchedule:
    """Build the VP schedule: alpha_t = sqrt(cumprod(1 - beta)), sigma_t = sqrt(1 - alpha_t^2).

    The cumulative product runs in the log domain; at T = 1000 the product is
    of order 1e-5 and direct multiplication loses precision.
    """
    betas = schedule_betas(config)
    log_abar = np.cumsum(np.log1p(-betas))
    alpha = np.concatenate(([1.0], np.exp(0.5 * log_abar)))
    sigma = np.concatenate(([0.0], np.sqrt(-np.expm1(log_abar))))
    return NoiseSchedule(alpha=alpha, sigma=sigma, config=config)


def _check_t(t, num_steps: int, low: int = 0) -> np.ndarray:
    t_arr = np.asarray(t)
    if t_arr.size and (t_arr.min() < low or t_arr.max() > num_steps):
        raise ValueError(
            f"timestep {t} outside [{low}, {num_steps}] for a {num_steps}-step schedule"
        )
    return t_arr


def _coef(values: np.ndarray, t_arr: np.ndarray, like: Array):
    """Schedule value(s) at t, shaped to broadcast against `like`."""
    vals = values[t_arr]
    if isinstance(like, torch.Tensor):
        coef = torch.as_tensor(vals, dtype=like.dtype, device=like.device)
    else:
        coef = vals
    if t_arr.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - 1))


def _check_shapes(a: Array, b: Array, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(z: Array, eps: Array, t, schedule: NoiseSchedule) -> Array:
    """z_t = alpha_t * z + sigma_t * eps."""
    _check_shapes(z, eps, "forward_noise(z, eps)")
    t_arr = _check_t(t, schedule.num_steps)
    return _coef(schedule.alpha, t_arr, z) * z + _coef(schedule.sigma, t_arr, eps) * eps


def velocity(z: Array, eps: Array, t, schedule: NoiseSchedule) -> Array:
    """v = alpha_t * eps - sigma_t * z."""
    _check_shapes(z, eps, "velocity(z, eps)")
    t_arr = _check_t(t, schedule.num_steps)
    return _coef(schedule.alpha, t_arr, eps) * eps - _coef(schedule.sigma, t_arr, z) * z


def reconstruct(
    pred: Array, z_t: Array, t, parameterization: Parameterization, schedule: NoiseSchedule
) -> Array:
    """Map a model output back to the clean-latent estimate.

    epsilon: (z_t - sigma_t * pred) / alpha_t
    v:       alpha_t * z_t - sigma_t * pred
    x0:      pred, unchanged
    """
    parameterization = Parameterization(parameterization)
    _check_shapes(pred, z_t, "reconstruct(pred, z_t)")
    if parameterization is Parameterization.X0:
        return pred
    # t = 0 is excluded for epsilon: the formula divides by alpha_t and the
    # clean endpoint carries no noise to invert.
    low = 1 if parameterization is Parameterization.EPSILON else 0
    t_arr = _check_t(t, schedule.num_steps, low=low)
    if parameterization is Parameterization.EPSILON:
        alpha_vals = schedule.alpha[t_arr]
        if np.min(alpha_vals) < ALPHA_FLOOR:
            raise NumericsError(
                f"alpha_t = {float(np.min(alpha_vals)):.3e} below {ALPHA_FLOOR:g}; "
                "epsilon-parameterization reconstruction would divide by a vanishing "
                "signal coefficient (no clamping is applied)"
            )
        num = z_t - _coef(schedule.sigma, t_arr, pred) * pred
        return num / _coef(schedule.alpha, t_arr, num)
    return _coef(schedule.alpha, t_arr, z_t) * z_t - _coef(schedule.sigma, t_arr, pred) * pred


def training_target(
    z: Array, eps: Array, t, parameterization: Parameterization, schedule: NoiseSchedule
) -> Array:
    """The regression target implied by the parameterization: eps, v, or z itself."""
    parameterization = Parameterization(parameterization)
    if parameterization is Parameterization.EPSILON:
        return eps
    if parameterization is Parameterization.V:
        return velocity(z, eps, t, schedule)
    return z


def amplification_factor(
    t: int, parameterization: Parameterization, schedule: NoiseSchedule
) -> float:
    """|d zhat / d pred| of `reconstruct`: sigma/alpha for epsilon, sigma for v, 1 for x0."""
    parameterization = Parameterization(parameterization)
    _check_t(t, schedule.num_steps, low=1)
    if parameterization is Parameterization.EPSILON:
        return float(schedule.sigma[t] / schedule.alpha[t])
    if parameterization is Parameterization.V:
        return float(schedule.sigma[t])
    return 1.0


def write_schedule_csv(schedule: NoiseSchedule, path) -> None:
    """Export the (t, alpha, sigma) trajectory for plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "alpha", "sigma"])
        for t in range(schedule.num_steps + 1):
            writer.writerow([t, repr(float(schedule.alpha[t])), repr(float(schedule.sigma[t]))])
