"""Noise schedules, forward diffusion and DDIM-style reverse steps.

Timesteps are 1-based externally (t in 1..T) and map to index t-1 in the
schedule arrays. ``abar(0)`` is defined as 1 so the final step lands on a
clean sample.

All step functions only combine python floats with their array arguments,
so they accept numpy arrays and torch tensors alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or an infeasible sampling step."""


def _check_shapes(**arrays) -> None:
    shapes = {name: tuple(a.shape) for name, a in arrays.items()}
    if len(set(shapes.values())) > 1:
        raise ValueError(f"shape mismatch: {shapes}")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    eta: float = 0.0
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        if beta.shape != (self.T,):
            raise ScheduleError(f"beta: expected length {self.T}, got shape {beta.shape}")
        if not np.all((beta > 0) & (beta < 1)):
            raise ScheduleError("beta: every entry must lie in (0, 1)")
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ScheduleError(f"eta: must be finite and >= 0, got {self.eta}")
        alpha = 1.0 - beta
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", np.cumprod(alpha))):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def abar(self, t: int) -> float:
        """Cumulative product at external step ``t``; ``abar(0) == 1``."""
        if t == 0:
            return 1.0
        check_timestep(t, self)
        return float(self.alpha_bar[t - 1])

    def sigma(self, t: int, t_prev: int | None = None) -> float:
        """DDIM noise scale for the jump t -> t_prev (default t-1)."""
        t_prev = t - 1 if t_prev is None else t_prev
        if self.eta == 0:
            return 0.0
        a_t, a_prev = self.abar(t), self.abar(t_prev)
        return self.eta * math.sqrt((1 - a_prev) / (1 - a_t)) * math.sqrt(1 - a_t / a_prev)


def check_timestep(t: int, s: NoiseSchedule) -> int:
    if not isinstance(t, (int, np.integer)) or not 1 <= t <= s.T:
        raise ScheduleError(f"t: expected integer in [1, {s.T}], got {t!r}")
    return int(t)


def make_schedule(T: int, beta_start: float, beta_end: float, kind: str = "linear",
                  eta: float = 0.0) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T: must be a positive integer, got {T!r}")
    if not 0 < beta_start < 1:
        raise ScheduleError(f"beta_start: must lie in (0, 1), got {beta_start}")
    if not 0 < beta_end < 1:
        raise ScheduleError(f"beta_end: must lie in (0, 1), got {beta_end}")
    if beta_start > beta_end:
        raise ScheduleError(f"beta_start: {beta_start} exceeds beta_end {beta_end}")
    if kind != "linear":
        raise ScheduleError(f"kind: unsupported schedule {kind!r}")
    return NoiseSchedule(int(T), np.linspace(beta_start, beta_end, int(T)), eta=eta)


def forward_diffuse(x0, t: int, eps, s: NoiseSchedule):
    """Sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_shapes(x0=x0, eps=eps)
    a = s.abar(check_timestep(t, s))
    return math.sqrt(a) * x0 + math.sqrt(1 - a) * eps


def predict_x0(x_t, eps_hat, t: int, s: NoiseSchedule):
    a = s.abar(check_timestep(t, s))
    return (x_t - math.sqrt(1 - a) * eps_hat) / math.sqrt(a)


def ddim_step(x_t, eps_hat, t: int, s: NoiseSchedule, fresh_noise=None, t_prev: int | None = None):
    """One reverse step from ``t`` to ``t_prev`` (default ``t - 1``).

    ``fresh_noise`` is only read when the step has a nonzero sigma.
    """
    _check_shapes(x_t=x_t, eps_hat=eps_hat)
    check_timestep(t, s)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ScheduleError(f"t_prev: expected integer in [0, {t}), got {t_prev}")
    a_prev = s.abar(t_prev)
    sigma = s.sigma(t, t_prev)
    radicand = 1 - a_prev - sigma**2
    if radicand < -1e-12:
        raise ScheduleError(f"negative radicand at t={t}: sigma^2={sigma**2} > 1-abar_prev={1 - a_prev}")
    out = math.sqrt(a_prev) * predict_x0(x_t, eps_hat, t, s) + math.sqrt(max(radicand, 0.0)) * eps_hat
    if sigma > 0:
        if fresh_noise is None:
            raise ScheduleError("fresh_noise is required when sigma_t > 0")
        _check_shapes(x_t=x_t, fresh_noise=fresh_noise)
        out = out + sigma * fresh_noise
    return out


def guided_epsilon(eps_uncond, x_t, xbar_t, w: float, t: int, s: NoiseSchedule):
    """Steer the noise prediction toward the noised target ``xbar_t``."""
    _check_shapes(eps_uncond=eps_uncond, x_t=x_t, xbar_t=xbar_t)
    if not (w >= 0 and math.isfinite(w)):
        raise ValueError(f"w: guidance weight must be finite and >= 0, got {w}")
    a = s.abar(check_timestep(t, s))
    return eps_uncond - w * math.sqrt(1 - a) * (xbar_t - x_t)


def target_forward(xbar0, eps_pred, t: int, s: NoiseSchedule):
    """Noise the target image with the model's own noise estimate."""
    _check_shapes(xbar0=xbar0, eps_pred=eps_pred)
    a = s.abar(check_timestep(t, s))
    return math.sqrt(a) * xbar0 + math.sqrt(1 - a) * eps_pred


def strided_timesteps(T: int, steps: int) -> list[int]:
    """Descending, evenly spaced subsequence of 1..T of length ``steps``, starting at T."""
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps: expected integer in [1, {T}], got {steps}")
    ts = np.round(np.linspace(T, 1, steps)).astype(int)
    return [int(t) for t in ts]
