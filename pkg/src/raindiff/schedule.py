"""Noise variance schedule for the diffusion corruption process.

A schedule holds beta_t for t = 1..T together with the derived
alpha_t = 1 - beta_t and the running product alpha_bar_t. The product is
accumulated and stored in float64: at T ~ 1000 terms, float32
accumulation loses digits that the samplers rely on.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are 0-based internally; `query` speaks the 1-based step index."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar_t with the t = 0 extension alpha_bar_0 := 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 0..{self.T}")
        return float(self.alpha_bar[t - 1])

    @property
    def terminal_ok(self) -> bool:
        """True when the final state is near pure noise (sqrt(alpha_bar_T) < 0.05),
        the regime a trainable schedule should reach."""
        return float(np.sqrt(self.alpha_bar[-1])) < 0.05


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly interpolated beta, inclusive of both endpoints."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
    )


def query(schedule: NoiseSchedule, t: int):
    """(beta_t, alpha_t, alpha_bar_t) at 1-based step t; no interpolation."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside 1..{schedule.T}")
    i = t - 1
    return (
        float(schedule.beta[i]),
        float(schedule.alpha[i]),
        float(schedule.alpha_bar[i]),
    )


# The full-scale default follows the common linear-schedule convention;
# the desk-scale variant raises beta_end so that a T=200 run still ends
# near pure noise (sqrt(alpha_bar_T) < 0.05).
DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DESK_T = 200
DESK_BETA_END = 0.07
