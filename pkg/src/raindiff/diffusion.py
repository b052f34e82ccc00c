"""Diffusion kernels: closed-form forward corruption, the stochastic
ancestral reverse step, the deterministic implicit reverse step, and the
implicit-sampling timestep ladder.

All image math runs through ndcore ops so the trainer can differentiate
through forward_sample when its x0 argument is a generator output; noise
inputs (eps, z) are always supplied by the caller, which keeps every
function here pure and bit-reproducible.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor
from .schedule import NoiseSchedule, query


@dataclass(frozen=True)
class TimestepPlan:
    """Implicit-sampling subsequence tau_i = (i-1)*T/S + 1 for i = 1..S,
    iterated from i = S down to 1 with t_next = tau_{i-1} (0 at the end)."""

    T: int
    S: int
    tau: np.ndarray

    def pairs(self):
        """(t, t_next) in execution order, ending at (tau_1, 0)."""
        out = []
        for i in range(self.S, 0, -1):
            t = int(self.tau[i - 1])
            t_next = int(self.tau[i - 2]) if i > 1 else 0
            out.append((t, t_next))
        return out


def make_plan(T: int, S: int) -> TimestepPlan:
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if T % S != 0:
        raise ValueError(f"S must divide T exactly (got T={T}, S={S})")
    step = T // S
    tau = np.array([(i - 1) * step + 1 for i in range(1, S + 1)], dtype=np.int64)
    return TimestepPlan(T=T, S=S, tau=tau)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_sample(x0, t: int, eps, schedule: NoiseSchedule) -> Tensor:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps (closed form)."""
    x0, eps = _as_tensor(x0), _as_tensor(eps)
    if x0.shape != eps.shape:
        raise nd.ShapeError(
            f"forward_sample: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}"
        )
    _, _, abar = query(schedule, t)
    return nd.add(
        nd.affine(x0, math.sqrt(abar)),
        nd.affine(eps, math.sqrt(1.0 - abar)),
    )


def ancestral_step(x_t, t: int, eps_hat, z, schedule: NoiseSchedule) -> Tensor:
    """One stochastic reverse step:
    (1/sqrt(alpha_t)) * (x_t - beta_t/sqrt(1-abar_t) * eps_hat) + sigma_t * z
    with the fixed variance choice sigma_t = sqrt(beta_t)."""
    x_t, eps_hat, z = _as_tensor(x_t), _as_tensor(eps_hat), _as_tensor(z)
    if x_t.shape != eps_hat.shape or x_t.shape != z.shape:
        raise nd.ShapeError(
            f"ancestral_step: shapes {tuple(x_t.shape)}, {tuple(eps_hat.shape)},"
            f" {tuple(z.shape)} must match"
        )
    beta, alpha, abar = query(schedule, t)
    mean = nd.affine(
        nd.sub(x_t, nd.affine(eps_hat, beta / math.sqrt(1.0 - abar))),
        1.0 / math.sqrt(alpha),
    )
    return nd.add(mean, nd.affine(z, math.sqrt(beta)))


def implicit_step(x_t, t: int, t_next: int, eps_hat, schedule: NoiseSchedule) -> Tensor:
    """Deterministic reverse update:
    sqrt(abar_next) * (x_t - sqrt(1-abar_t) * eps_hat) / sqrt(abar_t)
      + sqrt(1-abar_next) * eps_hat
    with abar_0 := 1, so t_next = 0 returns the x0 prediction."""
    x_t, eps_hat = _as_tensor(x_t), _as_tensor(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise nd.ShapeError(
            f"implicit_step: x_t {tuple(x_t.shape)} vs eps_hat {tuple(eps_hat.shape)}"
        )
    if not 0 <= t_next < t:
        raise ValueError(f"t_next must lie in 0..t-1, got t={t}, t_next={t_next}")
    abar_t = schedule.alpha_bar_at(t)
    abar_n = schedule.alpha_bar_at(t_next)
    x0_pred = nd.affine(
        nd.sub(x_t, nd.affine(eps_hat, math.sqrt(1.0 - abar_t))),
        1.0 / math.sqrt(abar_t),
    )
    return nd.add(
        nd.affine(x0_pred, math.sqrt(abar_n)),
        nd.affine(eps_hat, math.sqrt(1.0 - abar_n)),
    )
