"""Size-agnostic restoration: overlapping-patch noise-estimate fusion
driven by deterministic implicit sampling.

Restoration starts from seeded Gaussian noise of the conditioning
image's size. At each ladder step the noise estimator runs on every
patch of a covering grid; the per-patch estimates are accumulated into a
whole-image canvas and divided by the per-pixel hit count, and one
implicit reverse step is applied to the whole image with that fused
estimate. The derain entry point conditions the derain estimator on the
rainy input; rain generation conditions the opposite estimator on a
clean input. The cycle generators play no part at test time.
"""

from dataclasses import dataclass

import numpy as np

from . import models as models_mod
from .diffusion import TimestepPlan, implicit_step
from .ndcore import Tensor, no_grad


@dataclass(frozen=True)
class PatchGrid:
    p: int
    stride: int
    locations: tuple  # ordered (top, left) pairs, row-major

    @property
    def D(self) -> int:
        return len(self.locations)


def _axis_offsets(extent: int, p: int, stride: int):
    offs = list(range(0, extent - p + 1, stride))
    if offs[-1] != extent - p:
        offs.append(extent - p)  # clamped final position keeps full coverage
    return offs


def build_patch_grid(H: int, W: int, p: int, stride: int) -> PatchGrid:
    """Grid of p x p in-bounds patch locations covering every pixel.

    Offsets are the multiples of `stride` per axis plus a final position
    clamped to the far edge. When the image is smaller than p on either
    axis, the patch side shrinks to min(H, W, p) (a single whole-image
    patch in the square case) and the stride is clamped accordingly.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if stride > p:
        raise ValueError(f"stride {stride} > patch {p} would leave coverage gaps")
    if H < p or W < p:
        p = min(H, W, p)
        stride = min(stride, p)
    locations = tuple(
        (top, left)
        for top in _axis_offsets(H, p, stride)
        for left in _axis_offsets(W, p, stride)
    )
    return PatchGrid(p=p, stride=stride, locations=locations)


def fuse_noise_estimate(grid: PatchGrid, params, x_t: np.ndarray, cond: np.ndarray,
                        t: int, schedule, estimator=None) -> np.ndarray:
    """Average the per-patch noise estimates into a whole-image estimate.

    Runs every grid location through the estimator, adds each patch
    estimate into an accumulator at its location, counts per-pixel hits,
    and returns accumulator / count. The canonical location order is the
    grid's; the result is order-independent up to float reassociation.

    `estimator(params, x_patch, cond_patch, t)` defaults to the noise
    estimator network.
    """
    if estimator is None:
        estimator = lambda pr, xp, cp, tt: models_mod.predict_noise(
            pr, Tensor(xp), Tensor(cp), tt, schedule
        ).data
    C, H, W = x_t.shape
    omega = np.zeros((C, H, W), dtype=np.float32)
    count = np.zeros((H, W), dtype=np.float32)
    p = grid.p
    with no_grad():
        for top, left in grid.locations:
            xp = x_t[:, top : top + p, left : left + p]
            cp = cond[:, top : top + p, left : left + p]
            est = estimator(params, xp, cp, t)
            omega[:, top : top + p, left : left + p] += est
            count[top : top + p, left : left + p] += 1.0
    if count.min() < 1.0:
        raise ValueError("patch grid does not cover the image")
    return omega / count[None, :, :]


def restore(params, cond: np.ndarray, plan: TimestepPlan, schedule, p: int,
            stride: int, seed: int, estimator=None) -> np.ndarray:
    """Full restoration of a (3, H, W) conditioning image in [-1, 1].

    x starts as seeded standard normal; each plan step fuses a
    whole-image noise estimate over the patch grid and applies the
    deterministic implicit update. The result is clamped to [-1, 1].
    """
    if plan.T != schedule.T:
        raise ValueError(
            f"plan was built for T={plan.T} but schedule has T={schedule.T}"
        )
    C, H, W = cond.shape
    grid = build_patch_grid(H, W, p, stride)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((C, H, W), dtype=np.float32)
    with no_grad():
        for t, t_next in plan.pairs():
            fused = fuse_noise_estimate(grid, params, x, cond, t, schedule, estimator)
            x = implicit_step(Tensor(x), t, t_next, Tensor(fused), schedule).data
    return np.clip(x, -1.0, 1.0)


def derain(bundle, rainy: np.ndarray, plan: TimestepPlan, schedule, p: int,
           stride: int, seed: int) -> np.ndarray:
    """Condition the derain estimator on a rainy image; generators unused."""
    return restore(bundle.thetaA, rainy, plan, schedule, p, stride, seed)


def gen_rain(bundle, clean: np.ndarray, plan: TimestepPlan, schedule, p: int,
             stride: int, seed: int) -> np.ndarray:
    """Condition the rain-generation estimator on a clean image."""
    return restore(bundle.thetaB, clean, plan, schedule, p, stride, seed)
