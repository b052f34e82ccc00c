"""Joint unsupervised training loop.

Each step takes one unpaired batch (clean x, rainy y), runs the full
cycle pass on whole images, crops every image with the same per-pair
patch mask, and optimizes the sum of four conditional noise-matching
terms plus the weighted cycle loss:

    term 1  target x   (real clean)   cond x'   -> derain estimator
    term 2  target x'  (fake rainy)   cond x''  -> rain-gen estimator
    term 3  target y   (real rainy)   cond y'   -> rain-gen estimator
    term 4  target y'  (fake clean)   cond y''  -> derain estimator

One timestep is drawn per estimator per step (t_A shared by terms 1 and
4, t_B by terms 2 and 3) and likewise one noise batch per estimator,
unless independent_eps resamples per term. Gradients flow through both
the estimators and the generators; stop_grad_conditions detaches the
generator outputs wherever they enter the noise terms (as conditions
and as diffusion targets), leaving only the cycle-loss path into the
generators.

All randomness is drawn from named streams owned by TrainState (mask,
timestep, noise, order), so a checkpoint resumes bit-exactly.
"""

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import models as models_mod
from . import ndcore as nd
from . import ntb
from .checkpoint import save_checkpoint
from .diffusion import forward_sample
from .ndcore import Tensor, backward
from .schedule import NoiseSchedule

LOG_FIELDS = (
    "step",
    "err_A_clean",
    "err_B_fake_rain",
    "err_B_rain",
    "err_A_fake_clean",
    "cyc",
    "total",
    "wall_ms",
)


class NonFiniteLossError(RuntimeError):
    """A loss term went NaN/Inf; the step was aborted before the update."""

    def __init__(self, term, value):
        super().__init__(f"non-finite loss in term {term!r}: {value}")
        self.term = term


@dataclass(frozen=True)
class PatchMask:
    top: int
    left: int
    p: int

    def crop(self, img: Tensor) -> Tensor:
        return nd.crop2d(img, self.top, self.left, self.p, self.p)


def sample_patch_mask(H: int, W: int, p: int, rng) -> PatchMask:
    """Uniform patch location; images smaller than p degrade to the
    whole-image square mask (top=left=0, side min(H, W))."""
    if H < 1 or W < 1:
        raise ValueError(f"degenerate image extent {H}x{W}")
    if H < p or W < p:
        return PatchMask(0, 0, min(H, W))
    top = int(rng.integers(0, H - p + 1))
    left = int(rng.integers(0, W - p + 1))
    return PatchMask(top, left, p)


@dataclass
class LossBreakdown:
    err_A_clean: float
    err_B_fake_rain: float
    err_B_rain: float
    err_A_fake_clean: float
    cyc: float
    total: float

    def as_row(self):
        return (
            self.err_A_clean,
            self.err_B_fake_rain,
            self.err_B_rain,
            self.err_A_fake_clean,
            self.cyc,
            self.total,
        )


@dataclass
class ModelBundle:
    thetaA: dict
    thetaB: dict
    phiA: dict
    phiB: dict

    def sets(self):
        return (
            ("thetaA", self.thetaA),
            ("thetaB", self.thetaB),
            ("phiA", self.phiA),
            ("phiB", self.phiB),
        )

    def named_params(self):
        for prefix, params in self.sets():
            for name, tensor in params.items():
                yield f"{prefix}.{name}", tensor

    def zero_grads(self):
        for _, t in self.named_params():
            t.grad = None


@dataclass
class TrainState:
    step: int
    m: dict
    v: dict
    lr: float
    beta1: float
    beta2: float
    eps: float
    clip_norm: float
    lambda_cyc: float
    schedule: NoiseSchedule
    rngs: dict
    loss_sums: dict = field(default_factory=dict, repr=False)  # running stats, not persisted


def init_models(seed: int, widths=models_mod.DEFAULT_WIDTHS) -> ModelBundle:
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence(seed)))
    return ModelBundle(
        thetaA=models_mod.init_noise_estimator(rng, widths=widths),
        thetaB=models_mod.init_noise_estimator(rng, widths=widths),
        phiA=models_mod.init_generator(rng, widths=widths),
        phiB=models_mod.init_generator(rng, widths=widths),
    )


def init_state(models: ModelBundle, schedule, lr, beta1, beta2, eps, clip_norm,
               lambda_cyc, seed_data, seed_noise) -> TrainState:
    m = {n: np.zeros(t.shape, np.float32) for n, t in models.named_params()}
    v = {n: np.zeros(t.shape, np.float32) for n, t in models.named_params()}
    rngs = {
        "order": np.random.default_rng(np.random.SeedSequence([seed_data, 0])),
        "mask": np.random.default_rng(np.random.SeedSequence([seed_data, 1])),
        "timestep": np.random.default_rng(np.random.SeedSequence([seed_noise, 0])),
        "noise": np.random.default_rng(np.random.SeedSequence([seed_noise, 1])),
    }
    return TrainState(
        step=0, m=m, v=v, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        clip_norm=clip_norm, lambda_cyc=lambda_cyc, schedule=schedule, rngs=rngs,
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_update(state: TrainState, models: ModelBundle) -> None:
    """One bias-corrected Adam update over all four parameter sets; the
    step counter must already count this step (1-based)."""
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    if state.clip_norm > 0:
        sq = 0.0
        for _, p in models.named_params():
            if p.grad is not None:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        scale = state.clip_norm / norm if norm > state.clip_norm else 1.0
    else:
        scale = 1.0

    for name, p in models.named_params():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if scale != 1.0:
            g = g * np.float32(scale)
        m = state.m[name]
        vv = state.v[name]
        m *= np.float32(b1)
        m += np.float32(1.0 - b1) * g
        vv *= np.float32(b2)
        vv += np.float32(1.0 - b2) * (g * g)
        m_hat = m / np.float32(corr1)
        v_hat = vv / np.float32(corr2)
        p.data -= np.float32(state.lr) * m_hat / (np.sqrt(v_hat) + np.float32(state.eps))


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------


def _crop_batch(img: Tensor, masks) -> Tensor:
    """Apply per-pair masks to a (B, 3, H, W) tensor; full-image masks
    short-circuit to the input."""
    B, _, H, W = img.shape
    if all(mk.top == 0 and mk.left == 0 and mk.p == H == W for mk in masks):
        return img
    rows = [
        masks[i].crop(nd.slice_batch(img, i, i + 1)) for i in range(B)
    ]
    return nd.concat_batch(rows)


def training_step(state: TrainState, x: np.ndarray, y: np.ndarray, models: ModelBundle,
                  patch: int, stop_grad_conditions=False, independent_eps=False) -> LossBreakdown:
    """One optimization step over a (B, 3, R, R) unpaired batch."""
    if x.shape != y.shape or x.ndim != 4:
        raise nd.ShapeError(f"batch shapes {x.shape} / {y.shape} must match, rank 4")
    B, _, H, W = x.shape
    sched = state.schedule
    models.zero_grads()

    X = Tensor(x)
    Y = Tensor(y)

    masks = [sample_patch_mask(H, W, patch, state.rngs["mask"]) for _ in range(B)]
    p_eff = masks[0].p

    # cycle pass on full images; G_B handles (x', y) in one batched call
    x_prime = models_mod.generate(models.phiA, X)
    gb_out = models_mod.generate(models.phiB, nd.concat_batch([x_prime, Y]))
    x_dprime = nd.slice_batch(gb_out, 0, B)
    y_prime = nd.slice_batch(gb_out, B, 2 * B)
    y_dprime = models_mod.generate(models.phiA, y_prime)

    x_i = _crop_batch(X, masks)
    y_i = _crop_batch(Y, masks)
    xp_i = _crop_batch(x_prime, masks)
    xpp_i = _crop_batch(x_dprime, masks)
    yp_i = _crop_batch(y_prime, masks)
    ypp_i = _crop_batch(y_dprime, masks)

    t_A = int(state.rngs["timestep"].integers(1, sched.T + 1))
    t_B = int(state.rngs["timestep"].integers(1, sched.T + 1))

    def draw_eps():
        return Tensor(
            state.rngs["noise"].standard_normal((B, 3, p_eff, p_eff), dtype=np.float32)
        )

    if independent_eps:
        eps1, eps2, eps3, eps4 = draw_eps(), draw_eps(), draw_eps(), draw_eps()
    else:
        eps_A = draw_eps()
        eps_B = draw_eps()
        eps1 = eps4 = eps_A
        eps2 = eps3 = eps_B

    sg = (lambda t: t.detach()) if stop_grad_conditions else (lambda t: t)

    # terms 1 and 4 share the derain estimator and t_A: run one batched
    # pass over the stacked targets, then split per-term losses (the
    # networks act per-sample, so this is exactly the two separate passes)
    noised_A = forward_sample(
        nd.concat_batch([x_i, sg(yp_i)]), t_A, nd.concat_batch([eps1, eps4]), sched
    )
    pred_A = models_mod.predict_noise(
        models.thetaA, noised_A, nd.concat_batch([sg(xp_i), sg(ypp_i)]), t_A, sched
    )
    err_A_clean = nd.mean_squared_error(eps1, nd.slice_batch(pred_A, 0, B))
    err_A_fake_clean = nd.mean_squared_error(eps4, nd.slice_batch(pred_A, B, 2 * B))

    # terms 2 and 3 share the rain-generation estimator and t_B
    noised_B = forward_sample(
        nd.concat_batch([sg(xp_i), y_i]), t_B, nd.concat_batch([eps2, eps3]), sched
    )
    pred_B = models_mod.predict_noise(
        models.thetaB, noised_B, nd.concat_batch([sg(xpp_i), sg(yp_i)]), t_B, sched
    )
    err_B_fake_rain = nd.mean_squared_error(eps2, nd.slice_batch(pred_B, 0, B))
    err_B_rain = nd.mean_squared_error(eps3, nd.slice_batch(pred_B, B, 2 * B))

    cyc_loss = ntb.cycle_loss(X, x_dprime, Y, y_dprime)

    total = nd.add(
        nd.add(err_A_clean, err_B_fake_rain), nd.add(err_B_rain, err_A_fake_clean)
    )
    if state.lambda_cyc > 0:
        total = nd.add(total, nd.affine(cyc_loss, state.lambda_cyc))

    breakdown = LossBreakdown(
        err_A_clean=err_A_clean.item(),
        err_B_fake_rain=err_B_fake_rain.item(),
        err_B_rain=err_B_rain.item(),
        err_A_fake_clean=err_A_fake_clean.item(),
        cyc=cyc_loss.item(),
        total=total.item(),
    )
    for term, value in (
        ("err_A_clean", breakdown.err_A_clean),
        ("err_B_fake_rain", breakdown.err_B_fake_rain),
        ("err_B_rain", breakdown.err_B_rain),
        ("err_A_fake_clean", breakdown.err_A_fake_clean),
        ("cyc", breakdown.cyc),
        ("total", breakdown.total),
    ):
        if not math.isfinite(value):
            raise NonFiniteLossError(term, value)

    backward(total)
    state.step += 1
    adam_update(state, models)
    return breakdown


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


def train(config, dataset=None, resume=None, progress=None):
    """Run the training loop under a RunConfig (see the config module).

    Returns the final checkpoint path. `resume` continues from an
    existing checkpoint; with identical config and corpus the result is
    bit-identical to an uninterrupted run. `progress(step, breakdown)`
    is an optional callback.
    """
    from .checkpoint import load_checkpoint
    from .config import schedule_from_config

    if dataset is None:
        dataset = data_mod.load_unpaired(
            config.corpus_dir, config.resolution, hflip=config.hflip
        )

    if resume is not None:
        models, state = load_checkpoint(resume)
        if state.schedule.T != config.T:
            raise ValueError(
                f"checkpoint schedule T={state.schedule.T} != config T={config.T}"
            )
    else:
        models = init_models(config.seed_global, widths=config.widths)
        state = init_state(
            models,
            schedule_from_config(config),
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
            clip_norm=config.clip_norm,
            lambda_cyc=config.lambda_cyc,
            seed_data=config.seed_data,
            seed_noise=config.seed_noise,
        )

    os.makedirs(config.checkpoint_dir, exist_ok=True)
    log_path = os.path.join(config.checkpoint_dir, "train.log")
    log_mode = "a" if resume is not None else "w"

    final_path = os.path.join(config.checkpoint_dir, "ckpt_final.rdif")
    with open(log_path, log_mode, encoding="utf-8") as log:
        while state.step < config.max_steps:
            t0 = time.perf_counter()
            xb, yb = data_mod.next_batch(dataset, config.batch_size, state.rngs["order"])
            bd = training_step(
                state, xb, yb, models, config.patch,
                stop_grad_conditions=config.stop_grad_conditions,
                independent_eps=config.independent_eps_per_term,
            )
            wall_ms = (time.perf_counter() - t0) * 1e3
            row = (state.step,) + bd.as_row() + (wall_ms,)
            log.write("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row) + "\n")
            log.flush()
            if progress is not None:
                progress(state.step, bd)
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(
                    models, state,
                    os.path.join(config.checkpoint_dir, f"ckpt_{state.step:06d}.rdif"),
                )
    save_checkpoint(models, state, final_path)
    return final_path
