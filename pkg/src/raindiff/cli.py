"""Command-line surface.

    raindiff synth-data --config cfg.json [--out DIR]
    raindiff train      --config cfg.json [--resume CKPT]
    raindiff derain     --config cfg.json --checkpoint CKPT --in X.png --out Y.png
                        [--steps S] [--seed N]
    raindiff gen-rain   (same arguments as derain)
    raindiff eval       --config cfg.json --checkpoint CKPT [--out REPORT.tsv]
    raindiff check      [--config cfg.json]

Every command is deterministic under fixed seeds and exits 0 on success,
nonzero with a diagnostic on any error. RAINDIFF_THREADS caps worker
threads (0 or unset = automatic); it must be applied before numpy loads,
so the heavy imports happen inside the command handlers.
"""

import argparse
import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("RAINDIFF_THREADS", "").strip()
    if cap and cap != "0":
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _load_config(path):
    from .config import RunConfig, load_config

    return load_config(path) if path else RunConfig()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    from . import data
    from .config import rain_config

    cfg = _load_config(args.config)
    out_dir = args.out or cfg.corpus_dir
    manifest = data.synth_corpus(
        rain_config(cfg), cfg.n_clean, cfg.n_rainy, cfg.n_eval, out_dir,
        seed=cfg.seed_global,
    )
    print(f"corpus written: {manifest}")
    return 0


def cmd_train(args) -> int:
    from . import trainer

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed_global = args.seed
    path = trainer.train(cfg, resume=args.resume)
    print(f"final checkpoint: {path}")
    return 0


def _run_restoration(args, direction) -> int:
    from . import data, sampler
    from .checkpoint import load_checkpoint
    from .diffusion import make_plan

    cfg = _load_config(args.config)
    bundle, state = load_checkpoint(args.checkpoint)
    sched = state.schedule
    S = args.steps if args.steps is not None else cfg.S
    seed = args.seed if args.seed is not None else cfg.seed_global
    plan = make_plan(sched.T, S)
    img = data.load_image(args.input)
    fn = sampler.derain if direction == "derain" else sampler.gen_rain
    out = fn(bundle, img, plan, sched, cfg.sample_patch, cfg.stride, seed)
    data.save_image(out, args.out)
    print(f"{direction}: {args.input} -> {args.out} (S={S}, seed={seed})")
    return 0


def cmd_derain(args) -> int:
    return _run_restoration(args, "derain")


def cmd_gen_rain(args) -> int:
    return _run_restoration(args, "gen-rain")


def cmd_eval(args) -> int:
    from . import data, metrics, sampler
    from .checkpoint import load_checkpoint
    from .diffusion import make_plan

    cfg = _load_config(args.config)
    bundle, state = load_checkpoint(args.checkpoint)
    sched = state.schedule
    plan = make_plan(sched.T, cfg.S)
    pairs = data.eval_pairs(cfg.corpus_dir)
    if not pairs:
        raise ValueError(f"no eval pairs found under {cfg.corpus_dir}")

    os.makedirs(cfg.output_dir, exist_ok=True)
    derained_rows, baseline_rows = [], []
    for i, (rainy_path, clean_path) in enumerate(pairs):
        rainy = data.load_image(rainy_path)
        clean = data.load_image(clean_path)
        restored = sampler.derain(
            bundle, rainy, plan, sched, cfg.sample_patch, cfg.stride,
            seed=cfg.seed_global + i,
        )
        out_png = os.path.join(cfg.output_dir, f"derained_{i:04d}.png")
        data.save_image(restored, out_png)
        gt = metrics.to_unit_range(clean)
        derained_rows.append(
            (os.path.basename(rainy_path),
             metrics.psnr(metrics.to_unit_range(restored), gt),
             metrics.ssim(metrics.to_unit_range(restored), gt))
        )
        baseline_rows.append(
            (os.path.basename(rainy_path),
             metrics.psnr(metrics.to_unit_range(rainy), gt),
             metrics.ssim(metrics.to_unit_range(rainy), gt))
        )

    report = metrics.MetricReport(derained_rows)
    baseline = metrics.MetricReport(baseline_rows)
    out_path = args.out or os.path.join(cfg.output_dir, "eval_report.tsv")
    report.write(out_path)
    base_path = os.path.splitext(out_path)[0] + "_input_baseline.tsv"
    baseline.write(base_path)
    print(f"derained: mean PSNR {report.mean_psnr:.3f} dB, mean SSIM {report.mean_ssim:.4f}")
    print(f"rainy-in: mean PSNR {baseline.mean_psnr:.3f} dB, mean SSIM {baseline.mean_ssim:.4f}")
    print(f"report: {out_path}")
    return 0


def cmd_check(args) -> int:
    cfg = _load_config(args.config)
    checks = run_self_checks(cfg)
    failed = 0
    for name, ok, detail in checks:
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} check(s) failed", file=sys.stderr)
        return 1
    return 0


def run_self_checks(cfg):
    """Fast invariant self-test: schedule shape, implicit round trip,
    fusion exactness, gradient spot checks."""
    import numpy as np

    from . import ndcore as nd
    from .config import schedule_from_config
    from .diffusion import forward_sample, implicit_step
    from .ndcore import Tensor, finite_diff_check
    from .sampler import build_patch_grid, fuse_noise_estimate

    results = []
    sched = schedule_from_config(cfg)

    mono = bool(np.all(np.diff(sched.alpha_bar) < 0))
    prod = float(np.abs(sched.alpha_bar - np.cumprod(1.0 - sched.beta)).max())
    ok = mono and prod <= 1e-12 and sched.terminal_ok
    results.append(
        ("schedule", ok,
         f"T={sched.T} strictly-decreasing={mono} product-err={prod:.1e} "
         f"sqrt(abar_T)={np.sqrt(sched.alpha_bar[-1]):.4f}")
    )

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, sched.T + 1))
        x0 = Tensor(rng.standard_normal((3, 8, 8), dtype=np.float32))
        eps = Tensor(rng.standard_normal((3, 8, 8), dtype=np.float32))
        back = implicit_step(forward_sample(x0, t, eps, sched), t, 0, eps, sched)
        worst = max(worst, float(np.abs(back.data - x0.data).max()))
    results.append(("implicit-round-trip", worst <= 1e-5, f"max abs err {worst:.2e}"))

    const = lambda p, xp, cp, t: np.full_like(xp, np.float32(0.375))
    ok = True
    for H, W in ((128, 128), (192, 192), (200, 136)):
        grid = build_patch_grid(H, W, 128, 64)
        x = np.zeros((3, H, W), np.float32)
        fused = fuse_noise_estimate(grid, None, x, x, 1, sched, estimator=const)
        ok = ok and bool(np.all(fused == np.float32(0.375)))
    results.append(("patch-fusion", ok, "constant estimator reproduced exactly"))

    def loss_conv(x, w):
        out = nd.conv2d(x, w, pad=1)
        return nd.mean_squared_error(out, Tensor(np.zeros(out.shape)))

    x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    err = finite_diff_check(loss_conv, [x, w], h=1e-5, pick="random", n_per_tensor=8)
    gn_err = finite_diff_check(
        lambda xx, gg, bb: nd.mean_all(nd.silu(nd.group_norm(xx, gg, bb, 2))),
        [Tensor(rng.standard_normal((1, 4, 5, 5)), requires_grad=True),
         Tensor(rng.standard_normal(4), requires_grad=True),
         Tensor(rng.standard_normal(4), requires_grad=True)],
        h=1e-5,
    )
    worst = max(err, gn_err)
    results.append(("gradient-spot", worst <= 1e-5, f"max rel err {worst:.2e}"))
    return results


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="raindiff",
        description="Unsupervised deraining: cycle-generated pseudo-pairs + conditional diffusion",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate the synthetic rain corpus")
    sp.add_argument("--config", help="JSON config path (defaults apply if omitted)")
    sp.add_argument("--out", help="corpus directory (overrides paths.corpus)")
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("train", help="run the unsupervised training loop")
    sp.add_argument("--config", help="JSON config path")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--seed", type=int, help="override seed.global")
    sp.set_defaults(fn=cmd_train)

    for name, fn in (("derain", cmd_derain), ("gen-rain", cmd_gen_rain)):
        sp = sub.add_parser(name, help=f"{name} one PNG with a trained checkpoint")
        sp.add_argument("--config", help="JSON config path")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--in", dest="input", required=True, help="input PNG")
        sp.add_argument("--out", required=True, help="output PNG")
        sp.add_argument("--steps", type=int, help="implicit sampling steps (default sample.S)")
        sp.add_argument("--seed", type=int, help="sampling seed (default seed.global)")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("eval", help="score the held-out eval split")
    sp.add_argument("--config", help="JSON config path")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="report TSV path")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("check", help="run the invariant self-test suite")
    sp.add_argument("--config", help="JSON config path")
    sp.set_defaults(fn=cmd_check)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # uniform nonzero-with-diagnostic contract
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
