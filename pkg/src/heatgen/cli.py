"""Command-line front end: train, sample, eval-nll, psd, interpolate.

Config precedence is defaults, then the --config YAML file, then explicit
flags. Every command reseeds from --seed alone, writes into --out (relative
paths land under $HEATGEN_OUT when that is set), and drops the fully
resolved config next to its outputs so a run can be reproduced from the
directory contents.

Exit codes: 0 on success, 1 when a run fails at runtime (missing files,
corrupt checkpoints, diverged training), 2 for unusable flags or configs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, elbo, sampler, training
from .config import (
    STREAM_EVAL,
    STREAM_SAMPLE,
    ConfigError,
    RunConfig,
    TrainConfig,
    config_to_dict,
    derive_rng,
    load_config,
    save_config,
)
from .dataio import (
    DataIOError,
    load_checkpoint,
    load_image_dir,
    save_montage,
    save_png,
)
from .schedule import build_schedule
from .training import NonFiniteLossError


def _out_dir(path_str: str) -> Path:
    p = Path(path_str)
    root = os.environ.get("HEATGEN_OUT")
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _apply(section, args, names):
    """Overlay parsed flags onto a config section; None means not given."""
    updates = {}
    for flag, field in names.items():
        value = getattr(args, flag, None)
        if value is not None:
            updates[field] = value
    return dataclasses.replace(section, **updates) if updates else section


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg


def _load_run(path: str) -> training.LoadedRun:
    return training.restore_run(load_checkpoint(path))


def _prior_for(run: training.LoadedRun, dataset_path: str | None, delta: float, limit: int) -> elbo.PriorSet:
    path = dataset_path or run.cfg.dataset
    if not path:
        raise ConfigError("no dataset available for the terminal prior; pass --dataset")
    ds = training.load_dataset(path)
    return elbo.build_prior(ds, run.schedule, delta, limit=limit)


def cmd_train(args) -> int:
    cfg = _resolve(args)
    tr = _apply(
        cfg.train,
        args,
        {
            "dataset": "dataset",
            "out": "out_dir",
            "seed": "seed",
            "sigma": "sigma",
            "steps": "total_steps",
            "delta": "delta",
        },
    )
    if not tr.dataset:
        raise ConfigError("train needs a dataset: pass --dataset or set train.dataset in the config")
    tr.validate()
    out = _out_dir(tr.out_dir)
    tr = dataclasses.replace(tr, out_dir=str(out))
    cfg = dataclasses.replace(cfg, train=tr)
    save_config(cfg, out / "config.yaml")
    if tr.sigma_zero_ablation:
        (out / "ABLATION").write_text("sigma_zero\n")
        print("ablation run: sigma = 0 (no observation noise)")
    result = training.train(tr, resume_from=args.resume, quiet=False)
    print(f"finished at step {result.cfg.total_steps}; checkpoints: "
          + ", ".join(str(p) for p in result.checkpoints))
    return 0


def _emit_config(cfg: RunConfig, out: Path) -> None:
    save_config(cfg, out / "config.yaml")


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    sc = _apply(
        cfg.sample,
        args,
        {
            "checkpoint": "checkpoint",
            "out": "out_dir",
            "seed": "seed",
            "delta": "delta",
            "count": "count",
            "columns": "columns",
        },
    )
    if args.priors is not None:
        sc = dataclasses.replace(sc, count=args.priors)
    if args.trace:
        sc = dataclasses.replace(sc, trace=True)
    if args.fixed_noise:
        sc = dataclasses.replace(sc, fixed_noise=True)
    if args.no_ema:
        sc = dataclasses.replace(sc, use_ema=False)
    if not sc.checkpoint:
        raise ConfigError("sample needs --checkpoint")
    if sc.count < 1:
        raise ConfigError(f"--count must be >= 1, got {sc.count}")
    run = _load_run(sc.checkpoint)
    delta = sc.delta if sc.delta >= 0.0 else run.cfg.delta
    out = _out_dir(sc.out_dir)
    sc = dataclasses.replace(sc, out_dir=str(out), delta=delta)
    cfg = dataclasses.replace(cfg, sample=sc)
    _emit_config(cfg, out)

    params = run.pick(sc.use_ema)
    prior = _prior_for(run, args.dataset, delta, args.prior_size)
    rng = derive_rng(sc.seed, STREAM_SAMPLE)
    inits, indices = sampler.draw_prior_batch(prior, sc.count, rng)
    shape = prior.item_shape
    if sc.fixed_noise:
        tracks = [sampler.make_noise_track(run.schedule.K, shape, rng)] * sc.count
    else:
        tracks = [sampler.make_noise_track(run.schedule.K, shape, rng) for _ in range(sc.count)]

    samples = np.empty((sc.count, *shape), dtype=np.float32)
    first_trace = None
    for lo in range(0, sc.count, 16):
        hi = min(lo + 16, sc.count)
        chunk, traces = sampler.sample_batch(params, inits[lo:hi], tracks[lo:hi], delta)
        samples[lo:hi] = chunk
        if lo == 0:
            first_trace = traces[0]
    for i in range(sc.count):
        save_png(samples[i], out / f"sample-{i:03d}.png")
    save_montage(samples, sc.columns, out / "montage.png")
    meta = {
        "checkpoint": sc.checkpoint,
        "delta": delta,
        "seed": sc.seed,
        "count": sc.count,
        "fixed_noise": sc.fixed_noise,
        "prior_components": len(prior),
        "prior_indices": indices.tolist(),
        "ema": sc.use_ema,
        "ablation": run.meta.get("ablation"),
    }
    (out / "samples.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if sc.trace and first_trace is not None:
        for level, state in zip(first_trace.levels, first_trace.states):
            save_png(state, out / "trace" / f"level-{level:04d}.png")
    print(f"wrote {sc.count} samples to {out}")
    return 0


def cmd_eval_nll(args) -> int:
    cfg = _resolve(args)
    ev = _apply(
        cfg.eval,
        args,
        {
            "checkpoint": "checkpoint",
            "dataset": "dataset",
            "out": "out_dir",
            "seed": "seed",
            "examples": "examples",
            "mc_repeats": "mc_repeats",
            "prior_size": "prior_size",
        },
    )
    if args.delta_grid:
        try:
            grid = tuple(float(x) for x in args.delta_grid.split(","))
        except ValueError as exc:
            raise ConfigError(f"cannot parse --delta-grid: {exc}") from exc
        ev = dataclasses.replace(ev, delta_grid=grid)
    if args.no_ema:
        ev = dataclasses.replace(ev, use_ema=False)
    if not ev.checkpoint:
        raise ConfigError("eval-nll needs --checkpoint")
    run = _load_run(ev.checkpoint)
    if not ev.dataset:
        raise ConfigError("eval-nll needs --dataset (images to score)")
    if ev.examples < 1:
        raise ConfigError(f"--examples must be >= 1, got {ev.examples}")
    grid = ev.delta_grid or (run.cfg.delta,)
    out = _out_dir(ev.out_dir)
    ev = dataclasses.replace(ev, out_dir=str(out), delta_grid=tuple(grid))
    cfg = dataclasses.replace(cfg, eval=ev)
    _emit_config(cfg, out)

    params = run.pick(ev.use_ema)
    eval_ds = training.load_dataset(ev.dataset)
    examples = eval_ds.images[: ev.examples]
    sigma = run.cfg.sigma
    if sigma <= 0.0:
        raise ConfigError(
            "checkpoint was trained with sigma = 0; the likelihood bound needs sigma > 0"
        )
    n_dims = int(np.prod(eval_ds.shape))
    lines = ["example\tdelta\tl0\tsum_lk\tlK\ttotal_nats\tbpd"]
    aggregates = []
    prior = _prior_for(run, args.prior_dataset, grid[0], ev.prior_size)
    for delta in grid:
        totals = []
        for i, u0 in enumerate(examples):
            rng = derive_rng(ev.seed, STREAM_EVAL, i)
            bd = elbo.nll_bound(
                params, u0, run.schedule, prior, sigma, delta, rng, mc_repeats=ev.mc_repeats
            )
            totals.append(bd.total)
            lines.append(
                f"{i}\t{delta:.6g}\t{bd.l0:.6f}\t{float(bd.lk.sum()):.6f}"
                f"\t{bd.lK:.6f}\t{bd.total:.6f}\t{bd.bpd:.6f}"
            )
        totals = np.asarray(totals)
        se = totals.std(ddof=1) / np.sqrt(len(totals)) if len(totals) > 1 else 0.0
        aggregates.append((delta, totals.mean(), se))
    header = "# eval-nll " + json.dumps(
        {"config": config_to_dict(cfg)["eval"], "sigma": sigma, "n_dims": n_dims},
        sort_keys=True,
    )
    agg_lines = ["# aggregate\tdelta\tmean_nats\tse_nats\tmean_bpd"]
    for delta, mean, se in aggregates:
        agg_lines.append(
            f"# agg\t{delta:.6g}\t{mean:.6f}\t{se:.6f}\t{mean / (n_dims * np.log(2.0)):.6f}"
        )
    report = "\n".join([header] + lines + agg_lines) + "\n"
    (out / "nll.tsv").write_text(report)
    best = min(aggregates, key=lambda a: a[1])
    print(f"wrote {out / 'nll.tsv'}; best delta = {best[0]:.6g} "
          f"({best[1]:.2f} nats over {len(examples)} examples)")
    return 0


def cmd_psd(args) -> int:
    cfg = _resolve(args)
    an = _apply(
        cfg.analysis,
        args,
        {
            "images": "images",
            "checkpoint": "checkpoint",
            "out": "out_dir",
            "seed": "seed",
            "bins": "bins",
            "count": "count",
            "fit_lo": "fit_lo",
            "fit_hi": "fit_hi",
        },
    )
    if bool(an.images) == bool(an.checkpoint):
        raise ConfigError("psd needs exactly one of --images or --checkpoint")
    out = _out_dir(an.out_dir)
    an = dataclasses.replace(an, out_dir=str(out))
    cfg = dataclasses.replace(cfg, analysis=an)
    _emit_config(cfg, out)

    if an.images:
        ds = load_image_dir(an.images)
        images = ds.images[: an.count] if an.count > 0 else ds.images
        source = an.images
    else:
        run = _load_run(an.checkpoint)
        delta = run.cfg.delta
        prior = _prior_for(run, args.dataset, delta, args.prior_size)
        rng = derive_rng(an.seed, STREAM_SAMPLE)
        inits, _ = sampler.draw_prior_batch(prior, an.count, rng)
        tracks = [
            sampler.make_noise_track(run.schedule.K, prior.item_shape, rng)
            for _ in range(an.count)
        ]
        images, _ = sampler.sample_batch(run.pick(True), inits, tracks, delta)
        images = np.clip(images, 0.0, 1.0)
        source = an.checkpoint
    curve = analysis.psd_mean(images, bins=an.bins)
    fit = analysis.fit_alpha(curve, drop_lo=an.fit_lo, drop_hi=an.fit_hi)
    lines = [
        "# psd " + json.dumps({"source": source, "count": int(images.shape[0]),
                               "alpha": fit.alpha, "residual": fit.residual},
                              sort_keys=True),
        f"# zero_mode\t{curve.zero_mode:.10g}",
        "bin\tfreq\tmean_power\tlog_power\tpopulation",
    ]
    logp = curve.log_power()
    for b in range(curve.bins):
        lines.append(
            f"{b}\t{curve.freqs[b]:.8g}\t{curve.power[b]:.10g}"
            f"\t{logp[b]:.8g}\t{curve.populations[b]}"
        )
    (out / "psd.tsv").write_text("\n".join(lines) + "\n")

    if an.images:
        schedule = build_schedule(TrainConfig.K, TrainConfig.sigma_b_min, TrainConfig.sigma_b_max)
        sigma = TrainConfig.sigma
    else:
        schedule, sigma = run.schedule, run.cfg.sigma
    dm = analysis.frequency_decay_map(images[0], schedule, sigma, bins=an.bins)
    logp = np.log(np.maximum(dm.powers, analysis.LOG_FLOOR))
    lo, hi = logp.min(), logp.max()
    flat = np.zeros_like(logp) if hi == lo else (logp - lo) / (hi - lo)
    save_png(flat[:, :, None], out / "decay-map.png")
    dm_lines = ["# decay-map level fractions above sigma^2 floor"]
    dm_lines += [
        f"# level\t{k + 1}\tsigma_b\t{schedule.sigma_b[k]:.6g}\tfraction\t{dm.fractions[k]:.6g}"
        for k in range(schedule.K)
    ]
    dm_lines.append("level\tsigma_b\tbin\tfreq\tlog_power")
    for k in range(schedule.K):
        for b in range(an.bins):
            dm_lines.append(
                f"{k + 1}\t{schedule.sigma_b[k]:.6g}\t{b}"
                f"\t{dm.freqs[b]:.8g}\t{np.log(max(dm.powers[k, b], analysis.LOG_FLOOR)):.8g}"
            )
    (out / "decay-map.tsv").write_text("\n".join(dm_lines) + "\n")

    if an.checkpoint:
        h, w, c = prior.item_shape
        k_mid = max(1, run.schedule.K // 2)
        grad = analysis.input_gradient_probe(
            run.pick(True), images[0], k_mid, (h // 2, w // 2, 0)
        )
        peak = np.abs(grad).max()
        centred = 0.5 if peak == 0 else 0.5 + grad / (2.0 * peak)
        save_png(centred, out / "probe.png")

    print(f"alpha = {fit.alpha:.4f} over {fit.n_points} annuli "
          f"(residual {fit.residual:.3g}); wrote {out / 'psd.tsv'}")
    return 0


def cmd_interpolate(args) -> int:
    cfg = _resolve(args)
    ic = _apply(
        cfg.interpolate,
        args,
        {
            "checkpoint": "checkpoint",
            "out": "out_dir",
            "seed": "seed",
            "delta": "delta",
            "steps": "steps",
            "seed_a": "seed_a",
            "seed_b": "seed_b",
            "columns": "columns",
        },
    )
    if args.no_ema:
        ic = dataclasses.replace(ic, use_ema=False)
    if not ic.checkpoint:
        raise ConfigError("interpolate needs --checkpoint")
    if ic.steps < 2:
        raise ConfigError(f"--steps must be >= 2, got {ic.steps}")
    run = _load_run(ic.checkpoint)
    delta = ic.delta if ic.delta >= 0.0 else run.cfg.delta
    out = _out_dir(ic.out_dir)
    ic = dataclasses.replace(ic, out_dir=str(out), delta=delta)
    cfg = dataclasses.replace(cfg, interpolate=ic)
    _emit_config(cfg, out)

    params = run.pick(ic.use_ema)
    prior = _prior_for(run, args.dataset, delta, args.prior_size)
    shape = prior.item_shape
    state_a, _ = sampler.sample_prior(prior, derive_rng(ic.seed_a, STREAM_SAMPLE))
    state_b, _ = sampler.sample_prior(prior, derive_rng(ic.seed_b, STREAM_SAMPLE))
    track_a = sampler.make_noise_track(run.schedule.K, shape, derive_rng(ic.seed_a, STREAM_SAMPLE, 1))
    track_b = sampler.make_noise_track(run.schedule.K, shape, derive_rng(ic.seed_b, STREAM_SAMPLE, 1))
    frames = sampler.interpolate(params, state_a, state_b, track_a, track_b, ic.steps, delta)
    for j in range(frames.shape[0]):
        save_png(frames[j], out / f"frame-{j:03d}.png")
    save_montage(frames, ic.columns, out / "montage.png")
    print(f"wrote {frames.shape[0]} frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatgen",
        description="Train, sample, and diagnose heat-dissipation generative models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config; flags override its keys")
        p.add_argument("--seed", type=int, help="root seed for every random draw")
        p.add_argument("--out", help="output directory (relative paths land under $HEATGEN_OUT)")

    p = sub.add_parser("train", help="fit the reverse chain to a dataset")
    common(p)
    p.add_argument("--dataset", help="IDX file or PNG directory")
    p.add_argument("--sigma", type=float, help="observation noise std (0 = ablation)")
    p.add_argument("--delta", type=float, help="reverse-chain noise std recorded for sampling")
    p.add_argument("--steps", type=int, help="total optimizer steps")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw images from a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int)
    p.add_argument("--priors", type=int, help="prior draws to sample (same as --count)")
    p.add_argument("--delta", type=float, help="chain noise std (default: training delta)")
    p.add_argument("--columns", type=int)
    p.add_argument("--trace", action="store_true", help="write strided chain snapshots for the first sample")
    p.add_argument("--fixed-noise", action="store_true", help="share one noise track across all samples")
    p.add_argument("--no-ema", action="store_true", help="use raw weights instead of the EMA shadow")
    p.add_argument("--dataset", help="override the prior's dataset path")
    p.add_argument("--prior-size", type=int, default=256, help="terminal prior component count")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-nll", help="likelihood bound on held-out images")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="images to score (IDX file or PNG directory)")
    p.add_argument("--examples", type=int)
    p.add_argument("--delta-grid", help="comma-separated deltas to sweep")
    p.add_argument("--mc-repeats", type=int)
    p.add_argument("--prior-size", type=int)
    p.add_argument("--prior-dataset", help="override the prior's dataset path")
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(func=cmd_eval_nll)

    p = sub.add_parser("psd", help="radial power spectra and slope fits")
    common(p)
    p.add_argument("--images", help="PNG directory to analyse")
    p.add_argument("--checkpoint", help="sample from this checkpoint and analyse")
    p.add_argument("--count", type=int, help="images/samples to average")
    p.add_argument("--bins", type=int)
    p.add_argument("--fit-lo", type=int, help="low annuli to drop from the fit")
    p.add_argument("--fit-hi", type=int, help="high annuli to drop from the fit")
    p.add_argument("--dataset", help="override the prior's dataset path (checkpoint mode)")
    p.add_argument("--prior-size", type=int, default=256)
    p.set_defaults(func=cmd_psd)

    p = sub.add_parser("interpolate", help="walk between two seeded samples")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--seed-a", type=int)
    p.add_argument("--seed-b", type=int)
    p.add_argument("--columns", type=int)
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--dataset", help="override the prior's dataset path")
    p.add_argument("--prior-size", type=int, default=256)
    p.set_defaults(func=cmd_interpolate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataIOError, FileNotFoundError, NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
