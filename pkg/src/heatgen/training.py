"""Regression training loop for the reverse chain.

Each step draws a batch of images, picks an independent chain step k per
example, dissipates to the k and k-1 blur levels, perturbs the network input
(never the target) with N(0, sigma^2) noise, and regresses the prediction on
the k-1 state. All batch randomness is derived from (seed, stream, step), so
resuming from a checkpoint reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import neural
from .config import (
    STREAM_DATA,
    STREAM_DROPOUT,
    STREAM_INIT,
    STREAM_NOISE,
    TrainConfig,
    derive_rng,
    derive_torch_gen,
)
from .dataio import Checkpoint, Dataset, load_idx, load_image_dir, save_checkpoint
from .neural import ArchConfig, DenoiserParams, EmaState, OptimizerState
from .schedule import BlurSchedule, build_schedule


class NonFiniteLossError(RuntimeError):
    """Loss went NaN/inf; carries the chain steps of the offending batch."""

    def __init__(self, k_values):
        self.k_values = [int(k) for k in k_values]
        super().__init__(f"non-finite loss on batch with k values {self.k_values}")


@dataclass
class TrainingBatch:
    """One step's worth of paired dissipation states."""

    u0: np.ndarray
    k: np.ndarray
    u_k: np.ndarray
    u_km1: np.ndarray
    eps: np.ndarray


def make_batch(
    dataset: Dataset,
    schedule: BlurSchedule,
    sigma: float,
    batch_size: int,
    rng_data: np.random.Generator,
    rng_noise: np.random.Generator,
) -> TrainingBatch:
    """Sample images and per-example chain steps, dissipate to both levels."""
    if len(dataset) == 0:
        raise ValueError("cannot draw batches from an empty dataset")
    idx = rng_data.integers(0, len(dataset), size=batch_size)
    k = rng_data.integers(1, schedule.K + 1, size=batch_size)
    u0 = dataset.images[idx]
    t_k = schedule.times[k - 1]
    t_km1 = np.where(k > 1, schedule.times[np.maximum(k - 2, 0)], 0.0)
    from .heat import dissipate_batch

    both = dissipate_batch(np.concatenate([u0, u0]), np.concatenate([t_k, t_km1]))
    eps = rng_noise.standard_normal(u0.shape) * sigma
    return TrainingBatch(
        u0=u0, k=k, u_k=both[: batch_size], u_km1=both[batch_size :], eps=eps
    )


def compute_loss(
    params: DenoiserParams,
    batch: TrainingBatch,
    train: bool = False,
    drop_gen: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict]:
    """Mean over the batch of per-example squared prediction error.

    Returns the scalar loss with its autograd graph plus diagnostics
    (per-example values and a per-k breakdown). Raises NonFiniteLossError as
    soon as the loss stops being a number.
    """
    x_np = np.moveaxis(batch.u_k + batch.eps, 3, 1).astype(np.float32)
    y_np = np.moveaxis(batch.u_km1, 3, 1).astype(np.float32)
    x = torch.from_numpy(np.ascontiguousarray(x_np))
    y = torch.from_numpy(np.ascontiguousarray(y_np))
    k_t = torch.from_numpy(batch.k.astype(np.int64))
    pred = neural.forward_torch(params, x, k_t, train=train, drop_gen=drop_gen)
    per_example = ((pred - y) ** 2).sum(dim=(1, 2, 3))
    loss = per_example.mean()
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLossError(batch.k.tolist())
    per_np = per_example.detach().numpy()
    by_k: dict[int, float] = {}
    for kv in np.unique(batch.k):
        by_k[int(kv)] = float(per_np[batch.k == kv].mean())
    return loss, {"per_example": per_np, "by_k": by_k}


def _arch_seed(seed: int) -> int:
    ss = np.random.SeedSequence([int(seed), STREAM_INIT])
    return int(ss.generate_state(1, np.uint64)[0] & 0x7FFF_FFFF)


def load_dataset(path: str | Path) -> Dataset:
    """Dataset from an IDX file or a directory of PNGs."""
    p = Path(path)
    if p.is_dir():
        return load_image_dir(p)
    ds = load_idx(p)
    if not isinstance(ds, Dataset):
        raise ValueError(f"{path} holds labels, not images")
    return ds


def _config_meta(cfg: TrainConfig) -> dict:
    d = {
        "dataset": cfg.dataset,
        "out_dir": cfg.out_dir,
        "K": cfg.K,
        "sigma": cfg.sigma,
        "sigma_b_min": cfg.sigma_b_min,
        "sigma_b_max": cfg.sigma_b_max,
        "delta": cfg.delta,
        "batch_size": cfg.batch_size,
        "total_steps": cfg.total_steps,
        "lr": cfg.lr,
        "warmup_steps": cfg.warmup_steps,
        "clip_norm": cfg.clip_norm,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "adam_eps": cfg.adam_eps,
        "ema_rate": cfg.ema_rate,
        "seed": cfg.seed,
        "log_every": cfg.log_every,
        "checkpoint_every": cfg.checkpoint_every,
        "arch": cfg.arch.to_dict(),
    }
    return d


def config_from_meta(meta: dict) -> TrainConfig:
    d = dict(meta)
    d["arch"] = ArchConfig.from_dict(d["arch"])
    return TrainConfig(**d)


def make_checkpoint(
    cfg: TrainConfig,
    params: DenoiserParams,
    opt: OptimizerState,
    ema: EmaState,
    step: int,
) -> Checkpoint:
    meta = {
        "kind": "train",
        "step": int(step),
        "config": _config_meta(cfg),
        "schedule": {"K": cfg.K, "sigma_b_min": cfg.sigma_b_min, "sigma_b_max": cfg.sigma_b_max},
        "rng": {
            "seed": cfg.seed,
            "discipline": "per-step generators derived from (seed, stream, step)",
            "streams": {"data": STREAM_DATA, "noise": STREAM_NOISE, "dropout": STREAM_DROPOUT},
        },
        "opt": {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "warmup": opt.warmup,
            "clip_norm": opt.clip_norm,
            "step": opt.step,
            "skipped": opt.skipped,
        },
        "ema_rate": ema.rate,
    }
    if cfg.sigma_zero_ablation:
        meta["ablation"] = "sigma_zero"
    tensors: dict[str, np.ndarray] = {}
    for name, t in params.net.state_dict().items():
        tensors[f"params/{name}"] = t.detach().numpy().copy()
    for name, t in ema.shadow.items():
        tensors[f"ema/{name}"] = t.numpy().copy()
    for name, t in opt.m.items():
        tensors[f"opt_m/{name}"] = t.numpy().copy()
    for name, t in opt.v.items():
        tensors[f"opt_v/{name}"] = t.numpy().copy()
    return Checkpoint(meta=meta, tensors=tensors)


@dataclass
class LoadedRun:
    """A checkpoint rehydrated into live objects."""

    cfg: TrainConfig
    schedule: BlurSchedule
    params: DenoiserParams
    ema_params: DenoiserParams
    opt: OptimizerState
    ema: EmaState
    step: int
    meta: dict

    def pick(self, use_ema: bool = True) -> DenoiserParams:
        return self.ema_params if use_ema else self.params


def restore_run(ckpt: Checkpoint) -> LoadedRun:
    cfg = config_from_meta(ckpt.meta["config"])
    schedule = build_schedule(cfg.K, cfg.sigma_b_min, cfg.sigma_b_max)
    params = neural.make_denoiser(cfg.arch, seed=0)
    state = {
        name[len("params/") :]: torch.from_numpy(arr.copy())
        for name, arr in ckpt.tensors.items()
        if name.startswith("params/")
    }
    params.net.load_state_dict(state)
    om = ckpt.meta["opt"]
    opt = OptimizerState(
        lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"], eps=om["eps"],
        warmup=om["warmup"], clip_norm=om["clip_norm"],
        step=om["step"], skipped=om["skipped"],
    )
    ema = EmaState(rate=ckpt.meta["ema_rate"])
    for name, arr in ckpt.tensors.items():
        if name.startswith("opt_m/"):
            opt.m[name[len("opt_m/") :]] = torch.from_numpy(arr.copy())
        elif name.startswith("opt_v/"):
            opt.v[name[len("opt_v/") :]] = torch.from_numpy(arr.copy())
        elif name.startswith("ema/"):
            ema.shadow[name[len("ema/") :]] = torch.from_numpy(arr.copy())
    ema_params = ema.as_params(params)
    return LoadedRun(
        cfg=cfg, schedule=schedule, params=params, ema_params=ema_params,
        opt=opt, ema=ema, step=ckpt.step, meta=ckpt.meta,
    )


@dataclass
class TrainResult:
    cfg: TrainConfig
    schedule: BlurSchedule
    params: DenoiserParams
    ema: EmaState
    opt: OptimizerState
    losses: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    metrics_path: Path | None = None

    def ema_params(self) -> DenoiserParams:
        return self.ema.as_params(self.params)


def train(
    cfg: TrainConfig,
    dataset: Dataset | None = None,
    resume_from: str | Path | None = None,
    quiet: bool = True,
) -> TrainResult:
    """Run (or resume) a training loop to cfg.total_steps.

    On resume, the checkpoint's embedded config wins except for total_steps
    and out_dir, which the caller may extend or redirect.
    """
    start_step = 0
    if resume_from is not None:
        from .dataio import load_checkpoint

        run = restore_run(load_checkpoint(resume_from))
        cfg = replace(run.cfg, total_steps=cfg.total_steps, out_dir=cfg.out_dir)
        params, opt, ema = run.params, run.opt, run.ema
        start_step = run.step
    cfg.validate()
    if dataset is None:
        dataset = load_dataset(cfg.dataset)
    schedule = build_schedule(cfg.K, cfg.sigma_b_min, cfg.sigma_b_max)
    h, w, c = dataset.shape
    if c != cfg.arch.channels:
        raise ValueError(
            f"dataset has {c} channels but the network expects {cfg.arch.channels}"
        )
    if resume_from is None:
        params = neural.make_denoiser(cfg.arch, seed=_arch_seed(cfg.seed))
        opt = neural.init_optimizer(
            params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
            warmup=cfg.warmup_steps, clip_norm=cfg.clip_norm,
        )
        ema = neural.init_ema(params, cfg.ema_rate)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    result = TrainResult(
        cfg=cfg, schedule=schedule, params=params, ema=ema, opt=opt,
        metrics_path=metrics_path,
    )
    t0 = time.monotonic()
    with metrics_path.open("a") as metrics:
        for step in range(start_step + 1, cfg.total_steps + 1):
            rng_data = derive_rng(cfg.seed, STREAM_DATA, step)
            rng_noise = derive_rng(cfg.seed, STREAM_NOISE, step)
            drop_gen = (
                derive_torch_gen(cfg.seed, STREAM_DROPOUT, step)
                if cfg.arch.dropout > 0.0
                else None
            )
            batch = make_batch(
                dataset, schedule, cfg.sigma, cfg.batch_size, rng_data, rng_noise
            )
            try:
                loss, _ = compute_loss(params, batch, train=True, drop_gen=drop_gen)
            except NonFiniteLossError:
                diag = out / f"ckpt-diag-step{step:06d}.ihdm"
                save_checkpoint(make_checkpoint(cfg, params, opt, ema, step - 1), diag)
                result.checkpoints.append(diag)
                raise
            grads = neural.backward(params, loss)
            info = neural.adam_step(opt, params, grads)
            neural.ema_update(ema, params)
            loss_val = float(loss.detach())
            result.losses.append((step, loss_val))
            if step == 1 or step % cfg.log_every == 0 or step == cfg.total_steps:
                rec = {
                    "step": step,
                    "wall_time": round(time.monotonic() - t0, 3),
                    "loss": loss_val,
                    "lr": info.lr_eff,
                    "grad_norm": info.grad_norm,
                }
                metrics.write(json.dumps(rec) + "\n")
                metrics.flush()
                if not quiet:
                    print(
                        f"step {step:6d}  loss {loss_val:.5f}  "
                        f"lr {info.lr_eff:.2e}  |g| {info.grad_norm:.3f}"
                    )
            if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
                path = out / f"ckpt-step{step:06d}.ihdm"
                save_checkpoint(make_checkpoint(cfg, params, opt, ema, step), path)
                result.checkpoints.append(path)
    return result
