"""Denoiser network and hand-rolled optimizer state.

The network is a small residual U-Net: GroupNorm + SiLU convolution blocks,
average-pool downsampling, nearest-neighbour upsampling, a sinusoidal
embedding of the integer chain step added inside every block, and a
zero-initialised output layer so the whole model is the identity map at
initialisation (the prediction is input + learned correction).

torch supplies tensors and reverse-mode differentiation; the update rules
(Adam with linear warmup and global-norm clipping, EMA shadowing) are written
out explicitly so their exact semantics live here and serialize to plain
arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the denoiser network."""

    channels: int = 1
    base: int = 16
    mults: tuple[int, ...] = (1, 2)
    res_blocks: int = 1
    emb_dim: int = 64
    groups: int = 8
    dropout: float = 0.1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mults"] = list(self.mults)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        d = dict(d)
        d["mults"] = tuple(d["mults"])
        return ArchConfig(**d)


def timestep_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer chain steps, shape (B, dim)."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    if half > 1:
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=k.dtype) / (half - 1)
        )
    else:
        freqs = torch.ones(1, dtype=k.dtype)
    args = k[:, None] * freqs[None, :].to(k.device)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _norm(groups: int, ch: int) -> nn.GroupNorm:
    g = math.gcd(ch, groups)
    return nn.GroupNorm(max(g, 1), ch)


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int, dropout: float):
        super().__init__()
        self.norm1 = _norm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.dropout = dropout

    def forward(self, x, emb, drop_gen=None):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        # The embedding path runs in 64-bit (see DenoiserNet.forward) so that
        # its batched matmuls agree with per-item evaluation once cast down.
        proj = torch.nn.functional.linear(
            torch.nn.functional.silu(emb),
            self.emb_proj.weight.double(),
            self.emb_proj.bias.double(),
        ).to(h.dtype)
        h = h + proj[:, :, None, None]
        h = torch.nn.functional.silu(self.norm2(h))
        if self.training and self.dropout > 0.0:
            keep = 1.0 - self.dropout
            mask = (
                torch.rand(h.shape, generator=drop_gen, dtype=h.dtype, device=h.device)
                < keep
            ).to(h.dtype) / keep
            h = h * mask
        h = self.conv2(h)
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """Residual U-Net predicting input + correction."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        chs = [arch.base * m for m in arch.mults]
        emb = arch.emb_dim
        self.emb_mlp = nn.Sequential(
            nn.Linear(arch.base, emb), nn.SiLU(), nn.Linear(emb, emb)
        )
        self.stem = nn.Conv2d(arch.channels, chs[0], 3, padding=1)

        blk = lambda i, o: _ResBlock(i, o, emb, arch.groups, arch.dropout)
        skip_chs = [chs[0]]
        self.down = nn.ModuleList()
        ch = chs[0]
        for i, out_ch in enumerate(chs):
            level = nn.ModuleList()
            for _ in range(arch.res_blocks):
                level.append(blk(ch, out_ch))
                ch = out_ch
                skip_chs.append(ch)
            self.down.append(level)
            if i < len(chs) - 1:
                skip_chs.append(ch)
        self.mid = blk(ch, ch)
        self.up = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for i in reversed(range(len(chs))):
            level = nn.ModuleList()
            for _ in range(arch.res_blocks + 1):
                level.append(blk(ch + skip_chs.pop(), chs[i]))
                ch = chs[i]
            self.up.append(level)
            self.up_convs.append(
                nn.Conv2d(ch, ch, 3, padding=1) if i > 0 else nn.Identity()
            )
        self.head_norm = _norm(arch.groups, ch)
        self.head = nn.Conv2d(ch, arch.channels, 3, padding=1)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x, k, drop_gen=None):
        levels = len(self.arch.mults)
        div = 2 ** (levels - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} not divisible by {div} "
                f"for a {levels}-level net"
            )
        emb = timestep_embedding(k.to(torch.float64), self.arch.base)
        lin1, lin2 = self.emb_mlp[0], self.emb_mlp[2]
        emb = torch.nn.functional.linear(emb, lin1.weight.double(), lin1.bias.double())
        emb = torch.nn.functional.linear(
            torch.nn.functional.silu(emb), lin2.weight.double(), lin2.bias.double()
        )
        h = self.stem(x)
        hs = [h]
        for i, level in enumerate(self.down):
            for block in level:
                h = block(h, emb, drop_gen)
                hs.append(h)
            if i < len(self.down) - 1:
                h = self.pool(h)
                hs.append(h)
        h = self.mid(h, emb, drop_gen)
        for level, conv in zip(self.up, self.up_convs):
            for block in level:
                h = block(torch.cat([h, hs.pop()], dim=1), emb, drop_gen)
            if not isinstance(conv, nn.Identity):
                h = conv(
                    torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                )
        f = self.head(torch.nn.functional.silu(self.head_norm(h)))
        return x + f


@dataclass
class DenoiserParams:
    """A denoiser network plus the architecture it was built from."""

    arch: ArchConfig
    net: DenoiserNet

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.net.state_dict())

    def load_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.net.load_state_dict(tensors)

    def count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def clone(self) -> "DenoiserParams":
        fresh = DenoiserNet(self.arch).to(self.dtype)
        fresh.load_state_dict(
            {name: t.clone() for name, t in self.net.state_dict().items()}
        )
        fresh.eval()
        return DenoiserParams(arch=self.arch, net=fresh)


def _fan_in_init(net: DenoiserNet, gen: torch.Generator) -> None:
    for mod in net.modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            w = mod.weight
            fan_in = w.shape[1] * (w.shape[2] * w.shape[3] if w.ndim == 4 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=gen)
                if mod.bias is not None:
                    mod.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(mod, nn.GroupNorm):
            with torch.no_grad():
                mod.weight.fill_(1.0)
                mod.bias.fill_(0.0)


def make_denoiser(
    arch: ArchConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> DenoiserParams:
    """Build and initialise a denoiser.

    Weights get a fan-in scaled uniform init from a dedicated generator; the
    output layer is zeroed so the fresh network is exactly the identity.
    """
    net = DenoiserNet(arch)
    gen = torch.Generator().manual_seed(int(seed))
    _fan_in_init(net, gen)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    net = net.to(dtype)
    net.eval()
    return DenoiserParams(arch=arch, net=net)


# The reference conv kernel changes its accumulation strategy at batch 16,
# so batches are run through the network in slices no larger than this.
_BATCH_CHUNK = 8


def forward_torch(
    params: DenoiserParams,
    x: torch.Tensor,
    k: torch.Tensor,
    train: bool = False,
    drop_gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Prediction on an NCHW tensor, keeping the autograd graph.

    oneDNN convolutions pick different kernels per batch size and drift a few
    1e-6 between batched and per-item evaluation, so they are switched off
    for every network call, and batches run in fixed-size slices that keep
    every kernel on the code path a single item would take. Batched output
    therefore matches the stacked per-item outputs bit for bit.
    """
    params.net.train(train)
    prev = torch.backends.mkldnn.enabled
    torch.backends.mkldnn.enabled = False
    try:
        b = x.shape[0]
        if b <= _BATCH_CHUNK:
            return params.net(x, k, drop_gen)
        parts = [
            params.net(x[i : i + _BATCH_CHUNK], k[i : i + _BATCH_CHUNK], drop_gen)
            for i in range(0, b, _BATCH_CHUNK)
        ]
        return torch.cat(parts, 0)
    finally:
        torch.backends.mkldnn.enabled = prev
        params.net.eval()


def _to_nchw(params: DenoiserParams, u: np.ndarray) -> tuple[torch.Tensor, bool]:
    u = np.asarray(u)
    batched = u.ndim == 4
    if u.ndim == 3:
        # reshape, not u[None]: a broadcast axis has stride 0, which survives
        # ascontiguousarray and routes convs through a different accumulation
        # path than a genuinely batched tensor.
        u = u.reshape((1,) + u.shape)
    if u.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C), got shape {u.shape}")
    if u.shape[3] != params.arch.channels:
        raise ValueError(
            f"expected {params.arch.channels} channels, got {u.shape[3]}"
        )
    arr = np.ascontiguousarray(np.moveaxis(u, 3, 1))
    # size-1 axes can carry arbitrary strides while still counting as
    # contiguous; flattening and reshaping pins the canonical layout so torch
    # picks the same conv path for every caller.
    arr = arr.reshape(-1).reshape(arr.shape)
    x = torch.from_numpy(arr).to(params.dtype)
    return x, batched


def denoiser_forward(params: DenoiserParams, u: np.ndarray, k) -> np.ndarray:
    """Mean prediction for one image or a stack, as numpy (same layout in/out)."""
    x, batched = _to_nchw(params, u)
    k_arr = np.atleast_1d(np.asarray(k, dtype=np.int64))
    if k_arr.ndim != 1 or (batched and k_arr.shape[0] not in (1, x.shape[0])):
        raise ValueError(f"step index shape {k_arr.shape} does not match batch {x.shape[0]}")
    if np.any(k_arr < 0):
        raise ValueError("step indices must be >= 0")
    if k_arr.shape[0] == 1 and x.shape[0] > 1:
        k_arr = np.repeat(k_arr, x.shape[0])
    with torch.no_grad():
        out = forward_torch(params, x, torch.from_numpy(k_arr))
    res = np.moveaxis(out.numpy(), 1, 3)
    return res if batched else res[0]


@dataclass
class OptimizerState:
    """Adam moments plus the step/skip counters and hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 0
    clip_norm: float = 1.0
    step: int = 0
    skipped: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)
    v: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)


def init_optimizer(
    params: DenoiserParams,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    warmup: int = 0,
    clip_norm: float = 1.0,
) -> OptimizerState:
    state = OptimizerState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, warmup=warmup, clip_norm=clip_norm
    )
    for name, p in params.net.named_parameters():
        state.m[name] = torch.zeros_like(p, requires_grad=False)
        state.v[name] = torch.zeros_like(p, requires_grad=False)
    return state


def backward(params: DenoiserParams, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss w.r.t. every parameter, as detached copies."""
    if loss.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    params.net.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, p in params.net.named_parameters():
        grads[name] = (
            p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        )
    params.net.zero_grad(set_to_none=True)
    return grads


@dataclass
class AdamStepInfo:
    grad_norm: float
    lr_eff: float
    skipped: bool


def adam_step(
    state: OptimizerState, params: DenoiserParams, grads: dict[str, torch.Tensor]
) -> AdamStepInfo:
    """One Adam update in place: clip by global norm, then biased moments.

    Non-finite gradients skip the update entirely (no moment or step change)
    and bump the skip counter, so a single bad batch cannot poison training.
    """
    sq = 0.0
    for g in grads.values():
        sq += float((g.double() ** 2).sum())
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        state.skipped += 1
        return AdamStepInfo(grad_norm=norm, lr_eff=0.0, skipped=True)
    scale = 1.0
    if state.clip_norm > 0.0 and norm > state.clip_norm:
        scale = state.clip_norm / norm
    state.step += 1
    t = state.step
    lr_eff = state.lr
    if state.warmup > 0:
        lr_eff = state.lr * min(1.0, t / state.warmup)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.net.named_parameters():
            g = grads[name] * scale
            state.m[name].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            state.v[name].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = state.m[name] / bc1
            v_hat = state.v[name] / bc2
            p.add_(-lr_eff * m_hat / (v_hat.sqrt() + state.eps))
    return AdamStepInfo(grad_norm=norm, lr_eff=lr_eff, skipped=False)


@dataclass
class EmaState:
    """Exponentially averaged shadow of the parameter set."""

    rate: float
    shadow: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    def as_params(self, params: DenoiserParams) -> DenoiserParams:
        """A detached denoiser carrying the shadow weights."""
        out = params.clone()
        sd = out.net.state_dict()
        for name, t in self.shadow.items():
            sd[name] = t.clone()
        out.net.load_state_dict(sd)
        return out


def init_ema(params: DenoiserParams, rate: float, zero_init: bool = False) -> EmaState:
    ema = EmaState(rate=rate)
    for name, p in params.net.named_parameters():
        ema.shadow[name] = (
            torch.zeros_like(p) if zero_init else p.detach().clone()
        )
    return ema


def ema_update(ema: EmaState, params: DenoiserParams) -> None:
    """shadow <- rate * shadow + (1 - rate) * param, for every parameter."""
    with torch.no_grad():
        for name, p in params.net.named_parameters():
            ema.shadow[name].mul_(ema.rate).add_(p.detach(), alpha=1.0 - ema.rate)
