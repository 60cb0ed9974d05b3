"""Stochastic reverse chain: from dissipated prior states back to images.

The chain starts at a draw from the kernel-density terminal prior, applies
the denoiser K times, and perturbs every intermediate state with N(0,
delta^2 I). The final step adds no noise, so the emitted sample is exactly
the last mean prediction. All per-step noise lives in a NoiseTrack of unit
draws scaled by delta at use time; replaying a track reproduces a chain bit
for bit, sharing one track across chains isolates the effect of the prior
state, and two tracks can be blended on the sphere for interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import neural
from .elbo import PriorSet
from .neural import DenoiserParams


class ChainDivergedError(RuntimeError):
    """A reverse-chain state went non-finite; carries the offending step."""

    def __init__(self, step: int):
        super().__init__(f"non-finite chain state at reverse step k={step}")
        self.step = step


@dataclass
class NoiseTrack:
    """K unit-variance draws, one per reverse step (slot k=1 is never
    consumed because the final step is deterministic, but it keeps the
    draw-k / step-k indexing aligned)."""

    draws: np.ndarray

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=np.float64)
        if self.draws.ndim != 4:
            raise ValueError(f"expected (K, H, W, C) draws, got {self.draws.shape}")

    @property
    def K(self) -> int:
        return self.draws.shape[0]

    @property
    def item_shape(self) -> tuple[int, int, int]:
        return self.draws.shape[1:]


def make_noise_track(K: int, shape: tuple[int, int, int], rng: np.random.Generator) -> NoiseTrack:
    if K < 1:
        raise ValueError(f"need K >= 1 draws, got {K}")
    return NoiseTrack(draws=rng.standard_normal((K, *shape)))


def combine_tracks(a: NoiseTrack, b: NoiseTrack, phi: float) -> NoiseTrack:
    """Norm-preserving blend sin(phi) * a + cos(phi) * b.

    Unit draws are points on a sphere in expectation; the trigonometric
    weights keep the blend's marginal variance at 1 for every phi, unlike a
    linear crossfade which would shrink the noise mid-path.
    """
    if a.draws.shape != b.draws.shape:
        raise ValueError(f"track shapes differ: {a.draws.shape} vs {b.draws.shape}")
    return NoiseTrack(draws=math.sin(phi) * a.draws + math.cos(phi) * b.draws)


@dataclass
class ChainTrace:
    """Strided snapshots of a chain. levels[i] counts remaining steps, so the
    first entry is the prior state (level K) and the last the sample (0)."""

    levels: list[int] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    penultimate: np.ndarray | None = None


def sample_prior(prior: PriorSet, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """One draw from the terminal prior: pick a component, add kernel noise."""
    idx = int(rng.integers(0, len(prior)))
    state = prior.components[idx]
    if prior.delta > 0.0:
        state = state + prior.delta * rng.standard_normal(state.shape)
    return state.astype(np.float64), idx


def draw_prior_batch(prior: PriorSet, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stack of prior draws plus the chosen component indices."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = np.empty((count, *prior.item_shape))
    idx = np.empty(count, dtype=np.int64)
    for i in range(count):
        out[i], idx[i] = sample_prior(prior, rng)
    return out, idx


def _chain_batched(
    params: DenoiserParams,
    inits: np.ndarray,
    tracks: list[NoiseTrack],
    delta: float,
    trace_stride: int | None = None,
) -> tuple[np.ndarray, list[ChainTrace]]:
    inits = np.asarray(inits, dtype=np.float64)
    if inits.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) initial states, got {inits.shape}")
    if len(tracks) != inits.shape[0]:
        raise ValueError(f"{inits.shape[0]} chains but {len(tracks)} noise tracks")
    K = tracks[0].K
    for tr in tracks:
        if tr.K != K or tr.item_shape != inits.shape[1:]:
            raise ValueError("noise tracks disagree with the initial states")
    if delta < 0.0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    stride = trace_stride if trace_stride is not None else max(1, math.ceil(K / 12))
    if stride < 1:
        raise ValueError(f"trace stride must be >= 1, got {stride}")

    x = torch.from_numpy(
        np.ascontiguousarray(np.moveaxis(inits, 3, 1).astype(np.float32))
    )
    draws = np.stack([tr.draws for tr in tracks], axis=1)  # (K, B, H, W, C)
    traces = [ChainTrace() for _ in tracks]

    def record(level: int, states: torch.Tensor):
        arr = np.moveaxis(states.numpy(), 1, 3)
        for i, tr in enumerate(traces):
            tr.levels.append(level)
            tr.states.append(arr[i].copy())

    record(K, x)
    done = 0
    with torch.no_grad():
        for k in range(K, 0, -1):
            k_t = torch.full((x.shape[0],), k, dtype=torch.int64)
            mu = neural.forward_torch(params, x, k_t)
            if k > 1:
                step_noise = np.moveaxis(delta * draws[k - 1], 3, 1).astype(np.float32)
                x = mu + torch.from_numpy(np.ascontiguousarray(step_noise))
            else:
                x = mu
            if not torch.isfinite(x).all():
                raise ChainDivergedError(k)
            done += 1
            if k == 2:
                arr = np.moveaxis(x.numpy(), 1, 3)
                for i, tr in enumerate(traces):
                    tr.penultimate = arr[i].copy()
            if done % stride == 0 and k > 1:
                record(k - 1, x)
    record(0, x)
    samples = np.moveaxis(x.numpy(), 1, 3)
    return samples, traces


def reverse_chain(
    params: DenoiserParams,
    init: np.ndarray,
    track: NoiseTrack,
    delta: float,
    trace_stride: int | None = None,
) -> tuple[np.ndarray, ChainTrace]:
    """Run one chain from a prior state; returns the unclamped sample and its
    trace (clamping to [0, 1] happens only when images are written out)."""
    init = np.asarray(init, dtype=np.float64)
    if init.ndim != 3:
        raise ValueError(f"expected a single (H, W, C) state, got {init.shape}")
    samples, traces = _chain_batched(params, init[None], [track], delta, trace_stride)
    return samples[0], traces[0]


def sample_fixed_noise(
    params: DenoiserParams,
    inits: np.ndarray,
    track: NoiseTrack,
    delta: float,
) -> np.ndarray:
    """Run several prior states through the chain under one shared track,
    so differences between outputs trace back to the priors alone."""
    inits = np.asarray(inits, dtype=np.float64)
    samples, _ = _chain_batched(params, inits, [track] * inits.shape[0], delta)
    return samples


def sample_batch(
    params: DenoiserParams,
    inits: np.ndarray,
    tracks: list[NoiseTrack],
    delta: float,
    trace_stride: int | None = None,
) -> tuple[np.ndarray, list[ChainTrace]]:
    """Independent chains, batched through the network."""
    return _chain_batched(params, inits, tracks, delta, trace_stride)


def interpolate(
    params: DenoiserParams,
    state_a: np.ndarray,
    state_b: np.ndarray,
    track_a: NoiseTrack,
    track_b: NoiseTrack,
    steps: int,
    delta: float,
) -> np.ndarray:
    """Walk between two chains: prior states blend linearly, noise tracks
    blend on the sphere.

    Frame j uses s = j/(steps-1) and phi = (pi/2)(1-s); the first and last
    frames reuse the endpoint state and track objects verbatim, so they
    reproduce the endpoint samples exactly.
    """
    if steps < 2:
        raise ValueError(f"need at least 2 frames, got {steps}")
    state_a = np.asarray(state_a, dtype=np.float64)
    state_b = np.asarray(state_b, dtype=np.float64)
    if state_a.shape != state_b.shape:
        raise ValueError(f"endpoint shapes differ: {state_a.shape} vs {state_b.shape}")
    inits, tracks = [], []
    for j in range(steps):
        s = j / (steps - 1)
        if j == 0:
            inits.append(state_a)
            tracks.append(track_a)
        elif j == steps - 1:
            inits.append(state_b)
            tracks.append(track_b)
        else:
            phi = 0.5 * math.pi * (1.0 - s)
            inits.append((1.0 - s) * state_a + s * state_b)
            tracks.append(combine_tracks(track_a, track_b, phi))
    samples, _ = _chain_batched(params, np.stack(inits), tracks, delta)
    return samples
