"""Spectral diagnostics: radial power spectra, power-law fits, dissipation
maps, input-gradient probes, and nearest-neighbour lookups.

Spectra are built from squared orthonormal-DCT coefficients averaged over
equal-width annuli of radial frequency. The annuli partition every
coefficient, zero mode included, so populations add up to the pixel count;
the zero mode (squared channel mean times pixel count, large enough to dwarf
its annulus) is also reported on its own. Absolute levels follow the
orthonormal convention; slopes and trends are the meaningful outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import neural
from .dataio import Dataset
from .heat import dct2, frequency_grid
from .neural import DenoiserParams
from .schedule import BlurSchedule

LOG_FLOOR = 1e-20


@dataclass(frozen=True)
class PsdCurve:
    """Radial power spectrum: annulus centres, mean power per annulus, and
    annulus populations. The zero mode sits inside the first annulus (the
    populations cover every coefficient) and is repeated on its own for
    convenience."""

    freqs: np.ndarray
    power: np.ndarray
    populations: np.ndarray
    zero_mode: float
    height: int
    width: int

    @property
    def bins(self) -> int:
        return self.freqs.shape[0]

    def log_power(self, floor: float = LOG_FLOOR) -> np.ndarray:
        return np.log(np.maximum(self.power, floor))

    def total_energy(self) -> float:
        """Mean squared pixel value implied by the curve (zero mode included)."""
        return float((self.power * self.populations).sum() / (self.height * self.width))


def _coeff_power(image: np.ndarray) -> np.ndarray:
    power = dct2(image) ** 2
    if power.ndim == 3:
        power = power.mean(axis=2)
    return power


def _bin_index(height: int, width: int, bins: int) -> tuple[np.ndarray, np.ndarray]:
    grid = frequency_grid(height, width)
    f = grid.freqs
    fmax = float(f.max())
    idx = np.minimum((f / fmax * bins).astype(np.int64), bins - 1)
    centers = (np.arange(bins) + 0.5) * fmax / bins
    return idx, centers


def psd_1d(image: np.ndarray, bins: int = 32) -> PsdCurve:
    """Radially binned power spectrum of one image."""
    if bins < 2:
        raise ValueError(f"need at least two bins, got {bins}")
    power = _coeff_power(image)
    h, w = power.shape
    idx, centers = _bin_index(h, w, bins)
    pop = np.bincount(idx.ravel(), minlength=bins)
    sums = np.bincount(idx.ravel(), weights=power.ravel(), minlength=bins)
    mean = np.divide(sums, pop, out=np.zeros(bins), where=pop > 0)
    return PsdCurve(
        freqs=centers,
        power=mean,
        populations=pop,
        zero_mode=float(power[0, 0]),
        height=h,
        width=w,
    )


def psd_mean(images: np.ndarray, bins: int = 32) -> PsdCurve:
    """Average the per-image curves of a stack (same grid throughout)."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, H, W, C) stack, got {images.shape}")
    curves = [psd_1d(img, bins=bins) for img in images]
    return PsdCurve(
        freqs=curves[0].freqs,
        power=np.mean([c.power for c in curves], axis=0),
        populations=curves[0].populations,
        zero_mode=float(np.mean([c.zero_mode for c in curves])),
        height=curves[0].height,
        width=curves[0].width,
    )


@dataclass(frozen=True)
class AlphaFit:
    """Least-squares slope of log power against log frequency; alpha is the
    negated slope, so natural photographs land around 2."""

    alpha: float
    intercept: float
    residual: float
    n_points: int


def fit_alpha(curve: PsdCurve, drop_lo: int = 2, drop_hi: int = 2, floor: float = LOG_FLOOR) -> AlphaFit:
    """Fit power ~ freq^(-alpha) over the populated mid-range annuli.

    At least the first annulus must be dropped (it contains the zero mode,
    which is channel mass, not texture); the default also trims one more at
    the bottom and two at the top, where annuli hold only a few coefficients.
    """
    if drop_lo < 1:
        raise ValueError("drop_lo must be >= 1: the first annulus holds the zero mode")
    if drop_hi < 0:
        raise ValueError("drop_hi must be >= 0")
    usable = curve.populations > 0
    x = np.log(curve.freqs[usable])
    y = np.log(np.maximum(curve.power[usable], floor))
    if drop_hi:
        x, y = x[drop_lo:-drop_hi], y[drop_lo:-drop_hi]
    else:
        x, y = x[drop_lo:], y[drop_lo:]
    if x.size < 3:
        raise ValueError(
            f"fit range degenerate: {x.size} usable annuli after dropping {drop_lo}+{drop_hi}"
        )
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(((y - (slope * x + intercept)) ** 2).sum())
    return AlphaFit(alpha=float(-slope), intercept=float(intercept), residual=resid, n_points=int(x.size))


@dataclass(frozen=True)
class DecayMap:
    """Binned spectra of one image dissipated to every chain level, plus the
    fraction of annuli still above the observation-noise floor."""

    freqs: np.ndarray
    powers: np.ndarray  # (K, bins)
    fractions: np.ndarray  # (K,)
    populations: np.ndarray
    sigma: float


def frequency_decay_map(
    image: np.ndarray, schedule: BlurSchedule, sigma: float, bins: int = 32
) -> DecayMap:
    """How the spectrum drains as dissipation runs along the schedule.

    Works in coefficient space: the level-k spectrum is the clean spectrum
    scaled by exp(-2 lambda t_k), binned like psd_1d. fractions[k-1] is the
    share of populated annuli whose mean power still exceeds sigma^2; it can
    only fall as k grows (dissipation is a contraction).
    """
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    power = _coeff_power(np.asarray(image, dtype=np.float64))
    h, w = power.shape
    grid = frequency_grid(h, w)
    idx, centers = _bin_index(h, w, bins)
    pop = np.bincount(idx.ravel(), minlength=bins)
    powers = np.empty((schedule.K, bins))
    fractions = np.empty(schedule.K)
    populated = pop > 0
    for i, t in enumerate(schedule.times):
        scaled = power * np.exp(-2.0 * grid.lambdas * t)
        sums = np.bincount(idx.ravel(), weights=scaled.ravel(), minlength=bins)
        mean = np.divide(sums, pop, out=np.zeros(bins), where=populated)
        powers[i] = mean
        fractions[i] = float((mean[populated] > sigma**2).mean())
    return DecayMap(freqs=centers, powers=powers, fractions=fractions, populations=pop, sigma=sigma)


def input_gradient_probe(
    params: DenoiserParams, u: np.ndarray, k: int, pixel: tuple[int, int, int]
) -> np.ndarray:
    """Gradient of one output scalar w.r.t. the whole input image.

    pixel is (row, col, channel) of the probed output. For the identity
    (zero-initialised) network this is exactly a one-hot at the probe; for a
    trained network its spread measures the receptive field actually used.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3:
        raise ValueError(f"expected one (H, W, C) image, got {u.shape}")
    h, w, c = u.shape
    row, col, ch = pixel
    if not (0 <= row < h and 0 <= col < w and 0 <= ch < c):
        raise ValueError(f"probe pixel {pixel} outside image of shape {u.shape}")
    x = torch.from_numpy(
        np.ascontiguousarray(np.moveaxis(u, 2, 0)[None].astype(np.float32))
    )
    x.requires_grad_(True)
    out = neural.forward_torch(params, x, torch.tensor([int(k)]))
    out[0, ch, row, col].backward()
    grad = x.grad.detach().numpy()[0]
    return np.moveaxis(grad, 0, 2).astype(np.float64)


def nearest_neighbors(sample: np.ndarray, dataset: Dataset, n: int) -> list[tuple[int, float]]:
    """Training items closest to a sample in plain pixel L2, best first.

    Ties keep dataset order; asking for more neighbours than the dataset
    holds returns them all.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape != dataset.shape:
        raise ValueError(f"sample shape {sample.shape} does not match dataset items {dataset.shape}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    diffs = dataset.images.reshape(len(dataset), -1) - sample.reshape(-1)
    dists = np.sqrt((diffs**2).sum(axis=1))
    order = np.argsort(dists, kind="stable")[: min(n, len(dataset))]
    return [(int(i), float(dists[i])) for i in order]
