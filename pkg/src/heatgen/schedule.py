"""Geometric blur schedule mapping chain steps to dissipation times."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BlurSchedule:
    """Blur widths and dissipation times for a K-step chain.

    ``sigma_b[i]`` is the effective Gaussian blur std at step k = i + 1 and
    ``times[i]`` the matching dissipation time sigma_b^2 / 2. Step k = 0 is
    the clean image (time 0) and is not stored.
    """

    K: int
    sigma_b_min: float
    sigma_b_max: float
    sigma_b: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)

    def time_at(self, k: int) -> float:
        """Dissipation time for step k, with t(0) = 0."""
        if not 0 <= k <= self.K:
            raise ValueError(f"step must be in [0, {self.K}], got {k}")
        if k == 0:
            return 0.0
        return float(self.times[k - 1])


def build_schedule(K: int, sigma_b_min: float = 0.5, sigma_b_max: float = 20.0) -> BlurSchedule:
    """Log-linear blur widths from sigma_b_min (k=1) to sigma_b_max (k=K).

    Consecutive widths share a constant ratio (sigma_b_max / sigma_b_min)
    raised to 1/(K-1), so the chain spends equally many steps per octave of
    blur. Times follow as sigma_b^2 / 2.
    """
    if K < 2:
        raise ValueError(f"need at least 2 steps, got K={K}")
    if not (np.isfinite(sigma_b_min) and np.isfinite(sigma_b_max)):
        raise ValueError("blur bounds must be finite")
    if sigma_b_min <= 0 or sigma_b_max <= 0:
        raise ValueError(
            f"blur bounds must be positive, got min={sigma_b_min} max={sigma_b_max}"
        )
    if sigma_b_min > sigma_b_max:
        raise ValueError(
            f"blur bounds out of order: min={sigma_b_min} > max={sigma_b_max}"
        )
    k = np.arange(K, dtype=np.float64)
    log_sigma = (
        np.log(sigma_b_min) * (K - 1 - k) + np.log(sigma_b_max) * k
    ) / (K - 1)
    sigma_b = np.exp(log_sigma)
    return BlurSchedule(
        K=K,
        sigma_b_min=float(sigma_b_min),
        sigma_b_max=float(sigma_b_max),
        sigma_b=sigma_b,
        times=sigma_b**2 / 2.0,
    )
