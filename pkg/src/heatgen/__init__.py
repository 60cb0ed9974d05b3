"""Generative modelling by reversing heat dissipation.

The forward process dissipates images with an exact spectral heat-equation
solver; a learned stochastic chain runs the other way. Subpackages: `heat`
(spectral solver), `schedule` (blur ladder), `neural` (denoiser + optimizer),
`training`, `elbo` (likelihood bound), `sampler` (reverse chain), `analysis`
(spectral diagnostics), `dataio` (datasets, PNG, checkpoints), `cli`.
"""

from . import analysis, cli, config, dataio, elbo, heat, neural, sampler, schedule, training

__version__ = "0.1.0"

__all__ = [
    "analysis",
    "cli",
    "config",
    "dataio",
    "elbo",
    "heat",
    "neural",
    "sampler",
    "schedule",
    "training",
    "__version__",
]
