"""Shared fixtures: the digits corpus and two trained networks.

The heavy fixtures are session-scoped. Building the 28x28 digits corpus takes
a couple of seconds, the smoke training run about three minutes on one CPU
core, and the resumed longer run another nine. Tests that can prove their
point without a trained network must not request these.
"""

import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import pytest

from heatgen.config import TrainConfig
from heatgen.dataio import load_idx
from heatgen.training import train

REPO = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).resolve().parent / "fixtures"


def smoke_train_config(dataset: Path, out_dir: Path) -> TrainConfig:
    """The one training recipe every trained-network test shares.

    Small enough to finish in minutes, big enough that the loss drops well
    below the blur-gap baseline and the sampler produces digit-like output.
    """
    return TrainConfig(
        dataset=str(dataset),
        out_dir=str(out_dir),
        K=20,
        sigma=0.01,
        sigma_b_min=0.5,
        sigma_b_max=10.0,
        delta=0.0125,
        batch_size=16,
        total_steps=2000,
        lr=2e-4,
        warmup_steps=100,
        ema_rate=0.999,
        seed=0,
        log_every=50,
        checkpoint_every=1000,
    )


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    """IDX digit files written by the dataset script (also exercises it)."""
    out = tmp_path_factory.mktemp("digits")
    script = REPO / "scripts" / "make_digits_dataset.py"
    proc = subprocess.run(
        [sys.executable, str(script), "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.fixture(scope="session")
def digits_train(data_dir):
    return load_idx(data_dir / "digits-train.idx")


@pytest.fixture(scope="session")
def digits_eval(data_dir):
    return load_idx(data_dir / "digits-eval.idx")


@pytest.fixture(scope="session")
def smoke_run(data_dir, digits_train, tmp_path_factory):
    """2000-step training run; returns the TrainResult (~3 min)."""
    out = tmp_path_factory.mktemp("smoke")
    cfg = smoke_train_config(data_dir / "digits-train.idx", out)
    return train(cfg, dataset=digits_train)


@pytest.fixture(scope="session")
def sweep_run(smoke_run, digits_train, tmp_path_factory):
    """The smoke run resumed to 8000 steps (~9 min); likelihood sweeps only.

    Resuming from the smoke checkpoint instead of training fresh keeps the
    full-suite wall time inside the slowest acceptance budget.
    """
    out = tmp_path_factory.mktemp("sweep")
    cfg = replace(smoke_run.cfg, total_steps=8000, out_dir=str(out))
    return train(cfg, dataset=digits_train, resume_from=smoke_run.checkpoints[-1])
