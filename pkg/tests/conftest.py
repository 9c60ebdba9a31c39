"""Shared fixtures: a small phantom dataset and a small trained checkpoint,
built once per session and reused by trainer/CLI/evaluation tests."""

from __future__ import annotations

from pathlib import Path

import pytest

from cardiacatlas import phantom, training


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """36 phantoms at 48x64 with 25% disease prevalence; returns the
    manifest path."""
    root = tmp_path_factory.mktemp("tiny-data")
    cfg = phantom.PhantomConfig(
        n_samples=36, image_height=48, image_width=64,
        hlhs_fraction=0.25, split_fractions=(0.5, 0.25, 0.25), seed=11)
    phantom.generate_dataset(cfg, root)
    return root / "manifest.json"


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_dataset, tmp_path_factory) -> Path:
    """A briefly trained full-variant checkpoint on the tiny dataset."""
    out = tmp_path_factory.mktemp("tiny-train")
    cfg = training.TrainConfig(
        manifest=str(tiny_dataset), out_dir=str(out), variant="atlas_istn",
        epochs=3, batch_size=6, warmup_epochs=1, seed=5)
    result = training.train(cfg)
    return result.checkpoint_best
