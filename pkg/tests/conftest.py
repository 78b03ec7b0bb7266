"""Shared fixtures: a small trained pipeline for integration tests and the
full-size pipeline for the acceptance suite.

Trained runs are cached under .cache/ keyed by the config digest; every stage
is seed-deterministic, so a cache hit is byte-equivalent to a fresh run.
"""

from __future__ import annotations

from pathlib import Path

import pytest

from routedlm.config import RunConfig
from routedlm.pipeline import load_data, load_pipeline, render_corpora, run_all

CACHE_ROOT = Path(__file__).resolve().parent.parent / ".cache"

SMOKE_OVERRIDES = {
    "seed": "5",
    "data.linear.train_size": "700", "data.linear.test_size": "200",
    "data.nonlinear.train_size": "700", "data.nonlinear.test_size": "200",
    "lm.layers": "2", "lm.heads": "4", "lm.dim": "64", "lm.context": "256",
    "lm.corpus_per_task": "112", "lm.eval_per_task": "8",
    "lm.epochs": "30", "lm.batch_size": "8", "lm.lr": "2e-3",
    "expert.hidden": "32",
    "expert.linear.epochs": "60", "expert.nonlinear.epochs": "80",
    "stage2.texts_per_task": "192", "stage2.val_texts_per_task": "16",
    "stage2.epochs": "80", "stage2.heads": "8", "stage2.probe_epochs": "40",
    "router.texts_per_task": "72", "router.val_texts_per_task": "12",
    "router.epochs": "12",
    "bench.requests": "6", "bench.max_len": "224",
}


def _cached_run(overrides: dict, tag: str):
    cfg = RunConfig(dict(overrides))
    digest = cfg.digest()
    out = CACHE_ROOT / f"{tag}-{digest}"
    cfg.override("out_dir", str(out))
    marker = out / "DONE"
    if marker.exists():
        pipe = load_pipeline(cfg)
    else:
        pipe = run_all(cfg, log=False)
        marker.write_text("ok\n")
    return cfg, pipe


@pytest.fixture(scope="session")
def smoke_run():
    """Small but fully trained pipeline: wiring-level integration tests."""
    cfg, pipe = _cached_run(SMOKE_OVERRIDES, "smoke")
    splits = load_data(cfg)
    corpora = render_corpora(cfg, splits)
    return {"cfg": cfg, "pipe": pipe, "splits": splits, "corpora": corpora}


@pytest.fixture(scope="session")
def standard_run():
    """Full-size pipeline at the default configuration: acceptance quality."""
    cfg, pipe = _cached_run({}, "std")
    splits = load_data(cfg)
    corpora = render_corpora(cfg, splits)
    return {"cfg": cfg, "pipe": pipe, "splits": splits, "corpora": corpora}
