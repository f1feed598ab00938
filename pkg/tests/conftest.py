"""Shared fixtures.

The end-to-end criteria need a fully trained run (5000 iters, ~20 min single
threaded), so the trained checkpoint is cached on disk under .cache/ keyed by
the training configuration and reused across pytest invocations.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from enerf.networks import WeightStore, load_checkpoint
from enerf.scenegen import generate_scene, preset
from enerf.trainer import TrainConfig, train

REPO_ROOT = Path(__file__).resolve().parent.parent
CACHE_ROOT = REPO_ROOT / ".cache"

REFERENCE_CONFIG = dict(
    preset="plane-sphere",
    scene_rev=3,  # bump when the preset geometry or textures change
    resolution=(64, 64),
    iters=5000,
    lr=5e-4,
    n_rays=512,
    n_views=3,
    n_k=2,
    jitter=True,
    seed=0,
)


def reference_run_dir():
    key = hashlib.sha256(
        json.dumps(REFERENCE_CONFIG, sort_keys=True).encode()
    ).hexdigest()[:16]
    return CACHE_ROOT / f"refrun-{key}"


def ensure_reference_run(log=print):
    """Train the reference model once; later calls reuse the cached weights."""
    run = reference_run_dir()
    ckpt = run / "weights_final.ckpt"
    cfg = REFERENCE_CONFIG
    ds = generate_scene(
        preset(cfg["preset"], resolution=tuple(cfg["resolution"]), seed=cfg["seed"])
    )
    if not ckpt.exists():
        run.mkdir(parents=True, exist_ok=True)
        tc = TrainConfig(
            iters=cfg["iters"], lr=cfg["lr"], n_rays=cfg["n_rays"],
            n_views=cfg["n_views"], n_k=cfg["n_k"], jitter=cfg["jitter"],
            seed=cfg["seed"],
        )
        train(ds, tc, run, log=log)
    return ds, run


@pytest.fixture(scope="session")
def reference_run():
    """(dataset, run_dir, WeightStore) for the trained reference model."""
    ds, run = ensure_reference_run()
    weights = WeightStore(load_checkpoint(run / "weights_final.ckpt"))
    return ds, run, weights


@pytest.fixture(scope="session")
def micro_scene():
    return generate_scene(preset("micro", seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


if __name__ == "__main__":
    ensure_reference_run()
