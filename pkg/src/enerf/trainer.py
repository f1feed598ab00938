"""Photometric training loop.

Each step picks a random training view as the target, renders a batch of its
pixels from the N nearest remaining training views, and applies one Adam
update on the mean squared color error.  Everything downstream of the weight
arrays is differentiable, so a single backward sweep reaches all six weight
groups (unet, reg3d_coarse, reg3d_fine, pool_mlp, phi, varphi).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .costvolume import CascadeConfig, bilinear_upsample, cascade_predict, select_source_views
from .networks import WeightStore, init_weights, save_checkpoint
from .renderer import prepare_source_views, render_rays


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    iters: int = 5000
    lr: float = 5e-4
    halve_every: int = 0  # 0 = iters // 4
    n_rays: int = 512
    n_views: int = 3
    n_k: int = 2
    seed: int = 0
    jitter: bool = False  # stratified depth jitter within each sub-interval
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    checkpoint_every: int = 1000
    log_every: int = 50

    def __post_init__(self):
        if self.iters < 1:
            raise TrainError("iters must be positive")
        if self.halve_every == 0:
            self.halve_every = max(self.iters // 4, 1)


def mse_loss(pred, target):
    """Mean over rays of the squared color error summed over channels."""
    target = ad.as_tensor(target)
    return ad.tmean(ad.tsum(ad.square(pred - target), axis=1))


def lr_at(cfg: TrainConfig, it):
    """Step-decay schedule: halve the base rate every ``halve_every`` iters."""
    return cfg.lr * 0.5 ** (it // cfg.halve_every)


def train_step(ds, weights: WeightStore, state: ad.AdamState, cfg: TrainConfig,
               rng, it):
    """One optimization step; returns the scalar loss."""
    train_ids = ds.train_ids
    if len(train_ids) < cfg.n_views + 1:
        raise TrainError(
            f"need at least {cfg.n_views + 1} training views, got {len(train_ids)}"
        )
    tid = int(rng.choice(train_ids))
    view = ds.views[tid]
    cam = view.camera
    src_ids = select_source_views(
        ds, cam, cfg.n_views, [i for i in train_ids if i != tid]
    )
    us = rng.integers(0, cam.width, cfg.n_rays)
    vs = rng.integers(0, cam.height, cfg.n_rays)
    uv = np.stack([us, vs], axis=1)
    with ad.record() as graph:
        pyramids, cams, views = prepare_source_views(ds, src_ids, weights)
        cascade = cascade_predict(pyramids, cams, cam, weights, cfg.cascade)
        full_low = bilinear_upsample(cascade.samp_low, 2)
        full_high = bilinear_upsample(cascade.samp_high, 2)
        rgb, _, _ = render_rays(
            uv, cam, cascade, views, weights, ds.background, mode="guided",
            n_k=cfg.n_k, full_low=full_low, full_high=full_high,
            jitter_rng=rng if cfg.jitter else None,
        )
        target = view.image[vs, us].astype(np.float32)
        loss = mse_loss(rgb, target)
    weights.zero_grad()
    ad.backward(graph, loss)
    grads = {
        k: t.grad if t.grad is not None else np.zeros_like(t.data)
        for k, t in weights.tensors.items()
    }
    ad.adam_step(weights.arrays, grads, state, lr=lr_at(cfg, it), t=it + 1)
    return float(loss.data)


def train(ds, cfg: TrainConfig, out_dir, weights: WeightStore | None = None,
          log=print):
    """Run the full loop; writes checkpoints and a loss CSV under out_dir.

    Returns the trained WeightStore.  Deterministic for a fixed config, seed
    and dataset.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if weights is None:
        weights = WeightStore(init_weights(cfg.seed))
    state = ad.AdamState()
    rng = np.random.default_rng(cfg.seed)
    csv_path = out_dir / "metrics.csv"
    t_start = time.perf_counter()
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss", "lr"])
        for it in range(cfg.iters):
            loss = train_step(ds, weights, state, cfg, rng, it)
            writer.writerow([it, f"{loss:.6e}", f"{lr_at(cfg, it):.6e}"])
            if log and (it % cfg.log_every == 0 or it == cfg.iters - 1):
                dt = time.perf_counter() - t_start
                log(f"iter {it:5d}  loss {loss:.5f}  lr {lr_at(cfg, it):.2e}  {dt:6.1f}s")
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"weights_{it + 1:06d}.ckpt", weights)
    save_checkpoint(out_dir / "weights_final.ckpt", weights)
    return weights
