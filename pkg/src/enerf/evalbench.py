"""Image/depth quality metrics and the sampling-strategy benchmark."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .renderer import render_image


class EvalError(ValueError):
    pass


def psnr(pred, ref, peak=1.0):
    """Peak signal-to-noise ratio in dB, capped at 99 for identical images."""
    pred = np.asarray(pred, np.float64)
    ref = np.asarray(ref, np.float64)
    if pred.shape != ref.shape:
        raise EvalError(f"psnr: shape mismatch {pred.shape} vs {ref.shape}")
    mse = float(np.mean((pred - ref) ** 2))
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _filter2_sep(img, k):
    # separable valid-mode correlation
    pad = len(k) // 2
    out = np.apply_along_axis(lambda row: np.convolve(row, k, mode="valid"), 1, img)
    out = np.apply_along_axis(lambda col: np.convolve(col, k, mode="valid"), 0, out)
    return out


def ssim(pred, ref, window=11, sigma=1.5, peak=1.0):
    """Structural similarity with a Gaussian window; color inputs use the
    channel mean as luminance."""
    pred = np.asarray(pred, np.float64)
    ref = np.asarray(ref, np.float64)
    if pred.shape != ref.shape:
        raise EvalError(f"ssim: shape mismatch {pred.shape} vs {ref.shape}")
    if pred.ndim == 3:
        pred = pred.mean(axis=2)
        ref = ref.mean(axis=2)
    h, w = pred.shape
    if h < window or w < window:
        raise EvalError(f"ssim: image {h}x{w} smaller than window {window}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    k = _gaussian_kernel(window, sigma)
    mu_x = _filter2_sep(pred, k)
    mu_y = _filter2_sep(ref, k)
    xx = _filter2_sep(pred * pred, k) - mu_x ** 2
    yy = _filter2_sep(ref * ref, k) - mu_y ** 2
    xy = _filter2_sep(pred * ref, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def depth_metrics(pred, gt, mask=None, near=None, far=None, thresholds=None):
    """Mean/median absolute depth error and accuracy-at-threshold fractions.

    mask selects pixels with valid ground truth (default: gt > 0).  Default
    thresholds are 2% and 10% of the depth range when near/far are given.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if mask is None:
        mask = gt > 0
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise EvalError("depth_metrics: empty validity mask")
    err = np.abs(pred[mask] - gt[mask])
    if thresholds is None:
        if near is None or far is None:
            raise EvalError("depth_metrics: need thresholds or near/far")
        rng = far - near
        thresholds = (0.02 * rng, 0.10 * rng)
    out = {
        "abs_err_mean": float(err.mean()),
        "abs_err_median": float(np.median(err)),
        "n_valid": int(mask.sum()),
    }
    for tau in thresholds:
        out[f"acc@{tau:.4g}"] = float((err < tau).mean())
    return out


BENCH_CONFIGS = {
    "guided-2": dict(mode="guided", n_k=2, predictor="cascade"),
    "uniform-128": dict(mode="uniform", n_uniform=128, predictor="cascade"),
    "uniform-2": dict(mode="uniform", n_uniform=2, predictor="cascade"),
    "single-guided-2": dict(mode="guided", n_k=2, predictor="single"),
}


def benchmark_sampling(ds, weights, test_id=None, n_views=3, warmup=3,
                       repeats=20, out_path=None, configs=None):
    """Render-quality and radiance-phase timing comparison across sampling
    strategies, on one held-out view.

    For each config: one metric render (PSNR/SSIM vs ground truth), then
    ``warmup`` discarded renders and ``repeats`` timed ones.  The report
    flags configs whose timing coefficient of variation reaches 15%.
    """
    if repeats < 2:
        raise EvalError("benchmark_sampling: need at least 2 timed repeats")
    if test_id is None:
        test_id = ds.test_ids[0]
    view = ds.views[test_id]
    gt = view.image
    report = {"test_view": int(test_id), "repeats": repeats, "configs": {}}
    for name, kw in (configs or BENCH_CONFIGS).items():
        out = render_image(ds, weights, view.camera, n_views=n_views, **kw)
        times, totals = [], []
        for i in range(warmup + repeats):
            r = render_image(ds, weights, view.camera, n_views=n_views, **kw)
            if i >= warmup:
                times.append(r.stats.ms_radiance)
                totals.append(r.stats.ms_features + r.stats.ms_volume
                              + r.stats.ms_radiance)
        times = np.asarray(times)
        mean_ms = float(times.mean())
        cv = float(times.std(ddof=1) / mean_ms)
        report["configs"][name] = {
            "psnr": psnr(out.image, gt),
            "ssim": ssim(out.image, gt),
            "ms_radiance_mean": mean_ms,
            "ms_radiance_cv": cv,
            "ms_total_mean": float(np.mean(totals)),
            "cv_flag": cv >= 0.15,
            "ms_features": out.stats.ms_features,
            "ms_volume": out.stats.ms_volume,
            "n_samples": out.stats.n_samples_total,
        }
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2))
    return report
