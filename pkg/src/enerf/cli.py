"""Command line entry point: gen-scene, train, render, eval, bench, serve.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage error.
A ``--config file.json`` merges values under explicitly passed flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


class UsageError(ValueError):
    pass


def parse_pose(spec, ds):
    """Camera from a pose spec: ``view:<id>`` or ``orbit:<az>,<el>,<radius>``.

    Orbit angles are degrees; the camera circles the point nearest all
    dataset camera axes, with the dataset resolution, near/far and a 50
    degree vertical FOV.
    """
    from .geometry import nearest_axis_point

    kind, _, rest = spec.partition(":")
    if kind == "view":
        try:
            vid = int(rest)
        except ValueError:
            raise UsageError(f"pose: view id '{rest}' is not an integer") from None
        if not 0 <= vid < len(ds.views):
            raise UsageError(f"pose: view id {vid} out of range 0..{len(ds.views) - 1}")
        return ds.views[vid].camera
    if kind == "orbit":
        parts = rest.split(",")
        if len(parts) != 3:
            raise UsageError("pose: orbit needs azimuth_deg,elevation_deg,radius")
        try:
            az, el, radius = (float(p) for p in parts)
        except ValueError:
            raise UsageError(f"pose: non-numeric orbit parameter in '{rest}'") from None
        if radius <= 0:
            raise UsageError("pose: orbit radius must be positive")
        el = float(np.clip(el, -89.0, 89.0))
        center = nearest_axis_point([v.camera for v in ds.views])
        return orbit_camera(az, el, radius, center, ds)
    raise UsageError(f"pose: unknown kind '{kind}' (expected view: or orbit:)")


def orbit_camera(az_deg, el_deg, radius, target, ds, width=None, height=None):
    from .scenegen import look_at_camera

    az = np.deg2rad(az_deg)
    el = np.deg2rad(el_deg)
    pos = np.asarray(target, dtype=np.float64) + radius * np.array(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
    )
    ref = ds.views[0].camera
    return look_at_camera(
        pos, np.asarray(target, dtype=np.float64), 50.0,
        width or ref.width, height or ref.height, ds.near, ds.far,
    )


def _quantize_u8(img):
    """Round-half-up quantization of [0,1] floats to u8."""
    return np.clip(np.floor(np.asarray(img, np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _build_parser():
    p = argparse.ArgumentParser(prog="enerf", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", type=str, default=None,
                        help="JSON file whose keys fill in unset flags")
        sp.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (1 keeps runs deterministic)")

    g = sub.add_parser("gen-scene", help="render a procedural multi-view dataset")
    g.add_argument("--preset", default="plane-sphere", help="plane-sphere | micro")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", default=None, help="WxH, e.g. 64x64")
    common(g)

    t = sub.add_parser("train", help="optimize weights on a dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory (checkpoints, metrics)")
    t.add_argument("--iters", type=int, default=5000)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--halve-every", type=int, default=0, help="0 = iters/4")
    t.add_argument("--n-rays", type=int, default=512)
    t.add_argument("--n-views", type=int, default=3)
    t.add_argument("--n-k", type=int, default=2)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-every", type=int, default=1000)
    common(t)

    r = sub.add_parser("render", help="render one frame from a checkpoint")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--pose", required=True, help="view:<id> or orbit:az,el,radius")
    r.add_argument("--out", required=True, help="output PNG")
    r.add_argument("--mode", choices=["guided", "uniform"], default="guided")
    r.add_argument("--n-samples", type=int, default=0, help="0 = 2 guided / 64 uniform")
    r.add_argument("--n-views", type=int, default=3)
    r.add_argument("--depth-out", default=None, help="optional PFM for rendered depth")
    common(r)

    e = sub.add_parser("eval", help="metrics on the held-out split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", default=None, help="optional JSON report path")
    e.add_argument("--n-views", type=int, default=3)
    common(e)

    b = sub.add_parser("bench", help="sampling-strategy benchmark")
    b.add_argument("--data", required=True)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--out", default=None, help="optional JSON report path")
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--n-views", type=int, default=3)
    common(b)

    s = sub.add_parser("serve", help="WebSocket render service")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--addr", default="127.0.0.1:9090")
    s.add_argument("--n-views", type=int, default=3)
    common(s)
    return p


def _merge_config(parser, argv):
    """Load --config JSON and install it as defaults, so explicit flags win."""
    ns, _ = parser.parse_known_args(argv)
    path = getattr(ns, "config", None)
    if not path:
        return parser.parse_args(argv)
    try:
        overrides = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--config {path}: {exc}") from None
    if not isinstance(overrides, dict):
        raise UsageError(f"--config {path}: top level must be an object")
    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    sp = sub_actions[0].choices[ns.cmd]
    known = {a.dest for a in sp._actions}
    clean = {k.replace("-", "_"): v for k, v in overrides.items()}
    unknown = set(clean) - known
    if unknown:
        raise UsageError(f"--config {path}: unknown keys {sorted(unknown)}")
    sp.set_defaults(**clean)
    return parser.parse_args(argv)


def _limit_threads(n):
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=max(1, n))
    except ImportError:
        pass


def _cmd_gen_scene(args):
    from .scenegen import preset, generate_scene, save_dataset

    res = None
    if args.resolution:
        try:
            w, h = (int(x) for x in args.resolution.lower().split("x"))
        except ValueError:
            raise UsageError(f"--resolution '{args.resolution}' is not WxH") from None
        res = (w, h)
    spec = preset(args.preset, resolution=res, seed=args.seed)
    ds = generate_scene(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.views)} views to {args.out}")
    return 0


def _cmd_train(args):
    from .scenegen import load_dataset
    from .trainer import TrainConfig, train

    ds = load_dataset(args.data)
    cfg = TrainConfig(
        iters=args.iters, lr=args.lr, halve_every=args.halve_every,
        n_rays=args.n_rays, n_views=args.n_views, n_k=args.n_k,
        seed=args.seed, checkpoint_every=args.checkpoint_every,
    )
    train(ds, cfg, args.out)
    print(f"finished {cfg.iters} iters; weights in {args.out}")
    return 0


def _load_weights(path):
    from .networks import WeightStore, load_checkpoint

    return WeightStore(load_checkpoint(path))


def _cmd_render(args):
    from PIL import Image

    from .renderer import render_image
    from .scenegen import load_dataset, write_pfm

    ds = load_dataset(args.data)
    weights = _load_weights(args.checkpoint)
    cam = parse_pose(args.pose, ds)
    n_k = args.n_samples or 2
    n_uniform = args.n_samples or 64
    out = render_image(
        ds, weights, cam, mode=args.mode, n_k=n_k, n_uniform=n_uniform,
        n_views=args.n_views,
    )
    Image.fromarray(_quantize_u8(out.image)).save(args.out)
    if args.depth_out:
        write_pfm(args.depth_out, out.depth_nerf.astype(np.float32))
    s = out.stats
    print(
        f"rendered {cam.width}x{cam.height} ({args.mode}): features "
        f"{s.ms_features:.1f}ms volume {s.ms_volume:.1f}ms radiance {s.ms_radiance:.1f}ms"
    )
    return 0


def _cmd_eval(args):
    from .evalbench import depth_metrics, psnr, ssim
    from .renderer import render_image
    from .scenegen import load_dataset

    ds = load_dataset(args.data)
    weights = _load_weights(args.checkpoint)
    rows = []
    for tid in ds.test_ids:
        view = ds.views[tid]
        out = render_image(ds, weights, view.camera, n_views=args.n_views)
        row = {
            "view": int(tid),
            "psnr": psnr(out.image, view.image),
            "ssim": ssim(out.image, view.image),
        }
        covered = view.gt_depth > 0
        if covered.any():
            row["depth"] = depth_metrics(
                out.depth_mvs, view.gt_depth, covered, ds.near, ds.far
            )
        rows.append(row)
        print(f"view {tid}: psnr {row['psnr']:.2f} dB  ssim {row['ssim']:.4f}")
    report = {
        "per_view": rows,
        "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
        "ssim_mean": float(np.mean([r["ssim"] for r in rows])),
    }
    print(f"mean: psnr {report['psnr_mean']:.2f} dB  ssim {report['ssim_mean']:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return 0


def _cmd_bench(args):
    from .evalbench import benchmark_sampling
    from .scenegen import load_dataset

    ds = load_dataset(args.data)
    weights = _load_weights(args.checkpoint)
    report = benchmark_sampling(
        ds, weights, n_views=args.n_views, repeats=args.repeats, out_path=args.out
    )
    for name, row in report["configs"].items():
        flag = "  [noisy]" if row["cv_flag"] else ""
        print(
            f"{name:16s} psnr {row['psnr']:6.2f}  radiance "
            f"{row['ms_radiance_mean']:8.1f}ms  cv {row['ms_radiance_cv']:.3f}{flag}"
        )
    return 0


def _cmd_serve(args):
    from .server import run_server
    from .scenegen import load_dataset

    host, _, port = args.addr.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"--addr '{args.addr}' is not host:port")
    ds = load_dataset(args.data)
    weights = _load_weights(args.checkpoint)
    run_server(ds, weights, host, int(port), n_views=args.n_views)
    return 0


_COMMANDS = {
    "gen-scene": _cmd_gen_scene,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "serve": _cmd_serve,
}


def run(argv=None):
    parser = _build_parser()
    try:
        args = _merge_config(parser, argv if argv is not None else sys.argv[1:])
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _limit_threads(args.threads)
    try:
        return _COMMANDS[args.cmd](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
