"""WebSocket render service for interactively supplied camera poses.

Protocol (all integers little-endian):
  client -> server, text: {"type": "pose", "seq": u64, "K": [9], "R": [9],
      "t": [3], "width": int, "height": int, "mode": "guided"|"uniform",
      "n_samples": int, "request_depth": bool}
  server -> client, on connect, text: {"type": "scene", "width", "height",
      "near", "far", "center": [3]} so a client can seed its orbit state.
  server -> client, binary FrameMessage: u64 seq, u32 width, u32 height,
      u8 channels (3 = rgb, 4 = rgb + depth8), payload row-major bytes;
      followed by text {"type": "stats", "seq", "render_ms", "mode",
      "n_samples"}.
  errors, text: {"type": "error", "reason": str}; the connection stays open.

Per client at most one pending pose is kept: a newer pose overwrites an
unrendered one (latest-wins), and frames go out in strictly increasing seq
order.
"""

from __future__ import annotations

import asyncio
import json
import struct
import time

import numpy as np

from .geometry import Camera, GeometryError, nearest_axis_point
from .renderer import SourceCache, render_image

MAX_PIXELS = 512 * 512


class ProtocolError(ValueError):
    pass


def quantize_u8(x):
    """Round-half-up quantization of [0,1] floats to u8."""
    return np.clip(np.floor(np.asarray(x, np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_frame(out, seq, near, far, request_depth=False):
    """Binary FrameMessage bytes for a RenderOutput."""
    h, w = out.image.shape[:2]
    rgb = quantize_u8(out.image)
    if request_depth:
        norm = np.clip((out.depth_nerf - near) / (far - near), 0.0, 1.0)
        depth8 = np.clip(np.floor(norm * 255.0 + 0.5), 0, 255).astype(np.uint8)
        payload = np.concatenate([rgb, depth8[:, :, None]], axis=2)
        channels = 4
    else:
        payload = rgb
        channels = 3
    header = struct.pack("<QIIB", seq, w, h, channels)
    return header + payload.tobytes()


def decode_frame(buf):
    """Inverse of encode_frame framing; returns (seq, [H,W,C] u8 array)."""
    if len(buf) < 17:
        raise ProtocolError(f"frame too short: {len(buf)} bytes")
    seq, w, h, channels = struct.unpack("<QIIB", buf[:17])
    expect = w * h * channels
    if len(buf) - 17 != expect:
        raise ProtocolError(f"payload length {len(buf) - 17} != {expect}")
    return seq, np.frombuffer(buf[17:], np.uint8).reshape(h, w, channels)


def parse_pose_message(raw, near, far):
    """Validate a pose message; returns (seq, Camera, mode, n_samples, depth)."""
    try:
        msg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"invalid JSON: {exc}") from None
    if not isinstance(msg, dict) or msg.get("type") != "pose":
        raise ProtocolError("expected a message with type 'pose'")
    try:
        seq = int(msg["seq"])
        K = np.asarray(msg["K"], np.float64).reshape(3, 3)
        R = np.asarray(msg["R"], np.float64).reshape(3, 3)
        t = np.asarray(msg["t"], np.float64).reshape(3)
        width = int(msg["width"])
        height = int(msg["height"])
        mode = str(msg["mode"])
        n_samples = int(msg["n_samples"])
        request_depth = bool(msg.get("request_depth", False))
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad pose fields: {exc}") from None
    if mode not in ("guided", "uniform"):
        raise ProtocolError(f"unknown mode '{mode}'")
    if n_samples < 1:
        raise ProtocolError("n_samples must be >= 1")
    if width * height > MAX_PIXELS:
        raise ProtocolError(f"{width}x{height} exceeds the {MAX_PIXELS}-pixel cap")
    try:
        cam = Camera(K, R, t, width, height, near, far)
    except GeometryError as exc:
        raise ProtocolError(f"bad camera: {exc}") from None
    return seq, cam, mode, n_samples, request_depth


class RenderService:
    """Shared read-only state plus the single render executor."""

    def __init__(self, ds, weights, n_views=3):
        self.ds = ds
        self.weights = weights
        self.n_views = n_views
        self.cache = SourceCache(ds, weights)
        self.center = nearest_axis_point([v.camera for v in ds.views])
        # one render at a time process-wide; poses queue per client
        self.render_lock = asyncio.Lock()

    def scene_message(self):
        ref = self.ds.views[0].camera
        return json.dumps(
            {
                "type": "scene",
                "width": ref.width,
                "height": ref.height,
                "near": self.ds.near,
                "far": self.ds.far,
                "center": [float(x) for x in self.center],
            }
        )

    def render(self, cam, mode, n_samples):
        return render_image(
            self.ds, self.weights, cam, mode=mode, n_k=n_samples,
            n_uniform=n_samples, n_views=self.n_views, cache=self.cache,
        )

    async def handle_client(self, ws):
        pending = {}
        wake = asyncio.Event()
        closed = False

        async def receiver():
            nonlocal closed
            async for raw in ws:
                if isinstance(raw, bytes):
                    await ws.send(json.dumps(
                        {"type": "error", "reason": "binary messages not accepted"}
                    ))
                    continue
                try:
                    parsed = parse_pose_message(raw, self.ds.near, self.ds.far)
                except ProtocolError as exc:
                    await ws.send(json.dumps({"type": "error", "reason": str(exc)}))
                    continue
                pending["pose"] = parsed  # latest-wins overwrite
                wake.set()
            closed = True
            wake.set()

        async def renderer():
            last_seq = -1
            while True:
                await wake.wait()
                wake.clear()
                if closed:
                    return
                parsed = pending.pop("pose", None)
                if parsed is None:
                    continue
                seq, cam, mode, n_samples, request_depth = parsed
                if seq <= last_seq:
                    await ws.send(json.dumps(
                        {"type": "error", "reason": f"seq {seq} not increasing"}
                    ))
                    continue
                t0 = time.perf_counter()
                async with self.render_lock:
                    out = await asyncio.to_thread(self.render, cam, mode, n_samples)
                render_ms = (time.perf_counter() - t0) * 1000.0
                last_seq = seq
                await ws.send(encode_frame(out, seq, self.ds.near, self.ds.far, request_depth))
                await ws.send(json.dumps(
                    {
                        "type": "stats",
                        "seq": seq,
                        "render_ms": render_ms,
                        "mode": mode,
                        "n_samples": n_samples,
                    }
                ))

        await ws.send(self.scene_message())
        recv_task = asyncio.create_task(receiver())
        render_task = asyncio.create_task(renderer())
        try:
            await asyncio.gather(recv_task, render_task)
        finally:
            recv_task.cancel()
            render_task.cancel()


async def serve(ds, weights, host="127.0.0.1", port=9090, n_views=3,
                ready: asyncio.Event | None = None):
    """Run the service until cancelled."""
    import websockets

    service = RenderService(ds, weights, n_views=n_views)
    async with websockets.serve(service.handle_client, host, port, max_size=2 ** 23):
        if ready is not None:
            ready.set()
        await asyncio.Future()


def run_server(ds, weights, host="127.0.0.1", port=9090, n_views=3):
    print(f"serving on ws://{host}:{port}")
    asyncio.run(serve(ds, weights, host, port, n_views=n_views))
