/**
 * Render service client with latest-wins pose submission.
 *
 * At most one pose is in flight; a newer pose requested while waiting
 * replaces the queued one, so a burst of camera motion costs a single
 * render when it settles.  Sequence numbers increase monotonically per
 * connection, as the server requires.
 */

import {
  decodeFrame,
  encodePose,
  Frame,
  parseServerText,
  PoseMessage,
  SceneMessage,
  StatsMessage,
} from "./protocol.js";
import { Pose } from "./orbit.js";

export interface RenderRequest {
  pose: Pose;
  width: number;
  height: number;
  mode: "guided" | "uniform";
  nSamples: number;
  requestDepth: boolean;
}

export interface ClientHooks {
  onScene?: (scene: SceneMessage) => void;
  onFrame?: (frame: Frame) => void;
  onStats?: (stats: StatsMessage) => void;
  onError?: (reason: string) => void;
  onClose?: () => void;
}

/** Minimal structural WebSocket type so tests can inject the `ws` package. */
export interface SocketLike {
  binaryType: string;
  send(data: string): void;
  close(): void;
  addEventListener(type: string, fn: (ev: any) => void): void;
}

export type SocketFactory = (url: string) => SocketLike;

export class RenderClient {
  private seq = 0;
  private inFlight = false;
  private queued: RenderRequest | null = null;
  private sock: SocketLike;
  scene: SceneMessage | null = null;

  constructor(
    url: string,
    private readonly hooks: ClientHooks = {},
    factory?: SocketFactory,
  ) {
    const make: SocketFactory =
      factory ?? ((u) => new WebSocket(u) as unknown as SocketLike);
    this.sock = make(url);
    this.sock.binaryType = "arraybuffer";
    this.sock.addEventListener("message", (ev: any) => this.onMessage(ev.data));
    this.sock.addEventListener("close", () => this.hooks.onClose?.());
    this.sock.addEventListener("error", () =>
      this.hooks.onError?.("socket error"),
    );
  }

  /** Submit a render request; coalesces with any not-yet-sent request. */
  request(req: RenderRequest): void {
    if (this.inFlight) {
      this.queued = req;
      return;
    }
    this.sendNow(req);
  }

  close(): void {
    this.sock.close();
  }

  private sendNow(req: RenderRequest): void {
    this.seq += 1;
    const msg: PoseMessage = {
      type: "pose",
      seq: this.seq,
      K: req.pose.K,
      R: req.pose.R,
      t: req.pose.t,
      width: req.width,
      height: req.height,
      mode: req.mode,
      n_samples: req.nSamples,
      request_depth: req.requestDepth,
    };
    this.inFlight = true;
    this.sock.send(encodePose(msg));
  }

  private settle(): void {
    this.inFlight = false;
    if (this.queued !== null) {
      const next = this.queued;
      this.queued = null;
      this.sendNow(next);
    }
  }

  private onMessage(data: string | ArrayBuffer): void {
    if (typeof data !== "string") {
      this.hooks.onFrame?.(decodeFrame(data));
      return;
    }
    const msg = parseServerText(data);
    if (msg.type === "scene") {
      this.scene = msg;
      this.hooks.onScene?.(msg);
    } else if (msg.type === "stats") {
      this.settle();
      this.hooks.onStats?.(msg);
    } else {
      // an error reply also terminates the in-flight request
      this.settle();
      this.hooks.onError?.(msg.reason);
    }
  }
}
