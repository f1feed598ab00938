/**
 * Wire types for the render service.
 *
 * Client -> server poses are JSON text; server -> client frames are binary:
 * a 17-byte little-endian header (u64 seq, u32 width, u32 height, u8
 * channels) followed by row-major u8 pixels, 3 channels for RGB or 4 when
 * an 8-bit depth plane is appended.
 */

export interface PoseMessage {
  type: "pose";
  seq: number;
  K: number[]; // row-major 3x3
  R: number[]; // row-major 3x3 world-to-camera rotation
  t: number[]; // translation, x_cam = R x + t
  width: number;
  height: number;
  mode: "guided" | "uniform";
  n_samples: number;
  request_depth: boolean;
}

export interface SceneMessage {
  type: "scene";
  width: number;
  height: number;
  near: number;
  far: number;
  center: [number, number, number];
}

export interface StatsMessage {
  type: "stats";
  seq: number;
  render_ms: number;
  mode: string;
  n_samples: number;
}

export interface ErrorMessage {
  type: "error";
  reason: string;
}

export type ServerText = SceneMessage | StatsMessage | ErrorMessage;

export interface Frame {
  seq: number;
  width: number;
  height: number;
  channels: number;
  /** row-major u8, [height * width * channels] */
  pixels: Uint8Array;
}

export const HEADER_BYTES = 17;

export function encodePose(msg: PoseMessage): string {
  return JSON.stringify(msg);
}

export function parseServerText(raw: string): ServerText {
  const msg = JSON.parse(raw);
  if (
    typeof msg !== "object" ||
    msg === null ||
    !["scene", "stats", "error"].includes(msg.type)
  ) {
    throw new Error(`unexpected server message: ${raw.slice(0, 120)}`);
  }
  return msg as ServerText;
}

export function decodeFrame(buf: ArrayBuffer): Frame {
  if (buf.byteLength < HEADER_BYTES) {
    throw new Error(`frame too short: ${buf.byteLength} bytes`);
  }
  const view = new DataView(buf);
  const seqBig = view.getBigUint64(0, true);
  if (seqBig > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new Error("sequence number exceeds the safe integer range");
  }
  const width = view.getUint32(8, true);
  const height = view.getUint32(12, true);
  const channels = view.getUint8(16);
  const expect = width * height * channels;
  const got = buf.byteLength - HEADER_BYTES;
  if (got !== expect) {
    throw new Error(`payload length ${got} != ${expect}`);
  }
  return {
    seq: Number(seqBig),
    width,
    height,
    channels,
    pixels: new Uint8Array(buf, HEADER_BYTES),
  };
}

/** Expand a frame into RGBA bytes for a canvas ImageData buffer. */
export function frameToRGBA(frame: Frame, showDepth = false): Uint8ClampedArray<ArrayBuffer> {
  const n = frame.width * frame.height;
  const out = new Uint8ClampedArray(n * 4);
  const c = frame.channels;
  for (let i = 0; i < n; i++) {
    if (showDepth && c === 4) {
      const d = frame.pixels[i * c + 3];
      out[i * 4] = d;
      out[i * 4 + 1] = d;
      out[i * 4 + 2] = d;
    } else {
      out[i * 4] = frame.pixels[i * c];
      out[i * 4 + 1] = frame.pixels[i * c + 1];
      out[i * 4 + 2] = frame.pixels[i * c + 2];
    }
    out[i * 4 + 3] = 255;
  }
  return out;
}
