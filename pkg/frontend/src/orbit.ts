/**
 * Orbit camera state and its conversion to an explicit K/R/t pose.
 *
 * The math mirrors the server-side orbit pose exactly: the camera sits at
 * target + radius * [cos(el)cos(az), cos(el)sin(az), sin(el)] and looks at
 * the target with +z up and a 50 degree vertical field of view.  Sending
 * explicit matrices keeps the wire format independent of client-side math.
 */

export interface OrbitState {
  azimuthDeg: number;
  elevationDeg: number;
  radius: number;
  target: [number, number, number];
}

export interface Pose {
  K: number[]; // row-major 3x3
  R: number[]; // row-major 3x3
  t: number[];
}

export const VFOV_DEG = 50.0;
export const MIN_RADIUS = 0.05;
export const MAX_ELEVATION_DEG = 89.0;

type Vec3 = [number, number, number];

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function unit(a: Vec3): Vec3 {
  const n = norm(a);
  return [a[0] / n, a[1] / n, a[2] / n];
}

export function clampOrbit(s: OrbitState): OrbitState {
  return {
    azimuthDeg: s.azimuthDeg,
    elevationDeg: Math.max(
      -MAX_ELEVATION_DEG,
      Math.min(MAX_ELEVATION_DEG, s.elevationDeg),
    ),
    radius: Math.max(MIN_RADIUS, s.radius),
    target: s.target,
  };
}

export function orbitPosition(s: OrbitState): Vec3 {
  const az = (s.azimuthDeg * Math.PI) / 180;
  const el = (s.elevationDeg * Math.PI) / 180;
  return [
    s.target[0] + s.radius * Math.cos(el) * Math.cos(az),
    s.target[1] + s.radius * Math.cos(el) * Math.sin(az),
    s.target[2] + s.radius * Math.sin(el),
  ];
}

/** world-to-camera pose looking from `pos` at `target`, +z world up. */
export function lookAtPose(
  pos: Vec3,
  target: Vec3,
  vfovDeg: number,
  width: number,
  height: number,
): Pose {
  const z = unit(sub(target, pos));
  let x = cross(z, [0, 0, 1]);
  if (norm(x) < 1e-9) {
    x = cross(z, [0, 1, 0]);
  }
  x = unit(x);
  const y = cross(z, x);
  const R = [...x, ...y, ...z];
  const t = [
    -(R[0] * pos[0] + R[1] * pos[1] + R[2] * pos[2]),
    -(R[3] * pos[0] + R[4] * pos[1] + R[5] * pos[2]),
    -(R[6] * pos[0] + R[7] * pos[1] + R[8] * pos[2]),
  ];
  const f = (0.5 * height) / Math.tan(((vfovDeg * Math.PI) / 180) / 2);
  const K = [f, 0, (width - 1) / 2, 0, f, (height - 1) / 2, 0, 0, 1];
  return { K, R, t };
}

export function poseFromOrbit(
  s: OrbitState,
  width: number,
  height: number,
): Pose {
  const c = clampOrbit(s);
  return lookAtPose(orbitPosition(c), c.target, VFOV_DEG, width, height);
}
