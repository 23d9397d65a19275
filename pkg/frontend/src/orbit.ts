/** Orbit camera state and its conversion to camera-from-world poses.
 *
 * The world convention matches the render server: +Y is the down axis (image
 * rows grow along +Y), and azimuth 0 / elevation 0 places the camera on the
 * -Z side of the target looking toward +Z. Positive elevation raises the
 * camera (moves it toward -Y).
 */

export interface OrbitState {
  target: [number, number, number];
  azimuth: number;
  elevation: number;
  distance: number;
  /** Next frame id to stamp on an outgoing pose. */
  fid: number;
}

/** Keep-away margin from the poles, where the view axis would align with
 * the world vertical and the pose would lose its roll reference. */
export const ELEVATION_EPS = 1e-4;

/** Orbit radius floor; the server rejects cameras at or behind its near
 * plane (1e-4), so stay comfortably outside it. */
export const MIN_DISTANCE = 1e-3;

export interface PoseBody {
  R: number[];
  T: number[];
}

const HALF_PI = Math.PI / 2;

export function clampOrbit(state: OrbitState): OrbitState {
  return {
    ...state,
    elevation: Math.min(HALF_PI - ELEVATION_EPS,
      Math.max(-HALF_PI + ELEVATION_EPS, state.elevation)),
    distance: Math.max(MIN_DISTANCE, state.distance),
  };
}

/** Unit direction from the target toward the camera. */
function orbitDirection(azimuth: number, elevation: number): [number, number, number] {
  const ce = Math.cos(elevation);
  return [
    Math.sin(azimuth) * ce,
    -Math.sin(elevation),
    -Math.cos(azimuth) * ce,
  ];
}

function cross(a: number[], b: number[]): [number, number, number] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(v: [number, number, number]): [number, number, number] {
  const n = Math.hypot(v[0], v[1], v[2]);
  if (n === 0) {
    throw new Error("cannot normalize a zero vector");
  }
  return [v[0] / n, v[1] / n, v[2] / n];
}

/** Camera-from-world pose for an orbit state: row-major rotation R (rows are
 * the camera x, y, z axes) and translation T = -R * eye. The rotation is
 * orthonormal to well under 1e-9 everywhere inside the clamp limits. */
export function orbitToPose(state: OrbitState): PoseBody {
  const s = clampOrbit(state);
  const dir = orbitDirection(s.azimuth, s.elevation);
  const eye = [
    s.target[0] + s.distance * dir[0],
    s.target[1] + s.distance * dir[1],
    s.target[2] + s.distance * dir[2],
  ];
  const z: [number, number, number] = [-dir[0], -dir[1], -dir[2]];
  const down = [0, 1, 0];
  const x = normalize(cross(down, z));
  const y = cross(z, x);
  const R = [...x, ...y, ...z];
  const T = [
    -(R[0] * eye[0] + R[1] * eye[1] + R[2] * eye[2]),
    -(R[3] * eye[0] + R[4] * eye[1] + R[5] * eye[2]),
    -(R[6] * eye[0] + R[7] * eye[1] + R[8] * eye[2]),
  ];
  return { R, T };
}

export interface OrbitHint {
  azimuth: number;
  elevation: number;
  distance: number;
  target?: number[];
}

/** Starting state from the server's /meta orbit hint. */
export function orbitFromHint(hint: OrbitHint): OrbitState {
  const t = hint.target ?? [0, 0, 0];
  return clampOrbit({
    target: [t[0] ?? 0, t[1] ?? 0, t[2] ?? 0],
    azimuth: hint.azimuth,
    elevation: hint.elevation,
    distance: hint.distance,
    fid: 0,
  });
}
