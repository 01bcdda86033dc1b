/**
 * Per-view directional prompt composition.
 *
 * The engine appends a view-direction keyword to the base prompt before a
 * request goes on the wire; this module is the adapter-side twin of that
 * rule so standalone clients compose identical prompts.
 */

export interface CameraPose {
  /** Camera center in world space; the rig looks at the origin. */
  center: readonly [number, number, number];
}

/** Recover (azimuth, elevation) in radians from a rig camera's center. */
export function cameraAzimuthElevation(pose: CameraPose): [number, number] {
  const [x, y, z] = pose.center;
  const r = Math.hypot(x, y, z);
  if (r < 1e-12) {
    throw new Error("camera at the origin has no azimuth");
  }
  return [Math.atan2(y, x), Math.asin(Math.min(1, Math.max(-1, z / r)))];
}

const DEG = 180 / Math.PI;

/**
 * Append the view-direction keyword for this camera to a base prompt.
 *
 * Buckets (exhaustive): elevation above 30 degrees is "top view";
 * otherwise azimuth, measured counterclockwise from +x and wrapped into
 * [0, 360), buckets as front [315, 360) + [0, 45), left side [45, 135),
 * back [135, 225) and right side [225, 315).
 */
export function directionalPrompt(base: string, pose: CameraPose): string {
  const [az, el] = cameraAzimuthElevation(pose);
  let keyword: string;
  if (el * DEG > 30.0) {
    keyword = "top view";
  } else {
    const deg = ((az * DEG) % 360 + 360) % 360;
    if (deg >= 315.0 || deg < 45.0) {
      keyword = "front view";
    } else if (deg < 135.0) {
      keyword = "left side view";
    } else if (deg < 225.0) {
      keyword = "back view";
    } else {
      keyword = "right side view";
    }
  }
  return `${base}, ${keyword}`;
}

/**
 * Camera centers of the engine's default rig, in its deterministic order:
 * `equatorial` cameras at even azimuth steps from +x, then `elevated` more
 * at `elevationDeg` above the equator, also at even azimuth steps.
 */
export function rigPoses(
  radius: number,
  equatorial = 8,
  elevated = 2,
  elevationDeg = 45.0,
): CameraPose[] {
  if (radius <= 0) {
    throw new Error("rig radius must be positive");
  }
  const specs: Array<[number, number]> = [];
  for (let k = 0; k < equatorial; k++) {
    specs.push([(2 * Math.PI * k) / Math.max(equatorial, 1), 0]);
  }
  for (let k = 0; k < elevated; k++) {
    specs.push([(2 * Math.PI * k) / Math.max(elevated, 1), elevationDeg / DEG]);
  }
  return specs.map(([az, el]) => ({
    center: [
      radius * Math.cos(az) * Math.cos(el),
      radius * Math.sin(az) * Math.cos(el),
      radius * Math.sin(el),
    ] as const,
  }));
}
