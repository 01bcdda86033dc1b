import { describe, expect, it } from "vitest";

import { cameraAzimuthElevation, directionalPrompt, rigPoses } from "../src/prompts.js";

const BASE = "weathered bronze statue";

describe("directional prompt buckets", () => {
  it("matches the keyword table for all 10 default rig cameras", () => {
    // Default rig: 8 equatorial cameras at 45-degree azimuth steps from +x,
    // then 2 cameras elevated 45 degrees at azimuths 0 and 180.
    const poses = rigPoses(2.0);
    const got = poses.map((p) => directionalPrompt(BASE, p));
    expect(got).toEqual([
      `${BASE}, front view`,
      `${BASE}, left side view`,
      `${BASE}, left side view`,
      `${BASE}, back view`,
      `${BASE}, back view`,
      `${BASE}, right side view`,
      `${BASE}, right side view`,
      `${BASE}, front view`,
      `${BASE}, top view`,
      `${BASE}, top view`,
    ]);
  });

  it("azimuth 0 equatorial is the front view", () => {
    expect(directionalPrompt(BASE, { center: [3, 0, 0] })).toBe(`${BASE}, front view`);
  });

  it("azimuth 180 is the back view", () => {
    expect(directionalPrompt(BASE, { center: [-3, 0, 0] })).toBe(`${BASE}, back view`);
  });

  it("elevated cameras are the top view regardless of azimuth", () => {
    for (const az of [0, 90, 200, 300]) {
      const rad = (az * Math.PI) / 180;
      const el = (45 * Math.PI) / 180;
      const pose = {
        center: [2 * Math.cos(rad) * Math.cos(el), 2 * Math.sin(rad) * Math.cos(el), 2 * Math.sin(el)] as const,
      };
      expect(directionalPrompt(BASE, pose)).toBe(`${BASE}, top view`);
    }
  });

  it("bucket edges are half-open", () => {
    const at = (deg: number) => ({
      center: [Math.cos((deg * Math.PI) / 180), Math.sin((deg * Math.PI) / 180), 0] as const,
    });
    expect(directionalPrompt(BASE, at(45))).toBe(`${BASE}, left side view`);
    expect(directionalPrompt(BASE, at(44.99))).toBe(`${BASE}, front view`);
    expect(directionalPrompt(BASE, at(135))).toBe(`${BASE}, back view`);
    expect(directionalPrompt(BASE, at(225))).toBe(`${BASE}, right side view`);
    expect(directionalPrompt(BASE, at(315))).toBe(`${BASE}, front view`);
    // Negative azimuths wrap into [0, 360) first.
    expect(directionalPrompt(BASE, at(-45))).toBe(`${BASE}, front view`);
    expect(directionalPrompt(BASE, at(-100))).toBe(`${BASE}, right side view`);
  });

  it("elevation 30 is not yet the top bucket", () => {
    const el30 = (30 * Math.PI) / 180;
    const pose = { center: [2 * Math.cos(el30), 0, 2 * Math.sin(el30)] as const };
    expect(directionalPrompt(BASE, pose)).toBe(`${BASE}, front view`);
    const el31 = (31 * Math.PI) / 180;
    const above = { center: [2 * Math.cos(el31), 0, 2 * Math.sin(el31)] as const };
    expect(directionalPrompt(BASE, above)).toBe(`${BASE}, top view`);
  });

  it("a camera at the origin has no azimuth", () => {
    expect(() => cameraAzimuthElevation({ center: [0, 0, 0] })).toThrow(/no azimuth/);
  });

  it("rig pose recovery inverts construction", () => {
    const poses = rigPoses(2.0);
    const [az1] = cameraAzimuthElevation(poses[1]);
    expect(az1).toBeCloseTo(Math.PI / 4, 12);
    const [, el8] = cameraAzimuthElevation(poses[8]);
    expect((el8 * 180) / Math.PI).toBeCloseTo(45, 12);
  });
});
