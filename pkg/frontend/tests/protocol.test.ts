import { afterEach, describe, expect, it, vi } from "vitest";

import {
  FRAME_MAGIC,
  configMessage,
  decodeFrame,
  parseServerMessage,
  poseMessage,
  resizeMessage,
  rgbToRgba,
} from "../src/protocol.js";

// Same frozen wire bytes the server tests pin: a 2x2 frame of the
// saturated sphere color (217, 102, 76).
const GOLDEN_HEX =
  "464e5253010000000200020000000000d9664cd9664cd9664cd9664c";

function fromHex(hex: string): ArrayBuffer {
  const bytes = new Uint8Array(hex.length / 2);
  for (let i = 0; i < bytes.length; i++) {
    bytes[i] = parseInt(hex.slice(i * 2, i * 2 + 2), 16);
  }
  return bytes.buffer;
}

afterEach(() => {
  vi.restoreAllMocks();
});

describe("decodeFrame", () => {
  it("decodes the golden 2x2 frame", () => {
    const frame = decodeFrame(fromHex(GOLDEN_HEX));
    expect(frame).not.toBeNull();
    expect(frame!.frameId).toBe(1);
    expect(frame!.width).toBe(2);
    expect(frame!.height).toBe(2);
    expect(frame!.format).toBe(0);
    expect(Array.from(frame!.pixels)).toEqual(
      [217, 102, 76, 217, 102, 76, 217, 102, 76, 217, 102, 76],
    );
  });

  it("ignores a frame with the wrong magic and warns", () => {
    const warn = vi.spyOn(console, "warn").mockImplementation(() => {});
    const bad = new Uint8Array(fromHex(GOLDEN_HEX));
    bad[0] ^= 0xff;
    expect(decodeFrame(bad.buffer)).toBeNull();
    expect(warn).toHaveBeenCalledTimes(1);
    expect(String(warn.mock.calls[0][0])).toContain("magic");
  });

  it("ignores a buffer shorter than the header", () => {
    const warn = vi.spyOn(console, "warn").mockImplementation(() => {});
    expect(decodeFrame(new ArrayBuffer(15))).toBeNull();
    expect(warn).toHaveBeenCalledTimes(1);
  });

  it("ignores a frame whose payload length disagrees with the header", () => {
    const warn = vi.spyOn(console, "warn").mockImplementation(() => {});
    const short = new Uint8Array(fromHex(GOLDEN_HEX)).slice(0, 27);
    expect(decodeFrame(short.buffer)).toBeNull();
    expect(warn).toHaveBeenCalledTimes(1);
  });

  it("ignores unknown pixel formats", () => {
    const warn = vi.spyOn(console, "warn").mockImplementation(() => {});
    const bad = new Uint8Array(fromHex(GOLDEN_HEX));
    bad[12] = 7;
    expect(decodeFrame(bad.buffer)).toBeNull();
    expect(warn).toHaveBeenCalledTimes(1);
  });

  it("exports the magic the header carries", () => {
    const dv = new DataView(fromHex(GOLDEN_HEX));
    expect(dv.getUint32(0, true)).toBe(FRAME_MAGIC);
  });
});

describe("rgbToRgba", () => {
  it("expands with opaque alpha", () => {
    const out = new Uint8ClampedArray(8);
    rgbToRgba(new Uint8Array([1, 2, 3, 4, 5, 6]), out);
    expect(Array.from(out)).toEqual([1, 2, 3, 255, 4, 5, 6, 255]);
  });
});

describe("parseServerMessage", () => {
  it("accepts stats and error messages", () => {
    const stats = parseServerMessage(
      JSON.stringify({
        type: "stats", frame_id: 3, fps: 12.5, samples_per_ray: 40.0,
        guided_fraction: 0.8, ms_volume: 50, ms_warp: 5, ms_nn: 20,
        buffer_len: 2,
      }),
    );
    expect(stats).not.toBeNull();
    expect(stats!.type).toBe("stats");
    const err = parseServerMessage(JSON.stringify({ type: "error", message: "x" }));
    expect(err).toEqual({ type: "error", message: "x" });
  });

  it("returns null with a warning on junk", () => {
    const warn = vi.spyOn(console, "warn").mockImplementation(() => {});
    expect(parseServerMessage("{nope")).toBeNull();
    expect(parseServerMessage(JSON.stringify({ type: "mystery" }))).toBeNull();
    expect(parseServerMessage(JSON.stringify(null))).toBeNull();
    expect(warn).toHaveBeenCalledTimes(3);
  });
});

describe("message builders", () => {
  it("pose carries 16 numbers row-major plus optional fov", () => {
    const m = Array.from({ length: 16 }, (_, i) => i / 7);
    expect(JSON.parse(poseMessage(m))).toEqual({ type: "pose", m });
    expect(JSON.parse(poseMessage(m, 0.9))).toEqual({ type: "pose", m, fov_y: 0.9 });
    expect(() => poseMessage([1, 2, 3])).toThrow("16");
  });

  it("config and resize round-trip", () => {
    expect(JSON.parse(configMessage({ use_nn: false }))).toEqual(
      { type: "config", use_nn: false },
    );
    expect(JSON.parse(resizeMessage(640, 480))).toEqual(
      { type: "resize", w: 640, h: 480 },
    );
  });
});
