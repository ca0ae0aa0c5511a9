/** Wire protocol: binary frame decoding and JSON message builders.
 *
 * A frame is a 16-byte little-endian header (magic u32, frame_id u32,
 * width u16, height u16, format u8, 3 pad bytes) followed by
 * width*height*3 bytes of RGB8.
 */

export const FRAME_MAGIC = 0x53524e46;
export const FORMAT_RGB8 = 0;
export const HEADER_BYTES = 16;

export interface FramePacket {
  frameId: number;
  width: number;
  height: number;
  format: number;
  pixels: Uint8Array;
}

export function decodeFrame(buf: ArrayBuffer): FramePacket | null {
  if (buf.byteLength < HEADER_BYTES) {
    console.warn(`frame dropped: ${buf.byteLength} bytes is shorter than the header`);
    return null;
  }
  const dv = new DataView(buf);
  const magic = dv.getUint32(0, true);
  if (magic !== FRAME_MAGIC) {
    console.warn(`frame dropped: magic 0x${magic.toString(16)} != 0x${FRAME_MAGIC.toString(16)}`);
    return null;
  }
  const frameId = dv.getUint32(4, true);
  const width = dv.getUint16(8, true);
  const height = dv.getUint16(10, true);
  const format = dv.getUint8(12);
  if (format !== FORMAT_RGB8) {
    console.warn(`frame ${frameId} dropped: unknown pixel format ${format}`);
    return null;
  }
  const expect = HEADER_BYTES + width * height * 3;
  if (buf.byteLength !== expect) {
    console.warn(`frame ${frameId} dropped: ${buf.byteLength} bytes, expected ${expect}`);
    return null;
  }
  return { frameId, width, height, format, pixels: new Uint8Array(buf, HEADER_BYTES) };
}

/** Expand tightly packed RGB8 into RGBA for canvas ImageData. */
export function rgbToRgba(pixels: Uint8Array, out: Uint8ClampedArray): void {
  const n = pixels.length / 3;
  for (let i = 0; i < n; i++) {
    out[i * 4] = pixels[i * 3];
    out[i * 4 + 1] = pixels[i * 3 + 1];
    out[i * 4 + 2] = pixels[i * 3 + 2];
    out[i * 4 + 3] = 255;
  }
}

export interface StatsMessage {
  type: "stats";
  frame_id: number;
  fps: number;
  samples_per_ray: number;
  guided_fraction: number;
  ms_volume: number;
  ms_warp: number;
  ms_nn: number;
  buffer_len: number;
}

export interface ErrorMessage {
  type: "error";
  message: string;
}

export type ServerMessage = StatsMessage | ErrorMessage;

export function parseServerMessage(text: string): ServerMessage | null {
  let body: unknown;
  try {
    body = JSON.parse(text);
  } catch {
    console.warn(`unparseable server message: ${text.slice(0, 80)}`);
    return null;
  }
  if (typeof body !== "object" || body === null || !("type" in body)) {
    console.warn("server message without a type field");
    return null;
  }
  const t = (body as { type: unknown }).type;
  if (t === "stats" || t === "error") {
    return body as ServerMessage;
  }
  console.warn(`server message of unknown type ${String(t)}`);
  return null;
}

export function poseMessage(m: ArrayLike<number>, fovY?: number): string {
  if (m.length !== 16) {
    throw new Error(`pose needs 16 entries, got ${m.length}`);
  }
  const body: { type: string; m: number[]; fov_y?: number } = {
    type: "pose",
    m: Array.from(m),
  };
  if (fovY !== undefined) {
    body.fov_y = fovY;
  }
  return JSON.stringify(body);
}

export interface ConfigChanges {
  use_guidance?: boolean;
  use_nn?: boolean;
  reset?: boolean;
}

export function configMessage(changes: ConfigChanges): string {
  return JSON.stringify({ type: "config", ...changes });
}

export function resizeMessage(width: number, height: number): string {
  return JSON.stringify({ type: "resize", w: width, h: height });
}
