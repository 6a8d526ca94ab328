import type { ImagePayload } from "./types.js";

export class PayloadError extends Error {}

function decodeBase64(text: string): Uint8Array {
  const bin = atob(text);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

function encodeBase64(bytes: Uint8Array): string {
  let bin = "";
  for (const b of bytes) bin += String.fromCharCode(b);
  return btoa(bin);
}

/** Raw RGB8 rows from a payload; throws PayloadError when the length lies. */
export function decodeRgb8(payload: ImagePayload): Uint8Array {
  const bytes = decodeBase64(payload.rgb8_b64);
  const expected = payload.width * payload.height * 3;
  if (bytes.length !== expected) {
    throw new PayloadError(
      `payload is ${bytes.length} bytes, expected width*height*3 = ${expected}`,
    );
  }
  return bytes;
}

/** RGB -> opaque RGBA, ready for ImageData. */
export function toRgba(payload: ImagePayload): Uint8ClampedArray<ArrayBuffer> {
  const rgb = decodeRgb8(payload);
  const out = new Uint8ClampedArray(new ArrayBuffer(payload.width * payload.height * 4));
  for (let i = 0, j = 0; i < rgb.length; i += 3, j += 4) {
    out[j] = rgb[i]!;
    out[j + 1] = rgb[i + 1]!;
    out[j + 2] = rgb[i + 2]!;
    out[j + 3] = 255;
  }
  return out;
}

export function makePayload(width: number, height: number, rgb: Uint8Array): ImagePayload {
  return { width, height, rgb8_b64: encodeBase64(rgb) };
}

/**
 * Paint a payload onto a canvas, nearest-neighbor upscaled. Returns false
 * when no 2d context is available (non-browser test environments).
 */
export function paintPayload(canvas: HTMLCanvasElement, payload: ImagePayload): boolean {
  const rgba = toRgba(payload);
  const ctx = canvas.getContext("2d");
  if (!ctx || typeof ctx.putImageData !== "function") {
    canvas.dataset.pixels = payload.rgb8_b64;
    return false;
  }
  const source = new ImageData(rgba, payload.width, payload.height);
  const off = canvas.ownerDocument.createElement("canvas");
  off.width = payload.width;
  off.height = payload.height;
  const offCtx = off.getContext("2d");
  if (!offCtx) return false;
  offCtx.putImageData(source, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  canvas.dataset.pixels = payload.rgb8_b64;
  return true;
}
