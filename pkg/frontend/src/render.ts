/**
 * Frame rendering: raw f32 [0,1] pixels to 8-bit RGBA, gamma 1.0 (the
 * protocol is already display-linear for this toy pipeline).
 */

export function toRgba(pixels: Float32Array, h: number, w: number): Uint8ClampedArray<ArrayBuffer> {
  if (pixels.length !== h * w * 3) {
    throw new Error(`pixel buffer ${pixels.length} floats, want ${h * w * 3}`);
  }
  const rgba = new Uint8ClampedArray(new ArrayBuffer(h * w * 4));
  for (let p = 0; p < h * w; p++) {
    rgba[p * 4] = Math.round(Math.min(1, Math.max(0, pixels[p * 3])) * 255);
    rgba[p * 4 + 1] = Math.round(Math.min(1, Math.max(0, pixels[p * 3 + 1])) * 255);
    rgba[p * 4 + 2] = Math.round(Math.min(1, Math.max(0, pixels[p * 3 + 2])) * 255);
    rgba[p * 4 + 3] = 255;
  }
  return rgba;
}

/** Draw a frame into a canvas, scaling by device pixels via putImageData. */
export function drawFrame(canvas: HTMLCanvasElement, pixels: Float32Array, h: number, w: number): void {
  canvas.width = w;
  canvas.height = h;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.putImageData(new ImageData(toRgba(pixels, h, w), w, h), 0, 0);
}

/** 8-bit RGBA (e.g. an uploaded image drawn to a canvas) back to f32 RGB. */
export function fromRgba(rgba: Uint8ClampedArray, h: number, w: number): Float32Array {
  const out = new Float32Array(h * w * 3);
  for (let p = 0; p < h * w; p++) {
    out[p * 3] = rgba[p * 4] / 255;
    out[p * 3 + 1] = rgba[p * 4 + 1] / 255;
    out[p * 3 + 2] = rgba[p * 4 + 2] / 255;
  }
  return out;
}
