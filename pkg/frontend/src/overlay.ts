/** Raster helpers for the slice viewer.
 *
 * The service ships slices as base64 uint8 planes. Probabilities ride in the
 * alpha channel of the overlay untouched (red colormap, alpha == quantized
 * probability), so a pixel can always be decoded back to exactly the value
 * the service sent; viewer opacity is applied at composite time instead.
 */

export function decodeBase64(b64: string): Uint8Array {
  const raw = atob(b64);
  const out = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
  return out;
}

export function grayscaleRgba(bytes: Uint8Array): Uint8ClampedArray<ArrayBuffer> {
  const rgba = new Uint8ClampedArray(bytes.length * 4);
  for (let i = 0; i < bytes.length; i++) {
    const v = bytes[i];
    rgba[4 * i] = v;
    rgba[4 * i + 1] = v;
    rgba[4 * i + 2] = v;
    rgba[4 * i + 3] = 255;
  }
  return rgba;
}

export function probabilityOverlayRgba(bytes: Uint8Array): Uint8ClampedArray<ArrayBuffer> {
  const rgba = new Uint8ClampedArray(bytes.length * 4);
  for (let i = 0; i < bytes.length; i++) {
    rgba[4 * i] = 255;
    rgba[4 * i + 1] = 0;
    rgba[4 * i + 2] = 0;
    rgba[4 * i + 3] = bytes[i];
  }
  return rgba;
}

/** Inverse of probabilityOverlayRgba — must be exact. */
export function decodeOverlayProbabilities(rgba: Uint8ClampedArray): Uint8Array {
  const out = new Uint8Array(rgba.length / 4);
  for (let i = 0; i < out.length; i++) out[i] = rgba[4 * i + 3];
  return out;
}

export function clampSliceIndex(z: number, depth: number): number {
  if (depth <= 0) return 0;
  return Math.min(Math.max(0, Math.trunc(z)), depth - 1);
}

/** Volumes are quoted to 0.1 ml in the UI. */
export function formatMl(v: number): string {
  return `${(Math.round(v * 10) / 10).toFixed(1)} ml`;
}
