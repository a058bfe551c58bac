// The latent grid is 32x32; the canvas shows it upscaled. Point placement is
// sub-pixel, snapped to quarter latent pixels.

export const GRID = 32;
export const SCALE = 8;
export const SNAP = 0.25;

export function canvasToLatent(cx: number, cy: number, scale = SCALE): [number, number] {
  const snap = (v: number) => {
    const latent = v / scale;
    const snapped = Math.round(latent / SNAP) * SNAP;
    return Math.min(Math.max(snapped, 0), GRID - 1);
  };
  return [snap(cx), snap(cy)];
}

export function latentToCanvas(lx: number, ly: number, scale = SCALE): [number, number] {
  return [lx * scale, ly * scale];
}
