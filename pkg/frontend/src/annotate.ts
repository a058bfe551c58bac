import { GRID } from "./coords.js";

export interface PointPairDraft {
  p: [number, number];
  g: [number, number] | null;
}

/** Annotation model: ordered handle/target pairs plus a painted mask layer on
 * the latent grid. Pure state; the canvas layer renders from it. */
export class AnnotationState {
  pairs: PointPairDraft[] = [];
  mask: Uint8Array = new Uint8Array(GRID * GRID);
  imageLoaded = false;

  /** first click opens a pair at the handle, second click sets its target */
  addClick(lx: number, ly: number): void {
    const open = this.pairs.find((pair) => pair.g === null);
    if (open) {
      open.g = [lx, ly];
    } else {
      this.pairs.push({ p: [lx, ly], g: null });
    }
  }

  removeLast(): void {
    this.pairs.pop();
  }

  clearPoints(): void {
    this.pairs = [];
  }

  get complete(): boolean {
    return this.pairs.length > 0 && this.pairs.every((pair) => pair.g !== null);
  }

  validate(): string | null {
    if (!this.imageLoaded) return "load or generate an image first";
    if (this.pairs.length === 0) return "add at least one handle/target pair";
    const open = this.pairs.findIndex((pair) => pair.g === null);
    if (open >= 0) return `handle ${open + 1} has no target yet`;
    return null;
  }

  pointsPayload(): number[][] {
    return this.pairs.map((pair) => [pair.p[0], pair.p[1], pair.g![0], pair.g![1]]);
  }

  paint(lx: number, ly: number, radius: number, value: 0 | 1): void {
    const x0 = Math.max(0, Math.floor(lx - radius));
    const x1 = Math.min(GRID - 1, Math.ceil(lx + radius));
    const y0 = Math.max(0, Math.floor(ly - radius));
    const y1 = Math.min(GRID - 1, Math.ceil(ly + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        if ((x - lx) ** 2 + (y - ly) ** 2 <= radius ** 2) {
          this.mask[y * GRID + x] = value;
        }
      }
    }
  }

  eraseMask(): void {
    this.mask.fill(0);
  }

  get maskEmpty(): boolean {
    return this.mask.every((v) => v === 0);
  }

  /** empty brush layer means "everything editable" */
  maskMode(): "painted" | "all" {
    return this.maskEmpty ? "all" : "painted";
  }

  /** encode the painted layer as a grayscale PNG blob (browser only) */
  async maskPng(): Promise<Blob> {
    const canvas = document.createElement("canvas");
    canvas.width = GRID;
    canvas.height = GRID;
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("canvas 2d context unavailable");
    const img = ctx.createImageData(GRID, GRID);
    for (let i = 0; i < GRID * GRID; i++) {
      const v = this.mask[i] ? 255 : 0;
      img.data[i * 4] = v;
      img.data[i * 4 + 1] = v;
      img.data[i * 4 + 2] = v;
      img.data[i * 4 + 3] = 255;
    }
    ctx.putImageData(img, 0, 0);
    return new Promise((resolve, reject) =>
      canvas.toBlob((b) => (b ? resolve(b) : reject(new Error("toBlob failed"))),
        "image/png"));
  }
}
