import type { ChartPoint } from "./store.js";

/** Minimal canvas polyline chart; the data model is inspectable for tests. */
export class LineChart {
  points: ChartPoint[] = [];

  constructor(readonly label: string, readonly color: string) {}

  setData(points: ChartPoint[]): void {
    this.points = points;
  }

  draw(canvas: HTMLCanvasElement): void {
    const ctx = canvas.getContext("2d");
    if (!ctx) return; // headless environments have no 2d context
    const { width: w, height: h } = canvas;
    ctx.clearRect(0, 0, w, h);
    ctx.fillStyle = "#13151a";
    ctx.fillRect(0, 0, w, h);
    ctx.fillStyle = "#9aa4b2";
    ctx.font = "11px system-ui";
    ctx.fillText(this.label, 8, 14);
    if (this.points.length === 0) return;
    const xs = this.points.map((p) => p.x);
    const ys = this.points.map((p) => p.y);
    const xMin = Math.min(...xs);
    const xMax = Math.max(...xs, xMin + 1);
    const yMin = Math.min(...ys, 0);
    const yMax = Math.max(...ys, yMin + 1e-6);
    const px = (x: number) => 30 + ((x - xMin) / (xMax - xMin)) * (w - 40);
    const py = (y: number) => h - 18 - ((y - yMin) / (yMax - yMin)) * (h - 36);
    ctx.strokeStyle = this.color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    this.points.forEach((p, i) => {
      if (i === 0) ctx.moveTo(px(p.x), py(p.y));
      else ctx.lineTo(px(p.x), py(p.y));
    });
    ctx.stroke();
    ctx.fillStyle = "#6b7280";
    ctx.fillText(yMax.toFixed(2), 2, 14);
    ctx.fillText(yMin.toFixed(2), 2, h - 6);
  }
}
