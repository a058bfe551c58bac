import { LineChart } from "./charts.js";
import { latentToCanvas } from "./coords.js";
import { RunStore } from "./store.js";
import type { Mode } from "./types.js";

const MODE_CLASS: Record<Mode, string> = {
  DOO_ILFA: "cell-doo",
  ILFA_ONLY: "cell-ilfa",
};

/** Renders the mode-colored step strip: one cell per record, in order. */
export function renderTimeline(container: HTMLElement, store: RunStore): void {
  container.textContent = "";
  for (const { ordinal, mode } of store.timeline()) {
    const cell = document.createElement("span");
    cell.className = `cell ${MODE_CLASS[mode]}`;
    cell.dataset.ordinal = String(ordinal);
    cell.dataset.mode = mode;
    cell.title = `step ${ordinal}: ${mode}`;
    container.appendChild(cell);
  }
}

export function renderHandleMarkers(layer: HTMLElement, store: RunStore,
                                    targets: [number, number][]): void {
  layer.textContent = "";
  const mark = (x: number, y: number, cls: string) => {
    const el = document.createElement("div");
    const [cx, cy] = latentToCanvas(x, y);
    el.className = `marker ${cls}`;
    el.style.left = `${cx}px`;
    el.style.top = `${cy}px`;
    layer.appendChild(el);
  };
  for (const [x, y] of targets) mark(x, y, "marker-target");
  for (const [x, y] of store.latestHandles()) mark(x, y, "marker-handle");
}

export class RunView {
  readonly minD = new LineChart("minD (mean over points)", "#4cc2ff");
  readonly dT = new LineChart("dT: handle-target distance", "#ffb454");

  constructor(
    private readonly timelineEl: HTMLElement,
    private readonly minDCanvas: HTMLCanvasElement,
    private readonly dTCanvas: HTMLCanvasElement,
    private readonly markerLayer: HTMLElement | null = null,
    private readonly targets: [number, number][] = [],
  ) {}

  update(store: RunStore): void {
    renderTimeline(this.timelineEl, store);
    this.minD.setData(store.minDSeries());
    this.dT.setData(store.dTSeries());
    this.minD.draw(this.minDCanvas);
    this.dT.draw(this.dTCanvas);
    if (this.markerLayer) renderHandleMarkers(this.markerLayer, store, this.targets);
  }
}
