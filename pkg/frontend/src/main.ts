import { Api, ApiError } from "./api.js";
import { AnnotationState } from "./annotate.js";
import { canvasToLatent, GRID, SCALE } from "./coords.js";
import { swapPairs } from "./dragback.js";
import { StepStream } from "./events.js";
import { RunStore } from "./store.js";
import { RunView } from "./run-view.js";
import type { Envelope } from "./types.js";

const api = new Api(localStorage.getItem("draglora-api") ?? "http://127.0.0.1:8008");

const el = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

const state = {
  annotation: new AnnotationState(),
  imageBlob: null as Blob | null,
  imageBitmap: null as ImageBitmap | null,
  generator: null as Record<string, unknown> | null,
  session: null as Envelope | null,
  store: new RunStore(),
  stream: null as StepStream | null,
  running: false,
  chain: [] as string[],
};

function status(text: string, isError = false): void {
  const bar = el<HTMLDivElement>("status");
  bar.textContent = text;
  bar.className = isError ? "status error" : "status";
}

// ---- annotation canvas ----

const canvas = el<HTMLCanvasElement>("annotate-canvas");
const markerLayer = el<HTMLDivElement>("marker-layer");
const ctx = canvas.getContext("2d");

function redrawAnnotation(): void {
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (state.imageBitmap) {
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(state.imageBitmap, 0, 0, canvas.width, canvas.height);
  }
  // mask overlay
  ctx.fillStyle = "rgba(80, 170, 255, 0.30)";
  for (let y = 0; y < GRID; y++) {
    for (let x = 0; x < GRID; x++) {
      if (state.annotation.mask[y * GRID + x]) {
        ctx.fillRect(x * SCALE, y * SCALE, SCALE, SCALE);
      }
    }
  }
  // point pairs
  for (const pair of state.annotation.pairs) {
    const [hx, hy] = pair.p;
    ctx.fillStyle = "#ff5468";
    ctx.beginPath();
    ctx.arc(hx * SCALE, hy * SCALE, 4, 0, Math.PI * 2);
    ctx.fill();
    if (pair.g) {
      const [gx, gy] = pair.g;
      ctx.fillStyle = "#4cc2ff";
      ctx.beginPath();
      ctx.arc(gx * SCALE, gy * SCALE, 4, 0, Math.PI * 2);
      ctx.fill();
      ctx.strokeStyle = "rgba(255,255,255,0.7)";
      ctx.beginPath();
      ctx.moveTo(hx * SCALE, hy * SCALE);
      ctx.lineTo(gx * SCALE, gy * SCALE);
      ctx.stroke();
    }
  }
}

declare global {
  interface Window {
    __draglora: typeof state;
  }
}

canvas.addEventListener("pointerdown", (ev) => {
  if (state.running) return;
  const rect = canvas.getBoundingClientRect();
  const sx = canvas.width / rect.width;
  const sy = canvas.height / rect.height;
  const [lx, ly] = canvasToLatent((ev.clientX - rect.left) * sx,
                                  (ev.clientY - rect.top) * sy);
  const tool = (el<HTMLSelectElement>("tool")).value;
  if (tool === "points") {
    state.annotation.addClick(lx, ly);
  } else {
    state.annotation.paint(lx, ly, 2.5, tool === "brush" ? 1 : 0);
  }
  redrawAnnotation();
});

el<HTMLButtonElement>("erase-mask").onclick = () => {
  state.annotation.eraseMask();
  redrawAnnotation();
};
el<HTMLButtonElement>("clear-points").onclick = () => {
  state.annotation.clearPoints();
  redrawAnnotation();
};

async function setImageFromBlob(blob: Blob): Promise<void> {
  state.imageBlob = blob;
  state.imageBitmap = await createImageBitmap(blob);
  state.annotation.imageLoaded = true;
  redrawAnnotation();
}

el<HTMLInputElement>("image-file").onchange = async (ev) => {
  const input = ev.target as HTMLInputElement;
  if (input.files?.[0]) {
    state.generator = null;
    await setImageFromBlob(input.files[0]);
    status("image loaded; annotate points and mask");
  }
};

el<HTMLButtonElement>("generate-scene").onclick = async () => {
  const shapes = ["disc", "square", "triangle"];
  const shape = shapes[Math.floor(Math.random() * 3)];
  const size = 4 + Math.random() * 3;
  const lo = size + 3;
  const hi = GRID - 1 - size - 3;
  state.generator = {
    shape,
    center: [lo + Math.random() * (hi - lo), lo + Math.random() * (hi - lo)],
    size,
    fill: [0.2 + Math.random() * 0.8, 0.2 + Math.random() * 0.8, 0.2 + Math.random() * 0.8],
    bg_seed: Math.floor(Math.random() * 1e6),
    image_size: GRID,
  };
  state.annotation.imageLoaded = true;
  state.imageBitmap = null;
  redrawAnnotation();
  status(`generated a ${shape} scene (rendered server-side on submit)`);
};

// ---- submission ----

async function submit(points: number[][], imageBlob: Blob | null,
                      generator: Record<string, unknown> | null): Promise<Envelope> {
  const form = new FormData();
  if (generator) {
    form.set("generator", JSON.stringify(generator));
  } else if (imageBlob) {
    form.set("image", imageBlob, "input.png");
  }
  form.set("points", JSON.stringify(points));
  if (state.annotation.maskMode() === "painted") {
    form.set("mask", await state.annotation.maskPng(), "mask.png");
  } else {
    form.set("mask_mode", "all");
  }
  const seed = el<HTMLInputElement>("seed").valueAsNumber;
  const config: Record<string, unknown> = {};
  if (Number.isFinite(seed)) config.seed = seed;
  config.ept = el<HTMLSelectElement>("ept").value;
  config.ilfa_variant = el<HTMLSelectElement>("ilfa").value;
  form.set("config", JSON.stringify(config));
  return api.createSession(form);
}

const runView = () => new RunView(
  el("timeline"), el<HTMLCanvasElement>("chart-mind"),
  el<HTMLCanvasElement>("chart-dt"), markerLayer,
  state.annotation.pairs.filter((p) => p.g).map((p) => p.g!) as [number, number][],
);

function watch(sessionId: string): void {
  state.store = new RunStore();
  const view = runView();
  state.stream?.close();
  state.stream = new StepStream(
    api.baseUrl, sessionId, state.store,
    () => view.update(state.store),
    async (terminal) => {
      state.running = false;
      if (terminal.status === "done") {
        status(`done: ${terminal.reason ?? ""}`);
        el<HTMLImageElement>("edited-img").src =
          api.resultUrl(sessionId) + `?t=${Date.now()}`;
        el<HTMLButtonElement>("dragback").disabled = false;
      } else {
        status(`failed: ${terminal.reason ?? "unknown"}`, true);
      }
    });
  state.stream.connect();
}

el<HTMLButtonElement>("submit").onclick = async () => {
  const problem = state.annotation.validate();
  if (problem) {
    status(problem, true);
    return;
  }
  try {
    state.running = true;
    status("creating session (reconstruction adapter + inversion)...");
    const env = await submit(state.annotation.pointsPayload(), state.imageBlob,
                             state.generator);
    state.session = env;
    state.chain = [env.id];
    const prepared = await api.waitPrepared(env.id);
    if (prepared.status === "failed") {
      status(`prepare failed: ${prepared.failure_reason}`, true);
      state.running = false;
      return;
    }
    status("running drag updates...");
    watch(env.id);
    await api.startDrag(env.id);
  } catch (err) {
    state.running = false;
    const msg = err instanceof ApiError
      ? `${err.message}${err.field ? ` (field ${err.field})` : ""}` : String(err);
    status(msg, true);
  }
};

el<HTMLButtonElement>("dragback").onclick = async () => {
  if (!state.session) return;
  try {
    status("drag-back: training adapter on the edit, reversing points...");
    const { child_id } = await api.dragBack(state.session.id);
    state.chain.push(child_id);
    el<HTMLDivElement>("chain").textContent =
      `session chain: ${state.chain.join(" -> ")}`;
    // prefill reversed annotation for visibility
    const reversed = swapPairs(state.annotation.pointsPayload());
    state.annotation.clearPoints();
    for (const [px, py, gx, gy] of reversed) {
      state.annotation.addClick(px, py);
      state.annotation.addClick(gx, gy);
    }
    redrawAnnotation();
    await api.waitPrepared(child_id);
    watch(child_id);
    state.session = { ...state.session, id: child_id } as Envelope;
    const poll = setInterval(async () => {
      const rep = await api.report(child_id).catch(() => null);
      if (rep?.similarity !== undefined) {
        el<HTMLDivElement>("similarity").textContent =
          `round-trip feature distance vs original: ${rep.similarity.toFixed(4)}`;
        el<HTMLImageElement>("original-img").src = api.resultUrl(state.chain[0]);
        clearInterval(poll);
      }
    }, 800);
  } catch (err) {
    status(String(err), true);
  }
};

status("upload a 32x32 PNG or generate a toy scene to begin");
window.__draglora = state;
