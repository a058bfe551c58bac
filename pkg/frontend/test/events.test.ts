import { describe, expect, it } from "vitest";

import { StepStream, type EventSourceLike } from "../src/events.js";
import { RunStore } from "../src/store.js";
import { mixedStream } from "./helpers.js";

/** scripted fake EventSource: serves records after the resume point, then
 * either errors out (simulating a drop) or finishes with the terminal event */
class FakeSource implements EventSourceLike {
  onerror: ((ev: unknown) => void) | null = null;
  closed = false;
  private listeners = new Map<string, ((ev: MessageEvent) => void)[]>();

  constructor(readonly url: string) {}

  addEventListener(type: string, listener: (ev: MessageEvent) => void): void {
    const list = this.listeners.get(type) ?? [];
    list.push(listener);
    this.listeners.set(type, list);
  }

  emit(type: string, data: unknown): void {
    for (const listener of this.listeners.get(type) ?? []) {
      listener({ data: JSON.stringify(data) } as MessageEvent);
    }
  }

  close(): void {
    this.closed = true;
  }
}

function resumeFrom(url: string): number {
  const m = url.match(/last_event_id=(\d+)/);
  return m ? parseInt(m[1], 10) + 1 : 0;
}

describe("StepStream reconnect", () => {
  it("resumes with Last-Event-ID: no gaps, no duplicates", () => {
    const records = mixedStream(100);
    const store = new RunStore();
    const sources: FakeSource[] = [];
    let ended = false;
    const pending: (() => void)[] = [];

    const stream = new StepStream(
      "http://svc", "abc", store,
      () => undefined,
      () => { ended = true; },
      (url) => {
        const src = new FakeSource(url);
        sources.push(src);
        return src;
      },
      (fn) => pending.push(fn),  // manual scheduler
    );
    stream.connect();

    // first connection starts from the beginning, serves 0..49, then drops
    expect(sources.length).toBe(1);
    expect(resumeFrom(sources[0].url)).toBe(0);
    for (const rec of records.slice(0, 50)) sources[0].emit("step", rec);
    sources[0].onerror?.(new Event("error"));
    expect(sources[0].closed).toBe(true);

    // scheduled reconnect resumes after ordinal 49
    expect(pending.length).toBe(1);
    pending.shift()!();
    expect(sources.length).toBe(2);
    expect(resumeFrom(sources[1].url)).toBe(50);

    // overlap: the server replays 45.. to be safe; dedupe must absorb it
    for (const rec of records.slice(45)) sources[1].emit("step", rec);
    sources[1].emit("end", { status: "done", reason: "all points reached" });

    expect(ended).toBe(true);
    expect(store.size).toBe(100);
    expect(store.contiguous).toBe(true);
    expect(store.ordered().map((r) => r.ordinal)).toEqual([...Array(100).keys()]);
  });

  it("completed-session replay yields charts identical to the live run", () => {
    const records = mixedStream(100);
    const live = new RunStore();
    for (const rec of records) live.ingest(rec);

    const replayStore = new RunStore();
    let done = false;
    const stream = new StepStream(
      "http://svc", "abc", replayStore, () => undefined, () => { done = true; },
      (url) => {
        const src = new FakeSource(url);
        queueMicrotask(() => {
          for (const rec of records) src.emit("step", rec);
          src.emit("end", { status: "done", reason: null });
        });
        return src;
      });
    stream.connect();
    return new Promise<void>((resolve) => {
      queueMicrotask(() => {
        expect(done).toBe(true);
        expect(replayStore.minDSeries()).toEqual(live.minDSeries());
        expect(replayStore.dTSeries()).toEqual(live.dTSeries());
        resolve();
      });
    });
  });

  it("does not reconnect after close", () => {
    const store = new RunStore();
    const pending: (() => void)[] = [];
    const sources: FakeSource[] = [];
    const stream = new StepStream("http://svc", "abc", store,
      () => undefined, () => undefined,
      (url) => { const s = new FakeSource(url); sources.push(s); return s; },
      (fn) => pending.push(fn));
    stream.connect();
    stream.close();
    sources[0].onerror?.(new Event("error"));
    for (const fn of pending) fn();
    expect(sources.length).toBe(1);
  });
});
