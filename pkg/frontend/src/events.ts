import { RunStore } from "./store.js";
import type { StepRecord, TerminalEvent } from "./types.js";

export interface EventSourceLike {
  addEventListener(type: string, listener: (ev: MessageEvent) => void): void;
  close(): void;
  onerror: ((ev: unknown) => void) | null;
}

export type EventSourceFactory = (url: string) => EventSourceLike;

const defaultFactory: EventSourceFactory = (url) =>
  new EventSource(url) as unknown as EventSourceLike;

/** SSE subscription for one session's step records.
 *
 * Resume is explicit: every (re)connection passes the last seen ordinal as a
 * query parameter, and the store drops duplicate ordinals, so reconnects can
 * neither skip nor double-count records. */
export class StepStream {
  private source: EventSourceLike | null = null;
  private closed = false;
  private retryMs = 250;

  constructor(
    private readonly baseUrl: string,
    private readonly sessionId: string,
    readonly store: RunStore,
    private readonly onUpdate: () => void,
    private readonly onEnd: (terminal: TerminalEvent) => void,
    private readonly factory: EventSourceFactory = defaultFactory,
    private readonly schedule: (fn: () => void, ms: number) => void = (fn, ms) =>
      setTimeout(fn, ms),
  ) {}

  url(): string {
    const last = this.store.lastOrdinal;
    const resume = last === null ? "" : `?last_event_id=${last}`;
    return `${this.baseUrl}/v1/sessions/${this.sessionId}/events${resume}`;
  }

  connect(): void {
    if (this.closed) return;
    const source = this.factory(this.url());
    this.source = source;
    source.addEventListener("step", (ev) => {
      const record = JSON.parse(ev.data) as StepRecord;
      if (this.store.ingest(record)) this.onUpdate();
    });
    source.addEventListener("end", (ev) => {
      this.close();
      this.onEnd(JSON.parse(ev.data) as TerminalEvent);
    });
    source.onerror = () => {
      source.close();
      if (!this.closed) this.schedule(() => this.connect(), this.retryMs);
    };
  }

  close(): void {
    this.closed = true;
    this.source?.close();
  }
}
