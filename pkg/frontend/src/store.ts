import type { Mode, StepRecord } from "./types.js";

export interface ChartPoint {
  x: number;
  y: number;
}

/** Holds the record stream for one session; ingestion is idempotent by
 * ordinal, so replays and reconnect overlaps never duplicate data. */
export class RunStore {
  private records = new Map<number, StepRecord>();

  ingest(record: StepRecord): boolean {
    if (this.records.has(record.ordinal)) return false;
    this.records.set(record.ordinal, record);
    return true;
  }

  get size(): number {
    return this.records.size;
  }

  get lastOrdinal(): number | null {
    if (this.records.size === 0) return null;
    return Math.max(...this.records.keys());
  }

  /** true when ordinals form a contiguous 0..n-1 run */
  get contiguous(): boolean {
    const last = this.lastOrdinal;
    return last === null || this.records.size === last + 1;
  }

  ordered(): StepRecord[] {
    return [...this.records.values()].sort((a, b) => a.ordinal - b.ordinal);
  }

  timeline(): { ordinal: number; mode: Mode }[] {
    return this.ordered().map((r) => ({ ordinal: r.ordinal, mode: r.mode }));
  }

  /** per-record mean over points; one chart point per record */
  minDSeries(): ChartPoint[] {
    return this.ordered().map((r) => {
      const vals = r.points.map((p) => p.min_d).filter((v): v is number => v !== null);
      const y = vals.length ? vals.reduce((a, b) => a + b, 0) / vals.length : 0;
      return { x: r.ordinal, y };
    });
  }

  dTSeries(): ChartPoint[] {
    return this.ordered().map((r) => {
      const vals = r.points.map((p) => p.dist_target);
      const y = vals.length ? vals.reduce((a, b) => a + b, 0) / vals.length : 0;
      return { x: r.ordinal, y };
    });
  }

  latestHandles(): [number, number][] {
    const ordered = this.ordered();
    if (!ordered.length) return [];
    return ordered[ordered.length - 1].points.map((p) => p.h);
  }
}
