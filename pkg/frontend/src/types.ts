export type Mode = "DOO_ILFA" | "ILFA_ONLY";

export interface PointStat {
  h: [number, number];
  min_d: number | null;
  dist_target: number;
  dist_temporal: number | null;
  reached: boolean;
}

export interface StepRecord {
  ordinal: number;
  mode: Mode;
  k: number;
  points: PointStat[];
  losses: { drag: number; mask: number; dds_surrogate: number } | null;
  burst_entry: { k: number; max_min_d: number; max_dist_temporal: number } | null;
}

export interface Envelope {
  id: string;
  status: "idle" | "running" | "done" | "failed";
  prepared: boolean;
  created_at: number;
  config: Record<string, unknown>;
  points: number[][];
  parent_id: string | null;
  child_id: string | null;
  failure_reason: string | null;
  done_reason: string | null;
  records: number;
}

export interface TerminalEvent {
  status: string;
  reason: string | null;
}
