import type { Mode, StepRecord } from "../src/types.js";

export function mockRecord(ordinal: number, mode: Mode, dt = 6 - ordinal * 0.05,
                           minD = 0.2 + (ordinal % 7) * 0.1): StepRecord {
  return {
    ordinal,
    mode,
    k: ordinal + 1,
    points: [
      { h: [4 + ordinal * 0.06, 8], min_d: minD, dist_target: dt,
        dist_temporal: 0.5, reached: false },
      { h: [10, 12], min_d: minD + 0.05, dist_target: dt + 1,
        dist_temporal: null, reached: false },
    ],
    losses: mode === "DOO_ILFA"
      ? { drag: 10 - ordinal * 0.1, mask: 1, dds_surrogate: 0 } : null,
    burst_entry: null,
  };
}

export function mixedStream(n = 100): StepRecord[] {
  // alternating blocks: 11 gradient steps first, then mostly adaptation bursts
  return Array.from({ length: n }, (_, i) =>
    mockRecord(i, i < 11 || i % 5 === 0 ? "DOO_ILFA" : "ILFA_ONLY"));
}
