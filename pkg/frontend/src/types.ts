export type QueryStatus = "running" | "degraded" | "stopped" | "finished";

export const TERMINAL_STATUSES: ReadonlySet<QueryStatus> = new Set([
  "stopped",
  "finished",
]);

/** One per-group estimate inside an event. Numbers travel as decimal
 * strings so 64-bit values survive JSON parsing. */
export interface GroupEstimate {
  key: string;
  estimator: string;
  lower: string;
  upper: string;
}

export interface EstimateEvent {
  query_id: string;
  sequence: number;
  status: QueryStatus;
  sample_fraction: string;
  groups: GroupEstimate[];
  note?: string;
}

/** A chart point: exactly one received estimate, never recomputed. */
export interface SeriesPoint {
  sequence: number;
  receivedAtMs: number;
  estimator: number;
  lower: number;
  upper: number;
  relativeWidth: number;
  sampleFraction: number;
  /** true when a stream gap (reconnect) happened right before this point */
  gapBefore: boolean;
}

export function isTerminal(status: QueryStatus): boolean {
  return TERMINAL_STATUSES.has(status);
}
