import type { EstimateEvent, SeriesPoint } from "./types.js";

/** Per-group time series of received estimates.
 *
 * Points are appended in event-sequence order and never mutated afterwards;
 * out-of-order or repeated sequence numbers are dropped rather than spliced
 * in. The chart draws these points exactly as received -- no smoothing.
 */
export class LiveSeries {
  private readonly byGroup = new Map<string, SeriesPoint[]>();
  private lastSequence = 0;
  private pendingGap = false;

  /** Flag that the stream reconnected; the next point is marked. */
  markGap(): void {
    this.pendingGap = true;
  }

  /** Append one event; returns the points added (one per group), or an
   * empty array when the event is stale. */
  append(event: EstimateEvent, receivedAtMs: number): SeriesPoint[] {
    if (event.sequence <= this.lastSequence) {
      return [];
    }
    this.lastSequence = event.sequence;
    const added: SeriesPoint[] = [];
    for (const group of event.groups) {
      const estimator = Number(group.estimator);
      const lower = Number(group.lower);
      const upper = Number(group.upper);
      const width = upper - lower;
      const point: SeriesPoint = {
        sequence: event.sequence,
        receivedAtMs,
        estimator,
        lower,
        upper,
        relativeWidth: estimator === 0 ? (width > 0 ? Infinity : 0) : width / Math.abs(estimator),
        sampleFraction: Number(event.sample_fraction),
        gapBefore: this.pendingGap,
      };
      let points = this.byGroup.get(group.key);
      if (points === undefined) {
        points = [];
        this.byGroup.set(group.key, points);
      }
      points.push(point);
      added.push(point);
    }
    if (event.groups.length > 0) {
      this.pendingGap = false;
    }
    return added;
  }

  groups(): string[] {
    return [...this.byGroup.keys()];
  }

  points(group: string): readonly SeriesPoint[] {
    return this.byGroup.get(group) ?? [];
  }

  latest(group: string): SeriesPoint | undefined {
    const points = this.byGroup.get(group);
    return points === undefined ? undefined : points[points.length - 1];
  }

  get sequence(): number {
    return this.lastSequence;
  }
}
