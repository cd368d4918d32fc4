import { LiveSeries } from "./series.js";
import type { EstimateEvent, QueryStatus, SeriesPoint } from "./types.js";
import { isTerminal } from "./types.js";

/** What the live view renders; the controller drives one of these. */
export interface ChartView {
  appendPoint(group: string, point: SeriesPoint): void;
  setGroups(groups: string[]): void;
  setStatus(status: QueryStatus, note?: string): void;
  /** terminal: no further points will arrive and stop is disabled */
  freeze(): void;
  /** reached=true highlights that the width threshold has been met; the
   * user still decides whether to stop. */
  setThresholdReached(reached: boolean): void;
  showGap(): void;
  showError(message: string): void;
}

export interface StopApi {
  stop(queryId: string): Promise<unknown>;
}

/** Drives the live view for one query: appends every received estimate to
 * the chart, highlights (never triggers) the stop threshold, and issues at
 * most one stop request no matter how often the button is pressed. */
export class LiveViewController {
  readonly series = new LiveSeries();
  private stopIssued = false;
  private frozen = false;
  private knownGroups = 0;

  constructor(
    private readonly queryId: string,
    private readonly api: StopApi,
    private readonly view: ChartView,
    private readonly options: { widthThreshold?: number; now?: () => number } = {},
  ) {}

  get isFrozen(): boolean {
    return this.frozen;
  }

  get stopWasIssued(): boolean {
    return this.stopIssued;
  }

  handleEvent(event: EstimateEvent): void {
    if (this.frozen) {
      return;
    }
    const now = this.options.now ?? Date.now;
    const added = this.series.append(event, now());
    if (this.series.groups().length !== this.knownGroups) {
      this.knownGroups = this.series.groups().length;
      this.view.setGroups(this.series.groups());
    }
    for (const [i, group] of event.groups.entries()) {
      const point = added[i];
      if (point !== undefined) {
        this.view.appendPoint(group.key, point);
      }
    }
    this.view.setStatus(event.status, event.note);
    this.updateThreshold();
    if (isTerminal(event.status)) {
      this.frozen = true;
      this.view.freeze();
    }
  }

  handleGap(): void {
    this.series.markGap();
    this.view.showGap();
  }

  handleStreamError(message: string): void {
    this.view.showError(message);
  }

  /** Stop button: idempotent; later presses and presses after terminal do
   * nothing. */
  async requestStop(): Promise<void> {
    if (this.stopIssued || this.frozen) {
      return;
    }
    this.stopIssued = true;
    try {
      await this.api.stop(this.queryId);
    } catch (error) {
      // A 410 means the query ended on its own; anything else is surfaced.
      this.view.showError((error as Error).message);
    }
  }

  private updateThreshold(): void {
    const threshold = this.options.widthThreshold;
    if (threshold === undefined) {
      return;
    }
    const groups = this.series.groups();
    if (groups.length === 0) {
      return;
    }
    const reached = groups.every((group) => {
      const latest = this.series.latest(group);
      return latest !== undefined && latest.relativeWidth <= threshold;
    });
    this.view.setThresholdReached(reached);
  }
}
