import { QueryApi, validateConfidence, validatePlanJson } from "./api.js";
import { buildChartModel } from "./chart.js";
import { LiveViewController, type ChartView } from "./controller.js";
import { EstimateStream } from "./stream.js";
import type { QueryStatus, SeriesPoint } from "./types.js";

const DEFAULT_PLAN = JSON.stringify(
  { f: { col: "value" }, confidence: 0.95 },
  null,
  2,
);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

class SvgChartView implements ChartView {
  private selectedGroup = "";
  private readonly pointsByGroup = new Map<string, SeriesPoint[]>();

  constructor(
    private readonly svg: SVGSVGElement,
    private readonly groupSelect: HTMLSelectElement,
    private readonly statusLine: HTMLElement,
    private readonly stopButton: HTMLButtonElement,
    private readonly banner: HTMLElement,
  ) {
    groupSelect.addEventListener("change", () => {
      this.selectedGroup = groupSelect.value;
      this.render();
    });
  }

  appendPoint(group: string, point: SeriesPoint): void {
    let points = this.pointsByGroup.get(group);
    if (points === undefined) {
      points = [];
      this.pointsByGroup.set(group, points);
      if (this.selectedGroup === "") {
        this.selectedGroup = group;
      }
    }
    points.push(point);
    if (group === this.selectedGroup) {
      this.render();
    }
  }

  setGroups(groups: string[]): void {
    this.groupSelect.innerHTML = "";
    for (const group of groups) {
      const option = document.createElement("option");
      option.value = group;
      option.textContent = group === "" ? "(all rows)" : group;
      this.groupSelect.appendChild(option);
    }
    this.groupSelect.value = this.selectedGroup;
  }

  setStatus(status: QueryStatus, note?: string): void {
    this.statusLine.textContent = note === undefined ? status : `${status}: ${note}`;
    this.statusLine.dataset.status = status;
    const latest = this.pointsByGroup.get(this.selectedGroup)?.at(-1);
    if (latest !== undefined) {
      const pct = (latest.sampleFraction * 100).toFixed(1);
      const width = Number.isFinite(latest.relativeWidth)
        ? `${(latest.relativeWidth * 100).toFixed(3)}%`
        : "n/a";
      this.statusLine.textContent += `  |  sample ${pct}%  |  rel. width ${width}`;
    }
  }

  freeze(): void {
    this.stopButton.disabled = true;
    this.statusLine.classList.add("terminal");
  }

  setThresholdReached(reached: boolean): void {
    this.stopButton.classList.toggle("threshold-reached", reached);
  }

  showGap(): void {
    this.banner.textContent = "stream reconnected; a gap is marked on the chart";
    this.banner.hidden = false;
  }

  showError(message: string): void {
    this.banner.textContent = message;
    this.banner.hidden = false;
  }

  private render(): void {
    const points = this.pointsByGroup.get(this.selectedGroup) ?? [];
    const model = buildChartModel(points, { width: 800, height: 360, padding: 40 });
    const band = el<HTMLElement>("band");
    const line = el<HTMLElement>("line");
    band.setAttribute("d", model.bandPath);
    line.setAttribute("d", model.linePath);
    const gaps = el<HTMLElement>("gaps");
    gaps.innerHTML = "";
    for (const x of model.gapXs) {
      const mark = document.createElementNS("http://www.w3.org/2000/svg", "line");
      mark.setAttribute("x1", String(x));
      mark.setAttribute("x2", String(x));
      mark.setAttribute("y1", "40");
      mark.setAttribute("y2", "320");
      mark.setAttribute("class", "gap-mark");
      gaps.appendChild(mark);
    }
  }
}

function startLiveView(api: QueryApi, queryId: string): void {
  el<HTMLElement>("launch").hidden = true;
  el<HTMLElement>("live").hidden = false;
  el<HTMLElement>("query-id").textContent = queryId;

  const view = new SvgChartView(
    el<SVGSVGElement & HTMLElement>("chart") as unknown as SVGSVGElement,
    el<HTMLSelectElement>("group-select"),
    el<HTMLElement>("status-line"),
    el<HTMLButtonElement>("stop-button"),
    el<HTMLElement>("banner"),
  );
  const thresholdInput = el<HTMLInputElement>("threshold");
  const controller = new LiveViewController(queryId, api, view, {
    widthThreshold: Number(thresholdInput.value) / 100 || undefined,
  });
  const periodInput = el<HTMLInputElement>("period");
  const stream = new EstimateStream(
    api.streamUrl(queryId, Number(periodInput.value) || 500),
    {
      onEvent: (event) => controller.handleEvent(event),
      onGap: () => controller.handleGap(),
      onError: (message) => controller.handleStreamError(message),
      onClosed: () => undefined,
    },
  );
  el<HTMLButtonElement>("stop-button").addEventListener("click", () => {
    void controller.requestStop();
  });
  stream.start();
}

function main(): void {
  const api = new QueryApi(location.origin);
  const planInput = el<HTMLTextAreaElement>("plan-input");
  planInput.value = DEFAULT_PLAN;
  const form = el<HTMLFormElement>("launch-form");
  const errorBox = el<HTMLElement>("form-error");

  form.addEventListener("submit", (submitEvent) => {
    submitEvent.preventDefault();
    errorBox.hidden = true;
    const confidence = el<HTMLInputElement>("confidence").value;
    const problem = validateConfidence(confidence) ?? validatePlanJson(planInput.value);
    if (problem !== null) {
      errorBox.textContent = problem;
      errorBox.hidden = false;
      return;
    }
    const plan = JSON.parse(planInput.value) as Record<string, unknown>;
    plan["confidence"] = Number(confidence);
    const dataDir = el<HTMLInputElement>("data-dir").value || undefined;
    const pacing = Number(el<HTMLInputElement>("pacing").value) || undefined;
    api
      .submit({ plan, data: dataDir, pacing_ms: pacing })
      .then((id) => startLiveView(api, id))
      .catch((error: Error) => {
        errorBox.textContent = error.message;
        errorBox.hidden = false;
      });
  });
}

window.addEventListener("load", main);
