import type { SeriesPoint } from "./types.js";

export interface ChartGeometry {
  width: number;
  height: number;
  padding: number;
}

export interface ChartModel {
  /** SVG path of the confidence band (upper edge out, lower edge back). */
  bandPath: string;
  /** SVG path of the estimator line. */
  linePath: string;
  /** x pixel of every point, in order (one per received event). */
  xs: number[];
  yDomain: [number, number];
  gapXs: number[];
}

function scale(domain: [number, number], range: [number, number]) {
  const [d0, d1] = domain;
  const [r0, r1] = range;
  const span = d1 - d0 || 1;
  return (v: number) => r0 + ((v - d0) / span) * (r1 - r0);
}

/** Pure chart model: every received point becomes one x position; nothing
 * is interpolated, resampled or smoothed. */
export function buildChartModel(
  points: readonly SeriesPoint[],
  geometry: ChartGeometry,
): ChartModel {
  const { width, height, padding } = geometry;
  if (points.length === 0) {
    return { bandPath: "", linePath: "", xs: [], yDomain: [0, 1], gapXs: [] };
  }
  const fractions = points.map((p) => p.sampleFraction);
  const xDomain: [number, number] = [
    Math.min(...fractions, 0),
    Math.max(...fractions, 1e-9),
  ];
  let lo = Math.min(...points.map((p) => p.lower));
  let hi = Math.max(...points.map((p) => p.upper));
  if (lo === hi) {
    lo -= 1;
    hi += 1;
  }
  const x = scale(xDomain, [padding, width - padding]);
  const y = scale([lo, hi], [height - padding, padding]);

  const xs = points.map((p) => x(p.sampleFraction));
  const upper = points.map((p, i) => `${xs[i]},${y(p.upper)}`);
  const lower = [...points]
    .reverse()
    .map((p, i) => `${xs[points.length - 1 - i]},${y(p.lower)}`);
  const bandPath = `M${upper.join(" L")} L${lower.join(" L")} Z`;
  const linePath = `M${points.map((p, i) => `${xs[i]},${y(p.estimator)}`).join(" L")}`;
  const gapXs = points.filter((p) => p.gapBefore).map((p) => x(p.sampleFraction));
  return { bandPath, linePath, xs, yDomain: [lo, hi], gapXs };
}
