// Hand-rolled SVG line charts for sweep results. One marker per grid
// point, straight segments between them, no smoothing: the chart is the
// raw table.

export interface ChartOptions {
  width?: number;
  height?: number;
  yMin?: number;
  yMax?: number;
  title: string;
  yLabel: string;
}

const MARGIN = { top: 28, right: 16, bottom: 34, left: 52 };

function scale(value: number, lo: number, hi: number, outLo: number, outHi: number): number {
  if (hi === lo) return (outLo + outHi) / 2;
  return outLo + ((value - lo) / (hi - lo)) * (outHi - outLo);
}

function fmt(value: number): string {
  const rounded = Math.round(value * 1000) / 1000;
  return String(rounded);
}

export function lineChart(xs: number[], ys: number[], opts: ChartOptions): string {
  if (xs.length !== ys.length) throw new Error("xs and ys must have equal length");
  if (xs.length === 0) throw new Error("empty series");
  const width = opts.width ?? 420;
  const height = opts.height ?? 220;
  const xLo = Math.min(...xs);
  const xHi = Math.max(...xs);
  const dataLo = Math.min(...ys);
  const dataHi = Math.max(...ys);
  const yLo = opts.yMin ?? (dataLo === dataHi ? dataLo - 1 : dataLo);
  const yHi = opts.yMax ?? (dataLo === dataHi ? dataHi + 1 : dataHi);
  const plotL = MARGIN.left;
  const plotR = width - MARGIN.right;
  const plotT = MARGIN.top;
  const plotB = height - MARGIN.bottom;

  const px = (x: number) => scale(x, xLo, xHi, plotL, plotR);
  const py = (y: number) => scale(y, yLo, yHi, plotB, plotT);

  const pts = xs.map((x, i) => `${fmt(px(x))},${fmt(py(ys[i] as number))}`);
  const circles = xs
    .map(
      (x, i) =>
        `<circle cx="${fmt(px(x))}" cy="${fmt(py(ys[i] as number))}" r="3.5" ` +
        `data-x="${fmt(x)}" data-y="${fmt(ys[i] as number)}"/>`,
    )
    .join("");
  const zeroLine =
    xLo < 0 && xHi > 0
      ? `<line class="zero" x1="${fmt(px(0))}" y1="${plotT}" x2="${fmt(px(0))}" y2="${plotB}"/>`
      : "";

  return (
    `<svg viewBox="0 0 ${width} ${height}" role="img" aria-label="${opts.title}">` +
    `<text class="title" x="${plotL}" y="16">${opts.title}</text>` +
    `<line class="axis" x1="${plotL}" y1="${plotB}" x2="${plotR}" y2="${plotB}"/>` +
    `<line class="axis" x1="${plotL}" y1="${plotT}" x2="${plotL}" y2="${plotB}"/>` +
    zeroLine +
    `<text class="tick" x="${plotL}" y="${height - 12}">${fmt(xLo)}</text>` +
    `<text class="tick" text-anchor="end" x="${plotR}" y="${height - 12}">${fmt(xHi)}</text>` +
    `<text class="tick" text-anchor="end" x="${plotL - 6}" y="${plotB}">${fmt(yLo)}</text>` +
    `<text class="tick" text-anchor="end" x="${plotL - 6}" y="${plotT + 4}">${fmt(yHi)}</text>` +
    `<text class="ylabel" x="${plotL - 6}" y="${plotT - 8}" text-anchor="end">${opts.yLabel}</text>` +
    `<polyline fill="none" points="${pts.join(" ")}"/>` +
    circles +
    `</svg>`
  );
}

export interface SweepChartInput {
  beta: number;
  mentions_person: boolean;
  evidence_aggregate_log: number;
}

export function mentionChart(points: SweepChartInput[]): string {
  return lineChart(
    points.map((p) => p.beta),
    points.map((p) => (p.mentions_person ? 1 : 0)),
    { title: "person mentioned vs beta", yLabel: "mentioned", yMin: 0, yMax: 1 },
  );
}

export function evidenceChart(points: SweepChartInput[]): string {
  return lineChart(
    points.map((p) => p.beta),
    points.map((p) => p.evidence_aggregate_log),
    { title: "log person evidence vs beta", yLabel: "log p" },
  );
}
