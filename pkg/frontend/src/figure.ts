/**
 * Deterministic SVG renderer: multi-panel figures of metric traces, one
 * line per run with a shaded one-standard-deviation band when a panel
 * aggregates several seeds. Identical inputs produce identical bytes.
 */

import { Trace, traceExtent } from "./stats.js";

export interface PanelSpec {
  title: string;
  traces: Trace[];
  yLabel?: string;
}

export interface FigureOptions {
  width?: number;
  height?: number;
  xLabel?: string;
}

const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];
const MARGIN = { top: 34, right: 14, bottom: 42, left: 58 };

function fmt(v: number): string {
  if (!Number.isFinite(v)) return "0";
  const rounded = Math.abs(v) >= 1000 ? v.toFixed(0) : v.toPrecision(4);
  return String(Number(rounded));
}

function ticks(lo: number, hi: number, count = 5): number[] {
  const span = hi - lo;
  const rawStep = span / (count - 1);
  const mag = Math.pow(10, Math.floor(Math.log10(rawStep)));
  const candidates = [1, 2, 2.5, 5, 10].map((m) => m * mag);
  const step = candidates.find((c) => span / c <= count) ?? candidates[candidates.length - 1];
  const start = Math.ceil(lo / step) * step;
  const out: number[] = [];
  for (let v = start; v <= hi + 1e-9; v += step) out.push(Number(v.toPrecision(12)));
  return out;
}

class Scale {
  constructor(
    private lo: number,
    private hi: number,
    private a: number,
    private b: number,
  ) {}

  map(v: number): number {
    const t = (v - this.lo) / (this.hi - this.lo);
    return this.a + t * (this.b - this.a);
  }
}

function renderPanel(spec: PanelSpec, x0: number, panelW: number, height: number, xLabel: string): string {
  const innerW = panelW - MARGIN.left - MARGIN.right;
  const innerH = height - MARGIN.top - MARGIN.bottom;
  const xs = spec.traces.flatMap((t) => t.steps);
  const xLo = Math.min(...xs);
  const xHi = Math.max(...xs);
  const [yLo, yHi] = traceExtent(spec.traces, true);
  const sx = new Scale(xLo, xHi === xLo ? xLo + 1 : xHi, x0 + MARGIN.left, x0 + MARGIN.left + innerW);
  const sy = new Scale(yLo, yHi, MARGIN.top + innerH, MARGIN.top);

  const parts: string[] = [];
  parts.push(`<g class="panel" data-title="${spec.title}">`);
  parts.push(
    `<text class="title" x="${x0 + MARGIN.left + innerW / 2}" y="${MARGIN.top - 14}" text-anchor="middle">${spec.title}</text>`,
  );

  // axes with ticks
  const axisY = MARGIN.top + innerH;
  parts.push(`<g class="axis axis-x">`);
  parts.push(
    `<line x1="${x0 + MARGIN.left}" y1="${axisY}" x2="${x0 + MARGIN.left + innerW}" y2="${axisY}" stroke="#333"/>`,
  );
  for (const t of ticks(xLo, xHi)) {
    const px = sx.map(t);
    parts.push(`<line x1="${fmt(px)}" y1="${axisY}" x2="${fmt(px)}" y2="${axisY + 4}" stroke="#333"/>`);
    parts.push(`<text x="${fmt(px)}" y="${axisY + 16}" text-anchor="middle" class="tick">${fmt(t)}</text>`);
  }
  parts.push(
    `<text class="label" x="${x0 + MARGIN.left + innerW / 2}" y="${axisY + 32}" text-anchor="middle">${xLabel}</text>`,
  );
  parts.push(`</g>`);

  parts.push(`<g class="axis axis-y">`);
  parts.push(
    `<line x1="${x0 + MARGIN.left}" y1="${MARGIN.top}" x2="${x0 + MARGIN.left}" y2="${axisY}" stroke="#333"/>`,
  );
  for (const t of ticks(yLo, yHi)) {
    const py = sy.map(t);
    parts.push(`<line x1="${x0 + MARGIN.left - 4}" y1="${fmt(py)}" x2="${x0 + MARGIN.left}" y2="${fmt(py)}" stroke="#333"/>`);
    parts.push(
      `<text x="${x0 + MARGIN.left - 7}" y="${fmt(py)}" text-anchor="end" dominant-baseline="middle" class="tick">${fmt(t)}</text>`,
    );
  }
  if (spec.yLabel) {
    parts.push(
      `<text class="label" transform="rotate(-90 ${x0 + 14} ${MARGIN.top + innerH / 2})" x="${x0 + 14}" y="${MARGIN.top + innerH / 2}" text-anchor="middle">${spec.yLabel}</text>`,
    );
  }
  parts.push(`</g>`);

  spec.traces.forEach((trace, i) => {
    const color = PALETTE[i % PALETTE.length];
    if (trace.seeds > 1) {
      const upper = trace.steps.map((s, j) => `${fmt(sx.map(s))},${fmt(sy.map(trace.mean[j] + trace.std[j]))}`);
      const lower = trace.steps
        .map((s, j) => `${fmt(sx.map(s))},${fmt(sy.map(trace.mean[j] - trace.std[j]))}`)
        .reverse();
      parts.push(
        `<polygon class="band" data-label="${trace.label}" points="${upper.concat(lower).join(" ")}" fill="${color}" opacity="0.18"/>`,
      );
    }
    const d = trace.steps
      .map((s, j) => `${j === 0 ? "M" : "L"}${fmt(sx.map(s))} ${fmt(sy.map(trace.mean[j]))}`)
      .join(" ");
    parts.push(
      `<path class="series" data-label="${trace.label}" d="${d}" fill="none" stroke="${color}" stroke-width="1.6"/>`,
    );
  });
  parts.push(`</g>`);
  return parts.join("\n");
}

export function renderFigure(panels: PanelSpec[], opts: FigureOptions = {}): string {
  if (panels.length === 0) throw new Error("no panels to render");
  for (const p of panels) {
    if (p.traces.length === 0) throw new Error(`panel '${p.title}' has no traces`);
  }
  const panelW = opts.width ?? 420;
  const height = opts.height ?? 300;
  const width = panelW * panels.length;
  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" viewBox="0 0 ${width} ${height}" font-family="sans-serif" font-size="11">`,
  );
  parts.push(`<rect width="${width}" height="${height}" fill="white"/>`);
  panels.forEach((panel, i) => {
    parts.push(renderPanel(panel, i * panelW, panelW, height, opts.xLabel ?? "step"));
  });
  // legend from the first panel's traces
  const labels = panels[0].traces.map((t) => t.label);
  parts.push(`<g class="legend">`);
  labels.forEach((label, i) => {
    const x = MARGIN.left + i * 150;
    parts.push(`<rect x="${x}" y="6" width="12" height="4" fill="${PALETTE[i % PALETTE.length]}"/>`);
    parts.push(`<text x="${x + 16}" y="11" class="legend-label">${label}</text>`);
  });
  parts.push(`</g>`);
  parts.push(`</svg>`);
  return parts.join("\n") + "\n";
}
