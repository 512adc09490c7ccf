/** Per-step aggregation of multi-seed traces: mean and standard deviation. */

import { Cell, MetricsTable, numeric, requireColumn } from "./metrics.js";

export interface Trace {
  label: string;
  steps: number[];
  mean: number[];
  std: number[];
  seeds: number;
}

function groupBy<T>(items: T[], key: (t: T) => string): Map<string, T[]> {
  const out = new Map<string, T[]>();
  for (const item of items) {
    const k = key(item);
    const bucket = out.get(k);
    if (bucket) bucket.push(item);
    else out.set(k, [item]);
  }
  return out;
}

export function rollingMean(values: number[], window: number): number[] {
  if (window <= 1) return values.slice();
  const out: number[] = [];
  let acc = 0;
  const queue: number[] = [];
  for (const v of values) {
    queue.push(v);
    acc += v;
    if (queue.length > window) acc -= queue.shift()!;
    out.push(acc / queue.length);
  }
  return out;
}

/**
 * Collapse a metrics table into one trace of `column` vs `step`, averaging
 * across seeds at identical steps. Rows with missing values are dropped.
 */
export function aggregate(
  table: MetricsTable,
  column: string,
  label: string,
  opts: { smooth?: number; absolute?: boolean } = {},
): Trace {
  requireColumn(table, column, label);
  requireColumn(table, "step", label);
  const usable = table.rows.filter((r) => {
    const v = r[column];
    return typeof v === "number" && !Number.isNaN(v);
  });
  const bySeed = groupBy(usable, (r) => String(r["seed"] ?? "0"));
  const perSeed: Map<string, Map<number, number>> = new Map();
  const stepSet = new Set<number>();
  for (const [seed, rows] of bySeed) {
    const series = new Map<number, number>();
    const ordered = rows.slice().sort((a, b) => numeric(a, "step") - numeric(b, "step"));
    const steps = ordered.map((r) => numeric(r, "step"));
    let values = ordered.map((r) => numeric(r, column));
    if (opts.absolute) values = values.map(Math.abs);
    values = rollingMean(values, opts.smooth ?? 1);
    steps.forEach((s, i) => {
      series.set(s, values[i]);
      stepSet.add(s);
    });
    perSeed.set(seed, series);
  }
  const steps = [...stepSet].sort((a, b) => a - b);
  const mean: number[] = [];
  const std: number[] = [];
  for (const s of steps) {
    const vals: number[] = [];
    for (const series of perSeed.values()) {
      const v = series.get(s);
      if (v !== undefined) vals.push(v);
    }
    const m = vals.reduce((a, b) => a + b, 0) / vals.length;
    const variance = vals.reduce((a, b) => a + (b - m) * (b - m), 0) / vals.length;
    mean.push(m);
    std.push(Math.sqrt(variance));
  }
  return { label, steps, mean, std, seeds: perSeed.size };
}

export function traceExtent(traces: Trace[], shaded: boolean): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const t of traces) {
    for (let i = 0; i < t.steps.length; i++) {
      const pad = shaded && t.seeds > 1 ? t.std[i] : 0;
      lo = Math.min(lo, t.mean[i] - pad);
      hi = Math.max(hi, t.mean[i] + pad);
    }
  }
  if (!Number.isFinite(lo) || !Number.isFinite(hi)) return [0, 1];
  if (lo === hi) return [lo - 0.5, hi + 0.5];
  return [lo, hi];
}
