/**
 * Batch figure renderer for fairloop metrics files.
 *
 * Usage:
 *   fairloop-plot --input eval.csv:SELLF --input eval_ppo.csv:PPO \
 *     --panel resource:Reward --panel delta_true:Disparity --abs delta_true \
 *     --out figure.svg [--smooth 25] [--phase eval]
 *
 * Each --input names one metrics CSV (with an optional :label); each
 * --panel one column (with an optional :title). Multi-seed inputs are
 * drawn as mean lines with a shaded standard-deviation band.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { basename } from "node:path";

import { parseMetrics, withDerivedColumns } from "./metrics.js";
import { renderFigure, PanelSpec } from "./figure.js";
import { aggregate } from "./stats.js";

interface Args {
  inputs: { path: string; label: string }[];
  panels: { column: string; title: string }[];
  out: string;
  smooth: number;
  phase: string | null;
  absolute: Set<string>;
}

export function parseArgs(argv: string[]): Args {
  const args: Args = { inputs: [], panels: [], out: "figure.svg", smooth: 1, phase: null, absolute: new Set() };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const next = () => {
      i += 1;
      if (i >= argv.length) throw new Error(`missing value for ${flag}`);
      return argv[i];
    };
    switch (flag) {
      case "--input": {
        const raw = next();
        const sep = raw.lastIndexOf(":");
        if (sep > 1) args.inputs.push({ path: raw.slice(0, sep), label: raw.slice(sep + 1) });
        else args.inputs.push({ path: raw, label: basename(raw).replace(/\.csv$/, "") });
        break;
      }
      case "--panel": {
        const raw = next();
        const sep = raw.indexOf(":");
        if (sep > 0) args.panels.push({ column: raw.slice(0, sep), title: raw.slice(sep + 1) });
        else args.panels.push({ column: raw, title: raw });
        break;
      }
      case "--out":
        args.out = next();
        break;
      case "--smooth":
        args.smooth = Number(next());
        break;
      case "--phase":
        args.phase = next();
        break;
      case "--abs":
        args.absolute.add(next());
        break;
      default:
        throw new Error(`unknown flag ${flag}`);
    }
  }
  if (args.inputs.length === 0) throw new Error("at least one --input is required");
  if (args.panels.length === 0) {
    args.panels = [
      { column: "resource", title: "Reward" },
      { column: "delta_true", title: "Disparity" },
    ];
    args.absolute.add("delta_true");
  }
  return args;
}

export function buildFigure(args: Args): string {
  const tables = args.inputs.map(({ path, label }) => {
    let table = withDerivedColumns(parseMetrics(readFileSync(path, "utf8"), path));
    if (args.phase) {
      table = { columns: table.columns, rows: table.rows.filter((r) => r["phase"] === args.phase) };
    }
    return { table, label };
  });
  const panels: PanelSpec[] = args.panels.map(({ column, title }) => ({
    title,
    yLabel: column,
    traces: tables.map(({ table, label }) =>
      aggregate(table, column, label, { smooth: args.smooth, absolute: args.absolute.has(column) }),
    ),
  }));
  return renderFigure(panels);
}

export function main(argv: string[]): number {
  try {
    const args = parseArgs(argv);
    const svg = buildFigure(args);
    writeFileSync(args.out, svg);
    console.log(args.out);
    return 0;
  } catch (err) {
    console.error(String(err instanceof Error ? err.message : err));
    return 1;
  }
}

if (process.argv[1] && process.argv[1].endsWith("cli.js")) {
  process.exit(main(process.argv.slice(2)));
}
