import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";

import { parseMetrics, requireColumn, withDerivedColumns } from "../src/metrics.js";

const FIXTURE = new URL("../fixtures/eval_sellf.csv", import.meta.url).pathname;
const TRAIN_FIXTURE = new URL("../fixtures/train_sellf.csv", import.meta.url).pathname;

describe("metrics parser", () => {
  it("reads the versioned fixture", () => {
    const table = parseMetrics(readFileSync(FIXTURE, "utf8"), "eval_sellf.csv");
    expect(table.columns).toContain("resource");
    expect(table.columns).toContain("delta_true");
    expect(table.rows.length).toBeGreaterThan(1000);
    const seeds = new Set(table.rows.map((r) => r["seed"]));
    expect(seeds.size).toBe(10);
  });

  it("rejects files without the version header", () => {
    expect(() => parseMetrics("a,b\n1,2\n")).toThrow(/header/);
  });

  it("rejects ragged rows", () => {
    const text = "# fairloop-metrics v1\na,b\n1,2\n1\n";
    expect(() => parseMetrics(text)).toThrow(/line 4/);
  });

  it("parses cell types", () => {
    const text = "# fairloop-metrics v1\na,b,c,d,e\n1,2.5,True,,nan\n";
    const row = parseMetrics(text).rows[0];
    expect(row["a"]).toBe(1);
    expect(row["b"]).toBe(2.5);
    expect(row["c"]).toBe(true);
    expect(row["d"]).toBeNull();
    expect(Number.isNaN(row["e"] as number)).toBe(true);
  });

  it("names missing columns", () => {
    const table = parseMetrics("# fairloop-metrics v1\na,b\n1,2\n", "x.csv");
    expect(() => requireColumn(table, "zap", "x.csv")).toThrow(/'zap'/);
  });

  it("derives the disparity gap on instrumented tables", () => {
    const table = withDerivedColumns(parseMetrics(readFileSync(TRAIN_FIXTURE, "utf8")));
    expect(table.columns).toContain("disparity_gap");
    const gaps = table.rows.map((r) => r["disparity_gap"]).filter((v) => typeof v === "number");
    expect(gaps.length).toBe(table.rows.length);
    for (const g of gaps) expect(g as number).toBeGreaterThanOrEqual(0);
  });
});
