/**
 * Reader for the fairloop metrics format: a `# fairloop-metrics v1` header
 * line, a CSV column header, then one row per training iteration or
 * evaluation step. Fields never contain commas or quotes, so a strict
 * split is exact. Empty cells are missing values.
 */

export const METRICS_VERSION = "fairloop-metrics v1";

export type Cell = number | boolean | string | null;

export interface MetricsTable {
  columns: string[];
  rows: Record<string, Cell>[];
}

function parseCell(raw: string): Cell {
  if (raw === "") return null;
  if (raw === "True") return true;
  if (raw === "False") return false;
  const num = Number(raw);
  if (!Number.isNaN(num) || raw === "nan") return raw === "nan" ? NaN : num;
  return raw;
}

export function parseMetrics(text: string, source = "<string>"): MetricsTable {
  const lines = text.split("\n");
  if (lines.length < 2 || lines[0].trim() !== `# ${METRICS_VERSION}`) {
    throw new Error(`${source}: missing or unsupported metrics header`);
  }
  const columns = lines[1].trim().split(",");
  const rows: Record<string, Cell>[] = [];
  for (let i = 2; i < lines.length; i++) {
    const line = lines[i];
    if (line === "") continue;
    const cells = line.split(",");
    if (cells.length !== columns.length) {
      throw new Error(`${source}: line ${i + 1} has ${cells.length} cells, expected ${columns.length}`);
    }
    const row: Record<string, Cell> = {};
    columns.forEach((c, j) => (row[c] = parseCell(cells[j])));
    rows.push(row);
  }
  return { columns, rows };
}

export function requireColumn(table: MetricsTable, column: string, source = "<table>"): void {
  if (!table.columns.includes(column)) {
    throw new Error(`${source}: column '${column}' not in metrics schema (${table.columns.join(", ")})`);
  }
}

/** Numeric column values of one row set; missing/NaN filtered by caller. */
export function numeric(row: Record<string, Cell>, column: string): number {
  const v = row[column];
  return typeof v === "number" ? v : NaN;
}

/**
 * Derived column: absolute gap between the observed and the ground-truth
 * disparity, available on instrumented runs.
 */
export function withDerivedColumns(table: MetricsTable): MetricsTable {
  if (
    table.columns.includes("delta_observed") &&
    table.columns.includes("delta_true") &&
    !table.columns.includes("disparity_gap")
  ) {
    const columns = [...table.columns, "disparity_gap"];
    const rows = table.rows.map((r) => {
      const gap = Math.abs(numeric(r, "delta_observed") - numeric(r, "delta_true"));
      return { ...r, disparity_gap: Number.isNaN(gap) ? null : gap };
    });
    return { columns, rows };
  }
  return table;
}
