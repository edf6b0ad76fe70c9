/** Minimal CSV reader for the solver's comma-separated outputs. */

export interface Table {
  header: string[];
  rows: Record<string, string>[];
}

export class SchemaError extends Error {}

export function parseCsv(text: string): Table {
  const lines = text
    .split(/\r?\n/)
    .map((l) => l.trim())
    .filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new SchemaError("empty CSV");
  }
  const header = lines[0].split(",").map((s) => s.trim());
  const rows = lines.slice(1).map((line) => {
    const parts = line.split(",");
    const row: Record<string, string> = {};
    header.forEach((col, i) => {
      row[col] = (parts[i] ?? "").trim();
    });
    return row;
  });
  return { header, rows };
}

export function requireColumns(table: Table, columns: string[]): void {
  for (const col of columns) {
    if (!table.header.includes(col)) {
      throw new SchemaError(`missing column '${col}' (have: ${table.header.join(", ")})`);
    }
  }
}

export function numericColumn(table: Table, column: string): number[] {
  requireColumns(table, [column]);
  return table.rows.map((r) => Number(r[column]));
}
