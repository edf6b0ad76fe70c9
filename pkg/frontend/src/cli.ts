#!/usr/bin/env node
/** plots <kind> --in CSV [--in CSV ...] --out FILE [--title TEXT] */

import { readFileSync, writeFileSync } from "node:fs";
import { SchemaError } from "./csv.js";
import { Kind, loadInput, RENDERERS } from "./figures.js";

export function runCli(argv: string[]): number {
  const [kind, ...rest] = argv;
  if (!kind || !(kind in RENDERERS)) {
    process.stderr.write(
      `usage: plots <${Object.keys(RENDERERS).join("|")}> --in CSV [--in CSV ...] --out FILE\n`,
    );
    return 2;
  }
  const inputs: string[] = [];
  let out = "";
  let title: string | undefined;
  for (let i = 0; i < rest.length; i++) {
    const a = rest[i];
    if (a === "--in") inputs.push(rest[++i]);
    else if (a === "--out") out = rest[++i];
    else if (a === "--title") title = rest[++i];
    else {
      process.stderr.write(`unknown argument ${a}\n`);
      return 2;
    }
  }
  if (inputs.length === 0 || !out) {
    process.stderr.write("need at least one --in CSV and an --out FILE\n");
    return 2;
  }
  try {
    const tables = inputs.map((p) => loadInput(p, (q) => readFileSync(q, "utf-8")));
    const svg = RENDERERS[kind as Kind](tables, title);
    writeFileSync(out, svg);
  } catch (err) {
    if (err instanceof SchemaError) {
      process.stderr.write(`schema mismatch: ${err.message}\n`);
      return 2;
    }
    throw err;
  }
  return 0;
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("cli.js") || entry.endsWith("plots")) {
  process.exit(runCli(process.argv.slice(2)));
}
