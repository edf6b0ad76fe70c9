/** The six figure kinds rendered from solver CSV outputs.
 *
 * Figures are pure functions of the CSV contents; no physics is
 * recomputed here beyond least-squares slope fits used for annotations.
 */

import { parseCsv, requireColumns, SchemaError, Table } from "./csv.js";
import { extent, linearScale, logScale, Scale } from "./scale.js";
import { document as svgDocument, el, heatColor, PALETTE, polyline, text } from "./svg.js";
import { fitLogSlope } from "./slope.js";

export const WIDTH = 560;
export const HEIGHT = 420;
const M = { left: 72, right: 24, top: 40, bottom: 56 };

export interface FigureInput {
  path: string;
  table: Table;
}

export type Kind = "conv_h" | "conv_K" | "residuals" | "radial" | "slice" | "energy";

interface Series {
  label: string;
  points: Array<[number, number]>;
}

function frame(
  xs: Scale,
  ys: Scale,
  xlabel: string,
  ylabel: string,
  title: string,
): string[] {
  const out: string[] = [];
  out.push(
    el("rect", {
      x: M.left,
      y: M.top,
      width: WIDTH - M.left - M.right,
      height: HEIGHT - M.top - M.bottom,
      fill: "none",
      stroke: "#333",
      "stroke-width": 1,
    }),
  );
  for (const t of xs.ticks()) {
    const px = xs.toPixel(t);
    if (px < M.left - 0.5 || px > WIDTH - M.right + 0.5) continue;
    out.push(
      el("line", {
        x1: px, y1: HEIGHT - M.bottom, x2: px, y2: HEIGHT - M.bottom + 5,
        stroke: "#333",
      }),
    );
    out.push(
      text(px, HEIGHT - M.bottom + 18, formatTick(t, xs.log), {
        "text-anchor": "middle", "font-size": 11,
      }),
    );
  }
  for (const t of ys.ticks()) {
    const py = ys.toPixel(t);
    if (py < M.top - 0.5 || py > HEIGHT - M.bottom + 0.5) continue;
    out.push(el("line", { x1: M.left - 5, y1: py, x2: M.left, y2: py, stroke: "#333" }));
    out.push(
      text(M.left - 8, py + 4, formatTick(t, ys.log), {
        "text-anchor": "end", "font-size": 11,
      }),
    );
  }
  out.push(
    text(WIDTH / 2, HEIGHT - 14, xlabel, { "text-anchor": "middle", "font-size": 13 }),
  );
  out.push(
    text(16, HEIGHT / 2, ylabel, {
      "text-anchor": "middle",
      "font-size": 13,
      transform: `rotate(-90 16 ${HEIGHT / 2})`,
    }),
  );
  out.push(text(WIDTH / 2, 22, title, { "text-anchor": "middle", "font-size": 15 }));
  return out;
}

function formatTick(v: number, log: boolean): string {
  if (log) {
    const e = Math.log10(v);
    if (Math.abs(e - Math.round(e)) < 1e-9) return `1e${Math.round(e)}`;
    return v.toExponential(0);
  }
  if (Math.abs(v) >= 1000 || (v !== 0 && Math.abs(v) < 0.01)) return v.toExponential(1);
  return String(Number(v.toPrecision(6)));
}

function drawSeries(series: Series[], xs: Scale, ys: Scale): string[] {
  const out: string[] = [];
  series.forEach((s, i) => {
    const color = PALETTE[i % PALETTE.length];
    const pts = s.points
      .filter(([x, y]) => Number.isFinite(x) && Number.isFinite(y) && (!ys.log || y > 0) && (!xs.log || x > 0))
      .map(([x, y]) => [xs.toPixel(x), ys.toPixel(y)] as [number, number]);
    if (pts.length === 0) return;
    out.push(polyline(pts, { stroke: color, "stroke-width": 1.6, class: `series-${s.label}` }));
    for (const [px, py] of pts) {
      out.push(el("circle", { cx: px.toFixed(2), cy: py.toFixed(2), r: 2.6, fill: color }));
    }
  });
  return out;
}

function legend(series: Series[]): string[] {
  const out: string[] = [];
  series.forEach((s, i) => {
    const y = M.top + 16 + 16 * i;
    const x = WIDTH - M.right - 150;
    out.push(el("line", {
      x1: x, y1: y - 4, x2: x + 22, y2: y - 4,
      stroke: PALETTE[i % PALETTE.length], "stroke-width": 2,
    }));
    out.push(text(x + 28, y, s.label, { "font-size": 12, class: "legend-label" }));
  });
  return out;
}

function sortedByX(points: Array<[number, number]>): Array<[number, number]> {
  return [...points].sort((a, b) => a[0] - b[0]);
}

// ---------------------------------------------------------------------------

export function renderConvH(inputs: FigureInput[], title = "convergence vs h"): string {
  const table = inputs[0].table;
  requireColumns(table, ["h", "eig_error_vs_ref", "l2_error", "dg_error", "nev_index"]);
  const indices = [...new Set(table.rows.map((r) => r.nev_index))].sort();
  const series: Series[] = [];
  for (const idx of indices) {
    const rows = table.rows.filter((r) => r.nev_index === idx);
    for (const col of ["eig_error_vs_ref", "l2_error", "dg_error"]) {
      const pts = rows
        .map((r) => [Number(r.h), Number(r[col])] as [number, number])
        .filter(([x, y]) => x > 0 && y > 0 && Number.isFinite(y));
      if (pts.length >= 2) {
        series.push({ label: `${col}[${idx}]`, points: sortedByX(pts) });
      }
    }
  }
  if (series.length === 0) throw new SchemaError("no positive error data to plot");
  const allX = series.flatMap((s) => s.points.map((p) => p[0]));
  const allY = series.flatMap((s) => s.points.map((p) => p[1]));
  const xs = logScale(extent(allX, true), [M.left, WIDTH - M.right]);
  const ys = logScale(extent(allY, true), [HEIGHT - M.bottom, M.top]);
  const slope = fitLogSlope(
    series[0].points.map((p) => p[0]),
    series[0].points.map((p) => p[1]),
  );
  const parts = frame(xs, ys, "h", "error", title);
  parts.push(...drawSeries(series, xs, ys));
  parts.push(...legend(series));
  parts.push(
    text(M.left + 12, M.top + 18, `fitted slope ${slope.toFixed(2)}`, {
      "font-size": 13,
      class: "slope-annotation",
    }),
  );
  parts.push(...slopeTriangle(series[0], slope, xs, ys));
  return svgDocument(WIDTH, HEIGHT, parts);
}

function slopeTriangle(s: Series, slope: number, xs: Scale, ys: Scale): string[] {
  // reference triangle under the first series with the rounded slope
  const pts = s.points;
  if (pts.length < 2) return [];
  const [x0, y0] = pts[0];
  const [x1] = pts[1];
  const ref = Math.max(1, Math.round(Math.abs(slope)));
  const yBase = y0 * 0.5;
  const yEnd = yBase * Math.pow(x1 / x0, ref);
  const a: [number, number] = [xs.toPixel(x0), ys.toPixel(yBase)];
  const b: [number, number] = [xs.toPixel(x1), ys.toPixel(yEnd)];
  const c: [number, number] = [xs.toPixel(x1), ys.toPixel(yBase)];
  return [
    polyline([a, c, b, a], { stroke: "#666", "stroke-width": 1, class: "slope-triangle" }),
    text((a[0] + c[0]) / 2, a[1] + 14, `${ref}`, { "font-size": 11, "text-anchor": "middle" }),
  ];
}

export function renderConvK(inputs: FigureInput[], title = "convergence vs K"): string {
  const table = inputs[0].table;
  requireColumns(table, ["K", "eig_error_vs_ref", "nev_index"]);
  const indices = [...new Set(table.rows.map((r) => r.nev_index))].sort();
  const series: Series[] = [];
  for (const idx of indices) {
    const rows = table.rows.filter((r) => r.nev_index === idx);
    const pts = rows
      .map((r) => [Number(r.K), Number(r.eig_error_vs_ref)] as [number, number])
      .filter(([, y]) => y > 0 && Number.isFinite(y));
    if (pts.length >= 2) series.push({ label: `eig_error[${idx}]`, points: sortedByX(pts) });
  }
  if (series.length === 0) throw new SchemaError("no positive error data to plot");
  const allX = series.flatMap((s) => s.points.map((p) => p[0]));
  const allY = series.flatMap((s) => s.points.map((p) => p[1]));
  const xs = linearScale(extent(allX), [M.left, WIDTH - M.right]);
  const ys = logScale(extent(allY, true), [HEIGHT - M.bottom, M.top]);
  const parts = frame(xs, ys, "K", "error", title);
  parts.push(...drawSeries(series, xs, ys));
  parts.push(...legend(series));
  return svgDocument(WIDTH, HEIGHT, parts);
}

export function renderResiduals(inputs: FigureInput[], title = "residual histories"): string {
  const series: Series[] = [];
  for (const input of inputs) {
    requireColumns(input.table, ["iter", "idx", "residual"]);
    const byIter = new Map<number, number>();
    for (const row of input.table.rows) {
      const it = Number(row.iter);
      const res = Number(row.residual);
      byIter.set(it, Math.max(byIter.get(it) ?? 0, res));
    }
    const pts = [...byIter.entries()].sort((a, b) => a[0] - b[0]) as Array<[number, number]>;
    series.push({ label: labelFromPath(input.path), points: pts });
  }
  const allX = series.flatMap((s) => s.points.map((p) => p[0]));
  const allY = series.flatMap((s) => s.points.map((p) => p[1]));
  const xs = linearScale(extent(allX), [M.left, WIDTH - M.right]);
  const ys = logScale(extent(allY, true), [HEIGHT - M.bottom, M.top]);
  const parts = frame(xs, ys, "iteration", "residual", title);
  parts.push(...drawSeries(series, xs, ys));
  parts.push(...legend(series));
  return svgDocument(WIDTH, HEIGHT, parts);
}

function labelFromPath(path: string): string {
  const base = path.split("/").pop() ?? path;
  const m = base.match(/residuals_([a-z]+)\.csv/);
  return m ? m[1] : base.replace(/\.csv$/, "");
}

export function renderRadial(inputs: FigureInput[], title = "radial profiles"): string {
  const table = inputs[0].table;
  requireColumns(table, ["r", "series", "value"]);
  const names = [...new Set(table.rows.map((r) => r.series))];
  const series: Series[] = names.map((name) => ({
    label: name,
    points: sortedByX(
      table.rows
        .filter((r) => r.series === name)
        .map((r) => [Number(r.r), Number(r.value)] as [number, number]),
    ),
  }));
  const allX = series.flatMap((s) => s.points.map((p) => p[0]));
  const allY = series.flatMap((s) => s.points.map((p) => p[1]));
  const xs = linearScale(extent(allX), [M.left, WIDTH - M.right]);
  const ys = linearScale(extent(allY), [HEIGHT - M.bottom, M.top]);
  const parts = frame(xs, ys, "r", "value", title);
  parts.push(...drawSeries(series, xs, ys));
  parts.push(...legend(series));
  return svgDocument(WIDTH, HEIGHT, parts);
}

export function renderSlice(inputs: FigureInput[], title = "planar slice"): string {
  const table = inputs[0].table;
  requireColumns(table, ["x", "y", "value"]);
  const xsv = [...new Set(table.rows.map((r) => Number(r.x)))].sort((a, b) => a - b);
  const ysv = [...new Set(table.rows.map((r) => Number(r.y)))].sort((a, b) => a - b);
  const xi = new Map(xsv.map((v, i) => [v, i]));
  const yi = new Map(ysv.map((v, i) => [v, i]));
  const vals = new Array(xsv.length * ysv.length).fill(NaN);
  let vmin = Infinity;
  let vmax = -Infinity;
  for (const row of table.rows) {
    const v = Number(row.value);
    vals[(xi.get(Number(row.x)) ?? 0) * ysv.length + (yi.get(Number(row.y)) ?? 0)] = v;
    if (v < vmin) vmin = v;
    if (v > vmax) vmax = v;
  }
  const span = vmax - vmin || 1;
  const plotW = WIDTH - M.left - M.right;
  const plotH = HEIGHT - M.top - M.bottom;
  const cw = plotW / xsv.length;
  const ch = plotH / ysv.length;
  const parts: string[] = [];
  for (let i = 0; i < xsv.length; i++) {
    for (let j = 0; j < ysv.length; j++) {
      const v = vals[i * ysv.length + j];
      if (!Number.isFinite(v)) continue;
      parts.push(
        el("rect", {
          x: (M.left + i * cw).toFixed(2),
          y: (HEIGHT - M.bottom - (j + 1) * ch).toFixed(2),
          width: (cw + 0.5).toFixed(2),
          height: (ch + 0.5).toFixed(2),
          fill: heatColor((v - vmin) / span),
          class: "heatcell",
        }),
      );
    }
  }
  const xs = linearScale(extent(xsv), [M.left, WIDTH - M.right]);
  const ys = linearScale(extent(ysv), [HEIGHT - M.bottom, M.top]);
  parts.push(...frame(xs, ys, "x", "y", title));
  return svgDocument(WIDTH, HEIGHT, parts);
}

export function renderEnergy(inputs: FigureInput[], title = "energy convergence"): string {
  const series: Series[] = [];
  for (const input of inputs) {
    requireColumns(input.table, ["iter", "energy"]);
    const pts = input.table.rows
      .map((r) => [Number(r.iter), Number(r.energy)] as [number, number])
      .filter(([, y]) => Number.isFinite(y));
    series.push({
      label: (input.path.split("/").pop() ?? input.path).replace(/\.csv$/, ""),
      points: sortedByX(pts),
    });
  }
  const allX = series.flatMap((s) => s.points.map((p) => p[0]));
  const allY = series.flatMap((s) => s.points.map((p) => p[1]));
  const xs = linearScale(extent(allX), [M.left, WIDTH - M.right]);
  const ys = linearScale(extent(allY), [HEIGHT - M.bottom, M.top]);
  const parts = frame(xs, ys, "iteration", "energy", title);
  parts.push(...drawSeries(series, xs, ys));
  parts.push(...legend(series));
  return svgDocument(WIDTH, HEIGHT, parts);
}

export const RENDERERS: Record<Kind, (inputs: FigureInput[], title?: string) => string> = {
  conv_h: renderConvH,
  conv_K: renderConvK,
  residuals: renderResiduals,
  radial: renderRadial,
  slice: renderSlice,
  energy: renderEnergy,
};

export function loadInput(path: string, readFile: (p: string) => string): FigureInput {
  return { path, table: parseCsv(readFile(path)) };
}
