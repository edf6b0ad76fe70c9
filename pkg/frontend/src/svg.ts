/** String-building SVG helpers; figures are plain vector documents. */

export interface Attrs {
  [key: string]: string | number;
}

function attrString(attrs: Attrs): string {
  return Object.entries(attrs)
    .map(([k, v]) => ` ${k}="${v}"`)
    .join("");
}

export function el(tag: string, attrs: Attrs, children: string[] = []): string {
  if (children.length === 0) {
    return `<${tag}${attrString(attrs)}/>`;
  }
  return `<${tag}${attrString(attrs)}>${children.join("")}</${tag}>`;
}

export function text(x: number, y: number, content: string, attrs: Attrs = {}): string {
  const esc = content
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;");
  return `<text x="${x.toFixed(2)}" y="${y.toFixed(2)}"${attrString(attrs)}>${esc}</text>`;
}

export function polyline(points: Array<[number, number]>, attrs: Attrs): string {
  const pts = points.map(([x, y]) => `${x.toFixed(2)},${y.toFixed(2)}`).join(" ");
  return el("polyline", { points: pts, fill: "none", ...attrs });
}

export function document(width: number, height: number, children: string[]): string {
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
    `viewBox="0 0 ${width} ${height}">` +
    `<rect width="${width}" height="${height}" fill="white"/>` +
    children.join("") +
    `</svg>`
  );
}

export const PALETTE = ["#1f609e", "#c4452c", "#3c8a43", "#7b4fa6", "#b58a1f", "#4aa3a0"];

/** Piecewise-linear dark-blue to yellow colormap for heatmaps. */
export function heatColor(t: number): string {
  const stops: Array<[number, [number, number, number]]> = [
    [0.0, [48, 18, 59]],
    [0.25, [62, 100, 170]],
    [0.5, [60, 160, 135]],
    [0.75, [160, 190, 60]],
    [1.0, [250, 230, 55]],
  ];
  const tt = Math.max(0, Math.min(1, t));
  for (let i = 1; i < stops.length; i++) {
    if (tt <= stops[i][0]) {
      const [t0, c0] = stops[i - 1];
      const [t1, c1] = stops[i];
      const f = (tt - t0) / (t1 - t0);
      const rgb = c0.map((c, j) => Math.round(c + f * (c1[j] - c)));
      return `rgb(${rgb[0]},${rgb[1]},${rgb[2]})`;
    }
  }
  return "rgb(250,230,55)";
}
