/** Linear and logarithmic axis scales with tick generation. */

export interface Scale {
  toPixel(v: number): number;
  ticks(): number[];
  domain: [number, number];
  range: [number, number];
  log: boolean;
}

export function linearScale(domain: [number, number], range: [number, number]): Scale {
  const [d0, d1] = domain;
  const [r0, r1] = range;
  const span = d1 - d0 || 1;
  return {
    domain,
    range,
    log: false,
    toPixel: (v) => r0 + ((v - d0) / span) * (r1 - r0),
    ticks: () => niceTicks(d0, d1),
  };
}

export function logScale(domain: [number, number], range: [number, number]): Scale {
  const d0 = Math.log10(domain[0]);
  const d1 = Math.log10(domain[1]);
  const [r0, r1] = range;
  const span = d1 - d0 || 1;
  return {
    domain,
    range,
    log: true,
    toPixel: (v) => r0 + ((Math.log10(v) - d0) / span) * (r1 - r0),
    ticks: () => decadeTicks(domain[0], domain[1]),
  };
}

export function niceTicks(lo: number, hi: number, n = 6): number[] {
  if (!(hi > lo)) return [lo];
  const raw = (hi - lo) / n;
  const mag = Math.pow(10, Math.floor(Math.log10(raw)));
  const norm = raw / mag;
  const step = (norm < 1.5 ? 1 : norm < 3.5 ? 2 : norm < 7.5 ? 5 : 10) * mag;
  const start = Math.ceil(lo / step) * step;
  const out: number[] = [];
  for (let v = start; v <= hi + 1e-12 * step; v += step) {
    out.push(Number(v.toPrecision(12)));
  }
  return out;
}

export function decadeTicks(lo: number, hi: number): number[] {
  const out: number[] = [];
  const e0 = Math.ceil(Math.log10(lo) - 1e-9);
  const e1 = Math.floor(Math.log10(hi) + 1e-9);
  for (let e = e0; e <= e1; e++) {
    out.push(Math.pow(10, e));
  }
  if (out.length === 0) out.push(lo, hi);
  return out;
}

export function extent(values: number[], positiveOnly = false): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (!Number.isFinite(v)) continue;
    if (positiveOnly && v <= 0) continue;
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (!(lo < Infinity)) throw new Error("no finite data for axis extent");
  if (lo === hi) {
    lo = positiveOnly ? lo / 2 : lo - 1;
    hi = positiveOnly ? hi * 2 : hi + 1;
  }
  return [lo, hi];
}
