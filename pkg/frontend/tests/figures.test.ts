import { readFileSync, mkdtempSync, existsSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { describe, expect, it } from "vitest";

import { parseCsv, requireColumns, SchemaError } from "../src/csv.js";
import { fitLogSlope } from "../src/slope.js";
import { loadInput, RENDERERS } from "../src/figures.js";
import { runCli } from "../src/cli.js";

const SAMPLES = join(__dirname, "..", "samples");

function sample(name: string) {
  return loadInput(join(SAMPLES, name), (p) => readFileSync(p, "utf-8"));
}

describe("csv", () => {
  it("parses header and rows", () => {
    const t = parseCsv("a,b\n1,2\n3,4\n");
    expect(t.header).toEqual(["a", "b"]);
    expect(t.rows).toHaveLength(2);
    expect(t.rows[1].b).toBe("4");
  });

  it("names the missing column", () => {
    const t = parseCsv("a,b\n1,2\n");
    expect(() => requireColumns(t, ["zz"])).toThrowError(/missing column 'zz'/);
  });
});

describe("slope fit", () => {
  it("recovers an exact power law", () => {
    const hs = [0.1, 0.05, 0.025, 0.0125];
    const ys = hs.map((h) => 3 * h * h);
    expect(fitLogSlope(hs, ys)).toBeCloseTo(2.0, 10);
  });
});

describe("figure kinds", () => {
  it("conv_h annotates the fitted slope of synthetic slope-2 data", () => {
    const svg = RENDERERS.conv_h([sample("results_synthetic.csv")]);
    const m = svg.match(/fitted slope ([-\d.]+)/);
    expect(m).not.toBeNull();
    expect(Math.abs(Number(m![1]) - 2.0)).toBeLessThan(0.01);
    expect(svg).toContain("slope-triangle");
  });

  it("conv_K renders a strictly decaying curve", () => {
    const svg = RENDERERS.conv_K([sample("results_convK.csv")]);
    const m = svg.match(/<polyline points="([^"]+)"[^>]*class="series-eig_error\[0\]"/);
    expect(m).not.toBeNull();
    const ys = m![1].split(" ").map((p) => Number(p.split(",")[1]));
    for (let i = 1; i < ys.length; i++) {
      expect(ys[i]).toBeGreaterThan(ys[i - 1]); // svg y grows downward
    }
  });

  it("residuals draws three labeled curves", () => {
    const svg = RENDERERS.residuals([
      sample("residuals_none.csv"),
      sample("residuals_jacobi.csv"),
      sample("residuals_tbdg.csv"),
    ]);
    for (const label of ["none", "jacobi", "tbdg"]) {
      expect(svg).toContain(`>${label}</text>`);
    }
  });

  it("radial renders one curve per series", () => {
    const svg = RENDERERS.radial([sample("radial.csv")]);
    expect(svg).toContain("series-abs_u");
    expect(svg).toContain("series-rho");
  });

  it("slice renders the full heatmap grid", () => {
    const svg = RENDERERS.slice([sample("slice.csv")]);
    const cells = svg.match(/class="heatcell"/g) ?? [];
    expect(cells).toHaveLength(16 * 16);
  });

  it("energy renders from the SCF history schema", () => {
    const svg = RENDERERS.energy([sample("scf_history.csv")]);
    expect(svg).toContain("<svg");
    expect(svg).toContain("energy");
  });

  it("is deterministic", () => {
    const a = RENDERERS.conv_h([sample("results_synthetic.csv")]);
    const b = RENDERERS.conv_h([sample("results_synthetic.csv")]);
    expect(a).toBe(b);
  });
});

describe("cli", () => {
  it("renders every kind end to end", () => {
    const dir = mkdtempSync(join(tmpdir(), "plots-"));
    const jobs: Array<[string, string[]]> = [
      ["conv_h", ["results_synthetic.csv"]],
      ["conv_K", ["results_convK.csv"]],
      ["residuals", ["residuals_none.csv", "residuals_jacobi.csv", "residuals_tbdg.csv"]],
      ["radial", ["radial.csv"]],
      ["slice", ["slice.csv"]],
      ["energy", ["scf_history.csv"]],
    ];
    for (const [kind, files] of jobs) {
      const out = join(dir, `${kind}.svg`);
      const args = [kind];
      for (const f of files) {
        args.push("--in", join(SAMPLES, f));
      }
      args.push("--out", out);
      expect(runCli(args)).toBe(0);
      expect(existsSync(out)).toBe(true);
      expect(readFileSync(out, "utf-8")).toContain("</svg>");
    }
  });

  it("rejects unknown kinds and bad schemas", () => {
    expect(runCli(["nope", "--in", "x", "--out", "y"])).toBe(2);
    const dir = mkdtempSync(join(tmpdir(), "plots-"));
    // radial schema fed to conv_h: missing column diagnostic, exit 2
    expect(
      runCli(["conv_h", "--in", join(SAMPLES, "radial.csv"), "--out", join(dir, "o.svg")]),
    ).toBe(2);
  });
});
