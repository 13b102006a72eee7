import { mkdtempSync, writeFileSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { describe, expect, it } from "vitest";

import { advectionFrames, cyclicExtrapolation, nfeHeatmap, nfeHistogram, trajectory2d } from "../src/figures.js";
import {
  FormatError,
  parseFloorPlan,
  parseForecast,
  parseNfeComparison,
  parseNfeProfile,
  parseSolveRecords,
} from "../src/formats.js";
import { main, parseArgs } from "../src/cli.js";
import { sha256 } from "../src/svg.js";

const profileA = JSON.stringify({ model: "runs/vf/model.json", name: "vf", nfe: [20, 20, 26, 32], mean: 24.5, median: 23.0, max: 32 });
const profileB = JSON.stringify({ model: "runs/svfm/model.json", name: "svfm", nfe: [13, 13, 13, 19], mean: 14.5, median: 13.0, max: 19 });

function comparison(a: number[], b: number[]) {
  const cells = new Map<string, number>();
  a.forEach((x, i) => {
    const key = `${x},${b[i]}`;
    cells.set(key, (cells.get(key) ?? 0) + 1);
  });
  return {
    models: ["runs/vf/model.json", "runs/svfm/model.json"],
    cells: [...cells.entries()].map(([k, count]) => {
      const [x, y] = k.split(",").map(Number);
      return { a: x, b: y, count };
    }),
    savings: a.reduce((s, x, i) => s + x - b[i], 0),
    fraction_saved: a.filter((x, i) => b[i] < x).length / a.length,
    n: a.length,
  };
}

const forecastLines = [
  { sample: 0, times: [0, 0.5, 1], states: [[2, 2], [3, 4], [4.5, 7.5]], component: 1, endpoint: "landing", tod: 2.0 },
  { sample: 1, times: [0, 0.5, 1], states: [[2, 2], [4, 2.5], [8.8, 3.2]], component: 0, endpoint: "kitchen", tod: 2.0 },
  { sample: 2, times: [0, 0.5, 1], states: [[2, 2], [1.5, 4], [0.7, 7.4]], component: 2, endpoint: "front-door", tod: 13.0 },
  { sample: 3, times: [0, 0.5, 1], states: [[2, 2], [5, 4], [9, 7]], component: 3, endpoint: "dining-room", tod: 13.0 },
]
  .map((r) => JSON.stringify(r))
  .join("\n");

const plan = JSON.stringify({
  bounds: [[0, 0], [10, 8]],
  origin: [2, 2],
  paths: { kitchen: [[2, 2], [8.8, 3.2]], landing: [[2, 2], [4.5, 7.5]] },
});

describe("parsers", () => {
  it("accepts valid profiles and rejects broken ones", () => {
    expect(parseNfeProfile(profileA, "a.json").mean).toBe(24.5);
    expect(() => parseNfeProfile(JSON.stringify({ name: "x" }), "a.json")).toThrow(FormatError);
  });

  it("checks comparison cell counts against n", () => {
    const bad = { ...comparison([10, 12], [9, 9]), n: 5 };
    expect(() => parseNfeComparison(JSON.stringify(bad), "c.json")).toThrow(/sum to/);
  });

  it("parses forecast rows and validates lengths", () => {
    expect(parseForecast(forecastLines, "f.jsonl")).toHaveLength(4);
    const bad = JSON.stringify({ sample: 0, times: [0, 1], states: [[1, 2]] });
    expect(() => parseForecast(bad, "f.jsonl")).toThrow(FormatError);
  });

  it("parses floor plans", () => {
    expect(Object.keys(parseFloorPlan(plan, "p.json").paths)).toContain("kitchen");
  });
});

describe("nfe histogram", () => {
  it("single constant-valued profile renders one bar", () => {
    const constant = JSON.stringify({ model: "m", name: "m", nfe: [20, 20, 20], mean: 20, median: 20, max: 20 });
    const svg = nfeHistogram([parseNfeProfile(constant, "m.json")], {});
    const group = svg.match(/<g class="hist-m">([\s\S]*?)<\/g>/)![1];
    const bars = group.match(/<rect/g) ?? [];
    expect(bars.length).toBe(1);
  });

  it("overlays one group per model with mean annotations", () => {
    const svg = nfeHistogram([parseNfeProfile(profileA, "a"), parseNfeProfile(profileB, "b")], {});
    expect(svg).toContain('class="hist-vf"');
    expect(svg).toContain('class="hist-svfm"');
    expect(svg).toContain("mean 24.5");
    expect(svg).toContain("mean 14.5");
  });
});

describe("nfe heatmap", () => {
  it("self comparison puts all mass on the diagonal", () => {
    const a = [20, 22, 26, 22];
    const comp = parseNfeComparison(JSON.stringify(comparison(a, a)), "c.json");
    expect(comp.cells.every((c) => c.a === c.b)).toBe(true);
    const svg = nfeHeatmap(comp, {});
    expect(svg).toContain("NFE savings: 0");
  });

  it("title matches an independent recomputation of savings", () => {
    const a = [20, 22, 26, 30];
    const b = [14, 22, 13, 19];
    const comp = parseNfeComparison(JSON.stringify(comparison(a, b)), "c.json");
    const expected = a.reduce((s, x, i) => s + x - b[i], 0);
    const svg = nfeHeatmap(comp, {});
    expect(svg).toContain(`NFE savings: ${expected} over 4 instances`);
    expect(svg).toContain("75.0% of instances saved");
  });
});

describe("trajectories", () => {
  it("renders a legend entry per endpoint", () => {
    const rows = parseForecast(forecastLines, "f.jsonl");
    const svg = trajectory2d(rows, null, {});
    for (const name of ["landing", "kitchen", "front-door", "dining-room"]) {
      expect(svg).toContain(`>${name}</text>`);
    }
  });

  it("draws the floor plan beneath when provided", () => {
    const rows = parseForecast(forecastLines, "f.jsonl");
    const svg = trajectory2d(rows, parseFloorPlan(plan, "p.json"), {});
    expect(svg).toContain('class="floorplan"');
    expect(svg.indexOf('class="floorplan"')).toBeLessThan(svg.indexOf('class="trajectories"'));
  });

  it("empty input still renders axes", () => {
    const svg = trajectory2d([], null, {});
    expect(svg).toContain("<svg");
    expect(svg).toContain("no trajectories");
  });
});

describe("cyclic extrapolation", () => {
  it("shades train and extrapolation regions", () => {
    const rows = parseForecast(forecastLines, "f.jsonl");
    const svg = cyclicExtrapolation(rows, 0.5, {});
    expect(svg).toContain("training | extrapolation");
  });
});

describe("advection frames", () => {
  it("renders one frame per checkpoint", () => {
    const records = [
      { instance: 0, nfe: 12, rejected: 0, times: [0, 0.25, 0.5, 0.75, 1], states: [[0, 0], [1, 0], [1, 1], [2, 1], [2, 2]] },
      { instance: 1, nfe: 12, rejected: 0, times: [0, 0.25, 0.5, 0.75, 1], states: [[0, 1], [1, 1], [1, 2], [2, 2], [2, 3]] },
    ]
      .map((r) => JSON.stringify(r))
      .join("\n");
    const svg = advectionFrames(parseSolveRecords(records, "r.jsonl"), {});
    const frames = svg.match(/class="frame"/g) ?? [];
    expect(frames.length).toBe(5);
  });
});

describe("cli", () => {
  function tmpFiles() {
    const dir = mkdtempSync(join(tmpdir(), "svfm-plot-"));
    const pa = join(dir, "a.json");
    const pc = join(dir, "comp.json");
    const pf = join(dir, "f.jsonl");
    writeFileSync(pa, profileA);
    writeFileSync(pc, JSON.stringify(comparison([20, 22], [14, 13])));
    writeFileSync(pf, forecastLines);
    return { dir, pa, pc, pf };
  }

  it("parses arguments and rejects unknown kinds", () => {
    expect(() => parseArgs(["pie-chart", "--in", "a", "--out", "b"])).toThrow(FormatError);
    const args = parseArgs(["nfe-histogram", "--in", "a.json", "--in", "b.json", "--out", "o.svg"]);
    expect(args.inputs).toHaveLength(2);
  });

  it("renders every kind end to end and embeds provenance hashes", () => {
    const { dir, pa, pc, pf } = tmpFiles();
    const out = join(dir, "h.svg");
    expect(main(["nfe-histogram", "--in", pa, "--out", out])).toBe(0);
    const svg = readFileSync(out, "utf-8");
    expect(svg).toContain(sha256(profileA));
    expect(main(["nfe-heatmap", "--in", pc, "--out", join(dir, "c.svg")])).toBe(0);
    expect(main(["trajectory-2d", "--in", pf, "--out", join(dir, "t.svg")])).toBe(0);
    expect(main(["cyclic-extrapolation", "--in", pf, "--train-end", "0.5", "--out", join(dir, "e.svg")])).toBe(0);
  });

  it("identical inputs produce identical bytes", () => {
    const { dir, pa } = tmpFiles();
    const o1 = join(dir, "1.svg");
    const o2 = join(dir, "2.svg");
    main(["nfe-histogram", "--in", pa, "--out", o1]);
    main(["nfe-histogram", "--in", pa, "--out", o2]);
    expect(readFileSync(o1, "utf-8")).toBe(readFileSync(o2, "utf-8"));
  });

  it("exits 2 on malformed input", () => {
    const { dir, pa } = tmpFiles();
    writeFileSync(join(dir, "bad.json"), "{not json");
    expect(main(["nfe-histogram", "--in", join(dir, "bad.json"), "--out", join(dir, "x.svg")])).toBe(2);
    expect(main(["nfe-heatmap", "--in", pa, "--out", join(dir, "x.svg")])).toBe(2);
    expect(main(["nfe-histogram", "--in", join(dir, "missing.json"), "--out", join(dir, "x.svg")])).toBe(2);
  });
});
