/** The figure kinds: pure functions from parsed inputs to SVG strings. */

import type { FloorPlan, ForecastRow, NfeComparison, NfeProfile, SolveRecordRow } from "./formats.js";
import { Svg, colorFor, extent, linearScale } from "./svg.js";

const W = 640;
const H = 420;
const MARGIN = { left: 60, right: 20, top: 40, bottom: 50 };

function frame(width = W, height = H) {
  return {
    xr: [MARGIN.left, width - MARGIN.right] as [number, number],
    yr: [height - MARGIN.bottom, MARGIN.top] as [number, number],
  };
}

export function nfeHistogram(profiles: NfeProfile[], hashes: Record<string, string>): string {
  const svg = new Svg(W, H);
  const all = profiles.flatMap((p) => p.nfe);
  const [lo, hi] = extent(all);
  const bins = Math.min(60, Math.max(1, Math.round(hi - lo) + 1));
  const binw = (hi - lo) / bins || 1;
  const { xr, yr } = frame();
  let ymax = 1;
  const counts = profiles.map((p) => {
    const c = new Array(bins).fill(0);
    for (const v of p.nfe) {
      const b = Math.min(bins - 1, Math.floor((v - lo) / binw));
      c[b] += 1;
    }
    ymax = Math.max(ymax, ...c);
    return c;
  });
  const xs = linearScale([lo, hi + binw], xr);
  const ys = linearScale([0, ymax * 1.05], yr);
  svg.axes(xs, ys, "function evaluations per instance", "instances");
  counts.forEach((c, pi) => {
    svg.group(`hist-${profiles[pi].name}`, (s) => {
      c.forEach((n, b) => {
        if (n === 0) return;
        const x0 = xs(lo + b * binw);
        const x1 = xs(lo + (b + 1) * binw);
        s.rect(x0, ys(n), Math.max(1, x1 - x0 - 1), ys(0) - ys(n), colorFor(pi), 0.55);
      });
      s.line(xs(profiles[pi].mean), yr[0], xs(profiles[pi].mean), yr[1], colorFor(pi), 1.5, "5,3");
    });
  });
  svg.legend(
    profiles.map((p, i) => ({ label: `${p.name} (mean ${p.mean.toFixed(1)}, median ${p.median.toFixed(1)})`, color: colorFor(i) })),
    xr[1] - 250,
    yr[1],
  );
  return svg.render("Per-instance NFE", hashes);
}

export function nfeHeatmap(comp: NfeComparison, hashes: Record<string, string>): string {
  const svg = new Svg(W, H);
  const av = comp.cells.map((c) => c.a);
  const bv = comp.cells.map((c) => c.b);
  const [lo, hi] = extent([...av, ...bv], 0.05);
  const { xr, yr } = frame();
  const xs = linearScale([lo, hi], xr);
  const ys = linearScale([lo, hi], yr);
  const cmax = Math.max(...comp.cells.map((c) => c.count));
  const cell = Math.max(2, Math.abs(xs(1) - xs(0)));
  svg.axes(xs, ys, `NFE of ${short(comp.models[0])}`, `NFE of ${short(comp.models[1])}`);
  svg.group("cells", (s) => {
    for (const c of comp.cells) {
      const heat = c.count / cmax;
      s.rect(xs(c.a) - cell / 2, ys(c.b) - cell / 2, cell, cell, heatColor(heat), 0.9);
    }
  });
  // the leading diagonal is the line of equal NFEs
  svg.line(xs(lo), ys(lo), xs(hi), ys(hi), "#333", 1, "4,3");
  const pct = (100 * comp.fraction_saved).toFixed(1);
  return svg.render(`NFE savings: ${comp.savings} over ${comp.n} instances (${pct}% of instances saved)`, hashes);
}

function heatColor(t: number): string {
  // white -> red ramp
  const v = Math.round(255 * (1 - t * 0.85));
  return `rgb(255,${v},${v})`;
}

function short(p: string): string {
  const parts = p.split("/");
  return parts.length > 1 ? parts[parts.length - 2] : p;
}

export function trajectory2d(rows: ForecastRow[], plan: FloorPlan | null, hashes: Record<string, string>): string {
  const svg = new Svg(W, H);
  const { xr, yr } = frame();
  const pts = rows.flatMap((r) => r.states);
  let xdom: [number, number];
  let ydom: [number, number];
  if (plan) {
    xdom = [plan.bounds[0][0], plan.bounds[1][0]];
    ydom = [plan.bounds[0][1], plan.bounds[1][1]];
  } else {
    xdom = extent(pts.map((p) => p[0] ?? 0), 0.05);
    ydom = extent(pts.map((p) => p[1] ?? 0), 0.05);
  }
  const xs = linearScale(xdom, xr);
  const ys = linearScale(ydom, yr);
  svg.axes(xs, ys, "x", "y");

  if (plan) {
    svg.group("floorplan", (s) => {
      s.rect(xs(xdom[0]), ys(ydom[1]), xs(xdom[1]) - xs(xdom[0]), ys(ydom[0]) - ys(ydom[1]), "none", 1, "#999");
      Object.entries(plan.paths).forEach(([name, way]) => {
        s.polyline(way.map(([x, y]) => [xs(x), ys(y)] as [number, number]), "#bbb", 1.5, 0.8);
        const [ex, ey] = way[way.length - 1];
        s.circle(xs(ex), ys(ey), 4, "#888");
        s.text(xs(ex) + 6, ys(ey) - 4, name, 9, "start", "#666");
      });
      s.circle(xs(plan.origin[0]), ys(plan.origin[1]), 5, "#555", 0.8);
    });
  }

  const labels = [...new Set(rows.map((r) => r.endpoint ?? (r.component !== null ? `component ${r.component}` : "trajectory")))].sort();
  const colorOf = new Map(labels.map((l, i) => [l, colorFor(i)]));
  svg.group("trajectories", (s) => {
    for (const r of rows) {
      const label = r.endpoint ?? (r.component !== null ? `component ${r.component}` : "trajectory");
      const pts2 = r.states.map((p) => [xs(p[0] ?? 0), ys(p[1] ?? 0)] as [number, number]);
      s.polyline(pts2, colorOf.get(label)!, 1, 0.45);
    }
  });
  svg.legend(
    labels.map((l) => ({ label: l, color: colorOf.get(l)! })),
    xr[1] - 150,
    yr[1],
  );
  return svg.render(rows.length ? `${rows.length} sampled trajectories` : "no trajectories", hashes);
}

export function cyclicExtrapolation(rows: ForecastRow[], trainEnd: number | null, hashes: Record<string, string>): string {
  const svg = new Svg(W, H);
  const { xr, yr } = frame();
  const times = rows.flatMap((r) => r.times);
  const vals = rows.flatMap((r) => r.states.map((s) => s[0] ?? 0));
  const xs = linearScale(extent(times, 0.02), xr);
  const ys = linearScale(extent(vals, 0.1), yr);
  if (trainEnd !== null && rows.length) {
    svg.rect(xs(xs.domain[0]), yr[1], xs(trainEnd) - xs(xs.domain[0]), yr[0] - yr[1], "#4d9e58", 0.08);
    svg.rect(xs(trainEnd), yr[1], xs(xs.domain[1]) - xs(trainEnd), yr[0] - yr[1], "#b5493b", 0.08);
    svg.text(xs(trainEnd), yr[1] + 12, "training | extrapolation", 9, "middle", "#555");
    svg.line(xs(trainEnd), yr[0], xs(trainEnd), yr[1], "#888", 1, "3,3");
  }
  svg.axes(xs, ys, "t", "state");
  svg.group("traces", (s) => {
    rows.forEach((r, i) => {
      s.polyline(r.times.map((t, j) => [xs(t), ys(r.states[j][0] ?? 0)] as [number, number]), colorFor(i), 1.2, 0.8);
      r.times.forEach((t, j) => s.circle(xs(t), ys(r.states[j][0] ?? 0), 1.5, colorFor(i), 0.7));
    });
  });
  return svg.render("Cyclic continuation", hashes);
}

export function advectionFrames(records: SolveRecordRow[], hashes: Record<string, string>): string {
  const nFrames = records.length ? records[0].times.length : 0;
  const frameH = 150;
  const height = Math.max(H, MARGIN.top + nFrames * frameH + MARGIN.bottom);
  const svg = new Svg(W, height);
  const pts = records.flatMap((r) => r.states);
  const xdom = extent(pts.map((p) => p[0] ?? 0), 0.08);
  const ydom = extent(pts.map((p) => p[1] ?? 0), 0.08);
  for (let j = 0; j < nFrames; j++) {
    const top = MARGIN.top + j * frameH;
    const xs = linearScale(xdom, [MARGIN.left, W - MARGIN.right]);
    const ys = linearScale(ydom, [top + frameH - 18, top + 8]);
    svg.group("frame", (s) => {
      s.rect(MARGIN.left, top + 8, W - MARGIN.right - MARGIN.left, frameH - 26, "none", 1, "#ccc");
      s.text(MARGIN.left + 4, top + 20, `t = ${records[0].times[j].toPrecision(3)}`, 10);
      for (const r of records) {
        const p = r.states[j] ?? [0, 0];
        s.circle(xs(p[0] ?? 0), ys(p[1] ?? 0), 2, colorFor(r.instance % 2), 0.7);
      }
    });
  }
  return svg.render(`Advection over ${nFrames} checkpoints`, hashes);
}
