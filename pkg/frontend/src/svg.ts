/** Minimal deterministic SVG builder: shapes, linear scales, axes, legend. */

import { createHash } from "node:crypto";

export const PALETTE = ["#3b6fb5", "#e08a2e", "#4d9e58", "#b5493b", "#7a5fa8", "#5b5b5b"];

export function colorFor(i: number): string {
  return PALETTE[i % PALETTE.length];
}

export interface Scale {
  (v: number): number;
  domain: [number, number];
  range: [number, number];
}

export function linearScale(domain: [number, number], range: [number, number]): Scale {
  const [d0, d1] = domain;
  const [r0, r1] = range;
  const span = d1 - d0 || 1;
  const f = ((v: number) => r0 + ((v - d0) / span) * (r1 - r0)) as Scale;
  f.domain = domain;
  f.range = range;
  return f;
}

export function extent(values: number[], pad = 0): [number, number] {
  if (values.length === 0) return [0, 1];
  let lo = Math.min(...values);
  let hi = Math.max(...values);
  if (lo === hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  const p = (hi - lo) * pad;
  return [lo - p, hi + p];
}

const fmt = (v: number) => (Math.abs(v) >= 1000 || (v !== 0 && Math.abs(v) < 0.01) ? v.toExponential(1) : +v.toFixed(3) + "");

export class Svg {
  private parts: string[] = [];
  constructor(
    readonly width: number,
    readonly height: number,
  ) {}

  raw(s: string): this {
    this.parts.push(s);
    return this;
  }

  rect(x: number, y: number, w: number, h: number, fill: string, opacity = 1, stroke = "none"): this {
    return this.raw(
      `<rect x="${fmt(x)}" y="${fmt(y)}" width="${fmt(w)}" height="${fmt(h)}" fill="${fill}" fill-opacity="${opacity}" stroke="${stroke}"/>`,
    );
  }

  line(x1: number, y1: number, x2: number, y2: number, stroke: string, width = 1, dash = ""): this {
    const d = dash ? ` stroke-dasharray="${dash}"` : "";
    return this.raw(`<line x1="${fmt(x1)}" y1="${fmt(y1)}" x2="${fmt(x2)}" y2="${fmt(y2)}" stroke="${stroke}" stroke-width="${width}"${d}/>`);
  }

  circle(cx: number, cy: number, r: number, fill: string, opacity = 1): this {
    return this.raw(`<circle cx="${fmt(cx)}" cy="${fmt(cy)}" r="${r}" fill="${fill}" fill-opacity="${opacity}"/>`);
  }

  polyline(pts: [number, number][], stroke: string, width = 1, opacity = 1): this {
    const d = pts.map(([x, y]) => `${fmt(x)},${fmt(y)}`).join(" ");
    return this.raw(`<polyline points="${d}" fill="none" stroke="${stroke}" stroke-width="${width}" stroke-opacity="${opacity}"/>`);
  }

  text(x: number, y: number, s: string, size = 11, anchor = "start", fill = "#222"): this {
    const esc = s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
    return this.raw(`<text x="${fmt(x)}" y="${fmt(y)}" font-size="${size}" text-anchor="${anchor}" fill="${fill}" font-family="sans-serif">${esc}</text>`);
  }

  group(cls: string, body: (s: this) => void): this {
    this.raw(`<g class="${cls}">`);
    body(this);
    return this.raw("</g>");
  }

  axes(xs: Scale, ys: Scale, xlabel = "", ylabel = "", ticks = 5): this {
    const [x0, x1] = xs.range;
    const [y0, y1] = ys.range;
    this.line(x0, y0, x1, y0, "#444");
    this.line(x0, y0, x0, y1, "#444");
    for (let i = 0; i <= ticks; i++) {
      const xv = xs.domain[0] + ((xs.domain[1] - xs.domain[0]) * i) / ticks;
      const yv = ys.domain[0] + ((ys.domain[1] - ys.domain[0]) * i) / ticks;
      this.line(xs(xv), y0, xs(xv), y0 + 4, "#444");
      this.text(xs(xv), y0 + 15, fmt(xv), 9, "middle");
      this.line(x0 - 4, ys(yv), x0, ys(yv), "#444");
      this.text(x0 - 6, ys(yv) + 3, fmt(yv), 9, "end");
    }
    if (xlabel) this.text((x0 + x1) / 2, y0 + 30, xlabel, 11, "middle");
    if (ylabel) this.text(x0 - 38, (y0 + y1) / 2, ylabel, 11, "middle");
    return this;
  }

  legend(entries: { label: string; color: string }[], x: number, y: number): this {
    entries.forEach((e, i) => {
      this.rect(x, y + i * 16, 10, 10, e.color);
      this.text(x + 14, y + i * 16 + 9, e.label, 10);
    });
    return this;
  }

  /** Final document; embeds source hashes for provenance. */
  render(title: string, sourceHashes: Record<string, string>): string {
    const meta = Object.entries(sourceHashes)
      .map(([p, h]) => `source ${p} sha256 ${h}`)
      .join("; ");
    return [
      `<svg xmlns="http://www.w3.org/2000/svg" width="${this.width}" height="${this.height}" viewBox="0 0 ${this.width} ${this.height}">`,
      `<metadata>${meta}</metadata>`,
      `<rect width="${this.width}" height="${this.height}" fill="white"/>`,
      `<text x="${this.width / 2}" y="18" font-size="13" text-anchor="middle" font-family="sans-serif">${title
        .replace(/&/g, "&amp;")
        .replace(/</g, "&lt;")}</text>`,
      ...this.parts,
      "</svg>",
    ].join("\n");
  }
}

export function sha256(data: string | Buffer): string {
  return createHash("sha256").update(data).digest("hex");
}
