/**
 * Parsers/validators for the svfm export formats (see ../FORMATS.md).
 * Validation is strict: figures silently drawn from malformed inputs are
 * worse than a loud exit.
 */

export class FormatError extends Error {}

export interface NfeProfile {
  model: string;
  name: string;
  nfe: number[];
  mean: number;
  median: number;
  max: number;
}

export interface NfeComparison {
  models: [string, string];
  cells: { a: number; b: number; count: number }[];
  savings: number;
  fraction_saved: number;
  n: number;
}

export interface ForecastRow {
  sample: number;
  times: number[];
  states: number[][];
  component: number | null;
  endpoint: string | null;
  tod: number | null;
  extrapolated?: boolean;
}

export interface SolveRecordRow {
  instance: number;
  nfe: number;
  rejected: number;
  times: number[];
  states: number[][];
}

export interface FloorPlan {
  bounds: [[number, number], [number, number]];
  origin: [number, number];
  paths: Record<string, [number, number][]>;
}

function fail(path: string, msg: string): never {
  throw new FormatError(`${path}: ${msg}`);
}

function isNumArray(x: unknown): x is number[] {
  return Array.isArray(x) && x.every((v) => typeof v === "number" && Number.isFinite(v));
}

function isMatrix(x: unknown): x is number[][] {
  return Array.isArray(x) && x.every(isNumArray);
}

export function parseNfeProfile(text: string, path: string): NfeProfile {
  const doc = JSON.parse(text);
  if (typeof doc.model !== "string" || typeof doc.name !== "string") fail(path, "missing model/name");
  if (!isNumArray(doc.nfe) || doc.nfe.length === 0) fail(path, "nfe must be a non-empty number list");
  for (const k of ["mean", "median", "max"]) {
    if (typeof doc[k] !== "number") fail(path, `missing ${k}`);
  }
  return doc as NfeProfile;
}

export function parseNfeComparison(text: string, path: string): NfeComparison {
  const doc = JSON.parse(text);
  if (!Array.isArray(doc.models) || doc.models.length !== 2) fail(path, "models must list two entries");
  if (!Array.isArray(doc.cells)) fail(path, "cells missing");
  let total = 0;
  for (const c of doc.cells) {
    if (typeof c.a !== "number" || typeof c.b !== "number" || typeof c.count !== "number") {
      fail(path, "cells entries need a/b/count numbers");
    }
    total += c.count;
  }
  if (typeof doc.savings !== "number" || typeof doc.fraction_saved !== "number" || typeof doc.n !== "number") {
    fail(path, "missing savings/fraction_saved/n");
  }
  if (total !== doc.n) fail(path, `cell counts sum to ${total}, expected n=${doc.n}`);
  return doc as NfeComparison;
}

function parseJsonl(text: string): unknown[] {
  return text
    .split("\n")
    .filter((line) => line.trim().length > 0)
    .map((line) => JSON.parse(line));
}

export function parseForecast(text: string, path: string): ForecastRow[] {
  const rows = parseJsonl(text);
  return rows.map((r0, i) => {
    const r = r0 as Record<string, unknown>;
    if (!isNumArray(r.times) || !isMatrix(r.states)) fail(path, `row ${i}: times/states malformed`);
    if ((r.times as number[]).length !== (r.states as number[][]).length) {
      fail(path, `row ${i}: times and states lengths disagree`);
    }
    return {
      sample: typeof r.sample === "number" ? r.sample : i,
      times: r.times as number[],
      states: r.states as number[][],
      component: typeof r.component === "number" ? r.component : null,
      endpoint: typeof r.endpoint === "string" ? r.endpoint : null,
      tod: typeof r.tod === "number" ? r.tod : null,
      extrapolated: Boolean(r.extrapolated),
    };
  });
}

export function parseSolveRecords(text: string, path: string): SolveRecordRow[] {
  const rows = parseJsonl(text);
  return rows.map((r0, i) => {
    const r = r0 as Record<string, unknown>;
    if (!isNumArray(r.times) || !isMatrix(r.states)) fail(path, `row ${i}: times/states malformed`);
    if (typeof r.nfe !== "number") fail(path, `row ${i}: nfe missing`);
    return {
      instance: typeof r.instance === "number" ? r.instance : i,
      nfe: r.nfe as number,
      rejected: typeof r.rejected === "number" ? (r.rejected as number) : 0,
      times: r.times as number[],
      states: r.states as number[][],
    };
  });
}

export function parseFloorPlan(text: string, path: string): FloorPlan {
  const doc = JSON.parse(text);
  if (!isMatrix(doc.bounds) || doc.bounds.length !== 2) fail(path, "bounds must be [[x0,y0],[x1,y1]]");
  if (!isNumArray(doc.origin) || doc.origin.length !== 2) fail(path, "origin must be [x,y]");
  if (typeof doc.paths !== "object" || doc.paths === null) fail(path, "paths missing");
  for (const [name, way] of Object.entries(doc.paths)) {
    if (!isMatrix(way) || (way as number[][]).some((p) => p.length !== 2)) {
      fail(path, `path ${name} must be a polyline of [x,y] pairs`);
    }
  }
  return doc as FloorPlan;
}
