#!/usr/bin/env node
/**
 * svfm-plot <kind> --in FILE [--in FILE ...] [--floorplan FILE]
 *                  [--train-end T] --out FILE.svg
 *
 * kinds: nfe-histogram | nfe-heatmap | trajectory-2d | floorplan-overlay |
 *        cyclic-extrapolation | advection-frames
 *
 * Exit codes: 0 success, 2 bad arguments or malformed input.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { advectionFrames, cyclicExtrapolation, nfeHeatmap, nfeHistogram, trajectory2d } from "./figures.js";
import {
  FormatError,
  parseFloorPlan,
  parseForecast,
  parseNfeComparison,
  parseNfeProfile,
  parseSolveRecords,
} from "./formats.js";
import { sha256 } from "./svg.js";

export const KINDS = [
  "nfe-histogram",
  "nfe-heatmap",
  "trajectory-2d",
  "floorplan-overlay",
  "cyclic-extrapolation",
  "advection-frames",
] as const;

interface Args {
  kind: string;
  inputs: string[];
  floorplan: string | null;
  trainEnd: number | null;
  out: string;
}

export function parseArgs(argv: string[]): Args {
  const [kind, ...rest] = argv;
  if (!kind || !(KINDS as readonly string[]).includes(kind)) {
    throw new FormatError(`first argument must be one of: ${KINDS.join(", ")}`);
  }
  const args: Args = { kind, inputs: [], floorplan: null, trainEnd: null, out: "" };
  for (let i = 0; i < rest.length; i++) {
    const flag = rest[i];
    const val = rest[i + 1];
    if (flag === "--in") {
      if (val === undefined) throw new FormatError("--in needs a path");
      args.inputs.push(val);
      i++;
    } else if (flag === "--floorplan") {
      args.floorplan = val ?? null;
      i++;
    } else if (flag === "--train-end") {
      args.trainEnd = Number(val);
      if (!Number.isFinite(args.trainEnd)) throw new FormatError("--train-end needs a number");
      i++;
    } else if (flag === "--out") {
      args.out = val ?? "";
      i++;
    } else {
      throw new FormatError(`unknown flag ${flag}`);
    }
  }
  if (args.inputs.length === 0) throw new FormatError("at least one --in file required");
  if (!args.out) throw new FormatError("--out is required");
  if (args.kind === "floorplan-overlay" && !args.floorplan) throw new FormatError("floorplan-overlay needs --floorplan");
  return args;
}

export function render(args: Args): string {
  const texts = args.inputs.map((p) => readFileSync(p, "utf-8"));
  const hashes: Record<string, string> = {};
  args.inputs.forEach((p, i) => (hashes[p] = sha256(texts[i])));

  switch (args.kind) {
    case "nfe-histogram":
      return nfeHistogram(
        texts.map((t, i) => parseNfeProfile(t, args.inputs[i])),
        hashes,
      );
    case "nfe-heatmap":
      if (texts.length !== 1) throw new FormatError("nfe-heatmap takes exactly one comparison file");
      return nfeHeatmap(parseNfeComparison(texts[0], args.inputs[0]), hashes);
    case "trajectory-2d":
    case "floorplan-overlay": {
      const rows = texts.flatMap((t, i) => parseForecast(t, args.inputs[i]));
      let plan = null;
      if (args.floorplan) {
        const planText = readFileSync(args.floorplan, "utf-8");
        hashes[args.floorplan] = sha256(planText);
        plan = parseFloorPlan(planText, args.floorplan);
      }
      return trajectory2d(rows, plan, hashes);
    }
    case "cyclic-extrapolation":
      return cyclicExtrapolation(
        texts.flatMap((t, i) => parseForecast(t, args.inputs[i])),
        args.trainEnd,
        hashes,
      );
    case "advection-frames":
      if (texts.length !== 1) throw new FormatError("advection-frames takes exactly one records file");
      return advectionFrames(parseSolveRecords(texts[0], args.inputs[0]), hashes);
    default:
      throw new FormatError(`unhandled kind ${args.kind}`);
  }
}

export function main(argv: string[]): number {
  try {
    const args = parseArgs(argv);
    const svg = render(args);
    writeFileSync(args.out, svg);
    console.log(`wrote ${args.out}`);
    return 0;
  } catch (e) {
    if (e instanceof FormatError || (e instanceof Error && e.name === "SyntaxError")) {
      console.error(`error: ${e instanceof Error ? e.message : e}`);
      return 2;
    }
    if (e instanceof Error && "code" in e && (e as NodeJS.ErrnoException).code === "ENOENT") {
      console.error(`error: ${e.message}`);
      return 2;
    }
    throw e;
  }
}

const isDirect = process.argv[1] && import.meta.url.endsWith(process.argv[1].split("/").pop() ?? "");
if (isDirect) {
  process.exit(main(process.argv.slice(2)));
}
