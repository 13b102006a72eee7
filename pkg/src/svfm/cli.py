"""Command-line entry point.

Subcommands: gen | train | eval | forecast | nfe-report.  All outputs are
JSON / JSON-lines files (schemas in FORMATS.md) so downstream tooling, the
plotting frontend included, never needs in-process coupling.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
``SVFM_NUM_WORKERS`` caps parallel instance solves in nfe-report.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import data as datagen
from .losses import LossConfig
from .odesolve import SolverError
from .train import (
    TrainConfig,
    TrainedModel,
    classify_predict,
    load_model,
    nfe_profile,
    sample_flow,
    save_model,
    train_run,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["task", "dataset", "model", "seed"],
    "properties": {
        "task": {"enum": ["classify", "endpoint", "forecast"]},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["path", "kind"],
            "properties": {
                "path": {"type": "string"},
                "kind": {"enum": ["classification", "endpoints", "trajectories"]},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "variant": {"enum": ["vf", "avf", "svf", "vfm", "svfm"]},
                "k_components": {"type": "integer", "minimum": 1},
                "membership": {"enum": ["stick", "filter"]},
                "p_augment": {"type": "integer", "minimum": 0},
                "hidden_layers": {"type": "integer", "minimum": 0},
                "hidden_units": {"type": "integer", "minimum": 1},
            },
        },
        "time": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "encoding": {"enum": ["scalar", "cyclic"]},
                "period_scale": {"type": "number", "exclusiveMinimum": 0},
                "mode": {"enum": ["none", "absolute", "progress"]},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "terms": {"type": "array", "items": {"enum": ["MDL", "TL", "DV", "FL", "CE"]}},
                "lambda": {"type": "number", "minimum": 0},
                "fl_inner": {"enum": ["squared-error", "MDL"]},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["rk4", "dopri5"]},
                "n_steps": {"type": "integer", "minimum": 1},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
            },
        },
        "interval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"t0": {"type": "number"}, "t_T": {"type": "number"}},
        },
        "seed": {"type": "integer"},
        "val_fraction": {"type": "number", "minimum": 0, "maximum": 0.9},
        "mc_samples": {"type": "integer", "minimum": 2},
        "state_penalty": {"type": "number", "minimum": 0},
        "n_classes": {"type": "integer", "minimum": 2},
        "obs_variance": {"type": "boolean"},
        "obs_init": {"type": "number"},
        "out_dir": {"type": "string"},
    },
}


def load_run_config(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid config: {e.message} (at {'/'.join(map(str, e.absolute_path))})") from e
    return doc


def train_config_from_doc(doc: dict) -> TrainConfig:
    model = doc.get("model", {})
    time_cfg = doc.get("time", {})
    loss_cfg = doc.get("loss", {})
    solver = doc.get("solver", {})
    opt = doc.get("optimizer", {})
    interval = doc.get("interval", {})
    try:
        loss = LossConfig(
            terms=tuple(loss_cfg.get("terms", ("CE",))),
            lam=loss_cfg.get("lambda", 0.0),
            fl_inner=loss_cfg.get("fl_inner", "squared-error"),
        )
        return TrainConfig(
            task=doc["task"],
            variant=model.get("variant", "vf"),
            k_components=model.get("k_components", 1),
            membership=model.get("membership", "stick"),
            p_augment=model.get("p_augment", 0),
            hidden_layers=model.get("hidden_layers", 1),
            hidden_units=model.get("hidden_units", 32),
            enc_mode=time_cfg.get("encoding", "scalar"),
            period_scale=time_cfg.get("period_scale", math.pi / 12.0),
            time_mode=time_cfg.get("mode", "none"),
            loss=loss,
            solver_kind=solver.get("kind", "rk4"),
            solver_steps=solver.get("n_steps", 16),
            solver_tol=solver.get("tolerance", 1e-6),
            learning_rate=opt.get("learning_rate", 1e-2),
            batch_size=opt.get("batch_size", 50),
            epochs=opt.get("epochs", 200),
            patience=opt.get("patience", 50),
            weight_decay=opt.get("weight_decay", 0.0),
            t0=interval.get("t0", 0.0),
            t_T=interval.get("t_T", 1.0),
            seed=doc["seed"],
            val_fraction=doc.get("val_fraction", 0.2),
            mc_samples=doc.get("mc_samples", 8),
            n_classes=doc.get("n_classes", 2),
            obs_variance=doc.get("obs_variance", False),
            obs_init=doc.get("obs_init", -2.0),
            state_penalty=doc.get("state_penalty", 0.0),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_dataset(path, kind: str):
    if kind == "classification":
        return datagen.load_classification_jsonl(path)
    if kind == "endpoints":
        return datagen.load_endpoint_jsonl(path)
    if kind == "trajectories":
        return {"walks": datagen.load_trajectories_jsonl(path)}
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _check_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise ConfigError(f"{path} exists (use --force to overwrite)")


def worker_cap() -> int:
    raw = os.environ.get("SVFM_NUM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SVFM_NUM_WORKERS must be an integer, got {raw!r}")
    return max(1, n)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    out = Path(args.out)
    _check_overwrite(out, args.force)
    name = args.dataset
    if name in datagen.CLASSIFICATION_NAMES:
        data = datagen.gen_classification(name, args.n, args.seed)
        datagen.save_classification_jsonl(out, data)
    elif name in datagen.FAILURE_NAMES:
        data = datagen.gen_failure_task(name, args.n, args.seed)
        datagen.save_endpoint_jsonl(out, data)
    elif name == "cyclic":
        sample = datagen.gen_cyclic(args.periods, args.samples_per_period, args.seed)
        walk = {
            "t": sample.t_X.tolist(),
            "X": sample.X.tolist(),
            "endpoint": None,
            "regime": None,
        }
        datagen.save_trajectories_jsonl(out, [walk])
    elif name == "home":
        spec = datagen.HomePathSpec.default()
        walks = datagen.gen_home_trajectories(spec, args.n, args.regime, args.seed)
        datagen.save_trajectories_jsonl(out, walks)
    else:
        raise ConfigError(f"unknown dataset {name!r}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    cfg = train_config_from_doc(doc)
    data = load_dataset(doc["dataset"]["path"], doc["dataset"]["kind"])
    out_dir = Path(args.out or doc.get("out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.json"
    metrics_path = out_dir / "metrics.jsonl"
    _check_overwrite(model_path, args.force)
    try:
        tm, metrics, summary = train_run(cfg, data, quiet=args.quiet)
    except FloatingPointError as e:
        raise SolverError(str(e)) from e
    save_model(model_path, tm)
    with open(metrics_path, "w") as f:
        for row in metrics:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(json.dumps({"model": str(model_path), "metrics": str(metrics_path), **summary}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _endpoint_distribution(tm: TrainedModel, start: np.ndarray, n_samples: int, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    ends = []
    for _ in range(n_samples):
        rec, _ = sample_flow(tm, start, rng, stochastic=True)
        end = rec.states[-1].data.reshape(-1)
        ends.append(end[: tm.field.state_dim])
    ends = np.asarray(ends)
    return {
        "mean": ends.mean(axis=0).tolist(),
        "std": ends.std(axis=0).tolist(),
        "samples": ends.tolist(),
    }


def cmd_eval(args) -> int:
    tm = load_model(args.model)
    doc_kind = args.kind or {"classify": "classification", "endpoint": "endpoints", "forecast": "trajectories"}[tm.task]
    data = load_dataset(args.data, doc_kind)
    report: dict = {"task": tm.task, "model": str(args.model)}
    if tm.task == "classify":
        probs = classify_predict(tm, data["x"])
        pred = probs.argmax(axis=1)
        report["accuracy"] = float((pred == data["y"]).mean())
    elif tm.task == "endpoint":
        starts = np.unique(data["start"], axis=0)
        per_start = []
        for s in starts:
            dist = _endpoint_distribution(tm, s, args.samples, args.seed)
            per_start.append({"start": s.tolist(), **dist})
        report["endpoint_distribution"] = per_start
        mean_pred = {tuple(p["start"]): np.asarray(p["mean"]) for p in per_start}
        errs = [float(np.linalg.norm(mean_pred[tuple(s)] - t)) for s, t in zip(data["start"], data["target"])]
        report["mean_endpoint_error"] = float(np.mean(errs))
    else:
        errs = []
        for walk in data["walks"]:
            ts = np.asarray(walk["t"])
            xs = np.asarray(walk["X"])
            if tm.config.time_mode == "absolute":
                rec, _ = sample_flow(
                    tm, xs[0], np.random.default_rng(0), stochastic=False,
                    checkpoints=list(ts[1:-1]), t_T=float(ts[-1]),
                )
                for j, t in enumerate(ts[1:], start=1):
                    errs.append(float(np.sum((rec.state_at(float(t)).data.reshape(-1) - xs[j]) ** 2)))
            else:
                dur = (ts[-1] - ts[0]) if ts[-1] > ts[0] else 1.0
                taus = (ts - ts[0]) / dur
                rec, _ = sample_flow(
                    tm, xs[0], np.random.default_rng(0), time_base=ts[0], time_rate=dur,
                    stochastic=False, checkpoints=list(taus[1:-1]), t_T=1.0,
                )
                for j, tau in enumerate(taus[1:], start=1):
                    errs.append(float(np.sum((rec.state_at(float(tau)).data.reshape(-1) - xs[j]) ** 2)))
        report["forecast_mse"] = float(np.mean(errs))
    out = json.dumps(report, sort_keys=True)
    if args.out:
        _check_overwrite(Path(args.out), args.force)
        Path(args.out).write_text(out + "\n")
    print(out if len(out) < 2000 else json.dumps({k: v for k, v in report.items() if k != "endpoint_distribution"}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# forecast


def cmd_forecast(args) -> int:
    tm = load_model(args.model)
    out = Path(args.out)
    _check_overwrite(out, args.force)
    start = np.asarray([float(v) for v in args.start.split(",")])
    if start.size != tm.field.state_dim:
        raise ConfigError(f"start state needs {tm.field.state_dim} values, got {start.size}")
    time_base, time_rate = 0.0, 1.0
    if tm.config.time_mode == "progress":
        time_base = args.tod if args.tod is not None else 12.0
        time_rate = (args.duration or 7.5) / 3600.0
    horizon = args.horizon if args.horizon is not None else tm.config.t_T
    extrapolating = horizon > tm.config.t_T + 1e-12
    if extrapolating:
        print(f"warning: horizon {horizon} beyond trained support {tm.config.t_T}; extrapolating", file=sys.stderr)

    spec = datagen.HomePathSpec.default() if tm.field.state_dim == 2 and tm.task == "forecast" else None
    n_checkpoints = 24
    checkpoints = list(np.linspace(tm.config.t0, horizon, n_checkpoints + 1)[1:-1])
    rows = []
    for i in range(args.samples):
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, i)))
        rec, comp = sample_flow(
            tm, start, rng, time_base=time_base, time_rate=time_rate,
            checkpoints=checkpoints, stochastic=not args.mean, t_T=horizon,
        )
        final = rec.states[-1].data.reshape(-1)[: tm.field.state_dim]
        row = {
            "sample": i,
            "times": [float(t) for t in rec.times],
            "states": [s.data.reshape(-1)[: tm.field.state_dim].tolist() for s in rec.states],
            "component": comp,
            "endpoint": datagen.nearest_endpoint(spec, final) if spec else None,
            "tod": time_base,
            "extrapolated": bool(extrapolating),
        }
        rows.append(row)
    with open(out, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# nfe-report


_WORKER_MODEL: TrainedModel | None = None


def _worker_init(model_path: str, tol: float):
    global _WORKER_MODEL
    _WORKER_MODEL = load_model(model_path)
    _WORKER_MODEL.config.solver_kind = "dopri5"
    _WORKER_MODEL.config.solver_tol = tol


def _worker_nfe(job):
    seed, idx, row = job
    rng = np.random.default_rng(np.random.SeedSequence((seed, idx)))
    rec, _ = sample_flow(_WORKER_MODEL, np.asarray(row), rng, stochastic=True)
    return idx, rec.nfe


def _profile_model(model_path: str, states: np.ndarray, seed: int, tol: float) -> list[int]:
    cap = worker_cap()
    jobs = [(seed, i, states[i].tolist()) for i in range(states.shape[0])]
    if cap == 1:
        _worker_init(model_path, tol)
        return [nfe for _, nfe in map(_worker_nfe, jobs)]
    out = [0] * len(jobs)
    with ProcessPoolExecutor(max_workers=cap, initializer=_worker_init, initargs=(model_path, tol)) as ex:
        for idx, nfe in ex.map(_worker_nfe, jobs, chunksize=max(1, len(jobs) // (cap * 4))):
            out[idx] = nfe
    return out


def comparison_matrix(nfe_a: list[int], nfe_b: list[int]) -> dict:
    """Counts of instances by (first model's NFE, second model's NFE)."""
    cells: dict[tuple[int, int], int] = {}
    for a, b in zip(nfe_a, nfe_b):
        cells[(a, b)] = cells.get((a, b), 0) + 1
    savings = int(sum(a - b for a, b in zip(nfe_a, nfe_b)))
    fraction = float(np.mean([b < a for a, b in zip(nfe_a, nfe_b)]))
    return {
        "cells": [{"a": a, "b": b, "count": c} for (a, b), c in sorted(cells.items())],
        "savings": savings,
        "fraction_saved": fraction,
        "n": len(nfe_a),
    }


def _dataset_states(data, kind: str) -> np.ndarray:
    if kind == "classification":
        return data["x"]
    if kind == "endpoints":
        return data["start"]
    return np.asarray([w["X"][0] for w in data["walks"]])


def cmd_nfe_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = args.kind or "classification"
    data = load_dataset(args.data, kind)
    states = _dataset_states(data, kind)

    profiles = []
    seen_names: set = set()
    for mp in args.models:
        tm = load_model(mp)
        if tm.field.state_dim != states.shape[1]:
            raise ConfigError(f"model {mp} expects dim {tm.field.state_dim}, dataset has {states.shape[1]}")
        nfes = _profile_model(mp, states, args.seed, args.tolerance)
        # "model.json" is the conventional file name, so disambiguate via the
        # run directory when stems collide
        name = Path(mp).stem
        if name in seen_names or name == "model":
            name = f"{Path(mp).resolve().parent.name}-{name}"
        while name in seen_names:
            name += "x"
        seen_names.add(name)
        profile = {
            "model": str(mp),
            "name": name,
            "nfe": nfes,
            "mean": float(np.mean(nfes)),
            "median": float(np.median(nfes)),
            "max": int(np.max(nfes)),
        }
        profiles.append(profile)
        path = out_dir / f"nfe_{name}.json"
        path.write_text(json.dumps(profile, sort_keys=True) + "\n")
        print(json.dumps({k: profile[k] for k in ("model", "mean", "median", "max")}, sort_keys=True))

    for i in range(len(profiles)):
        for j in range(i + 1, len(profiles)):
            a, b = profiles[i], profiles[j]
            comp = comparison_matrix(a["nfe"], b["nfe"])
            comp["models"] = [a["model"], b["model"]]
            path = out_dir / f"nfe_compare_{a['name']}_vs_{b['name']}.json"
            path.write_text(json.dumps(comp, sort_keys=True) + "\n")
            print(json.dumps({"compare": [a["name"], b["name"]], "savings": comp["savings"], "fraction_saved": comp["fraction_saved"]}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svfm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("dataset", help="moons|circles|xor|crossing|splitting|scaling|cyclic|home")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--regime", default="mixed", choices=datagen.REGIMES)
    g.add_argument("--periods", type=int, default=1)
    g.add_argument("--samples-per-period", type=int, default=40)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model from a run configuration file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides config out_dir)")
    t.add_argument("--force", action="store_true")
    t.add_argument("--quiet", action="store_true", default=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--kind", choices=["classification", "endpoints", "trajectories"])
    e.add_argument("--samples", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("forecast", help="sample trajectories from a trained model")
    f.add_argument("--model", required=True)
    f.add_argument("--start", required=True, help="comma-separated start state")
    f.add_argument("--samples", type=int, default=200)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--tod", type=float, help="time of day in hours (progress-time models)")
    f.add_argument("--duration", type=float, help="walk duration in seconds (progress-time models)")
    f.add_argument("--horizon", type=float, help="integration end; beyond training support is flagged")
    f.add_argument("--mean", action="store_true", help="deterministic mean flow instead of samples")
    f.add_argument("--out", required=True)
    f.add_argument("--force", action="store_true")
    f.set_defaults(fn=cmd_forecast)

    n = sub.add_parser("nfe-report", help="per-instance NFE profiles and pairwise comparisons")
    n.add_argument("--models", nargs="+", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--kind", choices=["classification", "endpoints", "trajectories"])
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--tolerance", type=float, default=1e-6)
    n.add_argument("--out", required=True)
    n.set_defaults(fn=cmd_nfe_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
