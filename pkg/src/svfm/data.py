"""Synthetic dataset generators and their file formats.

Every generator is a pure function of its parameters and seed.  Datasets
serialize to JSON-lines (schemas in FORMATS.md); the same loaders accept
externally produced files in those formats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .losses import TrajectorySample

CLASSIFICATION_NAMES = ("moons", "circles", "xor")
FAILURE_NAMES = ("crossing", "splitting", "scaling")
REGIMES = ("day", "night", "mixed")


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


# -- classification toys ----------------------------------------------------


def gen_classification(name: str, n: int, seed: int) -> dict:
    """Returns {"x": [n x 2], "y": [n]} with labels in {0, 1}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    if name == "moons":
        n0 = n // 2
        n1 = n - n0
        th0 = rng.uniform(0.0, math.pi, n0)
        th1 = rng.uniform(0.0, math.pi, n1)
        x0 = np.stack([np.cos(th0), np.sin(th0)], axis=1)
        x1 = np.stack([1.0 - np.cos(th1), 0.5 - np.sin(th1)], axis=1)
        x = np.concatenate([x0, x1]) + rng.normal(0.0, 0.1, (n, 2))
        y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    elif name == "circles":
        n0 = n // 2
        n1 = n - n0
        th0 = rng.uniform(0.0, 2 * math.pi, n0)
        th1 = rng.uniform(0.0, 2 * math.pi, n1)
        x0 = np.stack([np.cos(th0), np.sin(th0)], axis=1)
        x1 = 2.0 * np.stack([np.cos(th1), np.sin(th1)], axis=1)
        x = np.concatenate([x0, x1]) + rng.normal(0.0, 0.1, (n, 2))
        y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    elif name == "xor":
        centers = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
        which = rng.integers(0, 4, n)
        x = centers[which] + rng.normal(0.0, math.sqrt(0.05), (n, 2))
        y = (centers[which, 0] * centers[which, 1] > 0).astype(int)
    else:
        raise ValueError(f"unknown classification dataset {name!r}")
    perm = rng.permutation(n)
    return {"x": x[perm], "y": y[perm]}


# -- the three failure-mode tasks --------------------------------------------


def gen_failure_task(name: str, n: int, seed: int) -> dict:
    """Returns {"start": [n x 1], "target": [n x 1], "task": name}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    if name == "crossing":
        start = np.where(np.arange(n) % 2 == 0, -1.0, 1.0)[:, None]
        target = -start
        perm = rng.permutation(n)
        start, target = start[perm], target[perm]
    elif name == "splitting":
        start = np.zeros((n, 1))
        target = rng.choice([-1.0, 1.0], size=(n, 1))
    elif name == "scaling":
        start = np.zeros((n, 1))
        target = rng.normal(1.0, 0.25, size=(n, 1))
    else:
        raise ValueError(f"unknown failure task {name!r}")
    return {"start": start, "target": target, "task": name}


# -- cyclic extrapolation -----------------------------------------------------


def cyclic_signal(t):
    return np.sin(t) + np.asarray(t) / 10.0


def gen_cyclic(n_periods: int, samples_per_period: int, seed: int, noise_sigma: float = 0.0) -> TrajectorySample:
    """Samples of sin(t) + t/10 over n_periods of 2*pi."""
    if n_periods < 1 or samples_per_period < 2:
        raise ValueError("need positive counts")
    t = np.linspace(0.0, 2 * math.pi * n_periods, n_periods * samples_per_period + 1)
    x = cyclic_signal(t)
    if noise_sigma > 0:
        x = x + _rng(seed).normal(0.0, noise_sigma, x.shape)
    return TrajectorySample(X=x[:, None], t_X=t)


# -- residential walk generator ----------------------------------------------


@dataclass
class HomePathSpec:
    bounds: list
    origin: list
    paths: dict
    regimes: dict
    walk_duration_s: list
    noise_scale_m: float
    samples_per_walk: int

    def __post_init__(self):
        (x0, y0), (x1, y1) = self.bounds
        for name, way in self.paths.items():
            for px, py in way:
                if not (x0 <= px <= x1 and y0 <= py <= y1):
                    raise ValueError(f"waypoint {px, py} of {name!r} outside floor plan")
        for rname, reg in self.regimes.items():
            total = sum(reg["probabilities"].values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"regime {rname!r} probabilities sum to {total}")

    @property
    def endpoint_names(self) -> list[str]:
        return sorted(self.paths.keys())

    def endpoint_centroid(self, name: str) -> np.ndarray:
        return np.asarray(self.paths[name][-1], dtype=np.float64)

    @classmethod
    def default(cls) -> "HomePathSpec":
        text = resources.files("svfm").joinpath("floorplan.json").read_text()
        return cls(**json.loads(text))


def _polyline_at(waypoints: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Constant-speed position along a polyline at progress s in [0, 1]."""
    seg = np.diff(waypoints, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    d = np.clip(s, 0.0, 1.0) * total
    idx = np.clip(np.searchsorted(cum, d, side="right") - 1, 0, len(seg) - 1)
    frac = (d - cum[idx]) / seg_len[idx]
    return waypoints[idx] + frac[:, None] * seg[idx]


def _smooth_lateral_noise(rng: np.random.Generator, s: np.ndarray, sigma: float, modes: int = 3) -> np.ndarray:
    """Low-frequency 2-D noise vanishing at the walk's start."""
    out = np.zeros((s.size, 2))
    for j in range(1, modes + 1):
        amp = rng.normal(0.0, sigma / j, size=2)
        out += np.sin(math.pi * j * s)[:, None] * amp
    return out


def gen_home_trajectories(spec: HomePathSpec, n_walks: int, regime: str, seed: int) -> list[dict]:
    """Simulated walks from the living-room origin to a regime-weighted endpoint.

    Each walk dict holds wall-clock hour timestamps ``t``, positions ``X`` in
    metres, the generating ``endpoint`` and its ``regime``.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    rng = _rng(seed)
    walks = []
    names = spec.endpoint_names
    for _ in range(n_walks):
        reg = regime if regime != "mixed" else ("day" if rng.random() < 0.5 else "night")
        probs = np.array([spec.regimes[reg]["probabilities"][nm] for nm in names])
        endpoint = names[int(rng.choice(len(names), p=probs))]
        way = np.asarray(spec.paths[endpoint], dtype=np.float64)

        n_pts = spec.samples_per_walk
        s = np.linspace(0.0, 1.0, n_pts)
        pos = _polyline_at(way, s)
        pos = pos + _smooth_lateral_noise(rng, s, spec.noise_scale_m)
        pos = pos + rng.normal(0.0, spec.noise_scale_m / 3.0, size=2)

        dur_s = rng.uniform(*spec.walk_duration_s)
        w0, w1 = spec.regimes[reg]["window"]
        start_h = rng.uniform(w0, w1) % 24.0
        t = start_h + s * dur_s / 3600.0

        walks.append(
            {
                "t": t.tolist(),
                "X": pos.tolist(),
                "endpoint": endpoint,
                "regime": reg,
            }
        )
    return walks


def nearest_endpoint(spec: HomePathSpec, point: np.ndarray) -> str:
    names = spec.endpoint_names
    dists = [np.linalg.norm(point - spec.endpoint_centroid(nm)) for nm in names]
    return names[int(np.argmin(dists))]


# -- JSON-lines serialization --------------------------------------------------


def save_classification_jsonl(path, data: dict) -> None:
    with open(path, "w") as f:
        for xi, yi in zip(data["x"], data["y"]):
            f.write(json.dumps({"x": list(map(float, xi)), "y": int(yi)}) + "\n")


def load_classification_jsonl(path) -> dict:
    xs, ys = [], []
    with open(path) as f:
        for i, line in enumerate(f):
            row = json.loads(line)
            if "x" not in row or "y" not in row:
                raise ValueError(f"{path}:{i + 1}: rows need x and y")
            xs.append(row["x"])
            ys.append(int(row["y"]))
    if not xs:
        raise ValueError(f"empty dataset file {path}")
    x = np.asarray(xs, dtype=np.float64)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ValueError(f"{path}: features must be finite fixed-width vectors")
    y = np.asarray(ys, dtype=np.int64)
    if np.any(y < 0):
        raise ValueError(f"{path}: labels must be nonnegative")
    return {"x": x, "y": y}


def save_endpoint_jsonl(path, data: dict) -> None:
    with open(path, "w") as f:
        for s, t in zip(data["start"], data["target"]):
            f.write(json.dumps({"start": list(map(float, s)), "target": list(map(float, t)), "task": data["task"]}) + "\n")


def load_endpoint_jsonl(path) -> dict:
    starts, targets, task = [], [], None
    with open(path) as f:
        for line in f:
            row = json.loads(line)
            starts.append(row["start"])
            targets.append(row["target"])
            task = row.get("task", task)
    if not starts:
        raise ValueError(f"empty dataset file {path}")
    return {
        "start": np.asarray(starts, dtype=np.float64),
        "target": np.asarray(targets, dtype=np.float64),
        "task": task,
    }


def save_trajectories_jsonl(path, walks: list[dict]) -> None:
    with open(path, "w") as f:
        for w in walks:
            f.write(json.dumps({"t": w["t"], "X": w["X"], "endpoint": w["endpoint"], "regime": w["regime"]}) + "\n")


def load_trajectories_jsonl(path) -> list[dict]:
    walks = []
    with open(path) as f:
        for i, line in enumerate(f):
            row = json.loads(line)
            t = np.asarray(row.get("t", []), dtype=np.float64)
            x = np.asarray(row.get("X", []), dtype=np.float64)
            if t.size < 2 or x.shape[0] != t.size or not np.all(np.diff(t) > 0):
                raise ValueError(f"{path}:{i + 1}: needs strictly increasing t and matching X")
            walks.append(row)
    if not walks:
        raise ValueError(f"empty dataset file {path}")
    return walks


def trajectory_sample(walk: dict) -> TrajectorySample:
    return TrajectorySample(X=np.asarray(walk["X"]), t_X=np.asarray(walk["t"]))
