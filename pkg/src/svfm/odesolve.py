"""Fixed-step RK4 and adaptive Dormand-Prince solvers.

Design notes that matter elsewhere in the package:

* States flow through the autodiff tape, so training backpropagates through
  unrolled steps.  Step-size control reads raw ``.data`` and its decisions
  are constants to the tape.
* The embedded error estimate is computed in deviation form,
  ``e = h * sum_i d_i * (k_i - k_1)`` with ``d = b - b*``.  Since the exact
  ``d`` sums to zero this is the same quantity, but fields whose stage
  evaluations are all equal now produce a bitwise-zero estimate instead of a
  rounding residue.
* Dormand-Prince is FSAL: the 7th stage is the next step's first stage.  A
  step consumes 6 fresh evaluations; the solve accounts for the initial
  evaluation and for re-evaluations forced by stochastic fields (a new noise
  snapshot invalidates the carried stage).
* NFE is counted per instance, and rejected attempts cost real evaluations,
  so they count.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import Tensor, add, as_tensor, no_grad, scale


class SolverError(RuntimeError):
    """Numerical failure during a solve (non-finite state, step underflow)."""


@dataclass
class ButcherTableau:
    name: str
    c: list[float]
    a: list[list[float]]
    b: list[float]
    b_star: list[float] | None = None
    order: int = 4

    @property
    def stages(self) -> int:
        return len(self.b)

    def error_coeffs(self) -> list[float]:
        if self.b_star is None:
            raise ValueError(f"{self.name}: no embedded row")
        return [bi - bsi for bi, bsi in zip(self.b, self.b_star)]

    def validate(self, tol: float = 1e-12) -> None:
        s = self.stages
        if not (len(self.c) == s and len(self.a) == s):
            raise ValueError(f"{self.name}: inconsistent stage counts")
        if abs(sum(self.b) - 1.0) > tol:
            raise ValueError(f"{self.name}: sum(b) != 1")
        if self.b_star is not None and abs(sum(self.b_star) - 1.0) > tol:
            raise ValueError(f"{self.name}: sum(b*) != 1")
        for i, row in enumerate(self.a):
            if len(row) != i:
                raise ValueError(f"{self.name}: a is not strictly lower triangular")
            if abs(sum(row) - self.c[i]) > tol:
                raise ValueError(f"{self.name}: row {i} sum != c[{i}]")


RK4 = ButcherTableau(
    name="rk4",
    c=[0.0, 0.5, 0.5, 1.0],
    a=[[], [0.5], [0.0, 0.5], [0.0, 0.0, 1.0]],
    b=[1 / 6, 1 / 3, 1 / 3, 1 / 6],
    order=4,
)

DOPRI5 = ButcherTableau(
    name="dopri5",
    c=[0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0],
    a=[
        [],
        [1 / 5],
        [3 / 40, 9 / 40],
        [44 / 45, -56 / 15, 32 / 9],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
        [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ],
    b=[35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0],
    b_star=[5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40],
    order=5,
)


@dataclass
class StepController:
    abs_tol: float = 1e-6
    rel_tol: float = 1e-6
    safety: float = 0.9
    min_scale: float = 0.2
    max_scale: float = 5.0
    error_order: int = 5

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol < 0:
            raise ValueError("tolerances must be positive")
        if not (0 < self.min_scale < 1 < self.max_scale):
            raise ValueError("need 0 < min_scale < 1 < max_scale")

    def error_norm(self, e: np.ndarray, y0: np.ndarray, y1: np.ndarray) -> float:
        scale_ = self.abs_tol + self.rel_tol * np.maximum(np.abs(y0), np.abs(y1))
        return float(np.max(np.abs(e) / scale_)) if e.size else 0.0

    def next_h(self, h: float, err_norm: float) -> float:
        if err_norm == 0.0:
            factor = self.max_scale
        else:
            factor = self.safety * err_norm ** (-1.0 / self.error_order)
            factor = min(self.max_scale, max(self.min_scale, factor))
        return h * factor


@dataclass
class StepOutcome:
    state_next: Tensor
    error_estimate: np.ndarray | None
    accepted: bool
    h_used: float
    h_next: float
    nfe_delta: int
    stage_first: Tensor | None = None
    stage_last: Tensor | None = None


@dataclass
class SolveRecord:
    """Trajectory of one solved instance: every accepted node, plus accounting."""

    times: list[float] = dc_field(default_factory=list)
    states: list[Tensor] = dc_field(default_factory=list)
    derivs: list[Tensor] = dc_field(default_factory=list)
    nfe: int = 0
    rejected_steps: int = 0
    rng_replay_log: list = dc_field(default_factory=list)

    def state_at(self, t: float, tol: float = 1e-9) -> Tensor:
        i = bisect.bisect_left(self.times, t - tol)
        if i < len(self.times) and abs(self.times[i] - t) <= tol:
            return self.states[i]
        raise KeyError(f"no checkpoint recorded at t={t}")

    def to_dict(self, instance: int = 0) -> dict:
        return {
            "instance": instance,
            "nfe": self.nfe,
            "rejected": self.rejected_steps,
            "times": self.times,
            "states": [s.data.reshape(-1).tolist() for s in self.states],
        }


def records_to_jsonl(records: list[SolveRecord]) -> str:
    return "\n".join(json.dumps(r.to_dict(instance=i)) for i, r in enumerate(records)) + "\n"


def _check_finite(k: Tensor, t: float):
    if not np.all(np.isfinite(k.data)):
        raise SolverError(f"field returned non-finite values at t={t}")


def rk4_step(field, state: Tensor, t: float, h: float) -> StepOutcome:
    """One classical four-stage step; always accepted, no error estimate."""
    if h <= 0:
        raise ValueError("rk4_step needs h > 0")
    tab = RK4
    ks = []
    for i in range(tab.stages):
        y = state
        for j, aij in enumerate(tab.a[i]):
            if aij != 0.0:
                y = add(y, scale(ks[j], h * aij))
        k = as_tensor(field(y, t + tab.c[i] * h))
        _check_finite(k, t + tab.c[i] * h)
        ks.append(k)
    out = state
    for bi, k in zip(tab.b, ks):
        out = add(out, scale(k, h * bi))
    return StepOutcome(
        state_next=out,
        error_estimate=None,
        accepted=True,
        h_used=h,
        h_next=h,
        nfe_delta=tab.stages,
        stage_first=ks[0],
        stage_last=ks[-1],
    )


def dopri5_step(
    field,
    state: Tensor,
    t: float,
    h: float,
    controller: StepController,
    k1: Tensor | None = None,
) -> StepOutcome:
    """One trial Dormand-Prince step.

    ``k1`` is the carried FSAL stage; when omitted it is evaluated here and
    the extra evaluation is included in ``nfe_delta``.
    """
    if h <= 0:
        raise ValueError("dopri5_step needs h > 0")
    tab = DOPRI5
    nfe = 0
    if k1 is None:
        k1 = as_tensor(field(state, t))
        _check_finite(k1, t)
        nfe += 1
    ks = [k1]
    for i in range(1, tab.stages):
        y = state
        for j, aij in enumerate(tab.a[i]):
            if aij != 0.0:
                y = add(y, scale(ks[j], h * aij))
        k = as_tensor(field(y, t + tab.c[i] * h))
        _check_finite(k, t + tab.c[i] * h)
        ks.append(k)
        nfe += 1

    out = state
    for bi, k in zip(tab.b, ks):
        if bi != 0.0:
            out = add(out, scale(k, h * bi))

    # Deviation form: exact zero when all stages agree.
    d = tab.error_coeffs()
    err = np.zeros(state.shape)
    k1_data = ks[0].data
    for di, k in zip(d[1:], ks[1:]):
        if di != 0.0:
            err = err + di * (k.data - k1_data)
    err = h * err

    err_norm = controller.error_norm(err, state.data, out.data)
    accepted = err_norm <= 1.0
    h_next = controller.next_h(h, err_norm)
    return StepOutcome(
        state_next=out,
        error_estimate=err,
        accepted=accepted,
        h_used=h,
        h_next=h_next,
        nfe_delta=nfe,
        stage_first=ks[0],
        stage_last=ks[-1],
    )


def replayable_eval(field, rng: np.random.Generator, scope: str = "step"):
    """Wrap a stochastic field so repeated evaluations share random draws.

    ``scope="step"``: the generator state is snapshotted when a step begins;
    every evaluation within that step (rejected re-attempts included)
    restores the snapshot first, and a new snapshot is taken only when the
    step's base time advances.

    ``scope="solve"``: one snapshot for the whole evaluation campaign, so the
    entire solve integrates a single fixed noise realization.  The field is
    then smooth in (state, t) and the carried FSAL stage stays valid across
    steps.
    """
    return ReplayableField(field, rng, scope)


class ReplayableField:
    replayable = True

    def __init__(self, field, rng: np.random.Generator, scope: str = "step"):
        if scope not in ("step", "solve"):
            raise ValueError(f"unknown replay scope {scope!r}")
        self.field = field
        self.rng = rng
        self.scope = scope
        self._snapshot = None
        self._step_t = None
        self.log: list = []

    @property
    def needs_step_refresh(self) -> bool:
        return self.scope == "step"

    def on_step_start(self, t: float):
        fresh = self._snapshot is None or (self.scope == "step" and t != self._step_t)
        if fresh:
            self._snapshot = self.rng.bit_generator.state
            self._step_t = t
            self.log.append(self._snapshot)
        inner = getattr(self.field, "on_step_start", None)
        if inner is not None:
            inner(t)

    def on_step_commit(self, t: float, state: Tensor):
        inner = getattr(self.field, "on_step_commit", None)
        if inner is not None:
            inner(t, state)

    def __call__(self, state: Tensor, t: float) -> Tensor:
        if self._snapshot is not None:
            self.rng.bit_generator.state = self._snapshot
        return self.field(state, t)


def _notify(field, hook: str, *args):
    fn = getattr(field, hook, None)
    if fn is not None:
        fn(*args)


@dataclass
class Rk4Method:
    n_steps: int = 32

    def name(self) -> str:
        return f"rk4({self.n_steps})"


@dataclass
class StepLog:
    """Recorded (h, accepted) sequences for replaying adaptive solves.

    Step-size decisions are constants to the tape, so their finite-difference
    oracle must hold the recorded sequence fixed while parameters move.  One
    log covers all solves of one loss evaluation, in call order.
    """

    mode: str = "record"
    runs: list = dc_field(default_factory=list)
    cursor: int = 0

    def begin(self, mode: str):
        if mode not in ("record", "replay"):
            raise ValueError(mode)
        self.mode = mode
        self.cursor = 0
        if mode == "record":
            self.runs = []

    def next_run(self) -> list:
        if self.mode == "record":
            run: list = []
            self.runs.append(run)
            return run
        run = self.runs[self.cursor]
        self.cursor += 1
        return run


@dataclass
class Dopri5Method:
    controller: StepController = dc_field(default_factory=StepController)
    step_log: StepLog | None = None

    def name(self) -> str:
        return "dopri5"


def _prep_checkpoints(t0: float, t_T: float, checkpoints) -> list[float]:
    if t0 >= t_T:
        raise ValueError(f"need t0 < t_T, got [{t0}, {t_T}]")
    req = sorted(set(float(c) for c in (checkpoints or [])))
    for c in req:
        if c < t0 - 1e-12 or c > t_T + 1e-12:
            raise ValueError(f"checkpoint {c} outside [{t0}, {t_T}]")
    bounds = [c for c in req if c > t0 + 1e-12 and c < t_T - 1e-12]
    bounds.append(t_T)
    return bounds


def solve_ivp(field, state0, t0: float, t_T: float, method, checkpoints=None) -> SolveRecord:
    """Integrate one instance, landing exactly on every requested checkpoint.

    ``method`` is :class:`Rk4Method` or :class:`Dopri5Method`.  The record
    contains every accepted node (requested checkpoints are always nodes).
    """
    state0 = as_tensor(state0)
    bounds = _prep_checkpoints(t0, t_T, checkpoints)
    rec = SolveRecord()
    span = t_T - t0

    if isinstance(method, Rk4Method):
        _solve_rk4(field, state0, t0, t_T, method.n_steps, bounds, rec)
    elif isinstance(method, Dopri5Method):
        _solve_dopri5(field, state0, t0, t_T, method.controller, bounds, rec, span)
    else:
        raise TypeError(f"unknown method {method!r}")

    if isinstance(field, ReplayableField):
        rec.rng_replay_log = list(field.log)
    return rec


def _solve_rk4(field, state0, t0, t_T, n_steps, bounds, rec):
    if n_steps < 1:
        raise ValueError("rk4 needs n_steps >= 1")
    # Fixed grid plus exact landings on requested checkpoints.
    grid = sorted(set([t0 + (t_T - t0) * i / n_steps for i in range(n_steps + 1)] + bounds + [t_T]))
    t, y = t0, state0
    rec.times.append(t)
    rec.states.append(y)
    last_stage = None
    for t_next in grid[1:]:
        h = t_next - t
        if h <= 0:
            continue
        _notify(field, "on_step_start", t)
        out = rk4_step(field, y, t, h)
        rec.nfe += out.nfe_delta
        rec.derivs.append(out.stage_first)
        y = out.state_next
        if not np.all(np.isfinite(y.data)):
            raise SolverError(f"state became non-finite at t={t_next}")
        t = t_next
        _notify(field, "on_step_commit", t, y)
        rec.times.append(t)
        rec.states.append(y)
        last_stage = out.stage_last
    # Endpoint derivative: the last stage evaluation approximates f(t_T, y_T)
    # to O(h^3) without spending an extra evaluation.
    rec.derivs.append(last_stage)


def _solve_dopri5(field, state0, t0, t_T, controller, bounds, rec, span):
    refresh = getattr(field, "needs_step_refresh", False)
    t, y = t0, state0
    _notify(field, "on_step_start", t)
    k1 = as_tensor(field(y, t))
    _check_finite(k1, t)
    rec.nfe += 1
    rec.times.append(t)
    rec.states.append(y)
    rec.derivs.append(k1)

    bi = 0
    h_planned = t_T - t0  # trial the whole remaining interval first
    while t < t_T - 1e-12 * span:
        boundary = bounds[bi]
        h = min(h_planned, boundary - t)
        if h < 1e-12 * span:
            raise SolverError(f"step underflow at t={t} (h={h})")
        _notify(field, "on_step_start", t)
        out = dopri5_step(field, y, t, h, controller, k1=k1)
        rec.nfe += out.nfe_delta
        if not out.accepted:
            rec.rejected_steps += 1
            h_planned = out.h_next
            continue
        t_new = t + out.h_used
        y = out.state_next
        if not np.all(np.isfinite(y.data)):
            raise SolverError(f"state became non-finite at t={t_new}")
        _notify(field, "on_step_commit", t_new, y)
        t = t_new
        h_planned = out.h_next
        if abs(t - boundary) <= 1e-12 * max(1.0, abs(boundary)):
            t = boundary
            bi = min(bi + 1, len(bounds) - 1)
        if refresh and t < t_T - 1e-12 * span:
            # New step means a new noise snapshot; the carried FSAL stage was
            # drawn under the old one, so re-evaluate.
            _notify(field, "on_step_start", t)
            k1 = as_tensor(field(y, t))
            _check_finite(k1, t)
            rec.nfe += 1
        else:
            k1 = out.stage_last
        rec.times.append(t)
        rec.states.append(y)
        rec.derivs.append(k1)


def solve_batch(
    field,
    states0,
    t0: float,
    t_T: float,
    method,
    checkpoints=None,
    mode: str = "independent",
    instance_field=None,
) -> tuple[list[SolveRecord], int]:
    """Solve a batch either in lockstep or instance by instance.

    Lockstep shares one step sequence controlled by the worst per-instance
    error (batch-NFE semantics); independent mode solves each instance
    separately, which is what per-instance NFE histograms measure.  Returns
    the records and the batch-max NFE.
    """
    states0 = as_tensor(states0)
    if states0.data.ndim != 2:
        raise ValueError("solve_batch expects [B x D] initial states")
    B = states0.shape[0]

    if mode == "lockstep":
        rec = _solve_lockstep(field, states0, t0, t_T, method, checkpoints)
        records = []
        for i in range(B):
            ri = SolveRecord(
                times=list(rec.times),
                states=[Tensor(s.data[i]) for s in rec.states],
                derivs=[Tensor(d.data[i]) for d in rec.derivs],
                nfe=rec.nfe,
                rejected_steps=rec.rejected_steps,
            )
            records.append(ri)
        return records, rec.nfe
    if mode == "independent":
        records = []
        for i in range(B):
            fi = instance_field(i) if instance_field is not None else field
            row = Tensor(states0.data[i : i + 1])
            ri = solve_ivp(fi, row, t0, t_T, method, checkpoints)
            records.append(ri)
        return records, max(r.nfe for r in records)
    raise ValueError(f"unknown mode {mode!r}")


def solve_lockstep_traced(field, states0, t0, t_T, method, checkpoints=None) -> SolveRecord:
    """Lockstep batch solve keeping the batch tensors intact (training path)."""
    return _solve_lockstep(field, as_tensor(states0), t0, t_T, method, checkpoints)


def _solve_lockstep(field, states0, t0, t_T, method, checkpoints):
    bounds = _prep_checkpoints(t0, t_T, checkpoints)
    rec = SolveRecord()
    span = t_T - t0
    if isinstance(method, Rk4Method):
        _solve_rk4(field, states0, t0, t_T, method.n_steps, bounds, rec)
        return rec
    if not isinstance(method, Dopri5Method):
        raise TypeError(f"unknown method {method!r}")

    controller = method.controller
    refresh = getattr(field, "needs_step_refresh", False)
    log_run = method.step_log.next_run() if method.step_log is not None else None
    replay_steps = iter(list(log_run)) if (log_run is not None and method.step_log.mode == "replay") else None
    t, y = t0, states0
    _notify(field, "on_step_start", t)
    k1 = as_tensor(field(y, t))
    _check_finite(k1, t)
    rec.nfe += 1
    rec.times.append(t)
    rec.states.append(y)
    rec.derivs.append(k1)

    bi = 0
    h_planned = t_T - t0
    while t < t_T - 1e-12 * span:
        boundary = bounds[bi]
        if replay_steps is not None:
            try:
                h, forced_accept = next(replay_steps)
            except StopIteration:
                break
        else:
            h = min(h_planned, boundary - t)
            if h < 1e-12 * span:
                raise SolverError(f"step underflow at t={t} (h={h})")
        _notify(field, "on_step_start", t)
        out = dopri5_step(field, y, t, h, controller, k1=k1)
        rec.nfe += out.nfe_delta
        accepted = forced_accept if replay_steps is not None else out.accepted
        if replay_steps is None and log_run is not None:
            log_run.append((h, out.accepted))
        if not accepted:
            rec.rejected_steps += 1
            h_planned = out.h_next
            continue
        t_new = t + out.h_used
        y = out.state_next
        if not np.all(np.isfinite(y.data)):
            raise SolverError(f"state became non-finite at t={t_new}")
        _notify(field, "on_step_commit", t_new, y)
        t = t_new
        h_planned = out.h_next
        if abs(t - boundary) <= 1e-12 * max(1.0, abs(boundary)):
            t = boundary
            bi = min(bi + 1, len(bounds) - 1)
        if refresh and t < t_T - 1e-12 * span:
            _notify(field, "on_step_start", t)
            k1 = as_tensor(field(y, t))
            _check_finite(k1, t)
            rec.nfe += 1
        else:
            k1 = out.stage_last
        rec.times.append(t)
        rec.states.append(y)
        rec.derivs.append(k1)
    return rec


def interpolate_solution(record: SolveRecord, t: float) -> np.ndarray:
    """Cubic Hermite interpolation between recorded nodes.

    Uses the stored field evaluations as endpoint derivatives; exact at the
    nodes and for linear trajectories.
    """
    times = record.times
    if not times:
        raise ValueError("empty record")
    if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
        raise ValueError(f"t={t} outside solved interval [{times[0]}, {times[-1]}]")
    i = bisect.bisect_right(times, t) - 1
    i = max(0, min(i, len(times) - 2))
    if abs(times[i] - t) <= 1e-12:
        return record.states[i].data.copy()
    if abs(times[i + 1] - t) <= 1e-12:
        return record.states[i + 1].data.copy()
    h = times[i + 1] - times[i]
    s = (t - times[i]) / h
    y0, y1 = record.states[i].data, record.states[i + 1].data
    f0, f1 = record.derivs[i].data, record.derivs[i + 1].data
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
