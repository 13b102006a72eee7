"""Training loops, Adam, model files and trained-model operations.

Three task kinds share one loop:

* ``classify`` -- solve the flow, linear readout on the final state,
  cross-entropy (optionally with transport/directional-variance terms).
* ``endpoint`` -- one-to-one or one-to-many endpoint matching; the
  forecasting loss degenerates to a single evaluation time at ``t_T``.
* ``forecast`` -- trajectory matching against interpolated measurements.

Mixture variants train decomposed: each component is solved under its own
field and the loss mixes components through the membership weights (exact
under pick-and-stick semantics).  Stochastic endpoint tasks estimate output
moments from reparameterized Monte-Carlo solves, so path noise learns to
match the spread in the data.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor, backward, no_grad
from .fields import (
    FieldModel,
    FlowContext,
    TimeEncoding,
    augment,
    component_eval,
    membership_weights,
    build_field_model,
    init_field_params,
)
from .losses import LossConfig, cross_entropy, mdl
from .nn import MlpConfig, mlp_forward, mlp_init
from .odesolve import (
    Dopri5Method,
    Rk4Method,
    SolveRecord,
    SolverError,
    StepController,
    StepLog,
    replayable_eval,
    solve_ivp,
    solve_lockstep_traced,
)

GRID_LEARNING_RATES = (1e-2, 1e-3)
GRID_BATCH_SIZES = (50, 100)
VAR_FLOOR = 1e-6
VAL_STREAM = 3141
READOUT_GAIN = 8.0


@dataclass
class TrainConfig:
    task: str
    variant: str = "vf"
    k_components: int = 1
    membership: str = "stick"
    p_augment: int = 0
    hidden_layers: int = 1
    hidden_units: int = 32
    enc_mode: str = "scalar"
    period_scale: float = math.pi / 12.0
    time_mode: str = "none"  # none | absolute | progress
    loss: LossConfig = dc_field(default_factory=lambda: LossConfig(terms=("CE",)))
    solver_kind: str = "rk4"
    solver_steps: int = 16
    solver_tol: float = 1e-6
    learning_rate: float = 1e-2
    batch_size: int = 50
    epochs: int = 200
    t0: float = 0.0
    t_T: float = 1.0
    seed: int = 0
    val_fraction: float = 0.2
    patience: int = 50
    mc_samples: int = 8
    n_classes: int = 2
    obs_variance: bool = False
    obs_init: float = -2.0
    weight_decay: float = 0.0
    state_penalty: float = 0.0

    def __post_init__(self):
        if self.task not in ("classify", "endpoint", "forecast"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.time_mode not in ("none", "absolute", "progress"):
            raise ValueError(f"unknown time_mode {self.time_mode!r}")
        if self.solver_kind not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver {self.solver_kind!r}")

    @property
    def non_paper_grid(self) -> bool:
        return self.learning_rate not in GRID_LEARNING_RATES or self.batch_size not in GRID_BATCH_SIZES

    def solver_method(self):
        if self.solver_kind == "rk4":
            return Rk4Method(self.solver_steps)
        return Dopri5Method(StepController(abs_tol=self.solver_tol, rel_tol=self.solver_tol))

    def time_encoding(self) -> TimeEncoding:
        return TimeEncoding(mode=self.enc_mode, period_scale=self.period_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class TrainedModel:
    field: FieldModel
    task: str
    config: TrainConfig

    @property
    def store(self) -> ParameterStore:
        return self.field.store

    def readout_cfg(self) -> MlpConfig:
        return MlpConfig(self.field.flow_dim, 0, 32, self.config.n_classes)

    def obs_path(self, k: int) -> str:
        return f"task.obs{k}.w0"


def build_task_model(config: TrainConfig, state_dim: int | None = None) -> TrainedModel:
    """Field model plus task heads, all freshly initialized from the seed."""
    if state_dim is None:
        state_dim = _task_state_dim(config)
    model = build_field_model(
        config.variant,
        state_dim=state_dim,
        k_components=config.k_components,
        membership=config.membership,
        p_augment=config.p_augment,
        hidden_layers=config.hidden_layers,
        hidden_units=config.hidden_units,
        time_enc=config.time_encoding(),
        seed=config.seed,
    )
    tm = TrainedModel(field=model, task=config.task, config=config)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 77)))
    if config.task == "classify":
        mlp_init(model.store, "task.readout", tm.readout_cfg(), rng)
        # Confident logits must be reachable without inflating the flow:
        # with a small readout, cross-entropy grows the field magnitude
        # (and with it the solve cost) to widen margins instead.
        w = model.store["task.readout.w0"]
        model.store.set_values("task.readout.w0", w.data * READOUT_GAIN)
    if config.obs_variance:
        k = model.k_components if model.is_mixture else 1
        for i in range(k):
            model.store.create(f"task.obs{i}.w0", np.full((1, state_dim), config.obs_init))
    return tm


def _task_state_dim(config: TrainConfig) -> int:
    return {"classify": 2, "endpoint": 1, "forecast": 2}[config.task]


def _infer_state_dim(task: str, data) -> int:
    if task == "classify":
        return data["x"].shape[1]
    if task == "endpoint":
        return data["start"].shape[1]
    return len(data["walks"][0]["X"][0])


# ---------------------------------------------------------------------------
# Adam


def adam_step(store: ParameterStore, moments: dict, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> None:
    """One bias-corrected update applied in place; moments keyed like the store.

    Weight decay is decoupled (applied directly to the values, not the
    gradient) and skips bias slots.
    """
    for path, p in store.items():
        g = p.grad
        m, v = moments[path]
        m[:] = beta1 * m + (1 - beta1) * g
        v[:] = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        step = lr * mhat / (np.sqrt(vhat) + eps)
        # decay field weights only: task heads (readout, observation scales)
        # may grow freely, biases are conventionally exempt
        if weight_decay and not path.startswith("task.") and not path.rsplit(".", 1)[-1].startswith("b"):
            step = step + lr * weight_decay * p.data
        p.data = p.data - step


class Adam:
    def __init__(self, store: ParameterStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.moments = {p: (np.zeros(t.shape), np.zeros(t.shape)) for p, t in store.items()}

    def step(self):
        self.t += 1
        adam_step(self.store, self.moments, self.t, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


# ---------------------------------------------------------------------------
# Batch loss construction


def _tile_rows(x: np.ndarray, m: int) -> np.ndarray:
    return np.tile(x, (m, 1))


def _moments_over_samples(h: Tensor, m: int, b: int, d: int) -> tuple[Tensor, Tensor]:
    """Mean and unbiased variance over the leading MC-replica axis."""
    cube = ad.reshape(h, (m, b, d))
    mean = ad.scale(ad.tsum(cube, axis=0), 1.0 / m)
    dev = ad.sub(cube, ad.reshape(mean, (1, b, d)))
    var = ad.scale(ad.tsum(ad.square(dev), axis=0), 1.0 / (m - 1))
    return mean, ad.add(var, VAR_FLOOR)


def _solver(cfg: TrainConfig):
    override = getattr(cfg, "_method_override", None)
    return override if override is not None else cfg.solver_method()


def _solve_flow(ctx, state0, t0, t_T, method, checkpoints=None, rng=None) -> SolveRecord:
    fld = ctx
    if rng is not None:
        # Campaign-scope replay: one noise realization per solve, matching
        # how trained models are sampled.
        fld = replayable_eval(ctx, rng, scope="solve")
    return solve_lockstep_traced(fld, state0, t0, t_T, method, checkpoints)


def _path_parts(records: list[SolveRecord], weights: Tensor | None) -> dict:
    """Transport and directional-variance terms from solver records.

    Mixture runs weight per-component, per-instance terms by membership.
    """
    tl_cols, dv_cols = [], []
    for rec in records:
        seg = None
        for prev, cur in zip(rec.states[:-1], rec.states[1:]):
            d = ad.tsum(ad.square(ad.sub(cur, prev)), axis=-1, keepdims=True)
            seg = d if seg is None else ad.add(seg, d)
        tl_cols.append(ad.scale(seg, 1.0 / (len(rec.states) - 1)))
        n = len(rec.derivs)
        mean = None
        for g in rec.derivs:
            mean = g if mean is None else ad.add(mean, g)
        mean = ad.scale(mean, 1.0 / n)
        dev = None
        for g in rec.derivs:
            dsq = ad.tsum(ad.square(ad.sub(g, mean)), axis=-1, keepdims=True)
            dev = dsq if dev is None else ad.add(dev, dsq)
        dv_cols.append(ad.scale(dev, 1.0 / n))
    tl = ad.concat(tl_cols, axis=-1)  # [B x K]
    dv = ad.concat(dv_cols, axis=-1)
    if weights is not None:
        tl = ad.tsum(ad.mul(tl, weights), axis=-1)
        dv = ad.tsum(ad.mul(dv, weights), axis=-1)
    return {"TL": ad.tmean(tl), "DV": ad.tmean(dv)}


def _mixture_class_nll(logit_cols: list[Tensor], pis: Tensor, labels: np.ndarray) -> Tensor:
    """-log sum_k pi_k p_k(y | x): per-component readouts mixed in probability."""
    b = labels.shape[0]
    cols = []
    for logits in logit_cols:
        onehot = np.zeros(logits.shape)
        onehot[np.arange(b), labels] = 1.0
        tlp = ad.sub(ad.tsum(ad.mul(logits, Tensor(onehot)), axis=-1, keepdims=True), ad.logsumexp(logits, keepdims=True))
        cols.append(tlp)
    grid = ad.concat(cols, axis=-1)  # [B x K]
    joint = ad.add(grid, ad.log(ad.add(pis, 1e-300)))
    return ad.scale(ad.tmean(ad.logsumexp(joint)), -1.0)


def batch_loss(tm: TrainedModel, batch: dict, rng: np.random.Generator | None) -> tuple[Tensor, dict, int]:
    """Loss tensor, scalar term report and total per-instance NFE for one batch."""
    cfg = tm.config
    if cfg.task == "classify":
        return _classify_loss(tm, batch, rng)
    if cfg.task == "endpoint":
        return _endpoint_loss(tm, batch, rng)
    return _forecast_loss(tm, batch, rng)


def _prep_state0(tm: TrainedModel, x: np.ndarray) -> Tensor:
    s = Tensor(x)
    if tm.field.variant == "avf":
        s = augment(s, tm.field.p_augment)
    return s


def _classify_loss(tm, batch, rng):
    cfg = tm.config
    model = tm.field
    method = _solver(cfg)
    x, y = batch["x"], batch["y"]
    state0 = _prep_state0(tm, x)
    parts: dict = {}
    nfe = 0
    if model.is_mixture:
        pis = membership_weights(model, state0, cfg.t0)
        records, logit_cols = [], []
        for k in range(model.k_components):
            ctx = FlowContext(model, selection="mean", component=k)
            rec = _solve_flow(ctx, state0, cfg.t0, cfg.t_T, method)
            records.append(rec)
            nfe += rec.nfe
            logit_cols.append(mlp_forward(model.store, "task.readout", tm.readout_cfg(), rec.states[-1]))
        parts["CE"] = _mixture_class_nll(logit_cols, pis, y)
        if "TL" in cfg.loss.terms or "DV" in cfg.loss.terms:
            parts.update(_path_parts(records, pis))
    else:
        ctx = FlowContext(model, rng=rng, selection="mean" if not model.is_stochastic else "hard-sample")
        rec = _solve_flow(ctx, state0, cfg.t0, cfg.t_T, method, rng=rng if model.is_stochastic else None)
        nfe += rec.nfe
        logits = mlp_forward(model.store, "task.readout", tm.readout_cfg(), rec.states[-1])
        parts["CE"] = cross_entropy(logits, y)
        if "TL" in cfg.loss.terms or "DV" in cfg.loss.terms:
            parts.update(_path_parts([rec], None))
    from .losses import combined_loss

    keep = {t: parts[t] for t in cfg.loss.terms if t in parts}
    return combined_loss(cfg.loss, keep), {t: v.item() for t, v in parts.items()}, nfe


def _endpoint_loss(tm, batch, rng):
    cfg = tm.config
    model = tm.field
    method = _solver(cfg)
    start, target = batch["start"], batch["target"]
    b, d = target.shape
    nfe = 0
    if not model.is_mixture and not model.is_stochastic:
        state0 = _prep_state0(tm, start)
        ctx = FlowContext(model, selection="mean")
        rec = _solve_flow(ctx, state0, cfg.t0, cfg.t_T, method)
        nfe += rec.nfe
        pred = rec.states[-1]
        if model.variant == "avf":
            pred = ad.narrow(pred, 0, d, axis=-1)
        fl = ad.tmean(ad.tsum(ad.square(ad.sub(pred, target)), axis=-1))
        parts = {"FL": fl}
    elif not model.is_mixture:  # svf: Monte-Carlo endpoint moments
        m = cfg.mc_samples
        state0 = Tensor(_tile_rows(start, m))
        ctx = FlowContext(model, rng=rng, selection="hard-sample")
        rec = _solve_flow(ctx, state0, cfg.t0, cfg.t_T, method, rng=rng)
        nfe += rec.nfe
        mean, var = _moments_over_samples(rec.states[-1], m, b, d)
        parts = {"FL": mdl([mean], [var], np.array([1.0]), target)}
    else:
        # Mixtures split one-to-many targets through membership; components
        # are solved on their mean fields with a learned observation variance
        # (exact under pick-and-stick, and far more stable than per-component
        # Monte-Carlo moments).
        state0 = _prep_state0(tm, start)
        pis = membership_weights(model, state0, cfg.t0)
        means, variances = [], []
        for k in range(model.k_components):
            ctx = FlowContext(model, selection="mean", component=k)
            rec = _solve_flow(ctx, state0, cfg.t0, cfg.t_T, method)
            mu_k = rec.states[-1]
            var_k = ad.add(ad.softplus(tm.store[tm.obs_path(k)]), VAR_FLOOR)
            nfe += rec.nfe
            means.append(mu_k)
            variances.append(var_k)
        parts = {"FL": mdl(means, variances, pis, target)}
    from .losses import combined_loss

    return combined_loss(cfg.loss, parts), {t: v.item() for t, v in parts.items()}, nfe


def _forecast_batch_arrays(tm: TrainedModel, walks: list[dict]):
    """Stack a walk batch: initial states, conditioning times, knot targets."""
    cfg = tm.config
    t_grids = [np.asarray(w["t"], dtype=np.float64) for w in walks]
    xs = [np.asarray(w["X"], dtype=np.float64) for w in walks]
    if cfg.time_mode == "absolute":
        grid = t_grids[0]
        for tg in t_grids[1:]:
            if tg.shape != grid.shape or not np.allclose(tg, grid):
                raise ValueError("absolute time mode needs a shared time grid")
        t0, t_T = float(grid[0]), float(grid[-1])
        taus = grid
        base = np.zeros(len(walks))
        rate = np.ones(len(walks))
    else:
        n_pts = xs[0].shape[0]
        taus = np.linspace(0.0, 1.0, n_pts)
        t0, t_T = 0.0, 1.0
        base = np.array([tg[0] for tg in t_grids])
        rate = np.array([tg[-1] - tg[0] for tg in t_grids])
    targets = np.stack(xs, axis=1)  # [T' x B x D]
    state0 = Tensor(targets[0])
    return state0, t0, t_T, taus, base, rate, targets


def _state_sensitivity_penalty(model, targets, eval_times, base, rate, components):
    """Contractive term: the field should not depend on off-trajectory state.

    Pins extrapolation behaviour, where the solve visits states the training
    trajectories never reached.
    """
    pen = None
    count = 0
    for j in range(0, len(eval_times), 4):
        t = eval_times[j]
        tc = base + rate * t
        x = Tensor(targets[j + 1])
        for k in components:
            f0 = component_eval(model, x, tc, k, rng=None)
            f1 = component_eval(model, ad.add(x, 1.0), tc, k, rng=None)
            p = ad.tmean(ad.tsum(ad.square(ad.sub(f1, f0)), axis=-1))
            pen = p if pen is None else ad.add(pen, p)
            count += 1
    return ad.scale(pen, 1.0 / count)


def _forecast_loss(tm, batch, rng):
    cfg = tm.config
    model = tm.field
    method = _solver(cfg)
    walks = batch["walks"]
    state0, t0, t_T, taus, base, rate, targets = _forecast_batch_arrays(tm, walks)
    eval_times = [float(t) for t in taus[1:]]
    checkpoints = eval_times[:-1]
    nfe = 0

    if not model.is_mixture:
        ctx = FlowContext(model, rng=rng, selection="hard-sample" if model.is_stochastic else "mean", time_base=base, time_rate=rate)
        rec = _solve_flow(ctx, state0, t0, t_T, method, checkpoints=checkpoints, rng=rng if model.is_stochastic else None)
        nfe += rec.nfe
        if model.is_stochastic and cfg.obs_variance:
            var0 = ad.add(ad.softplus(tm.store[tm.obs_path(0)]), VAR_FLOOR)
            acc = None
            for j, t in enumerate(eval_times, start=1):
                term = mdl([rec.state_at(t)], [var0], np.array([1.0]), targets[j])
                acc = term if acc is None else ad.add(acc, term)
            fl = ad.scale(acc, 1.0 / len(eval_times))
        else:
            acc = None
            for j, t in enumerate(eval_times, start=1):
                diff = ad.sub(rec.state_at(t), targets[j])
                term = ad.tmean(ad.tsum(ad.square(diff), axis=-1))
                acc = term if acc is None else ad.add(acc, term)
            fl = ad.scale(acc, 1.0 / len(eval_times))
        parts = {"FL": fl}
    else:
        pis = membership_weights(model, state0, base if cfg.time_mode == "progress" else t0)
        comp_recs = []
        for k in range(model.k_components):
            ctx = FlowContext(model, selection="mean", component=k, time_base=base, time_rate=rate)
            rec = _solve_flow(ctx, state0, t0, t_T, method, checkpoints=checkpoints)
            nfe += rec.nfe
            comp_recs.append(rec)
        variances = [ad.add(ad.softplus(tm.store[tm.obs_path(k)]), VAR_FLOOR) for k in range(model.k_components)]
        acc = None
        for j, t in enumerate(eval_times, start=1):
            means = [rec.state_at(t) for rec in comp_recs]
            term = mdl(means, variances, pis, targets[j])
            acc = term if acc is None else ad.add(acc, term)
        parts = {"FL": ad.scale(acc, 1.0 / len(eval_times))}
    from .losses import combined_loss

    loss = combined_loss(cfg.loss, parts)
    if cfg.state_penalty > 0.0:
        comps = range(model.k_components) if model.is_mixture else [0]
        pen = _state_sensitivity_penalty(model, targets, eval_times, base, rate, comps)
        loss = ad.add(loss, ad.scale(pen, cfg.state_penalty))
        parts = dict(parts, SP=pen)
    return loss, {t: v.item() for t, v in parts.items()}, nfe


# ---------------------------------------------------------------------------
# The training loop


def _split_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _slice_batch(task: str, data, idx: np.ndarray) -> dict:
    if task == "classify":
        return {"x": data["x"][idx], "y": data["y"][idx]}
    if task == "endpoint":
        return {"start": data["start"][idx], "target": data["target"][idx]}
    return {"walks": [data["walks"][i] for i in idx]}


def _data_size(task: str, data) -> int:
    if task == "classify":
        return data["x"].shape[0]
    if task == "endpoint":
        return data["start"].shape[0]
    return len(data["walks"])


def train_run(config: TrainConfig, data, quiet: bool = True):
    """Minibatch training with validation-based selection.

    Returns ``(TrainedModel, metrics)`` where metrics is one dict per epoch.
    Deterministic given (config, seed).
    """
    if config.task == "forecast":
        # The integration interval is owned by the data; record it so the
        # saved model solves over the same span it was trained on.
        if config.time_mode == "absolute":
            grid = np.asarray(data["walks"][0]["t"], dtype=np.float64)
            config.t0, config.t_T = float(grid[0]), float(grid[-1])
        else:
            config.t0, config.t_T = 0.0, 1.0
    tm = build_task_model(config, state_dim=_infer_state_dim(config.task, data))
    store = tm.store
    opt = Adam(store, config.learning_rate, weight_decay=config.weight_decay)
    n = _data_size(config.task, data)
    n_val = int(round(n * config.val_fraction))
    split_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 11)))
    perm = split_rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("empty training split")

    metrics: list[dict] = []
    best_val = math.inf
    best_params = store.snapshot()
    best_epoch = -1
    stale = 0
    for epoch in range(config.epochs):
        ep_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 13, epoch)))
        noise_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 17, epoch)))
        term_sums: dict[str, float] = {}
        nfes: list[int] = []
        n_batches = 0
        for idx in _split_batches(len(train_idx), config.batch_size, ep_rng):
            batch = _slice_batch(config.task, data, train_idx[idx])
            try:
                loss, terms, nfe = batch_loss(tm, batch, noise_rng)
            except (SolverError, ad.DomainError) as e:
                raise FloatingPointError(f"training diverged at epoch {epoch}: {e}") from e
            val = loss.item()
            if not math.isfinite(val):
                raise FloatingPointError(f"training diverged (non-finite loss) at epoch {epoch}")
            backward(loss, store)
            opt.step()
            for t, v in terms.items():
                term_sums[t] = term_sums.get(t, 0.0) + v
            nfes.append(nfe)
            n_batches += 1

        if n_val > 0:
            val_loss = evaluate_loss(tm, _slice_batch(config.task, data, val_idx), stream=VAL_STREAM)
        else:
            val_loss = sum(term_sums.values()) / n_batches
        row = {
            "epoch": epoch,
            "loss_terms": {t: term_sums[t] / n_batches for t in sorted(term_sums)},
            "nfe": {
                "mean": float(np.mean(nfes)),
                "median": float(np.median(nfes)),
                "max": int(np.max(nfes)),
            },
            "val": val_loss,
        }
        metrics.append(row)
        if not quiet:
            print(json.dumps(row))
        if val_loss < best_val:
            best_val = val_loss
            best_params = store.snapshot()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    store.load(best_params)
    summary = {"best_epoch": best_epoch, "best_val": best_val}
    return tm, metrics, summary


def evaluate_loss(tm: TrainedModel, batch: dict, stream: int = VAL_STREAM) -> float:
    """Deterministic predictive loss on held-out data (fixed noise stream)."""
    rng = np.random.default_rng(np.random.SeedSequence((tm.config.seed, stream)))
    with no_grad():
        loss, _, _ = batch_loss(tm, batch, rng)
    return loss.item()


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(tm: TrainedModel, batch: dict, eps: float = 1e-5, noise_seed: int = 0) -> float:
    """Max relative error between backward and central differences.

    The noise stream restarts from the same seed for every evaluation, so the
    sampled path is held fixed while parameters move.
    """
    store = tm.store
    if store.num_values() > 2000:
        raise ValueError("grad_check is for small models (<= ~1e3 parameters)")

    # Adaptive step decisions are constants to the tape; record them once and
    # replay the same sequence in every finite-difference evaluation.
    method = tm.config.solver_method()
    log = None
    if isinstance(method, Dopri5Method):
        log = StepLog()
        method.step_log = log
    tm.config._method_override = method
    try:

        def loss_value() -> float:
            if log is not None:
                log.begin("replay")
            rng = np.random.default_rng(np.random.SeedSequence((noise_seed, 23)))
            with no_grad():
                loss, _, _ = batch_loss(tm, batch, rng)
            return loss.item()

        if log is not None:
            log.begin("record")
        rng = np.random.default_rng(np.random.SeedSequence((noise_seed, 23)))
        loss, _, _ = batch_loss(tm, batch, rng)
        backward(loss, store)
        analytic = {p: t.grad.copy() for p, t in store.items()}
        numeric = ad.finite_difference_grads(loss_value, store, eps=eps)
    finally:
        tm.config._method_override = None
    return ad.max_relative_error(analytic, numeric)


# ---------------------------------------------------------------------------
# Trained-model operations (shared by eval / forecast / nfe-report)


def classify_predict(tm: TrainedModel, x: np.ndarray) -> np.ndarray:
    """Deterministic class probabilities [B x C] (expectation over components)."""
    cfg = tm.config
    model = tm.field
    method = cfg.solver_method()
    with no_grad():
        state0 = _prep_state0(tm, x)
        if model.is_mixture:
            pis = membership_weights(model, state0, cfg.t0).data
            probs = np.zeros((x.shape[0], cfg.n_classes))
            for k in range(model.k_components):
                ctx = FlowContext(model, selection="mean", component=k)
                rec = _solve_flow(ctx, state0, cfg.t0, cfg.t_T, method)
                logits = mlp_forward(model.store, "task.readout", tm.readout_cfg(), rec.states[-1]).data
                e = np.exp(logits - logits.max(axis=1, keepdims=True))
                probs += pis[:, k : k + 1] * (e / e.sum(axis=1, keepdims=True))
            return probs
        ctx = FlowContext(model, selection="mean")
        rec = _solve_flow(ctx, state0, cfg.t0, cfg.t_T, method)
        logits = mlp_forward(model.store, "task.readout", tm.readout_cfg(), rec.states[-1]).data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def sample_flow(
    tm: TrainedModel,
    start: np.ndarray,
    rng: np.random.Generator,
    time_base: float = 0.0,
    time_rate: float = 1.0,
    checkpoints=None,
    stochastic: bool = True,
    t_T: float | None = None,
    method=None,
) -> tuple[SolveRecord, int | None]:
    """One sampled trajectory from a trained model (single instance).

    Mixtures pick a component at the initial condition and stick to it unless
    the model filters membership dynamically.
    """
    cfg = tm.config
    model = tm.field
    if method is None:
        method = cfg.solver_method()
    t_end = cfg.t_T if t_T is None else t_T
    state0 = _prep_state0(tm, start.reshape(1, -1))
    with no_grad():
        selection = "hard-sample" if stochastic else "mean"
        ctx = FlowContext(
            model,
            rng=rng,
            selection=selection,
            time_base=time_base,
            time_rate=time_rate,
        )
        component = None
        if model.is_mixture:
            ctx.start(state0, cfg.t0, freeze_component=stochastic and model.membership == "stick")
            component = ctx._frozen_k
        # Replay (and its per-step first-stage re-evaluations) only matters
        # when the flow actually consumes randomness during the solve.
        draws_inside = model.is_stochastic or (model.is_mixture and component is None)
        fld = replayable_eval(ctx, rng, scope="solve") if (stochastic and draws_inside) else ctx
        rec = solve_ivp(fld, state0, cfg.t0, t_end, method, checkpoints)
    return rec, component


def nfe_profile(tm: TrainedModel, states0: np.ndarray, master_seed: int, stochastic: bool = True) -> list[int]:
    """Per-instance NFE with independently seeded solves (histogram methodology)."""
    out = []
    for i in range(states0.shape[0]):
        rng = np.random.default_rng(np.random.SeedSequence((master_seed, i)))
        rec, _ = sample_flow(tm, states0[i], rng, stochastic=stochastic)
        out.append(rec.nfe)
    return out


# ---------------------------------------------------------------------------
# Model files


def save_model(path, tm: TrainedModel) -> None:
    doc = {
        "task": tm.task,
        "field": tm.field.descriptor(),
        "config": tm.config.to_dict(),
        "params": json.loads(tm.store.to_json()),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_model(path) -> TrainedModel:
    with open(path) as f:
        doc = json.load(f)
    store = ParameterStore.from_json(json.dumps(doc["params"]))
    cfg = TrainConfig.from_dict(doc["config"])
    field = FieldModel.from_descriptor(doc["field"], store)
    return TrainedModel(field=field, task=doc["task"], config=cfg)
