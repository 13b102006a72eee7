"""Trajectory-shaping and predictive losses.

The mixture density loss operates in log space throughout; the transport and
directional-variance pair regularize paths toward short, aligned motion,
which is what keeps adaptive solvers cheap.  The forecasting loss compares
solver states against an interpolant of the measured trajectory, so losses
can be evaluated at whatever times the solver actually visited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.interpolate import CubicSpline

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .odesolve import SolveRecord

LOSS_TERMS = ("MDL", "TL", "DV", "FL", "CE")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LossConfig:
    terms: tuple[str, ...]
    lam: float = 0.0
    fl_inner: str = "squared-error"

    def __post_init__(self):
        self.terms = tuple(self.terms)
        for t in self.terms:
            if t not in LOSS_TERMS:
                raise ValueError(f"unknown loss term {t!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.fl_inner not in ("squared-error", "MDL"):
            raise ValueError(f"unknown FL inner loss {self.fl_inner!r}")
        if "FL" in self.terms and ("TL" in self.terms or "DV" in self.terms):
            raise ValueError("FL is incompatible with TL and DV in the same run")

    def to_dict(self):
        return {"terms": list(self.terms), "lam": self.lam, "fl_inner": self.fl_inner}

    @classmethod
    def from_dict(cls, d):
        return cls(terms=tuple(d["terms"]), lam=d.get("lam", 0.0), fl_inner=d.get("fl_inner", "squared-error"))


@dataclass
class TrajectorySample:
    """A sequence of timestamped measurements: X is [T' x D], t_X is [T']."""

    X: np.ndarray
    t_X: np.ndarray
    _spline: CubicSpline | None = dc_field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.t_X = np.asarray(self.t_X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.t_X.ndim != 1 or self.X.shape[0] != self.t_X.shape[0]:
            raise ValueError("X and t_X lengths disagree")
        if self.t_X.size < 2:
            raise ValueError("need at least two measurements")
        if not np.all(np.diff(self.t_X) > 0):
            raise ValueError("timestamps must be strictly increasing")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.t_X))):
            raise ValueError("measurements must be finite")

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def duration(self) -> float:
        return float(self.t_X[-1] - self.t_X[0])


def cubic_interp(sample: TrajectorySample, t: float) -> np.ndarray:
    """Natural cubic spline through the measurements, exact at the knots."""
    if t < sample.t_X[0] - 1e-12 or t > sample.t_X[-1] + 1e-12:
        raise ValueError(f"t={t} outside measured span [{sample.t_X[0]}, {sample.t_X[-1]}]")
    if sample._spline is None:
        sample._spline = CubicSpline(sample.t_X, sample.X, bc_type="natural", axis=0)
    return np.asarray(sample._spline(t), dtype=np.float64)


def mdl(means, variances, weights, target) -> Tensor:
    """Negative log-likelihood under a diagonal-Gaussian mixture.

    ``means[k]``/``variances[k]`` are [B x D] (variances broadcastable),
    ``weights`` is [K] or [B x K], ``target`` is [B x D].  Log-sum-exp over
    components, mean over the batch.
    """
    target = as_tensor(target)
    if target.data.ndim == 1:
        target = ad.reshape(target, (1, target.data.size))
    b, d = target.shape
    k = len(means)
    if len(variances) != k:
        raise ValueError("means and variances disagree on K")
    w = as_tensor(weights if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64))
    if np.any(w.data < -1e-12):
        raise ValueError("mixture weights must be nonnegative")

    cols = []
    for mu_k, tau_k in zip(means, variances):
        mu_k = as_tensor(mu_k)
        tau_k = as_tensor(tau_k)
        if np.min(tau_k.data, initial=np.inf) <= 0:
            raise ValueError("variances must be strictly positive")
        diff = ad.sub(target, mu_k)
        quad = ad.div(ad.square(diff), tau_k)
        logdet = ad.log(tau_k)
        per_dim = ad.add(ad.add(quad, logdet), LOG_2PI)
        col = ad.scale(ad.tsum(per_dim, axis=-1, keepdims=True), -0.5)
        cols.append(col)
    logdens = ad.concat(cols, axis=-1)  # [B x K]

    logw = ad.log(ad.add(w, 1e-300))
    if logw.data.ndim == 1:
        logw = ad.reshape(logw, (1, k))
    joint = ad.add(logdens, logw)
    ll = ad.logsumexp(joint)  # [B]
    return ad.scale(ad.tmean(ll), -1.0)


def transport_loss(checkpoints) -> Tensor:
    """Mean squared segment displacement along the recorded path."""
    states = [as_tensor(s) for s in checkpoints]
    if len(states) < 2:
        raise ValueError("transport loss needs at least two checkpoints")
    n_seg = len(states) - 1
    acc = None
    for prev, cur in zip(states[:-1], states[1:]):
        seg = ad.tsum(ad.square(ad.sub(cur, prev)), axis=-1)
        acc = seg if acc is None else ad.add(acc, seg)
    return ad.scale(ad.tmean(acc), 1.0 / n_seg)


def directional_variance_loss(gradient_evals) -> Tensor:
    """Mean squared deviation of field evaluations from their average."""
    evals = [as_tensor(g) for g in gradient_evals]
    if not evals:
        raise ValueError("need at least one evaluation")
    n = len(evals)
    mean = evals[0]
    for g in evals[1:]:
        mean = ad.add(mean, g)
    mean = ad.scale(mean, 1.0 / n)
    acc = None
    for g in evals:
        dev = ad.tsum(ad.square(ad.sub(g, mean)), axis=-1)
        acc = dev if acc is None else ad.add(acc, dev)
    return ad.scale(ad.tmean(acc), 1.0 / n)


def forecast_loss(record: SolveRecord, sample: TrajectorySample, eval_times, inner="squared-error") -> Tensor:
    """Mean inner loss between solver states and interpolated measurements.

    ``inner`` is ``"squared-error"`` or a callable ``(state, target) ->``
    scalar tensor (the mixture-density route supplies one).
    """
    times = list(eval_times)
    if not times:
        raise ValueError("no evaluation times")
    acc = None
    for t in times:
        state = record.state_at(t)
        target = cubic_interp(sample, t)
        if callable(inner):
            term = inner(state, target)
        elif inner == "squared-error":
            st = state if state.data.ndim == 2 else ad.reshape(state, (1, state.data.size))
            term = ad.tmean(ad.tsum(ad.square(ad.sub(st, target.reshape(1, -1))), axis=-1))
        else:
            raise ValueError(f"unknown inner loss {inner!r}")
        acc = term if acc is None else ad.add(acc, term)
    return ad.scale(acc, 1.0 / len(times))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    true_logit = ad.tsum(ad.mul(logits, Tensor(onehot)), axis=-1)
    lse = ad.logsumexp(logits)
    return ad.tmean(ad.sub(lse, true_logit))


def combined_loss(config: LossConfig, parts: dict) -> Tensor:
    """Predictive term plus lambda-weighted path regularization."""
    for term in config.terms:
        if term not in parts:
            raise ValueError(f"loss term {term} configured but not supplied")
    predictive = None
    for term in ("CE", "MDL", "FL"):
        if term in config.terms:
            p = as_tensor(parts[term])
            predictive = p if predictive is None else ad.add(predictive, p)
    if predictive is None:
        raise ValueError("no predictive loss term configured")
    reg = None
    for term in ("TL", "DV"):
        if term in config.terms:
            p = as_tensor(parts[term])
            reg = p if reg is None else ad.add(reg, p)
    if reg is not None and config.lam != 0.0:
        return ad.add(predictive, ad.scale(reg, config.lam))
    return predictive
