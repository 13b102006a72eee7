"""Vector-field model variants and their composition.

Five variants share one evaluation surface:

* ``vf``    -- plain MLP field
* ``avf``   -- same, on a state augmented with zero-initialized extra dims
* ``svf``   -- stochastic field with separate direction and log-length noise
* ``vfm``   -- mixture of K plain fields with simplex-valued membership
* ``svfm``  -- mixture of K stochastic fields

Membership is either fixed at the initial condition ("stick") or propagated
by a learned transition/emission filter ("filter").  Direction noise uses a
projected Gaussian on the sphere (sample in ambient space, normalize);
length noise lives in the log domain, so sampled lengths are always
positive and the field is ``v * u`` with ``log v ~ N(log mu_v, tau_v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor, as_tensor
from .nn import MlpConfig, mlp_forward, mlp_init

# Variance heads map through a shifted, capped sigmoid: fields start nearly
# deterministic and length log-variance stays bounded so sampled lengths
# cannot overflow during training transients.  The direction head starts
# lower than the length head: samples reversed against the mean direction
# destroy the field's inductive bias, and reversal events carry no usable
# reparameterization gradient.
TAU_U_SHIFT = 5.0
TAU_V_SHIFT = 3.0
TAU_FLOOR = 1e-8
TAU_U_CAP = 1.0
TAU_V_CAP = 2.0
GUMBEL_EPS = 1e-20

VARIANTS = ("vf", "avf", "svf", "vfm", "svfm")
SELECTIONS = ("hard-sample", "gumbel-softmax", "expectation", "mean")


@dataclass
class TimeEncoding:
    """Scalar passthrough or the cyclic tuple (cos, sin).

    ``period_scale`` is the angular rate: the encoding repeats every
    ``2*pi / period_scale`` time units, so the default pi/12 gives 24-hour
    periodicity for t in hours.
    """

    mode: str = "scalar"
    period_scale: float = math.pi / 12.0

    def __post_init__(self):
        if self.mode not in ("scalar", "cyclic"):
            raise ValueError(f"unknown time encoding {self.mode!r}")
        if self.period_scale <= 0:
            raise ValueError("period_scale must be positive")

    @property
    def dim(self) -> int:
        return 2 if self.mode == "cyclic" else 1

    def to_dict(self):
        return {"mode": self.mode, "period_scale": self.period_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(mode=d["mode"], period_scale=d["period_scale"])


def encode_time(t: float, enc: TimeEncoding) -> np.ndarray:
    if enc.mode == "scalar":
        return np.array([t])
    x = t * enc.period_scale
    return np.array([math.cos(x), math.sin(x)])


class MixtureBelief:
    """Simplex-valued component membership; may be traced through the tape."""

    def __init__(self, weights, degenerate: bool = False):
        w = as_tensor(weights)
        if w.data.ndim != 1 or w.data.size < 1:
            raise ValueError(f"belief must be a K-vector, got shape {w.shape}")
        if np.any(w.data < -1e-12) or abs(float(w.data.sum()) - 1.0) > 1e-10:
            raise ValueError("belief weights must be nonnegative and sum to 1")
        self.weights = w
        self.degenerate = degenerate

    @property
    def k(self) -> int:
        return self.weights.data.size

    def numpy(self) -> np.ndarray:
        return self.weights.data

    @staticmethod
    def uniform(k: int) -> "MixtureBelief":
        return MixtureBelief(np.full(k, 1.0 / k))


@dataclass
class FieldModel:
    variant: str
    state_dim: int
    k_components: int = 1
    membership: str = "stick"
    p_augment: int = 0
    hidden_layers: int = 1
    hidden_units: int = 32
    time_enc: TimeEncoding = dc_field(default_factory=TimeEncoding)
    store: ParameterStore = dc_field(default_factory=ParameterStore)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in ("vfm", "svfm") and self.k_components < 1:
            raise ValueError("mixtures need K >= 1")
        if self.variant == "avf" and self.p_augment < 1:
            raise ValueError("avf needs p_augment >= 1")
        if self.membership not in ("stick", "filter"):
            raise ValueError(f"unknown membership mode {self.membership!r}")

    # -- dimensions ------------------------------------------------------
    @property
    def flow_dim(self) -> int:
        """Dimension of the integrated state (augmented for avf)."""
        return self.state_dim + (self.p_augment if self.variant == "avf" else 0)

    @property
    def enc_dim(self) -> int:
        return self.time_enc.dim

    @property
    def is_stochastic(self) -> bool:
        return self.variant in ("svf", "svfm")

    @property
    def is_mixture(self) -> bool:
        return self.variant in ("vfm", "svfm")

    def field_input_dim(self) -> int:
        return self.flow_dim + self.enc_dim

    # -- configs for the constituent networks ------------------------------
    def _vf_cfg(self) -> MlpConfig:
        return MlpConfig(self.field_input_dim(), self.hidden_layers, self.hidden_units, self.flow_dim)

    def _repr_cfg(self) -> MlpConfig:
        return MlpConfig(self.field_input_dim(), self.hidden_layers, self.hidden_units, self.hidden_units)

    def _head_cfg(self, out_dim: int) -> MlpConfig:
        return MlpConfig(self.hidden_units + self.enc_dim, 0, self.hidden_units, out_dim)

    def _membership_cfg(self, out_dim: int) -> MlpConfig:
        return MlpConfig(self.field_input_dim(), self.hidden_layers, self.hidden_units, out_dim)

    def descriptor(self) -> dict:
        return {
            "variant": self.variant,
            "state_dim": self.state_dim,
            "k_components": self.k_components,
            "membership": self.membership,
            "p_augment": self.p_augment,
            "hidden_layers": self.hidden_layers,
            "hidden_units": self.hidden_units,
            "time_enc": self.time_enc.to_dict(),
        }

    @classmethod
    def from_descriptor(cls, d: dict, store: ParameterStore) -> "FieldModel":
        return cls(
            variant=d["variant"],
            state_dim=d["state_dim"],
            k_components=d["k_components"],
            membership=d["membership"],
            p_augment=d["p_augment"],
            hidden_layers=d["hidden_layers"],
            hidden_units=d["hidden_units"],
            time_enc=TimeEncoding.from_dict(d["time_enc"]),
            store=store,
        )


def build_field_model(
    variant: str,
    state_dim: int,
    k_components: int = 1,
    membership: str = "stick",
    p_augment: int = 0,
    hidden_layers: int = 1,
    hidden_units: int = 32,
    time_enc: TimeEncoding | None = None,
    seed: int = 0,
) -> FieldModel:
    """Create a field model with freshly initialized parameters."""
    model = FieldModel(
        variant=variant,
        state_dim=state_dim,
        k_components=k_components if variant in ("vfm", "svfm") else 1,
        membership=membership,
        p_augment=p_augment if variant == "avf" else 0,
        hidden_layers=hidden_layers,
        hidden_units=hidden_units,
        time_enc=time_enc or TimeEncoding(),
    )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    init_field_params(model, rng)
    return model


def init_field_params(model: FieldModel, rng: np.random.Generator) -> None:
    k = model.k_components if model.is_mixture else 1
    for i in range(k):
        if model.is_stochastic:
            mlp_init(model.store, f"comp{i}.z", model._repr_cfg(), rng)
            for head, out in (
                ("u_mu", model.flow_dim),
                ("u_tau", model.flow_dim),
                ("v_mu", 1),
                ("v_tau", 1),
            ):
                mlp_init(model.store, f"comp{i}.{head}", model._head_cfg(out), rng)
        else:
            mlp_init(model.store, f"comp{i}.f", model._vf_cfg(), rng)
    if model.is_mixture:
        mlp_init(model.store, "member.pi0", model._membership_cfg(model.k_components), rng)
        if model.membership == "filter":
            mlp_init(model.store, "member.trans", model._membership_cfg(model.k_components**2), rng)
            mlp_init(model.store, "member.emit", model._membership_cfg(model.k_components), rng)


# -- state augmentation --------------------------------------------------


def augment(state: Tensor, p: int) -> Tensor:
    if p < 1:
        raise ValueError("p must be >= 1")
    state = as_tensor(state)
    zeros = Tensor(np.zeros((state.shape[0], p)))
    return ad.concat([state, zeros], axis=-1)


def project(state: Tensor, p: int) -> Tensor:
    state = as_tensor(state)
    return ad.narrow(state, 0, state.shape[-1] - p, axis=-1)


# -- evaluation ------------------------------------------------------------


def _enc_rows(model: FieldModel, t, b: int) -> np.ndarray:
    """Per-row time encoding; ``t`` is a scalar or one conditioning time per row."""
    if np.ndim(t) == 0:
        enc = encode_time(float(t), model.time_enc)
        return np.broadcast_to(enc, (b, enc.size)).copy()
    tv = np.asarray(t, dtype=np.float64)
    if tv.shape != (b,):
        raise ValueError(f"need one conditioning time per row, got {tv.shape} for batch {b}")
    if model.time_enc.mode == "scalar":
        return tv[:, None].copy()
    x = tv * model.time_enc.period_scale
    return np.stack([np.cos(x), np.sin(x)], axis=1)


def _with_time(model: FieldModel, state: Tensor, t) -> Tensor:
    rows = _enc_rows(model, t, state.shape[0])
    return ad.concat([state, Tensor(rows)], axis=-1)


def vf_eval(model: FieldModel, state: Tensor, t, component: int = 0) -> Tensor:
    """Deterministic field of one plain component: MLP(state, enc(t))."""
    x = _with_time(model, state, t)
    return mlp_forward(model.store, f"comp{component}.f", model._vf_cfg(), x)


def _svf_heads(model: FieldModel, state: Tensor, t, component: int):
    x = _with_time(model, state, t)
    z = mlp_forward(model.store, f"comp{component}.z", model._repr_cfg(), x)
    rows = _enc_rows(model, t, state.shape[0])
    zt = ad.concat([z, Tensor(rows)], axis=-1)
    pre = f"comp{component}"
    hcfg_d = model._head_cfg(model.flow_dim)
    hcfg_1 = model._head_cfg(1)
    u_mu = mlp_forward(model.store, f"{pre}.u_mu", hcfg_d, zt)
    u_tau = ad.scale(ad.sigmoid(ad.add(mlp_forward(model.store, f"{pre}.u_tau", hcfg_d, zt), -TAU_U_SHIFT)), TAU_U_CAP) + TAU_FLOOR
    v_mu = ad.softplus(mlp_forward(model.store, f"{pre}.v_mu", hcfg_1, zt)) + TAU_FLOOR
    v_tau = ad.scale(ad.sigmoid(ad.add(mlp_forward(model.store, f"{pre}.v_tau", hcfg_1, zt), -TAU_V_SHIFT)), TAU_V_CAP) + TAU_FLOOR
    return u_mu, u_tau, v_mu, v_tau


def _normalize_rows(x: Tensor) -> Tensor:
    # The 1e-24 floor keeps the mean path finite when a direction mean
    # crosses zero during training; unit norm still holds to 1e-12.
    norms = ad.sqrt(ad.add(ad.tsum(ad.square(x), axis=-1, keepdims=True), 1e-24))
    return ad.div(x, norms)


def svf_sample(
    model: FieldModel,
    state: Tensor,
    t,
    rng: np.random.Generator | None,
    component: int = 0,
    monitor: dict | None = None,
) -> Tensor:
    """One reparameterized draw of the stochastic field ``v * u``.

    With ``rng=None`` the zero-variance collapse is returned:
    ``mu_v * normalize(mu_u)``.  Draws enter as constants, so gradients flow
    to the mean and variance heads.

    Direction noise is scale-invariant: the perturbation is proportional to
    ``||mu_u||``, so the reversal probability depends only on ``tau_u`` and
    not on the head magnitude (which normalization makes projectively
    irrelevant and gradient-free).
    """
    u_mu, u_tau, v_mu, v_tau = _svf_heads(model, state, t, component)
    if rng is None:
        u = _normalize_rows(u_mu)
        return ad.mul(v_mu, u)

    b, d = u_mu.shape
    # +1e-6 keeps a zero mean direction isotropic instead of degenerate
    mu_norm = ad.add(ad.sqrt(ad.add(ad.tsum(ad.square(u_mu), axis=-1, keepdims=True), 1e-24)), 1e-6)
    eps_u = rng.standard_normal((b, d))
    raw = ad.add(u_mu, ad.mul(ad.mul(mu_norm, ad.sqrt(u_tau)), Tensor(eps_u)))
    norms = np.sqrt((raw.data**2).sum(axis=-1))
    if np.any(norms < 1e-12):
        eps_u = rng.standard_normal((b, d))
        raw = ad.add(u_mu, ad.mul(ad.mul(mu_norm, ad.sqrt(u_tau)), Tensor(eps_u)))
        norms = np.sqrt((raw.data**2).sum(axis=-1))
        if np.any(norms < 1e-12):
            raise ad.DomainError("degenerate direction sample (norm < 1e-12) after resampling")
    u = _normalize_rows(raw)

    if monitor is not None:
        mu_unit = u_mu.data / np.maximum(np.linalg.norm(u_mu.data, axis=-1, keepdims=True), 1e-300)
        dots = (u.data * mu_unit).sum(axis=-1)
        monitor["samples"] = monitor.get("samples", 0) + b
        monitor["reversed"] = monitor.get("reversed", 0) + int((dots <= 0).sum())

    eps_v = rng.standard_normal((b, 1))
    log_v = ad.add(ad.log(v_mu), ad.mul(ad.sqrt(v_tau), Tensor(eps_v)))
    return ad.mul(ad.exp(log_v), u)


def component_eval(
    model: FieldModel,
    state: Tensor,
    t,
    component: int,
    rng: np.random.Generator | None = None,
    monitor: dict | None = None,
) -> Tensor:
    if model.is_stochastic:
        return svf_sample(model, state, t, rng, component=component, monitor=monitor)
    return vf_eval(model, state, t, component=component)


# -- membership ------------------------------------------------------------


def membership_weights(model: FieldModel, states: Tensor, t) -> Tensor:
    """Row-wise initial membership for a batch of states: [B x K] in the simplex."""
    logits = mlp_forward(model.store, "member.pi0", model._membership_cfg(model.k_components), _with_time(model, states, t))
    return ad.softmax(logits)


def pick_and_stick(model: FieldModel, state0: Tensor, t0: float) -> MixtureBelief:
    """Membership distribution fixed at the initial condition."""
    w = membership_weights(model, state0, t0)
    return MixtureBelief(ad.reshape(w, (model.k_components,)))


def forward_filter_step(model: FieldModel, state: Tensor, t: float, prior: MixtureBelief) -> MixtureBelief:
    """One belief update: posterior proportional to Psi^T (psi * prior)."""
    k = model.k_components
    x = _with_time(model, state, t)
    trans = mlp_forward(model.store, "member.trans", model._membership_cfg(k * k), x)
    psi_mat = ad.softmax(ad.reshape(trans, (k, k)))
    emit = mlp_forward(model.store, "member.emit", model._membership_cfg(k), x)
    psi_vec = ad.softmax(ad.reshape(emit, (k,)))
    return filter_update(psi_mat, psi_vec, prior)


def filter_update(transition: Tensor, emission: Tensor, prior: MixtureBelief) -> MixtureBelief:
    """The bare recursion, exposed so tests can drive arbitrary (Psi, psi)."""
    k = prior.k
    weighted = ad.mul(emission, prior.weights)
    unnorm = ad.reshape(ad.matmul(ad.reshape(weighted, (1, k)), transition), (k,))
    total = float(unnorm.data.sum())
    if total < 1e-300:
        return MixtureBelief(np.full(k, 1.0 / k), degenerate=True)
    post = ad.div(unnorm, ad.tsum(unnorm, keepdims=True))
    return MixtureBelief(post)


def gumbel_softmax_weights(belief: MixtureBelief, temperature: float, rng: np.random.Generator) -> Tensor:
    if temperature <= 0:
        raise ValueError("gumbel-softmax temperature must be > 0")
    u = rng.random(belief.k)
    g = -np.log(-np.log(u + GUMBEL_EPS) + GUMBEL_EPS)
    logits = ad.add(ad.log(ad.add(belief.weights, 1e-300)), Tensor(g))
    return ad.softmax(ad.scale(logits, 1.0 / temperature))


def mixture_eval(
    model: FieldModel,
    state: Tensor,
    t,
    belief: MixtureBelief,
    rng: np.random.Generator | None,
    selection: str = "expectation",
    temperature: float = 1.0,
    monitor: dict | None = None,
) -> tuple[Tensor, MixtureBelief]:
    """Evaluate a mixture field under the given selection rule.

    Belief is first advanced by one filter update when the model uses
    dynamic membership, and returned unchanged under pick-and-stick.
    """
    if not model.is_mixture:
        raise ValueError("mixture_eval needs a vfm/svfm model")
    if model.membership == "filter":
        belief = forward_filter_step(model, state, t, belief)

    if selection == "hard-sample":
        k = int(rng.choice(model.k_components, p=belief.numpy() / belief.numpy().sum()))
        out = component_eval(model, state, t, k, rng=rng, monitor=monitor)
        return out, belief
    if selection == "gumbel-softmax":
        w = gumbel_softmax_weights(belief, temperature, rng)
    elif selection == "expectation":
        w = belief.weights
    elif selection == "mean":
        w = belief.weights
    else:
        raise ValueError(f"unknown selection {selection!r}")

    rng_k = None if selection == "mean" else rng
    out = None
    for k in range(model.k_components):
        fk = component_eval(model, state, t, k, rng=rng_k, monitor=monitor)
        wk = ad.reshape(ad.narrow(w, k, 1), (1, 1))
        term = ad.mul(fk, wk)
        out = term if out is None else ad.add(out, term)
    return out, belief


# -- solve-ready callback ----------------------------------------------------


class FlowContext:
    """Field callback for the solvers, carrying per-solve mutable state.

    Holds the membership belief, the selection rule and the mapping from
    integration time to wall-clock conditioning time
    (``t_cond = time_base + time_rate * t``).  Belief updates happen on
    accepted steps via ``on_step_commit``, never inside stage evaluations.
    """

    def __init__(
        self,
        model: FieldModel,
        rng: np.random.Generator | None = None,
        selection: str = "mean",
        temperature: float = 1.0,
        component: int | None = None,
        time_base: float = 0.0,
        time_rate: float = 1.0,
        monitor: dict | None = None,
    ):
        if selection not in SELECTIONS:
            raise ValueError(f"unknown selection {selection!r}")
        if model.is_mixture and component is None and selection != "mean" and rng is None:
            raise ValueError("stochastic selection needs an rng")
        self.model = model
        self.rng = rng
        self.selection = selection
        self.temperature = temperature
        self.component = component
        self.time_base = time_base
        self.time_rate = time_rate
        self.monitor = monitor
        self.belief: MixtureBelief | None = None
        self._frozen_k: int | None = None

    def cond_time(self, t: float) -> float:
        return self.time_base + self.time_rate * t

    def start(self, state0: Tensor, t0: float, freeze_component: bool = False) -> None:
        """Fix the initial belief (and optionally the sampled component)."""
        if self.model.is_mixture:
            self.belief = pick_and_stick(self.model, state0, self.cond_time(t0))
            if freeze_component:
                p = self.belief.numpy()
                self._frozen_k = int(self.rng.choice(self.model.k_components, p=p / p.sum()))

    def __call__(self, state: Tensor, t: float) -> Tensor:
        m = self.model
        tc = self.cond_time(t)
        rng = None if self.selection == "mean" else self.rng
        if not m.is_mixture:
            if m.is_stochastic:
                return svf_sample(m, state, tc, rng, component=0, monitor=self.monitor)
            return vf_eval(m, state, tc, component=0)
        if self.component is not None:
            return component_eval(m, state, tc, self.component, rng=rng, monitor=self.monitor)
        if self.belief is None:
            raise RuntimeError("FlowContext.start() must run before evaluation")
        if self._frozen_k is not None:
            return component_eval(m, state, tc, self._frozen_k, rng=rng, monitor=self.monitor)
        out, _ = mixture_eval(
            m, state, tc, self.belief, rng, selection=self.selection, temperature=self.temperature, monitor=self.monitor
        )
        return out

    def on_step_commit(self, t: float, state: Tensor) -> None:
        if self.model.is_mixture and self.model.membership == "filter" and self.component is None and self.belief is not None:
            self.belief = forward_filter_step(self.model, state, self.cond_time(t), self.belief)
