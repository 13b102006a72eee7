"""MLP representers: rectified hidden stack, linear output head.

The architecture grid used throughout the experiments is 1-2 hidden layers
of 32 or 64 units; other sizes are allowed but flagged so run metadata shows
when a model leaves the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterStore, ShapeError, Tensor, add, matmul, relu

GRID_HIDDEN_LAYERS = (1, 2)
GRID_HIDDEN_UNITS = (32, 64)


@dataclass
class MlpConfig:
    input_dim: int
    hidden_layers: int
    hidden_units: int
    output_dim: int
    non_paper_grid: bool = field(default=False)

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.hidden_layers < 0 or (self.hidden_layers > 0 and self.hidden_units < 1):
            raise ValueError("hidden sizes must be positive")
        if self.hidden_layers not in GRID_HIDDEN_LAYERS or self.hidden_units not in GRID_HIDDEN_UNITS:
            self.non_paper_grid = True

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": self.hidden_layers,
            "hidden_units": self.hidden_units,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(
            input_dim=d["input_dim"],
            hidden_layers=d["hidden_layers"],
            hidden_units=d["hidden_units"],
            output_dim=d["output_dim"],
        )


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def mlp_init(store: ParameterStore, prefix: str, config: MlpConfig, rng: np.random.Generator) -> None:
    """Uniform Glorot weights, zero biases, under ``prefix.wN``/``prefix.bN``."""
    for i, (fan_in, fan_out) in enumerate(config.layer_dims()):
        lim = glorot_limit(fan_in, fan_out)
        store.create(f"{prefix}.w{i}", rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        store.create(f"{prefix}.b{i}", np.zeros(fan_out))


def mlp_forward(store: ParameterStore, prefix: str, config: MlpConfig, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != config.input_dim:
        raise ShapeError(f"mlp_forward: expected [B x {config.input_dim}], got {x.shape}")
    h = x
    n_layers = len(config.layer_dims())
    for i in range(n_layers):
        h = add(matmul(h, store[f"{prefix}.w{i}"]), store[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = relu(h)
    return h
