"""Squeeze-and-excitation gates.

The aggregated gate squeezes the pooled channel vector through ``k``
parallel reduced-width FC branches, concatenates their outputs and applies
one excitation FC. With ``k == 1`` it is the classic SE gate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import dense, global_avg_pool
from .tensor import Tensor, concat, mul, relu, sigmoid, transpose

DEFAULT_REDUCTION = 32
DEFAULT_CARDINALITY = 4


@dataclass(frozen=True)
class SaEConfig:
    channels: int
    reduction: int = DEFAULT_REDUCTION
    cardinality: int = DEFAULT_CARDINALITY

    def __post_init__(self):
        if min(self.channels, self.reduction, self.cardinality) < 1:
            raise ConfigError(f"channels, reduction and cardinality must be positive: {self}")
        if self.channels % self.reduction:
            raise ConfigError(
                f"channels {self.channels} not divisible by reduction {self.reduction}"
            )

    @property
    def reduced(self) -> int:
        return self.channels // self.reduction


@dataclass
class SEParams:
    """Two-layer SE gate: squeeze (C/r × C) and excitation (C × C/r)."""

    squeeze_weight: Tensor
    squeeze_bias: Tensor
    excite_weight: Tensor
    excite_bias: Tensor


@dataclass
class SaEParams:
    branch_weights: list[Tensor]  # k × (C/r, C)
    branch_biases: list[Tensor]  # k × (C/r,)
    excite_weight: Tensor  # (C, k*C/r)
    excite_bias: Tensor  # (C,)

    @property
    def cardinality(self) -> int:
        return len(self.branch_weights)

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.branch_weights, self.branch_biases):
            out += [w, b]
        return out + [self.excite_weight, self.excite_bias]

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())


def sae_param_count(cfg: SaEConfig) -> int:
    """2kC²/r + kC/r + C."""
    c, k, red = cfg.channels, cfg.cardinality, cfg.reduced
    return k * (red * c + red) + (c * k * red + c)


def init_sae_params(cfg: SaEConfig, rng: np.random.Generator, dtype=np.float32) -> SaEParams:
    """Uniform ±1/sqrt(fan_in) initialization for every FC of the gate."""
    c, red, k = cfg.channels, cfg.reduced, cfg.cardinality

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)

    return SaEParams(
        branch_weights=[uniform((red, c), c) for _ in range(k)],
        branch_biases=[uniform((red,), c) for _ in range(k)],
        excite_weight=uniform((c, k * red), k * red),
        excite_bias=uniform((c,), k * red),
    )


def _check(u: Tensor, p: SaEParams, cfg: SaEConfig) -> None:
    if u.ndim != 4 or u.shape[1] != cfg.channels:
        raise DimensionError(f"gate input {u.shape} does not have {cfg.channels} channels")
    if p.cardinality != cfg.cardinality:
        raise DimensionError(f"params have {p.cardinality} branches, config says {cfg.cardinality}")
    c, red, k = cfg.channels, cfg.reduced, cfg.cardinality
    for w, b in zip(p.branch_weights, p.branch_biases):
        if w.shape != (red, c) or b.shape != (red,):
            raise DimensionError(f"branch shapes {w.shape}/{b.shape}, expected ({red}, {c})/({red},)")
    if p.excite_weight.shape != (c, k * red) or p.excite_bias.shape != (c,):
        raise DimensionError(
            f"excitation shapes {p.excite_weight.shape}/{p.excite_bias.shape}, "
            f"expected ({c}, {k * red})/({c},)"
        )


def gate_scales(u: Tensor, p: SaEParams, cfg: SaEConfig) -> Tensor:
    """Per-channel sigmoid scales s (N×C) computed from the pooled input."""
    _check(u, p, cfg)
    z = global_avg_pool(u)
    branches = [relu(dense(z, transpose(w), b)) for w, b in zip(p.branch_weights, p.branch_biases)]
    a = branches[0] if len(branches) == 1 else concat(branches, axis=1)
    return sigmoid(dense(a, transpose(p.excite_weight), p.excite_bias))


def sae_forward(u: Tensor, p: SaEParams, cfg: SaEConfig) -> Tensor:
    return mul(u, gate_scales(u, p, cfg))


def se_forward(u: Tensor, p: SEParams | SaEParams, cfg: SaEConfig) -> Tensor:
    if cfg.cardinality != 1:
        raise ConfigError(f"SE gate needs cardinality 1, got {cfg.cardinality}")
    if isinstance(p, SEParams):
        p = se_to_sae_map(p)
    _check(u, p, cfg)
    z = global_avg_pool(u)
    a = relu(dense(z, transpose(p.branch_weights[0]), p.branch_biases[0]))
    s = sigmoid(dense(a, transpose(p.excite_weight), p.excite_bias))
    return mul(u, s)


def se_to_sae_map(p: SEParams) -> SaEParams:
    return SaEParams([p.squeeze_weight], [p.squeeze_bias], p.excite_weight, p.excite_bias)


def sae_to_se_map(p: SaEParams) -> SEParams:
    if p.cardinality != 1:
        raise DimensionError(f"only single-branch gates map to SE, got {p.cardinality} branches")
    return SEParams(p.branch_weights[0], p.branch_biases[0], p.excite_weight, p.excite_bias)
