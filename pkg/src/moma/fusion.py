"""Ways of merging the attention stream with the SSM output.

Every fusion kind takes the attention output ``x`` and the SSM's two output
sequences and returns a sequence shaped like ``x``. All kinds except ``max``
are the identity on ``x`` at initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from moma.core import ops
from moma.core.tensor import Tensor
from moma.errors import ConfigError, DimensionError

KINDS = ("skip", "add", "max", "concat", "raw_adan", "seqmod")


@dataclass(frozen=True)
class ModulationPair:
    """Scale and bias sequences, each shaped like the modulated sequence."""

    scale: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.scale.shape != self.bias.shape:
            raise DimensionError(f"scale {self.scale.shape} and bias {self.bias.shape} differ")


@dataclass
class FusionParams:
    """Trainable parameters owned by a fusion kind (empty for most kinds)."""

    kind: str
    tensors: dict[str, Tensor] = field(default_factory=dict)
    weights: tuple[float, float] = (1.0, 1.0)
    half: str = "scale"


def init_fusion(kind: str, C: int, *, weights=(1.0, 1.0), half: str = "scale") -> FusionParams:
    """Identity-at-init parameters.

    ``concat`` starts as Linear([x; y]) with weight [I; 0]; ``raw_adan`` starts
    with a zero head whose bias yields alpha=1, beta=gamma=0.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown fusion kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    if half not in ("scale", "bias"):
        raise ConfigError(f"fusion half must be 'scale' or 'bias', got {half!r}")
    tensors = {}
    if kind == "concat":
        w = np.zeros((2 * C, C))
        w[:C] = np.eye(C)
        tensors = {"w": Tensor(w), "b": Tensor(np.zeros(C))}
    elif kind == "raw_adan":
        tensors = {"w": Tensor(np.zeros((2 * C, 3))), "b": Tensor(np.array([1.0, 0.0, 0.0]))}
    return FusionParams(kind, tensors, tuple(weights), half)


def seqmod(x: Tensor, m: ModulationPair) -> Tensor:
    """Per-token scale, bias and skip: ``scale * x + x + bias``."""
    if x.shape != m.scale.shape:
        raise DimensionError(f"seqmod: sequence {x.shape} vs modulation {m.scale.shape}")
    return ops.add(ops.add(ops.mul(m.scale, x), x), m.bias)


def adan_coefficients(m: ModulationPair, params: FusionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Pool both SSM outputs over tokens and map them to per-sample (alpha, beta, gamma)."""
    pooled = ops.mean(ops.concat([m.scale, m.bias], axis=-1), axis=-2)  # (..., 2C)
    coef = ops.linear(pooled, params.tensors["w"], params.tensors["b"])  # (..., 3)
    return coef[..., 0:1], coef[..., 1:2], coef[..., 2:3]


def fuse(x: Tensor, m: ModulationPair, params: FusionParams) -> Tensor:
    kind = params.kind
    if kind == "skip":
        return x
    if kind == "seqmod":
        return seqmod(x, m)
    if x.shape != m.scale.shape:
        raise DimensionError(f"fuse[{kind}]: sequence {x.shape} vs SSM output {m.scale.shape}")
    y = m.scale if params.half == "scale" else m.bias
    if kind == "add":
        w1, w2 = params.weights
        return ops.add(ops.mul(x, w1), ops.mul(y, w2)) if (w1, w2) != (1.0, 1.0) else ops.add(x, y)
    if kind == "max":
        return ops.maximum(x, y)
    if kind == "concat":
        return ops.linear(ops.concat([x, y], axis=-1), params.tensors["w"], params.tensors["b"])
    if kind == "raw_adan":
        alpha, beta, gamma = adan_coefficients(m, params)
        # broadcast per-sample scalars over tokens and channels
        alpha, beta, gamma = (ops.reshape(c, c.shape[:-1] + (1, 1)) for c in (alpha, beta, gamma))
        return ops.add(ops.add(ops.mul(ops.mul(alpha, gamma), x), ops.mul(alpha, beta)), x)
    raise ConfigError(f"unknown fusion kind {kind!r}; valid kinds: {', '.join(KINDS)}")


def fuse_baseline(kind: str, x: Tensor, ssm_out: ModulationPair, params: FusionParams | None = None) -> Tensor:
    """Convenience wrapper that builds identity-at-init parameters when none are given."""
    return fuse(x, ssm_out, params or init_fusion(kind, x.shape[-1]))
