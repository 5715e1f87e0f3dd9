"""Parameter-free gate construction from the key projection.

Gates are derived by pooling the per-head key vector to the variant's target
width and passing it through the variant's squashing transform. No trainable
tensors are introduced anywhere in this module; gradients reach the key
projection weights through the pooling path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError
from .tensor import Tensor

#: gate width per variant: "vector" pools to key_dim (group size 1),
#: "scalar" pools to 1, "slots" pools to M.
GATE_SHAPES = {
    "gla": "vector",
    "mamba2": "scalar",
    "mlstm": "scalar",
    "gret": "scalar",
    "hgrn2": "vector",
    "rwkv6": "vector",
    "gsa": "slots",
}


@dataclass(frozen=True)
class GateVariant:
    """One row of the gate-parameterization table."""

    name: str
    hgrn2_gamma: float = 0.5
    gsa_slots_m: int = 4

    def __post_init__(self):
        if self.name not in GATE_SHAPES:
            raise ConfigError(f"unknown gate variant {self.name!r}")

    @property
    def shape_kind(self) -> str:
        return GATE_SHAPES[self.name]

    def target_dim(self, head_dim_k: int) -> int:
        kind = self.shape_kind
        if kind == "vector":
            return head_dim_k
        if kind == "scalar":
            return 1
        return self.gsa_slots_m

    def range(self) -> tuple[float, float]:
        if self.name == "hgrn2":
            return (self.hgrn2_gamma, 1.0)
        return (0.0, 1.0)


def pool_key(k: Tensor, target_dim: int) -> Tensor:
    """Contiguous-group mean over the trailing (head) axis.

    target_dim == head_dim gives the identity; target_dim == 1 the full mean.
    """
    d = k.shape[-1]
    if target_dim < 1 or d % target_dim != 0:
        raise ConfigError(f"pool target {target_dim} does not divide key dim {d}")
    if target_dim == d:
        return k
    group = d // target_dim
    shaped = tt.reshape(k, k.shape[:-1] + (target_dim, group))
    return tt.tmean(shaped, axis=-1)


def squash_gate(variant: GateVariant, pooled: Tensor) -> Tensor:
    """The variant's squashing transform, applied to already-pooled logits."""
    name = variant.name
    if name in ("gla", "mlstm", "gret", "gsa"):
        return tt.sigmoid(pooled)
    if name == "mamba2":
        return tt.exp(tt.neg(tt.softplus(pooled)))
    if name == "rwkv6":
        return tt.exp(tt.neg(tt.exp(pooled)))
    if name == "hgrn2":
        g = variant.hgrn2_gamma
        return tt.add(tt.mul(tt.sigmoid(pooled), 1.0 - g), g)
    raise ConfigError(f"unknown gate variant {name!r}")


def construct_gate(variant: GateVariant | str, k: Tensor) -> Tensor:
    """Pool the key to the variant's width and squash into its gate range.

    Zero parameters: the only inputs are the key projection output itself.
    """
    if isinstance(variant, str):
        variant = GateVariant(variant)
    return squash_gate(variant, pool_key(k, variant.target_dim(k.shape[-1])))


def gate_broadcast(gate: Tensor, state_shape: tuple[int, int]) -> Tensor:
    """Expand a gate to the full decay matrix applied to the state.

    Scalar gates fill the whole matrix; vector gates replicate along the
    value dimension (rows of the state decay uniformly).
    """
    n, m = state_shape
    width = gate.shape[-1]
    if width not in (1, n):
        raise ContractError(f"gate width {width} incompatible with state rows {n}")
    col = tt.expand_dims(gate, -1)  # [.., width, 1]
    ones = Tensor(np.ones((n if width == 1 else 1, m), dtype=gate.dtype))
    return tt.mul(col, ones)


def expand_gate_rows(gate: Tensor, key_dim: int) -> Tensor:
    """Normalize any decay-type gate to a per-row vector of width key_dim.

    Scalar gates broadcast to every row; vector gates pass through. This is
    the form the gated kernels consume.
    """
    width = gate.shape[-1]
    if width == key_dim:
        return gate
    if width != 1:
        raise ContractError(f"gate width {width} incompatible with key dim {key_dim}")
    ones = Tensor(np.ones((key_dim,), dtype=gate.dtype))
    return tt.mul(gate, ones)
