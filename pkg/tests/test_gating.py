import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liger import gating, kernels as K, tensor as tt
from liger.errors import ConfigError, ContractError
from liger.gating import GateVariant, construct_gate, gate_broadcast, pool_key
from liger.kernels import RecurrentState
from liger.tensor import Tensor

from conftest import finite_difference, rel_err


def t64(a):
    return Tensor(np.asarray(a), dtype=np.float64)


class TestPooling:
    def test_full_mean(self):
        assert pool_key(t64([1.0, 3.0, 5.0, 7.0]), 1).data[0] == 4.0

    def test_group_means(self):
        assert np.array_equal(pool_key(t64([1.0, 3.0, 5.0, 7.0]), 2).data, [2.0, 6.0])

    def test_identity(self):
        k = t64([1.0, 3.0, 5.0, 7.0])
        assert np.array_equal(pool_key(k, 4).data, k.data)

    def test_non_divisible_rejected(self):
        with pytest.raises(ConfigError):
            pool_key(t64([1.0, 2.0, 3.0]), 2)


ANALYTIC_AT_ZERO = {
    "gla": 0.5,
    "mlstm": 0.5,
    "gret": 0.5,
    "gsa": 0.5,
    "mamba2": 0.5,  # exp(-softplus(0)) = exp(-ln 2)
    "rwkv6": math.exp(-1.0),
    "hgrn2": 0.75,  # gamma + (1 - gamma)/2 with gamma = 0.5
}


@pytest.mark.parametrize("variant", sorted(ANALYTIC_AT_ZERO))
def test_gate_value_at_zero_key(variant):
    zeros = t64(np.zeros((1, 4)))
    gate = construct_gate(GateVariant(variant, hgrn2_gamma=0.5, gsa_slots_m=2), zeros)
    assert gate.data.flat[0] == ANALYTIC_AT_ZERO[variant]


@pytest.mark.parametrize("variant", gating.GATE_SHAPES)
def test_gate_stays_inside_declared_range(variant):
    rng = np.random.default_rng(hash(variant) % 2**32)
    keys = t64(rng.normal(size=(20_000, 8)))
    gv = GateVariant(variant, hgrn2_gamma=0.5, gsa_slots_m=4)
    gate = construct_gate(gv, keys).data
    lo, hi = gv.range()
    assert gate.min() > lo
    assert gate.max() < hi


def test_gate_shapes_per_variant():
    keys = t64(np.random.default_rng(0).normal(size=(5, 8)))
    assert construct_gate(GateVariant("gla"), keys).shape == (5, 8)
    assert construct_gate(GateVariant("mamba2"), keys).shape == (5, 1)
    assert construct_gate(GateVariant("gsa", gsa_slots_m=4), keys).shape == (5, 4)


def test_mamba2_matches_table_formula():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 4))
    gate = construct_gate(GateVariant("mamba2"), t64(x)).data
    pooled = x.mean(axis=-1, keepdims=True)
    ref = np.exp(-(np.maximum(pooled, 0) + np.log1p(np.exp(-np.abs(pooled)))))
    assert np.abs(gate - ref).max() < 1e-12


class TestMonotonicity:
    def test_gla_monotone_increasing(self):
        rng = np.random.default_rng(2)
        base = rng.normal(size=(50, 6))
        g1 = construct_gate(GateVariant("gla"), t64(base)).data
        g2 = construct_gate(GateVariant("gla"), t64(base + 0.5)).data
        assert (g2 > g1).all()

    def test_rwkv6_antitone(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(50, 6))
        g1 = construct_gate(GateVariant("rwkv6"), t64(base)).data
        g2 = construct_gate(GateVariant("rwkv6"), t64(base + 0.5)).data
        assert (g2 < g1).all()


@given(st.floats(-20, 20), st.floats(0, 0.95))
@settings(max_examples=100, deadline=None)
def test_hgrn2_range_property(pooled, gamma):
    gate = construct_gate(GateVariant("hgrn2", hgrn2_gamma=gamma), t64([pooled])).data[0]
    assert gamma < gate < 1.0


class TestBroadcast:
    def test_scalar_fills_state(self):
        out = gate_broadcast(t64([0.5]), (2, 3)).data
        assert np.array_equal(out, np.full((2, 3), 0.5))

    def test_vector_replicates_rows(self):
        out = gate_broadcast(t64([0.2, 0.9]), (2, 3)).data
        assert np.array_equal(out, [[0.2, 0.2, 0.2], [0.9, 0.9, 0.9]])

    def test_incompatible_width(self):
        with pytest.raises(ContractError):
            gate_broadcast(t64([0.5, 0.5, 0.5]), (2, 3))

    def test_broadcast_step_matches_explicit_loop(self):
        rng = np.random.default_rng(4)
        n, m = 4, 3
        g_vec = 1 / (1 + np.exp(-rng.normal(size=n)))
        s0 = rng.normal(size=(n, m))
        k = rng.normal(size=n)
        v = rng.normal(size=m)
        q = rng.normal(size=n)
        st, o = K.gated_recurrent_step(
            RecurrentState(s=t64(s0)), t64(q), t64(k), t64(v), t64(g_vec), phi="identity"
        )
        expected = np.empty_like(s0)
        for i in range(n):
            for j in range(m):
                expected[i, j] = g_vec[i] * s0[i, j] + k[i] * v[j]
        assert np.abs(st.s.data - expected).max() < 1e-12
        assert np.abs(o.data - q @ expected).max() < 1e-12


def test_zero_parameter_gradient_flows_to_key_projection():
    """Gates add no tensors; dLoss/dW_K must flow through the pooling path."""
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 6))
    wk0 = rng.normal(size=(6, 6))
    readout = rng.normal(size=(3, 6))

    def loss_of(wk):
        k = tt.matmul(t64(x), Tensor(wk, dtype=np.float64))
        gate = construct_gate(GateVariant("gla"), k)
        return tt.tsum(tt.mul(gate, t64(readout))).item()

    wk = Tensor(wk0, requires_grad=True, dtype=np.float64)
    k = tt.matmul(t64(x), wk)
    tt.backward(tt.tsum(tt.mul(construct_gate(GateVariant("gla"), k), t64(readout))))
    assert rel_err(wk.grad, finite_difference(loss_of, wk0)) < 1e-6


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        GateVariant("dense")
