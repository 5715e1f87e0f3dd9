"""Attention kernels in their parallel, recurrent, and chunkwise forms.

Every kernel is a pure function on `Tensor`s built from primitive taped ops,
so gradients flow through all three computational forms. Shapes follow the
convention `[..., T, d]` with arbitrary leading batch/head dims; decode-time
step functions take `[..., d]` rows.

Cumulative decay products are always handled in log space: within a window
the pairwise factor is exp(c_t - c_i) <= 1, which cannot overflow, and exact
zero gates short-circuit to an exact zero contribution via a count mask
instead of ever forming 0/0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, DimensionError, InputError
from .tensor import Tensor

DEFAULT_CHUNK = 16

GATE_VARIANTS = ("gla", "mamba2", "mlstm", "gret", "hgrn2", "rwkv6", "gsa")
#: variants wired into full-model presets (the rest are kernel-level only)
MODEL_GATE_VARIANTS = ("gla", "hgrn2", "gsa")


@dataclass
class AttentionConfig:
    """Per-layer attention geometry and blend knobs."""

    num_heads: int = 4
    head_dim_k: int = 64
    head_dim_v: int = 64
    window_w: int = 64
    alpha: float = 0.5
    beta: float = 0.5
    gate_variant: str = "gla"
    feature_map: str = "softmax"
    gsa_slots_m: int = 4
    hgrn2_gamma: float = 0.5
    swa_rope: bool = True

    def validate(self) -> "AttentionConfig":
        if self.window_w < 1:
            raise ConfigError(f"window_w must be >= 1, got {self.window_w}")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError(f"blend weights invalid: alpha={self.alpha} beta={self.beta}")
        if self.gate_variant not in GATE_VARIANTS:
            raise ConfigError(f"unknown gate variant {self.gate_variant!r}")
        if self.feature_map not in ("softmax", "identity", "trainable"):
            raise ConfigError(f"unknown feature map {self.feature_map!r}")
        if self.gate_variant == "gsa" and self.head_dim_k % self.gsa_slots_m != 0:
            raise ConfigError(
                f"gsa_slots_m={self.gsa_slots_m} must divide head_dim_k={self.head_dim_k}"
            )
        if not 0.0 <= self.hgrn2_gamma < 1.0:
            raise ConfigError(f"hgrn2_gamma must be in [0,1), got {self.hgrn2_gamma}")
        return self


@dataclass
class RecurrentState:
    """Constant-size decode memory for one attention layer (or one test kernel).

    `s`/`z` serve the outer-product recurrences, `k_tilde`/`v_tilde` the
    slot-based one. Shapes never change after the first step.
    """

    s: Tensor | None = None
    z: Tensor | None = None
    k_tilde: Tensor | None = None
    v_tilde: Tensor | None = None

    def nbytes(self) -> int:
        total = 0
        for t in (self.s, self.z, self.k_tilde, self.v_tilde):
            if t is not None:
                total += t.data.nbytes
        return total


def resolve_feature_map(phi):
    """Accept None/'identity', 'softmax', or a custom callable Tensor->Tensor."""
    if phi is None or phi == "identity":
        return lambda x: x
    if phi == "softmax":
        return feature_map_softmax
    if callable(phi):
        return phi
    raise ConfigError(f"unknown feature map {phi!r}")


def feature_map_softmax(x: Tensor) -> Tensor:
    """Normalize each head-dim row to a probability vector (bounded q.k products)."""
    return tt.softmax(x, axis=-1)


def _squeeze_last(x: Tensor) -> Tensor:
    return tt.reshape(x, x.shape[:-1])


def _check_gate_range(g: Tensor, lo: float = 0.0, hi: float = 1.0, what: str = "gate") -> None:
    d = g.data
    if d.size and (d.min() < lo or d.max() > hi):
        raise ContractError(f"{what} outside [{lo}, {hi}]: range [{d.min()}, {d.max()}]")


# ---------------------------------------------------------------------------
# softmax attention (full causal and sliding window share one code path)
# ---------------------------------------------------------------------------


def _windowed_softmax_attention(q: Tensor, k: Tensor, v: Tensor, window: int | None) -> Tensor:
    T = q.shape[-2]
    if T == 0:
        raise InputError("empty sequence")
    if k.shape[-2] != T or v.shape[-2] != T:
        raise DimensionError("q/k/v time dims disagree")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = tt.mul(tt.matmul(q, tt.swapaxes(k, -1, -2)), scale)
    rows = np.arange(T)[:, None]
    cols = np.arange(T)[None, :]
    allowed = cols <= rows
    if window is not None:
        allowed &= cols >= rows - (window - 1)
    masked = tt.where(allowed, scores, -np.inf)
    return tt.matmul(tt.softmax(masked, axis=-1), v)


def softmax_attention_parallel(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Causal softmax attention over the whole sequence (additive -inf mask)."""
    return _windowed_softmax_attention(q, k, v, None)


def sliding_window_attention(q: Tensor, k: Tensor, v: Tensor, window: int) -> Tensor:
    """Softmax attention restricted to the trailing `window` positions per row."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    return _windowed_softmax_attention(q, k, v, window)


def softmax_attention_recurrent(q_t: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """One decode row against the full (growing) key/value history.

    History includes the current token. Cost is O(t) per call by design;
    this is the baseline whose per-step time grows with position.
    """
    t = keys.shape[-2]
    if t == 0:
        raise InputError("empty history")
    scale = 1.0 / math.sqrt(q_t.shape[-1])
    scores = tt.mul(tt.matmul(tt.expand_dims(q_t, -2), tt.swapaxes(keys, -1, -2)), scale)
    return _squeeze_time(tt.matmul(tt.softmax(scores, axis=-1), values))


def _squeeze_time(x: Tensor) -> Tensor:
    # drop the singleton row axis produced by expand_dims(q, -2)
    return tt.reshape(x, x.shape[:-2] + x.shape[-1:])


# ---------------------------------------------------------------------------
# normalized linear attention (the z-denominator form)
# ---------------------------------------------------------------------------


def linear_attention_normalized(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    phi="softmax",
    eps: float = 1e-6,
    diag: dict | None = None,
) -> Tensor:
    """phi(q_t).S_t / (phi(q_t).z_t) with running sums S, z; denominator clamped at eps."""
    fmap = resolve_feature_map(phi)
    if q.shape[-2] == 0:
        raise InputError("empty sequence")
    fq, fk = fmap(q), fmap(k)
    outer = tt.mul(tt.expand_dims(fk, -1), tt.expand_dims(v, -2))  # [.., T, n, m]
    s_run = tt.cumsum(outer, axis=-3)
    z_run = tt.cumsum(fk, axis=-2)
    num = _squeeze_time(tt.matmul(tt.expand_dims(fq, -2), s_run))  # [.., T, m]
    den = tt.tsum(tt.mul(fq, z_run), axis=-1, keepdims=True)
    clamped = den.data < eps
    if diag is not None:
        diag["clamped"] = diag.get("clamped", 0) + int(clamped.sum())
    den_safe = tt.where(~clamped, den, eps)
    return tt.div(num, den_safe)


def linear_attention_step(
    state: RecurrentState, q_t: Tensor, k_t: Tensor, v_t: Tensor, phi="softmax", eps: float = 1e-6
) -> tuple[RecurrentState, Tensor]:
    """Single normalized-linear-attention decode step carrying (S, z)."""
    fmap = resolve_feature_map(phi)
    fq, fk = fmap(q_t), fmap(k_t)
    outer = tt.matmul(tt.expand_dims(fk, -1), tt.expand_dims(v_t, -2))
    s = outer if state.s is None else tt.add(state.s, outer)
    z = fk if state.z is None else tt.add(state.z, fk)
    num = _squeeze_time(tt.matmul(tt.expand_dims(fq, -2), s))
    den = tt.tsum(tt.mul(fq, z), axis=-1, keepdims=True)
    den_safe = tt.where(den.data >= eps, den, eps)
    return RecurrentState(s=s, z=z), tt.div(num, den_safe)


# ---------------------------------------------------------------------------
# gated outer-product recurrence: S_t = diag(a_t) S_{t-1} + w_t^T u_t
# ---------------------------------------------------------------------------


def _decay_logs(gates: Tensor) -> tuple[Tensor, np.ndarray]:
    """Cumulative log-decay along time plus a cumulative zero-gate count.

    Zero gates get log 1 = 0 in the safe log; the count mask is what turns
    any window containing a zero into an exact-zero contribution.
    """
    zero = gates.data == 0.0
    safe = tt.where(~zero, gates, 1.0)
    cum = tt.cumsum(tt.log(safe), axis=-2)
    zcum = np.cumsum(zero, axis=-2)
    return cum, zcum


def _pairwise_decay(cum: Tensor, zcum: np.ndarray, causal: np.ndarray) -> Tensor:
    """exp(c_t - c_i) masked to i <= t and zero-free windows; [.., T, T, n]."""
    diff = tt.sub(tt.expand_dims(cum, -2), tt.expand_dims(cum, -3))
    ok = causal[..., None] & (zcum[..., :, None, :] == zcum[..., None, :, :])
    return tt.exp(tt.where(ok, diff, -np.inf))


def _gated_parallel_core(qm: Tensor, w: Tensor, u: Tensor, gates: Tensor) -> Tensor:
    """Readout form: o_t = sum_{i<=t} (qm_t . decay(t,i) . w_i) u_i."""
    T = qm.shape[-2]
    cum, zcum = _decay_logs(gates)
    causal = np.tril(np.ones((T, T), dtype=bool))
    decay = _pairwise_decay(cum, zcum, causal)
    scores = tt.tsum(
        tt.mul(tt.mul(tt.expand_dims(qm, -2), tt.expand_dims(w, -3)), decay), axis=-1
    )
    return tt.matmul(scores, u)


def _gated_recurrent_core(
    w_t: Tensor, u_t: Tensor, g_t: Tensor, s: Tensor | None
) -> Tensor:
    """One state update: diag(g) S + w^T u."""
    outer = tt.matmul(tt.expand_dims(w_t, -1), tt.expand_dims(u_t, -2))
    if s is None:
        return outer
    return tt.add(tt.mul(s, tt.expand_dims(g_t, -1)), outer)


def _gated_chunkwise_scan(
    w: Tensor, u: Tensor, gates: Tensor, chunk: int, s0: Tensor | None, qm: Tensor | None
):
    """Shared chunk scan. With `qm` it yields readout rows, otherwise state snapshots.

    Returns (outputs or state sequence, final state).
    """
    T = gates.shape[-2]
    if T == 0:
        raise InputError("empty sequence")
    if chunk < 1:
        raise ConfigError(f"chunk size must be >= 1, got {chunk}")
    s = s0
    outs = []
    for start in range(0, T, chunk):
        end = min(start + chunk, T)
        sl = (Ellipsis, slice(start, end), slice(None))
        wc, uc, gc = w[sl], u[sl], gates[sl]
        c = end - start
        cum, zcum = _decay_logs(gc)
        causal = np.tril(np.ones((c, c), dtype=bool))
        decay = _pairwise_decay(cum, zcum, causal)  # [.., c, c, n]

        # intra-chunk pairwise term
        if qm is not None:
            qc = qm[sl]
            scores = tt.tsum(
                tt.mul(tt.mul(tt.expand_dims(qc, -2), tt.expand_dims(wc, -3)), decay), axis=-1
            )
            intra = tt.matmul(scores, uc)  # [.., c, m]
        else:
            # per-t state snapshots: sum_i decay[t,i,n] w_i[n] u_i[m]
            pairing = tt.swapaxes(tt.mul(decay, tt.expand_dims(wc, -3)), -1, -2)
            intra = tt.matmul(pairing, tt.expand_dims(uc, -3))  # [.., c, n, m]

        # inter-chunk term through the carried state
        if s is not None:
            through = zcum == 0  # no zero gate between chunk start and t inclusive
            scale_in = tt.exp(tt.where(through, cum, -np.inf))  # [.., c, n]
            if qm is not None:
                inter = tt.matmul(tt.mul(qc, scale_in), s)
            else:
                inter = tt.mul(tt.expand_dims(s, -3), tt.expand_dims(scale_in, -1))
            block = tt.add(intra, inter)
        else:
            block = intra
        outs.append(block)

        # carry the state to the next chunk
        last = cum[(Ellipsis, slice(c - 1, c), slice(None))]
        carry_ok = zcum[..., -1:, :] == zcum  # no zero strictly after i in the chunk
        w_carry = tt.mul(wc, tt.exp(tt.where(carry_ok, tt.sub(last, cum), -np.inf)))
        s_new = tt.matmul(tt.swapaxes(w_carry, -1, -2), uc)
        if s is not None:
            zlast = zcum[..., -1:, :] == 0
            row_scale = tt.exp(tt.where(zlast, last, -np.inf))
            s_new = tt.add(s_new, tt.mul(s, tt.swapaxes(row_scale, -1, -2)))
        s = s_new

    return tt.concat(outs, axis=-2 if qm is not None else -3), s


# public gated kernels (Liger GRM family) -----------------------------------


def gated_recurrent_step(
    state: RecurrentState, q_t: Tensor, k_t: Tensor, v_t: Tensor, g_t: Tensor, phi="softmax"
) -> tuple[RecurrentState, Tensor]:
    """S' = G (.) S + phi(k)^T v;  o = phi(q) S'. Unnormalized by construction."""
    _check_gate_range(g_t)
    fmap = resolve_feature_map(phi)
    s = _gated_recurrent_core(fmap(k_t), v_t, g_t, state.s)
    o = _squeeze_time(tt.matmul(tt.expand_dims(fmap(q_t), -2), s))
    return RecurrentState(s=s), o


def gated_recurrent(
    q: Tensor, k: Tensor, v: Tensor, gates: Tensor, phi="softmax", state: RecurrentState | None = None
) -> tuple[Tensor, RecurrentState]:
    """Step-by-step reference form; O(T) sequential."""
    _check_gate_range(gates)
    fmap = resolve_feature_map(phi)
    fq, fk = fmap(q), fmap(k)
    st = state if state is not None else RecurrentState()
    outs = []
    for t in range(q.shape[-2]):
        sl = (Ellipsis, t, slice(None))
        s = _gated_recurrent_core(fk[sl], v[sl], gates[sl], st.s)
        st = RecurrentState(s=s)
        outs.append(tt.matmul(tt.expand_dims(fq[sl], -2), s))
    return tt.concat(outs, axis=-2), st


def gated_parallel_masked(q: Tensor, k: Tensor, v: Tensor, gates: Tensor, phi="softmax") -> Tensor:
    """Quadratic decay-masked reference form, algebraically equal to the recurrence."""
    _check_gate_range(gates)
    fmap = resolve_feature_map(phi)
    return _gated_parallel_core(fmap(q), fmap(k), v, gates)


def gated_chunkwise(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    gates: Tensor,
    chunk: int = DEFAULT_CHUNK,
    phi="softmax",
    state: RecurrentState | None = None,
) -> tuple[Tensor, RecurrentState]:
    """Chunkwise-parallel form: masked matmuls inside chunks, carried state between."""
    _check_gate_range(gates)
    fmap = resolve_feature_map(phi)
    out, s = _gated_chunkwise_scan(
        fmap(k), v, gates, chunk, state.s if state else None, qm=fmap(q)
    )
    return out, RecurrentState(s=s)


# HGRN2: write key is the complementary gate, no separate k ------------------


def hgrn2_step(state: RecurrentState, q_t: Tensor, v_t: Tensor, g_t: Tensor) -> tuple[RecurrentState, Tensor]:
    """S' = G S + (1-G)^T v;  o = q S'."""
    _check_gate_range(g_t, what="hgrn2 gate")
    one_minus = tt.sub(_ones_like(g_t), g_t)
    s = _gated_recurrent_core(one_minus, v_t, g_t, state.s)
    return RecurrentState(s=s), _squeeze_time(tt.matmul(tt.expand_dims(q_t, -2), s))


def hgrn2_recurrent(q, v, gates, state: RecurrentState | None = None):
    _check_gate_range(gates, what="hgrn2 gate")
    st = state if state is not None else RecurrentState()
    outs = []
    for t in range(q.shape[-2]):
        sl = (Ellipsis, t, slice(None))
        st, o = hgrn2_step(st, q[sl], v[sl], gates[sl])
        outs.append(tt.expand_dims(o, -2))
    return tt.concat(outs, axis=-2), st


def hgrn2_parallel(q, v, gates) -> Tensor:
    _check_gate_range(gates, what="hgrn2 gate")
    return _gated_parallel_core(q, tt.sub(_ones_like(gates), gates), v, gates)


def hgrn2_chunkwise(q, v, gates, chunk: int = DEFAULT_CHUNK, state: RecurrentState | None = None):
    _check_gate_range(gates, what="hgrn2 gate")
    out, s = _gated_chunkwise_scan(
        tt.sub(_ones_like(gates), gates), v, gates, chunk, state.s if state else None, qm=q
    )
    return out, RecurrentState(s=s)


# GSA: two slot recurrences plus a softmax readout ---------------------------


def gsa_step(
    state: RecurrentState, q_t: Tensor, k_t: Tensor, v_t: Tensor, g_t: Tensor
) -> tuple[RecurrentState, Tensor]:
    """Slot update K~' = G K~ + (1-G)^T k (V~ likewise); o = V~'^T softmax(K~' q)."""
    _check_gate_range(g_t, what="gsa gate")
    m_slots = g_t.shape[-1]
    if state.k_tilde is not None and state.k_tilde.shape[-2] != m_slots:
        raise ContractError(
            f"gsa slot mismatch: state has {state.k_tilde.shape[-2]}, gate has {m_slots}"
        )
    one_minus = tt.sub(_ones_like(g_t), g_t)
    kt = _gated_recurrent_core(one_minus, k_t, g_t, state.k_tilde)
    vt = _gated_recurrent_core(one_minus, v_t, g_t, state.v_tilde)
    o = _gsa_readout_single(q_t, kt, vt)
    return RecurrentState(k_tilde=kt, v_tilde=vt), o


def _gsa_readout_single(q_t: Tensor, kt: Tensor, vt: Tensor) -> Tensor:
    scores = _squeeze_last(tt.matmul(kt, tt.expand_dims(q_t, -1)))  # [.., M]
    p = tt.softmax(scores, axis=-1)
    return _squeeze_last(tt.matmul(tt.swapaxes(vt, -1, -2), tt.expand_dims(p, -1)))


def _gsa_readout_seq(q: Tensor, kts: Tensor, vts: Tensor) -> Tensor:
    # kts: [.., T, M, dk], vts: [.., T, M, dv], q: [.., T, dk]
    scores = _squeeze_last(tt.matmul(kts, tt.expand_dims(q, -1)))  # [.., T, M]
    p = tt.softmax(scores, axis=-1)
    return _squeeze_last(tt.matmul(tt.swapaxes(vts, -1, -2), tt.expand_dims(p, -1)))


def gsa_recurrent(q, k, v, gates, state: RecurrentState | None = None):
    st = state if state is not None else RecurrentState()
    outs = []
    for t in range(q.shape[-2]):
        sl = (Ellipsis, t, slice(None))
        st, o = gsa_step(st, q[sl], k[sl], v[sl], gates[sl])
        outs.append(tt.expand_dims(o, -2))
    return tt.concat(outs, axis=-2), st


def gsa_parallel(q, k, v, gates) -> Tensor:
    _check_gate_range(gates, what="gsa gate")
    one_minus = tt.sub(_ones_like(gates), gates)
    kts = _gated_states_parallel(one_minus, k, gates)
    vts = _gated_states_parallel(one_minus, v, gates)
    return _gsa_readout_seq(q, kts, vts)


def gsa_chunkwise(q, k, v, gates, chunk: int = DEFAULT_CHUNK, state: RecurrentState | None = None):
    _check_gate_range(gates, what="gsa gate")
    one_minus = tt.sub(_ones_like(gates), gates)
    kts, ks = _gated_chunkwise_scan(one_minus, k, gates, chunk, state.k_tilde if state else None, qm=None)
    vts, vs = _gated_chunkwise_scan(one_minus, v, gates, chunk, state.v_tilde if state else None, qm=None)
    return _gsa_readout_seq(q, kts, vts), RecurrentState(k_tilde=ks, v_tilde=vs)


def _gated_states_parallel(w: Tensor, u: Tensor, gates: Tensor) -> Tensor:
    """All intermediate states S_t of the gated recurrence, quadratic form."""
    T = gates.shape[-2]
    cum, zcum = _decay_logs(gates)
    causal = np.tril(np.ones((T, T), dtype=bool))
    decay = _pairwise_decay(cum, zcum, causal)  # [.., t, i, n]
    pairing = tt.swapaxes(tt.mul(decay, tt.expand_dims(w, -3)), -1, -2)  # [.., t, n, i]
    return tt.matmul(pairing, tt.expand_dims(u, -3))  # [.., t, n, m]


def _ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))
