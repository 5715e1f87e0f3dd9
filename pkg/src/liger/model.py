"""Model assembly: attention layers, pre-norm blocks, full stacks, LoRA, decoding.

A model is a `ModelSpec` plus a flat name->Tensor parameter dict, which keeps
checkpointing and the weight-copy contract of linearization trivial. Layer
kinds come from `ModelSpec.pattern`: `softmax` blocks are the plain causal
baseline, `liger` blocks blend a gated recurrent branch with sliding-window
attention, and `hybrid` stacks insert one softmax block after every
`hybrid_every` liger blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import gating, kernels, tensor as tt
from .errors import ConfigError, ContractError, InputError
from .kernels import AttentionConfig, RecurrentState
from .rng import Rng
from .tensor import Tensor

RMS_EPS = 1e-6
ROPE_BASE = 10000.0
PAD_ID = 256


@dataclass
class ModelSpec:
    vocab_size: int = 257
    model_dim: int = 256
    num_layers: int = 8
    pattern: str = "softmax"  # softmax | liger | hybrid
    hybrid_every: int = 7
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    gate_source: str = "pooling"  # pooling | proj (ablation arm)
    lora_rank: int = 0
    lora_alpha: float = 0.0
    dtype: str = "f32"

    def validate(self) -> "ModelSpec":
        self.attention.validate()
        cfg = self.attention
        if self.model_dim % cfg.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {cfg.num_heads} heads")
        per_head = self.model_dim // cfg.num_heads
        if cfg.head_dim_k != per_head or cfg.head_dim_v != per_head:
            raise ConfigError(
                f"head dims ({cfg.head_dim_k},{cfg.head_dim_v}) must equal model_dim/num_heads={per_head}"
            )
        if self.pattern not in ("softmax", "liger", "hybrid"):
            raise ConfigError(f"unknown layer pattern {self.pattern!r}")
        if self.pattern == "hybrid" and self.hybrid_every < 1:
            raise ConfigError("hybrid_every must be >= 1")
        if self.pattern != "softmax" and cfg.gate_variant not in kernels.MODEL_GATE_VARIANTS:
            raise ConfigError(
                f"gate variant {cfg.gate_variant!r} is kernel-level only; "
                f"model presets support {kernels.MODEL_GATE_VARIANTS}"
            )
        if self.gate_source not in ("pooling", "proj"):
            raise ConfigError(f"unknown gate source {self.gate_source!r}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if per_head % 2 != 0 and (self.pattern != "liger" or cfg.swa_rope):
            raise ConfigError("rotary embedding needs an even head dim")
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @property
    def mlp_hidden(self) -> int:
        # gated feed-forward expansion 4*D*(2/3), rounded
        return round(self.model_dim * 8 / 3)

    def layer_kinds(self) -> list[str]:
        if self.pattern == "softmax":
            return ["softmax"] * self.num_layers
        if self.pattern == "liger":
            return ["liger"] * self.num_layers
        n = self.hybrid_every
        return ["softmax" if (i + 1) % (n + 1) == 0 else "liger" for i in range(self.num_layers)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d).validate()


@dataclass
class LoraAdapter:
    """Low-rank delta B@A applied next to a frozen base weight."""

    b: Tensor  # [D, r]
    a: Tensor  # [r, D]
    rank: int
    alpha: float


def lora_apply(w: Tensor, adapter: LoraAdapter | None, x: Tensor) -> Tensor:
    """x@W + (alpha/r) * (x@B)@A, never materializing W + BA."""
    base = tt.matmul(x, w)
    if adapter is None:
        return base
    if adapter.b.shape[-1] != adapter.rank or adapter.a.shape[-2] != adapter.rank:
        raise ContractError(
            f"adapter rank {adapter.rank} disagrees with factors {adapter.b.shape} x {adapter.a.shape}"
        )
    if adapter.b.shape[-2] != w.shape[-2] or adapter.a.shape[-1] != w.shape[-1]:
        raise ContractError("adapter factor dims do not match the base weight")
    delta = tt.matmul(tt.matmul(x, adapter.b), adapter.a)
    return tt.add(base, tt.mul(delta, adapter.alpha / adapter.rank))


def _rope_tables(positions: np.ndarray, dim: int, dtype):
    half = dim // 2
    inv = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate the head dim in halves (absolute-position rotary embedding)."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    c, s = Tensor(cos.astype(x.dtype)), Tensor(sin.astype(x.dtype))
    return tt.concat([tt.sub(tt.mul(x1, c), tt.mul(x2, s)), tt.add(tt.mul(x2, c), tt.mul(x1, s))], -1)


class Model:
    """Flat-parameter transformer with interchangeable attention operators."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec.validate()
        self.params = params

    # -- construction ----------------------------------------------------

    @classmethod
    def init(cls, spec: ModelSpec, rng: Rng) -> "Model":
        spec.validate()
        dt = spec.np_dtype
        d, dh, v = spec.model_dim, spec.mlp_hidden, spec.vocab_size
        params: dict[str, Tensor] = {}

        def p(name, shape, scale=0.02):
            params[name] = Tensor(rng.child("init", name).normal(shape, scale, dt), requires_grad=True)

        def gain(name, size):
            params[name] = Tensor(np.ones(size, dtype=dt), requires_grad=True)

        p("embed.weight", (v, d))
        for i in range(spec.num_layers):
            pre = f"layers.{i}"
            gain(f"{pre}.attn_norm.gain", d)
            for proj in ("wq", "wk", "wv", "wo"):
                p(f"{pre}.{proj}", (d, d))
            gain(f"{pre}.mlp_norm.gain", d)
            p(f"{pre}.mlp.w_gate", (d, dh))
            p(f"{pre}.mlp.w_up", (d, dh))
            p(f"{pre}.mlp.w_down", (dh, d))
            if spec.gate_source == "proj":
                dk = spec.attention.head_dim_k
                p(f"{pre}.gate_proj", (dk, dk))
            if spec.attention.feature_map == "trainable":
                dk = spec.attention.head_dim_k
                eye = np.eye(dk, dtype=dt)
                noise = rng.child("init", f"{pre}.feat_map").normal((dk, dk), 0.02, dt)
                params[f"{pre}.feat_map"] = Tensor(eye + noise, requires_grad=True)
        gain("final_norm.gain", d)
        p("lm_head.weight", (d, v))
        model = cls(spec, params)
        if spec.lora_rank > 0:
            model.attach_lora(spec.lora_rank, spec.lora_alpha, rng)
        return model

    def attach_lora(self, rank: int, alpha: float, rng: Rng) -> None:
        """Add zero-initialized adapters to W_Q/W_K/W_V of every liger layer.

        B = 0 guarantees the adapted model computes exactly the base function
        at attach time.
        """
        dt = self.spec.np_dtype
        d = self.spec.model_dim
        self.spec.lora_rank = rank
        self.spec.lora_alpha = alpha
        for i, kind in enumerate(self.spec.layer_kinds()):
            if kind != "liger":
                continue
            for proj in ("wq", "wk", "wv"):
                base = f"layers.{i}.{proj}"
                a0 = rng.child("lora", base).uniform(-0.01, 0.01, (rank, d), dt)
                self.params[f"{base}.lora_b"] = Tensor(np.zeros((d, rank), dtype=dt), requires_grad=True)
                self.params[f"{base}.lora_a"] = Tensor(a0, requires_grad=True)

    def adapter_for(self, base_name: str) -> LoraAdapter | None:
        b = self.params.get(f"{base_name}.lora_b")
        if b is None:
            return None
        return LoraAdapter(
            b=b, a=self.params[f"{base_name}.lora_a"],
            rank=self.spec.lora_rank, alpha=self.spec.lora_alpha,
        )

    # -- bookkeeping -------------------------------------------------------

    def param_items(self, include_lora: bool = True):
        for name, t in self.params.items():
            if not include_lora and ".lora_" in name:
                continue
            yield name, t

    def param_count(self, include_lora: bool = True) -> int:
        return sum(t.size for _, t in self.param_items(include_lora))

    def lora_param_count(self) -> int:
        return sum(t.size for n, t in self.params.items() if ".lora_" in n)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- forward -------------------------------------------------------------

    def _split_heads(self, x: Tensor) -> Tensor:
        T = x.shape[-2]
        h = self.spec.attention.num_heads
        return tt.swapaxes(tt.reshape(x, (T, h, x.shape[-1] // h)), 0, 1)

    def _merge_heads(self, x: Tensor) -> Tensor:
        h, T, dk = x.shape
        return tt.reshape(tt.swapaxes(x, 0, 1), (T, h * dk))

    def _phi(self, layer: int):
        fm = self.spec.attention.feature_map
        if fm == "trainable":
            w = self.params[f"layers.{layer}.feat_map"]
            return lambda x: tt.softplus(tt.matmul(x, w))
        return fm

    def _gates(self, layer: int, k_heads: Tensor) -> Tensor:
        cfg = self.spec.attention
        variant = gating.GateVariant(cfg.gate_variant, cfg.hgrn2_gamma, cfg.gsa_slots_m)
        src = k_heads
        if self.spec.gate_source == "proj":
            src = tt.matmul(k_heads, self.params[f"layers.{layer}.gate_proj"])
        pooled = gating.pool_key(src, variant.target_dim(cfg.head_dim_k))
        gate = gating.squash_gate(variant, pooled)
        if variant.shape_kind != "slots":
            gate = gating.expand_gate_rows(gate, cfg.head_dim_k)
        return gate

    def _grm_parallel(self, layer: int, qh, kh, vh, gates):
        variant = self.spec.attention.gate_variant
        phi = self._phi(layer)
        fmap = kernels.resolve_feature_map(phi)
        if variant == "gla":
            out, _ = kernels.gated_chunkwise(qh, kh, vh, gates, phi=phi)
        elif variant == "hgrn2":
            out, _ = kernels.hgrn2_chunkwise(fmap(qh), vh, gates)
        elif variant == "gsa":
            out, _ = kernels.gsa_chunkwise(fmap(qh), fmap(kh), vh, gates)
        else:
            raise ConfigError(f"gate variant {variant!r} has no model preset")
        return out

    def attention_forward(self, layer: int, kind: str, x: Tensor, positions: np.ndarray) -> Tensor:
        cfg = self.spec.attention
        q = lora_apply(self.params[f"layers.{layer}.wq"], self.adapter_for(f"layers.{layer}.wq"), x)
        k = lora_apply(self.params[f"layers.{layer}.wk"], self.adapter_for(f"layers.{layer}.wk"), x)
        v = lora_apply(self.params[f"layers.{layer}.wv"], self.adapter_for(f"layers.{layer}.wv"), x)
        qh, kh, vh = self._split_heads(q), self._split_heads(k), self._split_heads(v)

        if kind == "softmax":
            cos, sin = _rope_tables(positions, cfg.head_dim_k, x.dtype)
            o = kernels.softmax_attention_parallel(
                apply_rope(qh, cos, sin), apply_rope(kh, cos, sin), vh
            )
        else:
            parts = []
            if cfg.alpha != 0.0:
                gates = self._gates(layer, kh)
                parts.append(tt.mul(self._grm_parallel(layer, qh, kh, vh, gates), cfg.alpha))
            if cfg.beta != 0.0:
                qs, ks = qh, kh
                if cfg.swa_rope:
                    cos, sin = _rope_tables(positions, cfg.head_dim_k, x.dtype)
                    qs, ks = apply_rope(qh, cos, sin), apply_rope(kh, cos, sin)
                parts.append(tt.mul(kernels.sliding_window_attention(qs, ks, vh, cfg.window_w), cfg.beta))
            o = parts[0] if len(parts) == 1 else tt.add(parts[0], parts[1])
        return tt.matmul(self._merge_heads(o), self.params[f"layers.{layer}.wo"])

    def mlp_forward(self, layer: int, x: Tensor) -> Tensor:
        pre = f"layers.{layer}.mlp"
        gate = tt.silu(tt.matmul(x, self.params[f"{pre}.w_gate"]))
        up = tt.matmul(x, self.params[f"{pre}.w_up"])
        return tt.matmul(tt.mul(gate, up), self.params[f"{pre}.w_down"])

    def block_forward(self, layer: int, kind: str, x: Tensor, positions: np.ndarray) -> Tensor:
        h = tt.add(
            self.attention_forward(layer, kind, tt.rms_norm(x, self.params[f"layers.{layer}.attn_norm.gain"], RMS_EPS), positions),
            x,
        )
        return tt.add(self.mlp_forward(layer, tt.rms_norm(h, self.params[f"layers.{layer}.mlp_norm.gain"], RMS_EPS)), h)

    def forward(self, tokens: np.ndarray) -> Tensor:
        """Token ids -> next-token logits [T, vocab]."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.size == 0:
            raise InputError("tokens must be a nonempty 1-D id array")
        if tokens.min() < 0 or tokens.max() >= self.spec.vocab_size:
            raise InputError(
                f"token id out of range [0, {self.spec.vocab_size}): {tokens.min()}..{tokens.max()}"
            )
        positions = np.arange(tokens.size)
        x = tt.embedding(self.params["embed.weight"], tokens)
        for i, kind in enumerate(self.spec.layer_kinds()):
            x = self.block_forward(i, kind, x, positions)
        x = tt.rms_norm(x, self.params["final_norm.gain"], RMS_EPS)
        return tt.matmul(x, self.params["lm_head.weight"])

    def loss(self, window: np.ndarray) -> Tensor:
        """Mean next-token negative log-likelihood over a token window."""
        window = np.asarray(window)
        if window.size < 2:
            raise InputError("need at least two tokens for a next-token loss")
        logits = self.forward(window[:-1])
        return tt.cross_entropy(logits, window[1:], ignore_index=PAD_ID)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


class _LigerLayerState:
    """Constant-size memory: recurrent state plus a w-token SWA ring buffer."""

    def __init__(self, spec: ModelSpec):
        cfg = spec.attention
        dt = spec.np_dtype
        h, dk, dv, w = cfg.num_heads, cfg.head_dim_k, cfg.head_dim_v, cfg.window_w
        if cfg.gate_variant == "gsa":
            m = cfg.gsa_slots_m
            self.state = RecurrentState(
                k_tilde=Tensor(np.zeros((h, m, dk), dtype=dt)),
                v_tilde=Tensor(np.zeros((h, m, dv), dtype=dt)),
            )
        else:
            self.state = RecurrentState(s=Tensor(np.zeros((h, dk, dv), dtype=dt)))
        self.k_ring = np.zeros((w, h, dk), dtype=dt)
        self.v_ring = np.zeros((w, h, dv), dtype=dt)
        self.filled = 0
        self.pos = 0

    def push_window(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        w = self.k_ring.shape[0]
        self.k_ring[self.pos % w] = k_row
        self.v_ring[self.pos % w] = v_row
        self.pos += 1
        self.filled = min(self.filled + 1, w)

    def window(self) -> tuple[np.ndarray, np.ndarray]:
        return self.k_ring[: self.filled], self.v_ring[: self.filled]

    def nbytes(self) -> int:
        return self.state.nbytes() + self.k_ring.nbytes + self.v_ring.nbytes


class _SoftmaxLayerState:
    """Growing KV cache; this is exactly the memory the liger layers replace."""

    def __init__(self):
        self.k_rows: list[np.ndarray] = []
        self.v_rows: list[np.ndarray] = []

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.k_rows) + sum(a.nbytes for a in self.v_rows)


class DecodeSession:
    """Stateful token-by-token inference over one prompt; greedy and deterministic."""

    def __init__(self, model: Model, prompt: np.ndarray):
        prompt = np.asarray(prompt)
        if prompt.size == 0:
            raise InputError("prompt must be nonempty")
        self.model = model
        self.states: list = [
            _LigerLayerState(model.spec) if kind == "liger" else _SoftmaxLayerState()
            for kind in model.spec.layer_kinds()
        ]
        self.position = 0
        self.tokens: list[int] = []
        self.last_logits: np.ndarray | None = None
        for t in prompt:
            self.last_logits = self.step(int(t))

    def state_bytes(self) -> int:
        return sum(s.nbytes() for s in self.states)

    def step(self, token: int) -> np.ndarray:
        """Feed one token, return next-token logits [vocab]."""
        if not 0 <= token < self.model.spec.vocab_size:
            raise InputError(f"token id {token} out of range")
        m, spec = self.model, self.model.spec
        cfg = spec.attention
        pos = self.position
        with tt.no_grad():
            x = Tensor(m.params["embed.weight"].data[token])  # [D]
            for i, kind in enumerate(spec.layer_kinds()):
                x = self._block_step(i, kind, x, pos)
            x = tt.rms_norm(x, m.params["final_norm.gain"], RMS_EPS)
            logits = tt.matmul(tt.expand_dims(x, 0), m.params["lm_head.weight"]).data[0]
        self.position += 1
        self.tokens.append(token)
        self.last_logits = logits
        return logits

    def _block_step(self, i: int, kind: str, x: Tensor, pos: int) -> Tensor:
        m = self.model
        normed = tt.rms_norm(x, m.params[f"layers.{i}.attn_norm.gain"], RMS_EPS)
        att = self._attention_step(i, kind, normed, pos)
        h = tt.add(att, x)
        normed2 = tt.rms_norm(h, m.params[f"layers.{i}.mlp_norm.gain"], RMS_EPS)
        row = tt.expand_dims(normed2, 0)
        mlp = m.mlp_forward(i, row)[0]
        return tt.add(mlp, h)

    def _attention_step(self, i: int, kind: str, x: Tensor, pos: int) -> Tensor:
        m, cfg = self.model, self.model.spec.attention
        h, dk = cfg.num_heads, cfg.head_dim_k
        row = tt.expand_dims(x, 0)  # [1, D]
        q = lora_apply(m.params[f"layers.{i}.wq"], m.adapter_for(f"layers.{i}.wq"), row)
        k = lora_apply(m.params[f"layers.{i}.wk"], m.adapter_for(f"layers.{i}.wk"), row)
        v = lora_apply(m.params[f"layers.{i}.wv"], m.adapter_for(f"layers.{i}.wv"), row)
        qh = tt.reshape(q, (h, dk))
        kh = tt.reshape(k, (h, dk))
        vh = tt.reshape(v, (h, cfg.head_dim_v))

        if kind == "softmax":
            st: _SoftmaxLayerState = self.states[i]
            cos, sin = _rope_tables(np.array([pos]), dk, x.dtype)
            qr = apply_rope(qh, cos[0], sin[0])
            kr = apply_rope(kh, cos[0], sin[0])
            st.k_rows.append(kr.data.copy())
            st.v_rows.append(vh.data.copy())
            keys = Tensor(np.stack(st.k_rows, axis=1))  # [H, t, dk]
            vals = Tensor(np.stack(st.v_rows, axis=1))
            o = kernels.softmax_attention_recurrent(qr, keys, vals)
        else:
            st = self.states[i]
            parts = []
            if cfg.alpha != 0.0:
                gates = m._gates(i, kh)
                o_grm = self._grm_step(i, st, qh, kh, vh, gates)
                parts.append(tt.mul(o_grm, cfg.alpha))
            if cfg.beta != 0.0:
                qs, ks = qh, kh
                if cfg.swa_rope:
                    cos, sin = _rope_tables(np.array([pos]), dk, x.dtype)
                    qs = apply_rope(qh, cos[0], sin[0])
                    ks = apply_rope(kh, cos[0], sin[0])
                st.push_window(ks.data, vh.data)
                wk, wv = st.window()
                o_swa = kernels.softmax_attention_recurrent(
                    qs, Tensor(np.swapaxes(wk, 0, 1)), Tensor(np.swapaxes(wv, 0, 1))
                )
                parts.append(tt.mul(o_swa, cfg.beta))
            o = parts[0] if len(parts) == 1 else tt.add(parts[0], parts[1])
        merged = tt.reshape(o, (h * cfg.head_dim_v,))
        return tt.matmul(tt.expand_dims(merged, 0), m.params[f"layers.{i}.wo"])[0]

    def _grm_step(self, i: int, st: _LigerLayerState, qh, kh, vh, gates) -> Tensor:
        variant = self.model.spec.attention.gate_variant
        phi = self.model._phi(i)
        fmap = kernels.resolve_feature_map(phi)
        if variant == "gla":
            st.state, o = kernels.gated_recurrent_step(st.state, qh, kh, vh, gates, phi=phi)
        elif variant == "hgrn2":
            st.state, o = kernels.hgrn2_step(st.state, fmap(qh), vh, gates)
        elif variant == "gsa":
            st.state, o = kernels.gsa_step(st.state, fmap(qh), fmap(kh), vh, gates)
        else:
            raise ConfigError(f"gate variant {variant!r} has no model preset")
        return o

    def generate(self, n: int) -> np.ndarray:
        """Greedy-decode n tokens from the current logits."""
        if self.last_logits is None:
            raise InputError("session has no context yet")
        out = []
        for _ in range(n):
            nxt = int(np.argmax(self.last_logits))
            out.append(nxt)
            self.step(nxt)
        return np.asarray(out, dtype=np.int64)
