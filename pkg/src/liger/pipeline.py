"""End-to-end conversion pipeline: train a softmax base, rebuild it as a gated
recurrent model reusing every weight, attach LoRA, fine-tune on next-token loss.

All stages are deterministic under a fixed seed: data order, initialization,
and optimizer state derive from named `Rng` children only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace

from . import bench, tensor as tt
from .data import Corpus, VOCAB_SIZE
from .errors import ConfigError, TrainingError
from .kernels import AttentionConfig
from .model import Model, ModelSpec
from .optim import AdamW, cosine_lr
from .rng import Rng

ABLATION_ARMS = ("full", "gate_proj", "feat_map", "no_lora", "no_swa")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epochs: int = 2
    seq_len: int = 256
    micro_batch: int = 1
    grad_accum: int = 8
    seed: int = 0
    lora_rank: int = 8
    lora_alpha: float = 8.0
    warmup_frac: float = 0.03
    max_steps: int = 0  # 0 = derive step count from epochs over the corpus
    eval_windows: int = 0  # 0 = evaluate the whole split

    def validate(self) -> "TrainConfig":
        positive = {
            "epochs": self.epochs, "seq_len": self.seq_len,
            "micro_batch": self.micro_batch, "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.lr < 0:  # lr = 0 is a legal no-op run, used to pin optimizer behavior
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.grad_accum < 1:
            raise ConfigError("grad_accum must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        return self

    @property
    def global_batch(self) -> int:
        return self.micro_batch * self.grad_accum

    def steps_for(self, corpus: Corpus) -> int:
        if self.max_steps > 0:
            return self.max_steps
        per_epoch = corpus.train_ids.size // (self.global_batch * self.seq_len)
        return max(1, self.epochs * max(1, per_epoch))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LinearizeConfig:
    gate: str = "gla"
    hybrid_every: int = 0  # 0 = pure liger stack
    alpha: float = 0.5
    beta: float = 0.5
    window_w: int = 64
    feature_map: str = "softmax"
    gate_source: str = "pooling"
    swa_rope: bool = True
    gsa_slots_m: int = 4
    hgrn2_gamma: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth(xs: list[float], beta: float = 0.9) -> list[float]:
    out, run = [], None
    for x in xs:
        run = x if run is None else beta * run + (1 - beta) * x
        out.append(run)
    return out


def _train(model: Model, corpus: Corpus, cfg: TrainConfig, trainable: dict, tag: str) -> dict:
    if not trainable:
        raise ConfigError("no trainable parameters selected")
    cfg.validate()
    steps = cfg.steps_for(corpus)
    opt = AdamW(
        trainable, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )
    data_rng = Rng(cfg.seed).child("data", tag)
    scale = 1.0 / (cfg.grad_accum * cfg.micro_batch)
    losses: list[float] = []
    tokens_seen = 0
    for step in range(steps):
        opt.lr = cosine_lr(step, steps, cfg.lr, cfg.warmup_frac)
        step_loss = 0.0
        for _ in range(cfg.grad_accum):
            for _ in range(cfg.micro_batch):
                window = corpus.sample_window(cfg.seq_len, data_rng)
                loss = model.loss(window)
                raw = loss.item()
                if math.isnan(raw) or math.isinf(raw):
                    raise TrainingError(
                        f"{tag}: loss diverged to {raw} at step {step} (lr={opt.lr:.2e})"
                    )
                step_loss += raw * scale
                tt.backward(tt.mul(loss, scale))
        opt.step()
        opt.zero_grad()
        tokens_seen += cfg.global_batch * cfg.seq_len
        losses.append(step_loss)
    budget = steps * cfg.global_batch * cfg.seq_len
    if tokens_seen != budget:
        raise TrainingError(f"budget accounting broken: saw {tokens_seen}, expected {budget}")
    return {
        "tag": tag,
        "steps": steps,
        "tokens": tokens_seen,
        "loss": losses,
        "loss_smoothed": _smooth(losses),
    }


def train_base(spec: ModelSpec, corpus: Corpus, cfg: TrainConfig) -> tuple[Model, dict]:
    """Train the stand-in pretrained transformer (pure softmax attention)."""
    if spec.pattern != "softmax":
        raise ConfigError(f"train_base expects a pure softmax spec, got {spec.pattern!r}")
    spec.validate()
    cfg.validate()
    model = Model.init(spec, Rng(cfg.seed).child("base-init"))
    history = _train(model, corpus, cfg, dict(model.params), tag="base")
    history["val_ppl"] = bench.evaluate_ppl(model, corpus, cfg.seq_len, limit=cfg.eval_windows or None)
    return model, history


def linearize(
    base: Model,
    lin: LinearizeConfig,
    cfg: TrainConfig,
    attach_adapters: bool = True,
) -> Model:
    """Rebuild a softmax transformer as a gated recurrent model, reusing all weights.

    Every base tensor is copied bitwise; the attention operator is replaced;
    gates derive from the copied key projection; LoRA factors (B = 0) are the
    only new trainable tensors unless an ablation arm asks for more.
    """
    if base.spec.pattern != "softmax":
        raise ConfigError(f"linearize expects a pure softmax base, got {base.spec.pattern!r}")
    if lin.gate not in ("gla", "hgrn2", "gsa"):
        raise ConfigError(
            f"gate {lin.gate!r} is kernel-level only; model presets are gla|hgrn2|gsa"
        )
    attn = replace(
        base.spec.attention,
        gate_variant=lin.gate,
        window_w=lin.window_w,
        alpha=lin.alpha,
        beta=lin.beta,
        feature_map=lin.feature_map,
        swa_rope=lin.swa_rope,
        gsa_slots_m=lin.gsa_slots_m,
        hgrn2_gamma=lin.hgrn2_gamma,
    )
    spec = replace(
        base.spec,
        pattern="hybrid" if lin.hybrid_every >= 1 else "liger",
        hybrid_every=lin.hybrid_every if lin.hybrid_every >= 1 else base.spec.hybrid_every,
        attention=attn,
        gate_source=lin.gate_source,
        lora_rank=0,
        lora_alpha=0.0,
    ).validate()
    model = Model.init(spec, Rng(cfg.seed).child("linearize-init"))
    for name, t in base.params.items():
        if name not in model.params:
            raise ConfigError(f"weight transfer mismatch: {name} missing in converted model")
        if model.params[name].shape != t.shape:
            raise ConfigError(f"weight transfer mismatch on {name}: {t.shape} vs {model.params[name].shape}")
        model.params[name].data = t.data.copy()
    if attach_adapters:
        model.attach_lora(cfg.lora_rank, cfg.lora_alpha, Rng(cfg.seed).child("lora-init"))
    return model


def _finetune_trainable(model: Model, mode: str) -> dict:
    if mode == "lora":
        names = [
            n for n in model.params
            if ".lora_" in n or n.endswith(".gate_proj") or n.endswith(".feat_map")
        ]
    elif mode == "full":
        liger_layers = [i for i, k in enumerate(model.spec.layer_kinds()) if k == "liger"]
        names = [
            f"layers.{i}.{p}" for i in liger_layers for p in ("wq", "wk", "wv")
        ]
    else:
        raise ConfigError(f"unknown finetune mode {mode!r}")
    return {n: model.params[n] for n in names}


def finetune(model: Model, corpus: Corpus, cfg: TrainConfig, mode: str = "lora") -> tuple[Model, dict]:
    """Next-token fine-tuning of the linearized model; LoRA-only by default."""
    trainable = _finetune_trainable(model, mode)
    if not trainable:
        raise ConfigError(f"finetune mode {mode!r} selected no trainable parameters")
    limit = cfg.eval_windows or None
    ppl_before = bench.evaluate_ppl(model, corpus, cfg.seq_len, limit=limit)
    history = _train(model, corpus, cfg, trainable, tag=f"finetune-{mode}")
    history["val_ppl_before"] = ppl_before
    history["val_ppl"] = bench.evaluate_ppl(model, corpus, cfg.seq_len, limit=limit)
    history["trainable_params"] = sum(t.size for t in trainable.values())
    return model, history


def ablation_arm(
    arm: str,
    base: Model,
    corpus: Corpus,
    lin: LinearizeConfig,
    cfg: TrainConfig,
) -> tuple[Model, "bench.RunMetrics", dict]:
    """One ablation run under the shared budget and seed; reports validation ppl."""
    if arm not in ABLATION_ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}; choose from {ABLATION_ARMS}")
    lin_arm = replace(lin)
    mode = "lora"
    attach = True
    if arm == "gate_proj":
        lin_arm = replace(lin, gate_source="proj")
    elif arm == "feat_map":
        lin_arm = replace(lin, feature_map="trainable")
    elif arm == "no_lora":
        mode = "full"
        attach = False
    elif arm == "no_swa":
        lin_arm = replace(lin, beta=0.0)
    model = linearize(base, lin_arm, cfg, attach_adapters=attach)
    model, history = finetune(model, corpus, cfg, mode=mode)
    cfg_hash = bench.config_hash({"arm": arm, "lin": lin_arm.to_dict(), "train": cfg.to_dict()})
    metrics = bench.RunMetrics(
        run_id=f"ablate-{arm}",
        arm=arm,
        length=cfg.seq_len,
        ppl=history["val_ppl"],
        tok_per_s=0.0,
        p50_ms=0.0,
        state_bytes=0,
        seed=cfg.seed,
        config_hash=cfg_hash,
    )
    return model, metrics, history


def desk_model_spec(
    vocab_size: int = VOCAB_SIZE,
    model_dim: int = 256,
    num_layers: int = 8,
    num_heads: int = 4,
    window_w: int = 64,
    dtype: str = "f32",
) -> ModelSpec:
    """Smallest configuration where every mechanism is active (hybrid uses N=7)."""
    head = model_dim // num_heads
    return ModelSpec(
        vocab_size=vocab_size,
        model_dim=model_dim,
        num_layers=num_layers,
        pattern="softmax",
        hybrid_every=7,
        attention=AttentionConfig(
            num_heads=num_heads, head_dim_k=head, head_dim_v=head, window_w=window_w
        ),
        dtype=dtype,
    ).validate()
