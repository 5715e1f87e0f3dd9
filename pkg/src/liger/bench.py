"""Perplexity evaluation, decode latency/memory profiling, and variant comparison.

Memory is accounted state bytes (sum of live state tensors), never process
RSS: deterministic and allocator-independent. Latency uses a warmup discard
and median-of-repeats to tame host-timer noise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tt
from .data import Corpus
from .errors import ConfigError, InputError
from .model import Model, DecodeSession, PAD_ID
from .rng import Rng

CSV_COLUMNS = (
    "run_id", "arm", "length", "ppl", "tok_per_s", "p50_ms", "state_bytes", "seed", "config_hash",
)


def config_hash(obj) -> str:
    """Stable short hash of any JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunMetrics:
    """One benchmark CSV row: a (run, probe length) pair."""

    run_id: str
    arm: str
    length: int
    ppl: float
    tok_per_s: float
    p50_ms: float
    state_bytes: int
    seed: int
    config_hash: str

    def validate(self) -> "RunMetrics":
        if self.ppl <= 0:
            raise ConfigError(f"ppl must be > 0, got {self.ppl}")
        if self.p50_ms < 0 or self.tok_per_s < 0:
            raise ConfigError("latency fields must be nonnegative")
        return self


def evaluate_ppl(
    model: Model, corpus: Corpus, seq_len: int, split: str = "val", limit: int | None = None
) -> float:
    """exp(mean next-token NLL) over consecutive windows of a split; deterministic."""
    total_nll = 0.0
    count = 0
    with tt.no_grad():
        for window in corpus.eval_windows(seq_len, split, limit):
            logits = model.forward(window[:-1]).data.astype(np.float64)
            m = logits.max(axis=-1, keepdims=True)
            logp = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
            targets = window[1:]
            mask = targets != PAD_ID
            total_nll -= float(logp[np.arange(targets.size), targets][mask].sum())
            count += int(mask.sum())
    if count == 0:
        raise InputError(f"{split} split produced no scoreable tokens")
    return float(math.exp(total_nll / count))


def bench_decode(
    model: Model,
    lengths: list[int],
    *,
    ppl: float,
    prefix_len: int = 16,
    repeats: int = 5,
    warmup_frac: float = 0.1,
    run_id: str = "bench",
    arm: str = "model",
    seed: int = 0,
    cfg_hash: str = "",
) -> tuple[list[RunMetrics], dict]:
    """Greedy-decode to each probe length and measure per-step latency and state bytes.

    A probe length is the total sequence length reached (prefix included), so
    the KV-cache accounting oracle 2*L*T*D*4 applies exactly to the softmax
    baseline. State bytes are read after the run; caches only grow, so this
    is the peak. Returns one CSV row per length plus raw latency samples.
    """
    if sorted(lengths) != list(lengths):
        raise ConfigError("probe lengths must be ascending")
    if any(l <= prefix_len for l in lengths):
        raise ConfigError(f"every length must exceed the prefix ({prefix_len})")
    vocab = model.spec.vocab_size
    hi = min(vocab, 256)  # byte ids only, never the pad
    prompt = Rng(seed).child("bench-prompt").integers(0, hi, prefix_len)
    rows: list[RunMetrics] = []
    samples: dict[int, list[list[float]]] = {}
    for length in lengths:
        steps = length - prefix_len
        per_repeat_p50 = []
        per_repeat_rate = []
        state_bytes = 0
        reps = []
        for _ in range(repeats):
            sess = DecodeSession(model, prompt)
            times = []
            for _ in range(steps):
                nxt = int(np.argmax(sess.last_logits))
                t0 = time.perf_counter()
                sess.step(nxt)
                times.append((time.perf_counter() - t0) * 1e3)
            discard = max(1, int(len(times) * warmup_frac))
            kept = times[discard:] if len(times) > discard else times
            per_repeat_p50.append(float(np.median(kept)))
            per_repeat_rate.append(steps / (sum(times) / 1e3))
            state_bytes = sess.state_bytes()
            reps.append(times)
        samples[length] = reps
        rows.append(
            RunMetrics(
                run_id=run_id,
                arm=arm,
                length=length,
                ppl=ppl,
                tok_per_s=float(np.median(per_repeat_rate)),
                p50_ms=float(np.median(per_repeat_p50)),
                state_bytes=state_bytes,
                seed=seed,
                config_hash=cfg_hash,
            ).validate()
        )
    return rows, {"samples": samples, "prefix_len": prefix_len}


def fit_line(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept, and R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise InputError("need at least two points to fit a line")
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise InputError("degenerate fit: all x equal")
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    resid = y - (slope * x + intercept)
    ss_tot = ((y - ym) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else 1.0 - (resid**2).sum() / ss_tot
    return float(slope), float(intercept), float(r2)


def _ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size, dtype=np.float64)
    ranks[order] = np.arange(a.size, dtype=np.float64)
    vals = a[order]
    i = 0
    while i < a.size:  # average tied ranks
        j = i
        while j + 1 < a.size and vals[j + 1] == vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation; used for the latency-grows-with-position check."""
    rx, ry = _ranks(np.asarray(x, dtype=np.float64)), _ranks(np.asarray(y, dtype=np.float64))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx**2).sum() * (ry**2).sum()))
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def compare_variants(
    base: Model,
    corpus: Corpus,
    lin,
    cfg,
    variants: tuple[str, ...] = ("gla", "hgrn2", "gsa"),
) -> tuple[list[RunMetrics], dict]:
    """Linearize + fine-tune the same base once per gate variant, equal budget/seed."""
    from . import pipeline  # late import; pipeline already imports this module

    from dataclasses import replace

    rows, details = [], {}
    for variant in variants:
        lin_v = replace(lin, gate=variant)
        model = pipeline.linearize(base, lin_v, cfg)
        ppl_before = evaluate_ppl(model, corpus, cfg.seq_len, limit=cfg.eval_windows or None)
        model, history = pipeline.finetune(model, corpus, cfg, mode="lora")
        rows.append(
            RunMetrics(
                run_id=f"variant-{variant}",
                arm=variant,
                length=cfg.seq_len,
                ppl=history["val_ppl"],
                tok_per_s=0.0,
                p50_ms=0.0,
                state_bytes=0,
                seed=cfg.seed,
                config_hash=config_hash({"variant": variant, "train": cfg.to_dict(), "lin": lin_v.to_dict()}),
            )
        )
        details[variant] = {
            "ppl_before": ppl_before,
            "ppl_after": history["val_ppl"],
            "added_params_nonlora": model.param_count(include_lora=False) - base.param_count(),
        }
    return rows, details


# -- report emission ---------------------------------------------------------


def emit_report(metrics: list[RunMetrics], path, figures: bool = True) -> dict:
    """Write the CSV, a fitted-slope summary, and (by default) figures next to it.

    Raises before touching the filesystem when `metrics` is empty.
    """
    if not metrics:
        raise InputError("no metrics to report")
    import os

    path = os.fspath(path)
    stem = path[:-4] if path.endswith(".csv") else path
    csv_path = stem + ".csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in metrics:
            d = asdict(row)
            writer.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in CSV_COLUMNS])

    summary_lines = []
    groups: dict[tuple[str, str], list[RunMetrics]] = {}
    for row in metrics:
        groups.setdefault((row.run_id, row.arm), []).append(row)
    for (run_id, arm), rows in groups.items():
        rows = sorted(rows, key=lambda r: r.length)
        lengths = [r.length for r in rows]
        summary_lines.append(f"{run_id} [{arm}]: lengths={lengths} ppl={rows[0].ppl:.4f}")
        if len(set(lengths)) >= 2:
            s_mem, _, r2_mem = fit_line(lengths, [r.state_bytes for r in rows])
            s_lat, _, r2_lat = fit_line(lengths, [r.p50_ms for r in rows])
            summary_lines.append(
                f"  state_bytes slope {s_mem:.6g} B/token (R2={r2_mem:.4f}); "
                f"p50 latency slope {s_lat:.6g} ms/token (R2={r2_lat:.4f})"
            )
    summary_path = stem + ".summary.txt"
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("\n".join(summary_lines) + "\n")

    written = {"csv": csv_path, "summary": summary_path}
    if figures:
        from . import plots

        written.update(plots.render_report_figures(metrics, stem))
    return written


def read_report(path) -> list[RunMetrics]:
    """Parse an emitted CSV back into RunMetrics rows (exact float roundtrip)."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise InputError(f"unexpected CSV header in {path}")
        for rec in reader:
            out.append(
                RunMetrics(
                    run_id=rec["run_id"],
                    arm=rec["arm"],
                    length=int(rec["length"]),
                    ppl=float(rec["ppl"]),
                    tok_per_s=float(rec["tok_per_s"]),
                    p50_ms=float(rec["p50_ms"]),
                    state_bytes=int(rec["state_bytes"]),
                    seed=int(rec["seed"]),
                    config_hash=rec["config_hash"],
                )
            )
    return out
