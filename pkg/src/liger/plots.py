"""Report figures rendered alongside the CSV output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _groups(metrics):
    out = {}
    for row in metrics:
        out.setdefault((row.run_id, row.arm), []).append(row)
    for key in out:
        out[key] = sorted(out[key], key=lambda r: r.length)
    return out


def render_report_figures(metrics, stem: str) -> dict:
    """Latency and state-memory scaling curves, plus a ppl bar chart.

    Scaling figures are emitted only when some run probed multiple lengths.
    """
    written = {}
    groups = _groups(metrics)
    multi = {k: v for k, v in groups.items() if len({r.length for r in v}) >= 2}

    if multi:
        for field, label, name in (
            ("p50_ms", "per-token p50 latency (ms)", "latency"),
            ("state_bytes", "live state bytes", "memory"),
        ):
            fig, ax = plt.subplots(figsize=(6, 4))
            for (run_id, arm), rows in multi.items():
                xs = [r.length for r in rows]
                ys = [getattr(r, field) for r in rows]
                ax.plot(xs, ys, marker="o", label=f"{run_id} [{arm}]")
            ax.set_xlabel("decode length (tokens)")
            ax.set_ylabel(label)
            ax.set_xscale("log", base=2)
            ax.grid(True, alpha=0.3)
            ax.legend(fontsize=8)
            fig.tight_layout()
            out = f"{stem}_{name}.png"
            fig.savefig(out, dpi=120)
            plt.close(fig)
            written[name] = out

    by_arm = {}
    for row in metrics:
        by_arm.setdefault(row.arm, row.ppl)
    if len(by_arm) >= 2:
        fig, ax = plt.subplots(figsize=(6, 4))
        arms = list(by_arm)
        ax.bar(arms, [by_arm[a] for a in arms], color="tab:blue")
        ax.set_ylabel("validation perplexity")
        ax.tick_params(axis="x", rotation=20)
        fig.tight_layout()
        out = f"{stem}_ppl.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written["ppl"] = out
    return written
