"""Command-line surface tying the pipeline together.

Every run echoes its fully-resolved configuration to stdout before any
compute; failures print one `error: <category>: <message>` line to stderr
and exit with a category-specific code.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import bench, config as cfgmod, equiv
from .checkpoint import load_model, save_checkpoint
from .data import Corpus
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    LigerError,
    TrainingError,
)
from .pipeline import ABLATION_ARMS, ablation_arm, finetune, linearize, train_base

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_CHECKPOINT = 5
EXIT_CHECK_FAILED = 6
EXIT_CONTRACT = 7

_CATEGORIES = [
    (ConfigError, "config", EXIT_CONFIG),
    (CheckpointError, "checkpoint", EXIT_CHECKPOINT),
    ((InputError, FileNotFoundError), "input", EXIT_INPUT),
    (TrainingError, "training", EXIT_CONTRACT),
    ((ContractError, DimensionError), "contract", EXIT_CONTRACT),
    (LigerError, "internal", EXIT_CONTRACT),
]


def _fail(exc: BaseException) -> int:
    for types, category, code in _CATEGORIES:
        if isinstance(exc, types):
            print(f"error: {category}: {exc}", file=sys.stderr)
            return code
    print(f"error: internal: {exc}", file=sys.stderr)
    return EXIT_CONTRACT


def _echo(resolved: dict) -> None:
    print("# resolved config")
    print(cfgmod.echo_config(resolved))


def _load_resolved(path: str | None) -> dict:
    if path is None:
        return cfgmod.resolve_config(None)
    return cfgmod.load_config(path)


def _corpus_from(resolved: dict, required: bool = True) -> Corpus | None:
    path = resolved["train"]["corpus"]
    if not path:
        if required:
            raise InputError("train.corpus must point at a UTF-8 text file")
        return None
    return Corpus.from_file(path, resolved["train"]["val_fraction"])


def _parse_lengths(text: str) -> list[int]:
    try:
        lengths = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --lengths value: {e}") from e
    if not lengths:
        raise ConfigError("--lengths is empty")
    return lengths


# -- subcommands --------------------------------------------------------------


def _cmd_train_base(args) -> int:
    resolved = _load_resolved(args.config)
    _echo(resolved)
    corpus = _corpus_from(resolved)
    spec = cfgmod.model_spec_from(resolved)
    tcfg = cfgmod.train_config_from(resolved)
    model, history = train_base(spec, corpus, tcfg)
    save_checkpoint(model, args.out, train_config=resolved["train"])
    print(f"steps={history['steps']} tokens={history['tokens']} "
          f"final_loss={history['loss_smoothed'][-1]:.4f} val_ppl={history['val_ppl']:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_linearize(args) -> int:
    resolved = _load_resolved(args.config)
    if args.gate:
        resolved["linearize"]["gate"] = args.gate
    if args.hybrid_every is not None:
        resolved["linearize"]["hybrid_every"] = args.hybrid_every
    resolved = cfgmod.resolve_config(resolved)
    _echo(resolved)
    base, _ = load_model(args.infile)
    lin = cfgmod.linearize_config_from(resolved)
    lin.window_w = base.spec.attention.window_w  # geometry follows the base checkpoint
    tcfg = cfgmod.train_config_from(resolved)
    model = linearize(base, lin, tcfg)
    save_checkpoint(model, args.out, train_config=resolved["train"])
    print(f"pattern={model.spec.pattern} gate={model.spec.attention.gate_variant} "
          f"lora_params={model.lora_param_count()}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    resolved = _load_resolved(args.config)
    _echo(resolved)
    corpus = _corpus_from(resolved)
    model, _ = load_model(args.infile)
    tcfg = cfgmod.train_config_from(resolved)
    model, history = finetune(model, corpus, tcfg, mode=args.mode)
    save_checkpoint(model, args.out, train_config=resolved["train"])
    print(f"steps={history['steps']} tokens={history['tokens']} "
          f"ppl_before={history['val_ppl_before']:.4f} ppl_after={history['val_ppl']:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    resolved = _load_resolved(args.config)
    _echo(resolved)
    corpus = _corpus_from(resolved)
    model, _ = load_model(args.infile)
    tcfg = cfgmod.train_config_from(resolved)
    ppl = bench.evaluate_ppl(model, corpus, tcfg.seq_len, limit=tcfg.eval_windows or None)
    print(f"ppl={ppl!r}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    resolved = _load_resolved(args.config)
    if args.lengths:
        resolved["bench"]["lengths"] = _parse_lengths(args.lengths)
    if args.repeats is not None:
        resolved["bench"]["repeats"] = args.repeats
    resolved = cfgmod.resolve_config(resolved)
    _echo(resolved)
    model, ckpt = load_model(args.infile)
    corpus = _corpus_from(resolved, required=False)
    tcfg = cfgmod.train_config_from(resolved)
    if corpus is not None:
        ppl = bench.evaluate_ppl(model, corpus, tcfg.seq_len, limit=tcfg.eval_windows or None)
    else:
        ppl = 1.0  # placeholder when no corpus is configured
    b = resolved["bench"]
    rows, _ = bench.bench_decode(
        model,
        b["lengths"],
        ppl=ppl,
        prefix_len=b["prefix_len"],
        repeats=b["repeats"],
        run_id=args.run_id,
        arm=model.spec.pattern,
        seed=tcfg.seed,
        cfg_hash=bench.config_hash(resolved),
    )
    written = bench.emit_report(rows, args.out, figures=not args.no_figures)
    for kind, path in written.items():
        print(f"wrote {kind}: {path}")
    return EXIT_OK


def _cmd_equiv_check(args) -> int:
    effective = {
        "gate": args.gate, "T": args.T, "dtype": args.dtype,
        "trials": args.trials, "dims": args.dims, "seed": args.seed,
    }
    print("# resolved config")
    print(json.dumps({"equiv_check": effective}, indent=2, sort_keys=True))
    report = equiv.three_form_check(
        args.gate, trials=args.trials, t_max=args.T, dim_max=args.dims,
        dtype=args.dtype, seed=args.seed,
    )
    for pair, dev in report["per_pair"].items():
        print(f"{pair}: max |dev| = {dev:.3e}")
    print(f"max deviation {report['max_deviation']:.3e} "
          f"(tolerance {report['tolerance']:.0e}) -> {'PASS' if report['passed'] else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def _cmd_ablate(args) -> int:
    resolved = _load_resolved(args.config)
    _echo(resolved)
    corpus = _corpus_from(resolved)
    base, _ = load_model(args.infile)
    lin = cfgmod.linearize_config_from(resolved)
    lin.window_w = base.spec.attention.window_w
    tcfg = cfgmod.train_config_from(resolved)
    arms = list(ABLATION_ARMS) if args.arm == "all" else [args.arm]
    rows = []
    for arm in arms:
        _, metrics, history = ablation_arm(arm, base, corpus, lin, tcfg)
        rows.append(metrics)
        print(f"{arm}: ppl_before={history['val_ppl_before']:.4f} "
              f"ppl_after={history['val_ppl']:.4f} trainable={history['trainable_params']}")
    written = bench.emit_report(rows, args.out, figures=not args.no_figures)
    for kind, path in written.items():
        print(f"wrote {kind}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liger", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    tb = sub.add_parser("train-base", help="train the softmax-attention base model")
    tb.add_argument("--config", required=True)
    tb.add_argument("--out", required=True)
    tb.set_defaults(fn=_cmd_train_base)

    ln = sub.add_parser("linearize", help="convert a softmax base into a gated recurrent model")
    ln.add_argument("--in", dest="infile", required=True)
    ln.add_argument("--out", required=True)
    ln.add_argument("--gate", choices=("gla", "hgrn2", "gsa"))
    ln.add_argument("--hybrid-every", type=int, dest="hybrid_every")
    ln.add_argument("--config")
    ln.set_defaults(fn=_cmd_linearize)

    ft = sub.add_parser("finetune", help="LoRA fine-tuning with the next-token objective")
    ft.add_argument("--in", dest="infile", required=True)
    ft.add_argument("--out", required=True)
    ft.add_argument("--config", required=True)
    ft.add_argument("--mode", choices=("lora", "full"), default="lora")
    ft.set_defaults(fn=_cmd_finetune)

    ev = sub.add_parser("eval", help="validation perplexity of a checkpoint")
    ev.add_argument("--in", dest="infile", required=True)
    ev.add_argument("--config", required=True)
    ev.set_defaults(fn=_cmd_eval)

    bn = sub.add_parser("bench", help="decode latency/memory scaling report")
    bn.add_argument("--in", dest="infile", required=True)
    bn.add_argument("--out", default="liger_bench")
    bn.add_argument("--lengths")
    bn.add_argument("--repeats", type=int)
    bn.add_argument("--run-id", default="bench")
    bn.add_argument("--config")
    bn.add_argument("--no-figures", action="store_true")
    bn.set_defaults(fn=_cmd_bench)

    eq = sub.add_parser("equiv-check", help="three-form kernel equivalence check")
    eq.add_argument("--gate", required=True, choices=("gla", "hgrn2", "gsa", "mamba2", "mlstm", "gret", "rwkv6"))
    eq.add_argument("--T", type=int, default=64)
    eq.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    eq.add_argument("--trials", type=int, default=20)
    eq.add_argument("--dims", type=int, default=16)
    eq.add_argument("--seed", type=int, default=0)
    eq.set_defaults(fn=_cmd_equiv_check)

    ab = sub.add_parser("ablate", help="run one ablation arm (or all) from a base checkpoint")
    ab.add_argument("--arm", required=True, choices=ABLATION_ARMS + ("all",))
    ab.add_argument("--in", dest="infile", required=True)
    ab.add_argument("--config", required=True)
    ab.add_argument("--out", default="liger_ablation")
    ab.add_argument("--no-figures", action="store_true")
    ab.set_defaults(fn=_cmd_ablate)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - single reporting point for exit codes
        return _fail(e)


if __name__ == "__main__":
    sys.exit(main())
