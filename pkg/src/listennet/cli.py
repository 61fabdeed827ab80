"""Command-line entry point: ``listennet {synth,prep,train,eval,audit,gradcheck}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 self-test failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import verify
from .errors import ListenNetError
from .fileio import RunConfig, load_manifest, load_params
from .model import ModelConfig, count_macs, count_params
from .pipeline import StageError, prepare_windows, run_training
from .preprocess import DecisionWindow, align_by_subject, compute_alignment, stack_windows
from .synthetic import SyntheticSpec, gen_synthetic
from .train import evaluate

log = logging.getLogger("listennet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(subjects=args.subjects, trials_per_subject=args.trials,
                         channels=args.channels, fs=args.fs, duration=args.duration,
                         snr=args.snr, seed=args.seed)
    path = gen_synthetic(spec, args.out, name=args.name)
    _emit({"manifest": str(path), "subjects": spec.subjects, "trials": spec.subjects * spec.trials_per_subject})
    return EXIT_OK


def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for flag, attr in (("window_seconds", "window_seconds"), ("stride_seconds", "stride_seconds"),
                       ("output_dir", "output_dir"), ("seed", "seed"), ("align", "align")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(run, attr, value)
    train_flags = {"mode": "mode", "lr": "learning_rate", "weight_decay": "weight_decay",
                   "batch_size": "batch_size", "max_epochs": "max_epochs", "patience": "patience",
                   "val_fraction": "val_fraction_loso"}
    for flag, key in train_flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            run.train[key] = value
    if getattr(args, "seed", None) is not None:
        run.train["seed"] = args.seed
    for flag, key in (("d_depth", "d_depth"), ("k0", "k0"), ("dilation", "dilation")):
        value = getattr(args, flag, None)
        if value is not None:
            run.model[key] = value
    if getattr(args, "no_mste", False):
        run.model["use_mste"] = False
    if getattr(args, "no_cna", False):
        run.model["use_cna"] = False
    return run


def cmd_prep(args) -> int:
    run = _run_config(args)
    man = load_manifest(args.manifest)
    windows = prepare_windows(man, run)
    if run.align:
        windows, _ = align_by_subject(windows)
    x, y = stack_windows(windows)
    out = Path(args.out)
    if out.suffix != ".npz":
        out = out.with_name(out.name + ".npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, x=x, y=y,
             subject=np.array([w.subject_id for w in windows]),
             trial=np.array([w.trial_id for w in windows]),
             start=np.array([w.start_sample for w in windows]))
    _emit({"prepared": str(out), "windows": int(len(x)), "aligned": run.align})
    return EXIT_OK


def cmd_train(args) -> int:
    run = _run_config(args)
    man = load_manifest(args.manifest)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = run_training(man, run, out)
    for row in rows:
        _emit(row)
    mean = float(np.mean([r["test_accuracy"] for r in rows]))
    _emit({"folds": len(rows), "mean_test_accuracy": mean, "summary": str(out / "summary.jsonl")})
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg = load_params(args.params)
    man = load_manifest(args.manifest)
    if man.channels != cfg.channels:
        raise ListenNetError(f"model expects {cfg.channels} channels, manifest has {man.channels}")
    run = RunConfig(window_seconds=cfg.window_len / man.fs, stride_seconds=args.stride_seconds,
                    align=args.align is not False)
    windows: list[DecisionWindow] = prepare_windows(man, run)
    if args.subject:
        windows = [w for w in windows if w.subject_id == args.subject]
    if run.align:
        windows, _ = align_by_subject(windows)
    x, y = stack_windows(windows)
    _emit({"accuracy": evaluate(params, x, y, cfg), "windows": int(len(x))})
    return EXIT_OK


def audit(cfg: ModelConfig) -> dict:
    params, macs = count_params(cfg), count_macs(cfg)
    return {"params": params, "macs": macs,
            "params_M": round(params / 1e6, 2), "macs_M": round(macs / 1e6, 2)}


def cmd_audit(args) -> int:
    cfg = ModelConfig(channels=args.channels, window_len=args.window_len, d_depth=args.d_depth,
                      k0=args.k0, dilation=args.dilation,
                      use_mste=not args.no_mste, use_cna=not args.no_cna)
    rec = audit(cfg)
    _emit(rec)
    print(f"Params (M): {rec['params_M']:.2f}   MACs (M): {rec['macs_M']:.2f}")
    return EXIT_OK


def selftest(seed: int = 0) -> tuple[bool, list[dict]]:
    """Full oracle battery. Returns (all passed, report records)."""
    records = [r.to_record() for r in verify.full_battery(seed)]
    worst = verify.conv_equivalence(200, seed)
    records.append({"name": "conv_equivalence[200 specs]", "max_abs_error": worst,
                    "gate": 1e-5, "passed": worst <= 1e-5})
    rng = np.random.default_rng(seed)
    dev = []
    for _ in range(5):
        c = int(rng.integers(2, 9))
        mix = rng.standard_normal((c, c))
        wins = [DecisionWindow(mix @ rng.standard_normal((c, 64)), "left", "s", "t", 0) for _ in range(6)]
        dev.append(verify.check_alignment(wins, compute_alignment(wins).matrix))
    records.append({"name": "alignment_whitening[5 scopes]", "max_deviation": max(dev),
                    "gate": 1e-6, "passed": max(dev) < 1e-6})
    return all(r["passed"] for r in records), records


def cmd_gradcheck(args) -> int:
    ok, records = selftest(args.seed)
    for r in records:
        _emit(r)
    _emit({"selftest": "pass" if ok else "fail", "checks": len(records)})
    return EXIT_OK if ok else EXIT_SELFTEST


# --------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p: argparse.ArgumentParser, model_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--window-seconds", type=float)
    p.add_argument("--stride-seconds", type=float)
    p.add_argument("--align", dest="align", action="store_true", default=None)
    p.add_argument("--no-align", dest="align", action="store_false")
    p.add_argument("--seed", type=int)
    if model_flags:
        p.add_argument("--mode", choices=["subject_dependent", "loso"])
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--val-fraction", type=float)
        p.add_argument("--output-dir")
        p.add_argument("--d-depth", type=int)
        p.add_argument("--k0", type=int)
        p.add_argument("--dilation", type=int)
        p.add_argument("--no-mste", action="store_true")
        p.add_argument("--no-cna", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="listennet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--trials", type=int, default=8)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--fs", type=float, default=64.0)
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--snr", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="normalize, align and window a dataset")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    _add_run_flags(p, model_flags=False)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train and evaluate under a protocol")
    p.add_argument("manifest")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters on a dataset")
    p.add_argument("params")
    p.add_argument("manifest")
    p.add_argument("--subject")
    p.add_argument("--stride-seconds", type=float)
    p.add_argument("--align", dest="align", action="store_true", default=None)
    p.add_argument("--no-align", dest="align", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="parameter and MAC counts")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--window-len", type=int, default=128)
    p.add_argument("--d-depth", type=int, default=16)
    p.add_argument("--k0", type=int, default=8)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--no-mste", action="store_true")
    p.add_argument("--no-cna", action="store_true")
    p.set_defaults(func=cmd_audit)

    for name in ("gradcheck", "selftest"):
        p = sub.add_parser(name, help="run the oracle battery")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(exc.original, ListenNetError) else EXIT_RUNTIME
    except ListenNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
