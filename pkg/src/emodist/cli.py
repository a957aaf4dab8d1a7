"""Command-line entry point.

Subcommands: gen-synth, train, distill, eval, export-embeddings, inspect.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every run echoes its configuration into <out>/config.json.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from emodist.data import (DataError, Manifest, SynthSpec, gen_synthetic,
                          read_feature_header)
from emodist.evaluation import evaluate, export_embeddings, rmse_by_valence_bin
from emodist.model import ModelConfig, build_model, load_model, param_report
from emodist.nnstack.checkpoint import CheckpointError
from emodist.training import FitConfig, NumericError, fit, prepare_teacher_cache

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _feature_view(spec: str | None) -> list[str] | None:
    """Map a --features argument to view directories (relative to the
    manifest): mfb | embed | dir:<path> | fused:<p1>,<p2>,..."""
    if spec is None:
        return None
    if spec == "mfb":
        return ["features/mfb"]
    if spec == "embed":
        return ["features/embed_a", "features/embed_b"]
    if spec.startswith("dir:"):
        return [spec[4:]]
    if spec.startswith("fused:"):
        paths = [p for p in spec[6:].split(",") if p]
        if len(paths) < 2:
            raise UsageError("fused: needs at least two comma-separated dirs")
        return paths
    raise UsageError(f"unknown --features value {spec!r} "
                     "(use mfb | embed | dir:<path> | fused:<p1>,<p2>)")


def _load_manifest(path: str, features: str | None) -> Manifest:
    manifest = Manifest.load(path)
    view = _feature_view(features)
    return manifest.with_view(view) if view else manifest


def _echo_config(out_dir: Path, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2,
                                                    sort_keys=True) + "\n")


def _input_dim(manifest: Manifest) -> int:
    rec = manifest.records[0]
    return sum(read_feature_header(p)[0] for p in manifest.resolve(rec))


def _report_lines(report, model) -> str:
    lines = [
        f"epochs run:     {report.epochs_run}"
        + (" (stopped early)" if report.stopped_early else ""),
        f"best epoch:     {report.best_epoch}",
        "best val CCC:   " + "  ".join(
            f"{k}={v:.4f}" for k, v in report.best_val_ccc.items()),
        f"parameters:     {param_report(model)['params']}",
    ]
    return "\n".join(lines)


def cmd_gen_synth(args) -> int:
    with open(args.spec) as f:
        raw = json.load(f)
    spec = SynthSpec(**raw)
    out = Path(args.out)
    _echo_config(out, args)
    manifest = gen_synthetic(spec, out)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.records)} utterances to {out} "
          f"(train/val/test = {counts['train']}/{counts['val']}/{counts['test']})")
    return EXIT_OK


def _run_fit(args, manifest: Manifest, teacher_cache=None) -> int:
    out = Path(args.out)
    _echo_config(out, args)
    cfg = ModelConfig(input_dim=_input_dim(manifest),
                      use_tconv=(args.arch == "tcgru"))
    model = build_model(cfg, seed=args.seed)
    fit_cfg = FitConfig(max_epochs=args.max_epochs, patience=args.patience,
                        batch_size=args.batch_size, seed=args.seed, lr=args.lr)
    report = fit(model, manifest, fit_cfg, teacher_cache=teacher_cache,
                 log_path=out / "train_log.jsonl")
    model.save(out / "model.emow")
    print(_report_lines(report, model))
    if report.diverged:
        print("training diverged (non-finite loss); kept last good checkpoint",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = _load_manifest(args.manifest, args.features)
    return _run_fit(args, manifest)


def cmd_distill(args) -> int:
    teacher = load_model(args.teacher_ckpt)
    teacher_manifest = _load_manifest(args.manifest, args.teacher_features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = prepare_teacher_cache(teacher, teacher_manifest,
                                  out_path=out / "teacher_cache.emot")
    print(f"teacher cache: {len(cache)} utterances "
          f"(mean gamma {sum(cache.gammas.values()) / len(cache):.4f})")
    student_manifest = _load_manifest(args.manifest, args.student_features)
    return _run_fit(args, student_manifest, teacher_cache=cache)


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    manifest = _load_manifest(args.manifest, args.features)
    ccc = {k: float(v) for k, v in evaluate(model, manifest, args.split).items()}
    bins = rmse_by_valence_bin(model, manifest, args.split, n_bins=args.bins)
    report = {"split": args.split,
              "n_utterances": len(manifest.split(args.split)),
              "ccc": ccc, "rmse_by_valence_bin": bins}
    print(f"split {args.split}: " + "  ".join(
        f"CCC_{k}={v:.4f}" for k, v in ccc.items()))
    print(f"{'bin':>4} {'range':>12} {'count':>6} {'rmse':>8}")
    for row in bins:
        print(f"{row['bin']:>4} [{row['lo']:.2f},{row['hi']:.2f}] "
              f"{row['count']:>6} {row['rmse']:>8.4f}")
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2,
                                                sort_keys=True) + "\n")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model = load_model(args.ckpt)
    manifest = _load_manifest(args.manifest, args.features)
    n = export_embeddings(model, manifest, args.split, args.out)
    print(f"wrote {n} embeddings to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_model(args.ckpt)
    rep = param_report(model)
    print(f"architecture:   {'tcgru' if model.cfg.use_tconv else 'gru'}")
    print(f"input dim:      {model.cfg.input_dim}")
    print(f"parameters:     {rep['params']}")
    print(f"size at fp32:   {rep['megabytes_fp32']:.2f} MB")
    for part, n in sorted(rep["by_part"].items()):
        print(f"  {part:<10} {n}")
    return EXIT_OK


def _add_fit_args(p) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", choices=("gru", "tcgru"), default="gru")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-4)


def build_parser() -> _Parser:
    parser = _Parser(prog="emodist",
                     description="dimensional emotion estimation stack")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic corpus")
    p.add_argument("--spec", required=True, help="JSON with n_utts, seed, "
                   "teacher_dim, student_dim, noise")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model")
    _add_fit_args(p)
    p.add_argument("--features", default=None,
                   help="mfb | embed | dir:<path> | fused:<p1>,<p2>")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="teacher-cache then distill a student")
    _add_fit_args(p)
    p.add_argument("--teacher-ckpt", required=True)
    p.add_argument("--teacher-features", default="embed")
    p.add_argument("--student-features", default="mfb")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="CCC report on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--features", default=None)
    p.add_argument("--report", default=None, help="write JSON report here")
    p.add_argument("--bins", type=int, default=6)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="utterance embeddings as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--features", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("inspect", help="parameter report of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run(sys.argv[1:]))
