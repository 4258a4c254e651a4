"""Command-line entry point: ``sfada <subcommand> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import GLOBAL_KEYS, ConfigError, GlobalConfig, global_from_mapping, load_global_config
from .data import DataError, load_dataset, prepare_dataset, write_dataset
from .experiments import ExperimentMatrix, load_matrix, run_matrix
from .metrics import evaluate_dataset, summary_row
from .pipeline import StageError, adapt, evaluate_params, run_source_phase, select_samples, write_metrics_csv
from .projection import project_dataset, write_latents_csv
from .reference import load_references, save_references
from .segmenter import NumericError, load_checkpoint, predict_dataset, save_checkpoint
from .selection import STRATEGIES
from .synth import default_benchmark

OUT_ENV = "SFADA_OUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "sfada_out")) / name


def _set_overrides(items) -> dict[str, str]:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        overrides[key] = value
    return overrides


def _resolve_config(args) -> GlobalConfig:
    cfg = load_global_config(args.config) if args.config else GlobalConfig()
    cfg = global_from_mapping(_set_overrides(args.set), cfg)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _announce(command: str, cfg: GlobalConfig, extra: Optional[dict] = None) -> None:
    print(f"# sfada {command}: resolved config (seed {cfg.seed})")
    sys.stdout.write(cfg.render())
    for k, v in (extra or {}).items():
        print(f"# {k} = {v}")
    sys.stdout.flush()


def cmd_synth(args, cfg: GlobalConfig) -> int:
    out = Path(args.out) if args.out else _default_out("data")
    _announce("synth", cfg, {"out": out})
    for ds in default_benchmark(cfg.seed, args.size or cfg.resolution):
        write_dataset(ds, out / ds.name)
        print(f"wrote {len(ds)} samples to {out / ds.name}")
    return EXIT_OK


def cmd_train_source(args, cfg: GlobalConfig) -> int:
    out = Path(args.out) if args.out else _default_out("source")
    _announce("train-source", cfg, {"data": args.data, "out": out})
    source = load_dataset(args.data)
    result = run_source_phase(source, cfg.adaptation())
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, out / "source.ckpt")
    save_references(result.refs, out / "references.csv", cfg.pool_k)
    _, summary = evaluate_params(result.params, result.test_split)
    write_metrics_csv([summary_row("source_test", summary)], out / "metrics.csv")
    (out / "train_log.json").write_text(json.dumps(
        {"best_step": result.best_step, "val_history": result.val_history, "loss_trace": result.loss_trace}))
    print(f"best validation step {result.best_step}; source test DSC {summary.dsc_mean:.2f}")
    print(f"checkpoint: {out / 'source.ckpt'}")
    return EXIT_OK


def cmd_project(args, cfg: GlobalConfig) -> int:
    out = Path(args.out) if args.out else _default_out("latents.csv")
    _announce("project", cfg, {"ckpt": args.ckpt, "data": args.data, "out": out})
    params = load_checkpoint(args.ckpt)
    ds = prepare_dataset(load_dataset(args.data), cfg.resolution)
    out.parent.mkdir(parents=True, exist_ok=True)
    vectors = project_dataset(params, ds, cfg.pool_k)
    write_latents_csv(vectors, out)
    print(f"wrote {len(vectors)} latent vectors ({sum(not v.valid for v in vectors)} invalid) to {out}")
    return EXIT_OK


def cmd_select(args, cfg: GlobalConfig) -> int:
    out = Path(args.out) if args.out else _default_out("manifest.json")
    cfg = cfg.replace(budget_percent=args.budget) if args.budget is not None else cfg
    _announce("select", cfg, {"strategy": args.strategy, "out": out})
    params = load_checkpoint(args.ckpt)
    refs = load_references(args.refs)
    ds = prepare_dataset(load_dataset(args.data), cfg.resolution)
    manifest = select_samples(params, refs, ds, cfg.adaptation(args.strategy))
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    print(f"selected {len(manifest)} samples; manifest: {out}")
    return EXIT_OK


def cmd_adapt(args, cfg: GlobalConfig) -> int:
    out = Path(args.out) if args.out else _default_out("adapt")
    cfg = cfg.replace(budget_percent=args.budget) if args.budget is not None else cfg
    _announce("adapt", cfg, {"strategy": args.strategy, "semi": args.semi, "out": out})
    params = load_checkpoint(args.source_ckpt)
    refs = load_references(args.refs)
    report = adapt(params, refs, load_dataset(args.target_dir), cfg.adaptation(args.strategy, args.semi))
    report.write(out)
    for label, s in report.summaries.items():
        print(f"{label:12s} DSC {s.dsc_mean:6.2f} +- {s.dsc_std:5.2f}  HD95 {s.hd95_mean:6.2f}  ASD {s.asd_mean:6.2f}")
    print(f"annotations revealed: {report.labels_read}; report: {out / 'report.json'}")
    return EXIT_OK


def cmd_eval(args, cfg: GlobalConfig) -> int:
    out = Path(args.out) if args.out else _default_out("eval.csv")
    _announce("eval", cfg, {"ckpt": args.ckpt, "data": args.data, "out": out})
    params = load_checkpoint(args.ckpt)
    ds = prepare_dataset(load_dataset(args.data), cfg.resolution)
    missing = [s.id for s in ds if s.truth is None]
    if missing:
        raise DataError(f"sample {missing[0]!r} has no mask to evaluate against")
    preds = predict_dataset(params, ds)
    _, summary = evaluate_dataset([p.mask for p in preds], [s.truth for s in ds])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv([summary_row(Path(args.ckpt).stem, summary)], out)
    print(f"DSC {summary.dsc_mean:.2f} +- {summary.dsc_std:.2f} over {summary.n} samples; wrote {out}")
    return EXIT_OK


def cmd_bench(args, cfg: GlobalConfig) -> int:
    out = Path(args.out) if args.out else _default_out("bench")
    matrix = load_matrix(args.config) if args.config else ExperimentMatrix()
    if args.set:
        matrix = replace(matrix, config=global_from_mapping(_set_overrides(args.set), matrix.config))
    if args.seed is not None:
        matrix = replace(matrix, seeds=(args.seed,))
    print(f"# sfada bench: resolved config (seeds {' '.join(map(str, matrix.seeds))})")
    sys.stdout.write(matrix.render())
    written = run_matrix(matrix, out)
    for name, path in written.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help=f"override a config key ({', '.join(GLOBAL_KEYS)})")
    if seed:
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sfada", description="Source-free active domain adaptation toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic source/targetA/targetB datasets")
    _common(p)
    p.add_argument("--out")
    p.add_argument("--size", type=int, help="image side (defaults to resolution)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-source", help="train on a source dataset and fit reference centroids")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("project", help="write latent vectors for a dataset")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("select", help="choose target samples for annotation")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="stdr")
    p.add_argument("--budget", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("adapt", help="select, annotate and fine-tune on a target dataset")
    _common(p)
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--target-dir", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="stdr")
    p.add_argument("--budget", type=float)
    p.add_argument("--semi", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labelled dataset")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run the experiment matrix")
    _common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        cfg = GlobalConfig() if args.command == "bench" else _resolve_config(args)
        return args.func(args, cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        code = _classify(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


def _classify(exc: BaseException) -> Optional[int]:
    seen = set()
    while exc is not None and id(exc) not in seen:
        seen.add(id(exc))
        if isinstance(exc, ConfigError):
            return EXIT_USAGE
        if isinstance(exc, NumericError):
            return EXIT_NUMERIC
        if isinstance(exc, (DataError, FileNotFoundError)):
            return EXIT_DATA
        exc = exc.cause if isinstance(exc, StageError) else exc.__cause__
    return None


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
