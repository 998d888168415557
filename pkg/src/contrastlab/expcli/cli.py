"""``contrastlab`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from contrastlab.corpus import (
    CaseLabelMode,
    CorpusFormatError,
    SyntheticConfig,
    corpus_stats,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
)
from contrastlab.expcli.config import ConfigError, parse_config
from contrastlab.expcli.reports import emit_perfinding_matrix, emit_scaling_curve_data, emit_summary
from contrastlab.expcli.runner import ExperimentError, run_experiment, run_grid
from contrastlab.sampler import SamplerKind, dump_plan
from contrastlab.trainer import TrainConfig, build_plan, load_checkpoint
from contrastlab.zeroshot import evaluate_all_findings, write_zeroshot_csv

DEFAULT_GRID = "table8.cfg"


def _cmd_corpus_generate(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    splits = raw.pop("splits", {"train": 0.6, "val": 0.2, "test": 0.2})
    corpus = generate_synthetic_corpus(SyntheticConfig.from_dict(raw), splits)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.studies)} studies to {args.out}")
    return 0


def _cmd_corpus_stats(args) -> int:
    print(json.dumps(corpus_stats(load_corpus(args.input)), indent=2, sort_keys=True))
    return 0


def _run_dirs(args) -> list[Path]:
    if args.grid:
        return sorted(p for p in (Path(args.grid) / "runs").iterdir() if (p / "manifest.json").exists())
    return [Path(r) for r in args.runs]


def _cmd_train(args) -> int:
    grid = parse_config(args.spec)
    specs = grid.experiments
    if args.experiment:
        specs = tuple(s for s in specs if s.name == args.experiment)
        if not specs:
            raise SystemExit(f"no experiment named {args.experiment!r} in {args.spec}")
    elif len(specs) > 1:
        raise SystemExit(f"{args.spec} holds {len(specs)} experiments; pick one with --experiment")
    spec = specs[0]
    if args.epochs:
        spec = replace(spec, train=replace(spec.train, max_epochs=args.epochs))
    m = run_experiment(spec, grid.datasets[spec.dataset], args.out)
    print(",".join(m.summary_row()))
    return 0


def _cmd_grid(args) -> int:
    grid = parse_config(args.config)
    result = run_grid(grid, args.out, jobs=args.jobs, max_epochs=args.epochs)
    print((Path(args.out) / "summary.csv").read_text(), end="")
    for name, err in result.failures.items():
        print(f"FAILED {name}: {err}", file=sys.stderr)
    return 1 if result.failures else 0


def _cmd_zeroshot(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    report = evaluate_all_findings(ckpt.params, corpus, seed=args.seed, test_ids=corpus.split(args.split))
    write_zeroshot_csv(report, args.out)
    print(f"macro_f1={report.macro_f1:.2f}")
    return 0


def _cmd_report(args) -> int:
    dirs = _run_dirs(args)
    if args.kind == "scaling":
        flag = emit_scaling_curve_data(dirs, args.out)
        print(f"best_f1_monotone={int(flag)}")
    elif args.kind == "perfinding":
        emit_perfinding_matrix(dirs, args.out)
    else:
        emit_summary(dirs, args.out)
    return 0


def _cmd_dump_plan(args) -> int:
    corpus = load_corpus(args.corpus)
    cfg = TrainConfig(batch_size=args.batch_size, sampler=SamplerKind(args.sampler), ratio_pct=args.ratio,
                      seed=args.seed, label_mode=CaseLabelMode(args.label_mode))
    cfg.validate()
    plan = build_plan(corpus, corpus.split(args.split), cfg, epoch=args.epoch, step_offset=args.step_offset)
    dump_plan(plan, args.out)
    print(f"wrote {len(plan)} batches to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contrastlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="generate or inspect synthetic corpora")
    csub = corpus.add_subparsers(dest="action", required=True)
    gen = csub.add_parser("generate")
    gen.add_argument("--config", help="JSON generator settings, optionally with a 'splits' mapping")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_corpus_generate)
    stats = csub.add_parser("stats")
    stats.add_argument("--in", dest="input", required=True)
    stats.set_defaults(func=_cmd_corpus_stats)

    train = sub.add_parser("train", help="run one experiment from a config file")
    train.add_argument("--spec", required=True)
    train.add_argument("--experiment", help="experiment name when the config holds several")
    train.add_argument("--out", required=True)
    train.add_argument("--epochs", type=int, help="override max_epochs")
    train.set_defaults(func=_cmd_train)

    grid = sub.add_parser("grid", help="run every experiment in a config")
    grid.add_argument("--config", default=DEFAULT_GRID,
                      help=f"config path, or the name of a shipped config (default {DEFAULT_GRID})")
    grid.add_argument("--out", required=True)
    grid.add_argument("--epochs", type=int, help="override max_epochs for every experiment")
    grid.add_argument("--jobs", type=int, default=1, help="experiments to run in parallel processes")
    grid.set_defaults(func=_cmd_grid)

    zs = sub.add_parser("zeroshot", help="zero-shot evaluation of a checkpoint")
    zs.add_argument("--checkpoint", required=True)
    zs.add_argument("--corpus", required=True)
    zs.add_argument("--split", default="test")
    zs.add_argument("--seed", type=int, default=0)
    zs.add_argument("--out", required=True)
    zs.set_defaults(func=_cmd_zeroshot)

    report = sub.add_parser("report", help="tables built from finished runs")
    report.add_argument("kind", choices=("scaling", "perfinding", "summary"))
    src = report.add_mutually_exclusive_group(required=True)
    src.add_argument("--grid", help="grid output directory (uses every run under runs/)")
    src.add_argument("--runs", nargs="+", help="run directories, in column order")
    report.add_argument("--out", required=True)
    report.set_defaults(func=_cmd_report)

    sampler = sub.add_parser("sampler", help="sampler utilities")
    ssub = sampler.add_subparsers(dest="action", required=True)
    dp = ssub.add_parser("dump-plan", help="write one epoch's batch plan as JSON")
    dp.add_argument("--corpus", required=True)
    dp.add_argument("--split", default="train")
    dp.add_argument("--sampler", choices=[k.value for k in SamplerKind], default="shuffled")
    dp.add_argument("--ratio", type=int, help="normal percentage for balanced samplers")
    dp.add_argument("--label-mode", choices=[m.value for m in CaseLabelMode], default="any_abnormal")
    dp.add_argument("--batch-size", type=int, default=8)
    dp.add_argument("--seed", type=int, default=0)
    dp.add_argument("--epoch", type=int, default=1)
    dp.add_argument("--step-offset", type=int, default=0)
    dp.add_argument("--out", required=True)
    dp.set_defaults(func=_cmd_dump_plan)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorpusFormatError, ExperimentError, FileNotFoundError, ValueError) as exc:
        print(f"contrastlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
