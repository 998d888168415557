"""Dataset materialization, single runs and experiment grids."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
from functools import lru_cache
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from contrastlab import __version__
from contrastlab.corpus import (
    Corpus,
    case_labels,
    corpus_hash,
    generate_synthetic_corpus,
    stratified_holdout_split,
    stratified_subsample,
)
from contrastlab.expcli.config import DatasetSpec, ExperimentSpec, GridConfig
from contrastlab.sampler import BatchPlan, dump_plan
from contrastlab.trainer import Criterion, build_plan, run_training, select_best_checkpoint
from contrastlab.zeroshot import evaluate_all_findings, write_zeroshot_csv

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ("Experiment", "Dataset", "TrainingSize", "Sampler", "BestF1", "BestEpoch")
SELECTION_HEADER = ("Experiment", "BestF1Epoch", "BestF1", "BestValLossEpoch", "BestValLoss", "F1AtBestValLoss")
FAILED = "FAILED"


class ExperimentError(RuntimeError):
    def __init__(self, name: str, cause: BaseException):
        self.name, self.cause = name, cause
        super().__init__(f"experiment {name!r} failed: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class PreparedData:
    """A corpus with the id lists one experiment trains, validates and tests on."""

    corpus: Corpus
    train_ids: tuple[int, ...]
    val_ids: tuple[int, ...]
    test_ids: tuple[int, ...]


@lru_cache(maxsize=8)
def build_dataset_corpus(ds: DatasetSpec) -> Corpus:
    if ds.family == "full":
        train, val, test = ds.splits
        return generate_synthetic_corpus(ds.generator, {"train": train, "val": val, "test": test})
    return generate_synthetic_corpus(ds.generator, {"pool": 1.0 - ds.test_fraction, "test": ds.test_fraction})


def prepare_data(ds: DatasetSpec, corpus: Corpus, data_fraction: float, seed: int) -> PreparedData:
    """Train/val/test ids for ``data_fraction`` of a dataset.

    For the NAB family, the case-labeled pool is split by class into
    train/val and a fraction is drawn from the training side as if it had
    been carved out of the matching share of the whole pool.
    """
    if ds.family == "full":
        train = list(corpus.split("train"))
        if data_fraction < 1.0:
            labels = case_labels(corpus, train, ds.label_mode)
            train = stratified_subsample(labels, data_fraction, seed)
        return PreparedData(corpus, tuple(train), corpus.split("val"), corpus.split("test"))
    pool = case_labels(corpus, corpus.split("pool"), ds.label_mode)
    kept, held = stratified_holdout_split(pool, ds.val_fraction, seed)
    train = kept
    if data_fraction < 1.0:
        train = stratified_subsample({i: pool[i] for i in kept}, data_fraction, seed,
                                     holdout_fraction=ds.val_fraction)
    return PreparedData(corpus, tuple(train), tuple(held), corpus.split("test"))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    name: str
    dataset: str
    family: str
    training_size: int
    sampler: str
    best_f1: float
    best_f1_epoch: int
    best_val_loss: float
    best_val_loss_epoch: int
    f1_at_best_val_loss: float
    run_dir: Path

    def summary_row(self) -> list[str]:
        return [self.name, self.family, str(self.training_size), self.sampler, f"{self.best_f1:.2f}",
                str(self.best_f1_epoch)]

    def selection_row(self) -> list[str]:
        return [self.name, str(self.best_f1_epoch), f"{self.best_f1:.2f}", str(self.best_val_loss_epoch),
                repr(self.best_val_loss), f"{self.f1_at_best_val_loss:.2f}"]


def run_manifest_from_dir(run_dir: str | Path) -> RunManifest:
    run_dir = Path(run_dir)
    data = json.loads((run_dir / "manifest.json").read_text())
    by_f1, by_val = data["best_by_macro_f1"], data["best_by_val_loss"]
    return RunManifest(
        data["experiment"]["name"], data["experiment"]["dataset"], data["family"], data["train_size"],
        data["sampler_display"], by_f1["macro_f1"], by_f1["epoch"], by_val["val_loss"], by_val["epoch"],
        by_val["macro_f1"], run_dir,
    )


def _write_curve(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "val_loss", "macro_f1"))
        for r in records:
            writer.writerow([r.epoch, repr(r.val_loss), f"{r.zero_shot_macro_f1:.2f}"])


def run_experiment(spec: ExperimentSpec, ds: DatasetSpec, out_dir: str | Path, corpus: Corpus | None = None
                   ) -> RunManifest:
    """Train one experiment, evaluate every checkpoint zero-shot and write its run directory.

    Layout of ``out_dir``: ``metrics.csv``, ``curve.csv``, ``plan_epoch_0001.json``,
    ``checkpoints/epoch_NNNN``, ``zeroshot/epoch_NNNN.csv``, ``zeroshot.csv``
    (best checkpoint by macro F1) and ``manifest.json``.
    """
    out_dir = Path(out_dir)
    try:
        if out_dir.exists():
            shutil.rmtree(out_dir)
        (out_dir / "zeroshot").mkdir(parents=True)
        corpus = build_dataset_corpus(ds) if corpus is None else corpus
        data = prepare_data(ds, corpus, spec.data_fraction, spec.train.seed)
        plan: BatchPlan = build_plan(corpus, data.train_ids, spec.train, epoch=1, step_offset=0)
        dump_plan(plan, out_dir / "plan_epoch_0001.json")

        def on_eval(params, epoch: int) -> float:
            report = evaluate_all_findings(params, corpus, seed=spec.train.seed, test_ids=data.test_ids)
            write_zeroshot_csv(report, out_dir / "zeroshot" / f"epoch_{epoch:04d}.csv")
            return report.macro_f1

        result = run_training(corpus, spec.train, out_dir, train_ids=data.train_ids, val_ids=data.val_ids,
                              on_eval=on_eval)
        by_f1 = select_best_checkpoint(result.checkpoints, Criterion.MACRO_F1)
        by_val = select_best_checkpoint(result.checkpoints, Criterion.VAL_LOSS)
        shutil.copyfile(out_dir / "zeroshot" / f"epoch_{by_f1.epoch:04d}.csv", out_dir / "zeroshot.csv")
        _write_curve(out_dir / "curve.csv", result.checkpoints)

        manifest = json.loads((out_dir / "manifest.json").read_text())
        manifest.update({
            "experiment": spec.to_dict(),
            "family": ds.display_name,
            "sampler_display": spec.sampler.display_name,
            "dataset_generator": asdict(ds.generator),
            "build": f"contrastlab {__version__}",
            "test_size": len(data.test_ids),
            "corpus_hash": corpus_hash(corpus),
            "best_by_macro_f1": {"epoch": by_f1.epoch, "macro_f1": by_f1.zero_shot_macro_f1,
                                 "val_loss": by_f1.val_loss, "checkpoint": by_f1.path.relative_to(out_dir).as_posix()},
            "best_by_val_loss": {"epoch": by_val.epoch, "macro_f1": by_val.zero_shot_macro_f1,
                                 "val_loss": by_val.val_loss, "checkpoint": by_val.path.relative_to(out_dir).as_posix()},
        })
        manifest["outputs"] = {
            p.relative_to(out_dir).as_posix(): sha256_file(p)
            for p in sorted(out_dir.rglob("*")) if p.is_file() and p.name != "manifest.json"
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except Exception as exc:
        raise ExperimentError(spec.name, exc) from exc
    return run_manifest_from_dir(out_dir)


def verify_outputs(run_dir: str | Path) -> list[str]:
    """Relative paths whose sha256 no longer matches the manifest."""
    run_dir = Path(run_dir)
    recorded = json.loads((run_dir / "manifest.json").read_text())["outputs"]
    return [rel for rel, digest in sorted(recorded.items())
            if not (run_dir / rel).is_file() or sha256_file(run_dir / rel) != digest]


# ------------------------------------------------------------------- grid


@dataclass(frozen=True)
class GridResult:
    out_dir: Path
    manifests: tuple[RunManifest | None, ...]
    failures: Mapping[str, str]


def _grid_worker(args) -> tuple[str, RunManifest | None, str | None]:
    spec, ds, run_dir = args
    try:
        return spec.name, run_experiment(spec, ds, run_dir), None
    except ExperimentError as exc:
        logger.error("%s", exc)
        return spec.name, None, str(exc)


def write_summary(path: Path, names: Sequence[str], specs: Sequence[ExperimentSpec],
                  datasets: Mapping[str, DatasetSpec], manifests: Sequence[RunManifest | None]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for name, spec, m in zip(names, specs, manifests):
            if m is not None:
                writer.writerow(m.summary_row())
            else:
                writer.writerow([name, datasets[spec.dataset].display_name, "", spec.sampler.display_name,
                                 FAILED, ""])


def run_grid(grid: GridConfig, out_dir: str | Path, jobs: int = 1, max_epochs: int | None = None) -> GridResult:
    """Run every experiment into ``out_dir/runs/<name>`` and write the summary tables.

    A failed experiment is recorded in ``failures.json`` and as a FAILED row
    in ``summary.csv``; the remaining experiments still run.  Rows follow
    config order whatever ``jobs`` is.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = [replace(s, train=replace(s.train, max_epochs=max_epochs)) if max_epochs else s
             for s in grid.experiments]
    tasks = [(s, grid.datasets[s.dataset], out_dir / "runs" / s.name) for s in specs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_worker, tasks))
    else:
        results = [_grid_worker(t) for t in tasks]
    manifests = tuple(m for _, m, _ in results)
    failures = {name: err for name, _, err in results if err is not None}

    names = [s.name for s in specs]
    write_summary(out_dir / "summary.csv", names, specs, grid.datasets, manifests)
    with open(out_dir / "selection.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SELECTION_HEADER)
        for m in manifests:
            if m is not None:
                writer.writerow(m.selection_row())
    (out_dir / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    return GridResult(out_dir, manifests, failures)


def read_summary(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_HEADER:
            raise ValueError(f"{path}: unexpected summary header {reader.fieldnames}")
        return list(reader)
