"""Tables built from finished run directories."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from contrastlab.expcli.runner import SUMMARY_HEADER, RunManifest, run_manifest_from_dir
from contrastlab.zeroshot import read_zeroshot_csv

SCALING_HEADER = ("experiment", "training_size", "epoch", "macro_f1", "val_loss", "is_best", "best_f1_monotone")


def _read_curve(run_dir: Path) -> list[tuple[int, float, float]]:
    with open(run_dir / "curve.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["epoch"]), float(r["macro_f1"]), float(r["val_loss"])) for r in reader]


def best_f1_monotone(manifests: Sequence[RunManifest]) -> bool:
    """True when best macro F1 never decreases as training size grows."""
    ordered = sorted(manifests, key=lambda m: (m.training_size, m.name))
    return all(b.best_f1 >= a.best_f1 for a, b in zip(ordered, ordered[1:]))


def emit_scaling_curve_data(run_dirs: Sequence[str | Path], out: str | Path) -> bool:
    """Per-epoch macro F1 of every run, ordered by training size.

    Returns the monotonicity flag that is also written on every row.
    """
    manifests = sorted((run_manifest_from_dir(d) for d in run_dirs), key=lambda m: (m.training_size, m.name))
    if not manifests:
        raise ValueError("no runs given")
    flag = best_f1_monotone(manifests)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCALING_HEADER)
        for m in manifests:
            for epoch, f1, val in _read_curve(m.run_dir):
                writer.writerow([m.name, m.training_size, epoch, f"{f1:.2f}", repr(val),
                                 int(epoch == m.best_f1_epoch), int(flag)])
    return flag


def emit_perfinding_matrix(run_dirs: Sequence[str | Path], out: str | Path) -> list[str]:
    """Finding x experiment F1 (percent) from each run's best-checkpoint zeroshot.csv.

    Rows are sorted by the first experiment's F1, highest first.  Every run
    must report the same set of findings.
    """
    if not run_dirs:
        raise ValueError("no runs given")
    names, tables = [], []
    for d in run_dirs:
        f1s, _ = read_zeroshot_csv(Path(d) / "zeroshot.csv")
        names.append(run_manifest_from_dir(d).name)
        tables.append(f1s)
    findings = set(tables[0])
    for name, t in zip(names, tables):
        if set(t) != findings:
            diff = sorted(findings.symmetric_difference(t))
            raise ValueError(f"run {name!r} reports a different finding set (differs on {diff})")
    order = sorted(findings, key=lambda f: (-tables[0][f], f))
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["finding", *names])
        for f in order:
            writer.writerow([f, *(f"{100.0 * t[f]:.2f}" for t in tables)])
    return order


def emit_summary(run_dirs: Sequence[str | Path], out: str | Path) -> None:
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for d in run_dirs:
            writer.writerow(run_manifest_from_dir(d).summary_row())
