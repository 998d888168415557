"""Strict JSON experiment configs.

Layout::

    {
      "version": 1,
      "datasets": {"<name>": {"family": "full" | "nab", "generator": {...}, ...}},
      "defaults": {<TrainConfig overrides>},
      "experiments": [{"name": ..., "dataset": ..., "sampler": ..., ...}]
    }

Unknown keys anywhere are rejected, and every error carries the line and
column it refers to.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from contrastlab.corpus import CaseLabelMode, SyntheticConfig
from contrastlab.sampler import SamplerKind
from contrastlab.trainer import TrainConfig

CONFIG_VERSION = 1
ALLOWED_FRACTIONS = (0.2, 0.4, 1.0)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None, source: str = "<config>"):
        self.line, self.column = line, column
        where = source if line is None else f"{source}:{line}:{column}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class DatasetSpec:
    """How to build one synthetic dataset family.

    ``full``: patient-level train/val/test split of the generated corpus.
    ``nab``: a patient-level test split is held out first; the remaining
    pool is filtered by case label and split by class into train/val with
    ``ceil(val_fraction * n)`` held out.
    """

    name: str
    family: str
    generator: SyntheticConfig
    splits: tuple[float, float, float] = (0.6, 0.2, 0.2)
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    label_mode: CaseLabelMode = CaseLabelMode.ANY_ABNORMAL

    @property
    def display_name(self) -> str:
        return {"full": "Full", "nab": "NAB"}[self.family]


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    dataset: str
    data_fraction: float = 1.0
    sampler: SamplerKind = SamplerKind.SHUFFLED
    ratio_pct: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset,
            "data_fraction": self.data_fraction,
            "sampler": self.sampler.value,
            "ratio_pct": self.ratio_pct,
            "train": self.train.to_dict(),
        }


@dataclass(frozen=True)
class GridConfig:
    datasets: Mapping[str, DatasetSpec]
    experiments: tuple[ExperimentSpec, ...]
    source: str = "<config>"


def _locate(text: str, key: str) -> tuple[int | None, int | None]:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    if m is None:
        return None, None
    line = text.count("\n", 0, m.start()) + 1
    col = m.start() - (text.rfind("\n", 0, m.start()) + 1) + 1
    return line, col


class _Checker:
    def __init__(self, text: str, source: str):
        self.text, self.source = text, source

    def error(self, message: str, key: str | None = None) -> ConfigError:
        line, col = _locate(self.text, key) if key else (None, None)
        return ConfigError(message, line, col, self.source)

    def obj(self, value: Any, context: str, allowed: set[str], required: set[str] = frozenset(),
            anchor: str | None = None) -> dict:
        if not isinstance(value, dict):
            raise self.error(f"{context} must be an object", anchor)
        unknown = sorted(set(value) - allowed)
        if unknown:
            raise self.error(f"unknown key {unknown[0]!r} in {context}", unknown[0])
        missing = sorted(required - set(value))
        if missing:
            raise self.error(f"{context} is missing required key {missing[0]!r}", anchor)
        return value


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"sampler", "ratio_pct"}
_GENERATOR_KEYS = {f.name for f in fields(SyntheticConfig)}


def _train_config(chk: _Checker, overrides: Mapping, base: TrainConfig, context: str) -> TrainConfig:
    chk.obj(overrides, context, _TRAIN_KEYS)
    try:
        return replace(base, **overrides)
    except (TypeError, ValueError) as exc:
        raise chk.error(f"{context}: {exc}", next(iter(overrides), None)) from exc


def _dataset(chk: _Checker, name: str, raw: Any) -> DatasetSpec:
    raw = chk.obj(raw, f"dataset {name!r}",
                  {"family", "generator", "splits", "test_fraction", "val_fraction", "label_mode"},
                  {"family", "generator"}, anchor=name)
    family = raw["family"]
    if family not in ("full", "nab"):
        raise chk.error(f"dataset {name!r}: family must be 'full' or 'nab', got {family!r}", "family")
    gen = chk.obj(raw["generator"], f"dataset {name!r} generator", _GENERATOR_KEYS, anchor="generator")
    try:
        generator = SyntheticConfig.from_dict(gen)
    except (TypeError, ValueError) as exc:
        raise chk.error(f"dataset {name!r} generator: {exc}", "generator") from exc
    kwargs: dict[str, Any] = {}
    if "splits" in raw:
        if family != "full":
            raise chk.error(f"dataset {name!r}: 'splits' only applies to the full family", "splits")
        splits = chk.obj(raw["splits"], f"dataset {name!r} splits", {"train", "val", "test"},
                         {"train", "val", "test"}, anchor="splits")
        kwargs["splits"] = (float(splits["train"]), float(splits["val"]), float(splits["test"]))
        if abs(sum(kwargs["splits"]) - 1.0) > 1e-9:
            raise chk.error(f"dataset {name!r}: split fractions must sum to 1", "splits")
    for key in ("test_fraction", "val_fraction"):
        if key in raw:
            if family != "nab":
                raise chk.error(f"dataset {name!r}: {key!r} only applies to the nab family", key)
            if not 0 < float(raw[key]) < 1:
                raise chk.error(f"dataset {name!r}: {key} must lie in (0, 1)", key)
            kwargs[key] = float(raw[key])
    if "label_mode" in raw:
        try:
            kwargs["label_mode"] = CaseLabelMode(raw["label_mode"])
        except ValueError as exc:
            raise chk.error(f"dataset {name!r}: {exc}", "label_mode") from exc
    return DatasetSpec(name, family, generator, **kwargs)


def _experiment(chk: _Checker, raw: Any, datasets: Mapping[str, DatasetSpec], defaults: TrainConfig,
                index: int) -> ExperimentSpec:
    raw = chk.obj(raw, f"experiment #{index}", {"name", "dataset", "data_fraction", "sampler", "ratio", "train"},
                  {"name", "dataset", "sampler"}, anchor="experiments")
    name = raw["name"]
    if not isinstance(name, str) or not re.fullmatch(r"[A-Za-z0-9_.\-]+", name):
        raise chk.error(f"experiment #{index}: name must be a non-empty [A-Za-z0-9_.-] string", "name")
    ctx = f"experiment {name!r}"
    if raw["dataset"] not in datasets:
        raise chk.error(f"{ctx}: unknown dataset {raw['dataset']!r}", "dataset")
    try:
        sampler = SamplerKind(raw["sampler"])
    except ValueError:
        choices = ", ".join(k.value for k in SamplerKind)
        raise chk.error(f"{ctx}: sampler must be one of {choices}", "sampler") from None
    ratio = raw.get("ratio")
    if sampler is SamplerKind.SHUFFLED and ratio is not None:
        raise chk.error(f"{ctx}: a ratio is only meaningful for balanced samplers", "ratio")
    if sampler is not SamplerKind.SHUFFLED:
        if not isinstance(ratio, int) or isinstance(ratio, bool) or not 0 <= ratio <= 100:
            raise chk.error(f"{ctx}: {sampler.value} needs an integer normal percentage 'ratio' in [0, 100]",
                            "ratio")
    fraction = float(raw.get("data_fraction", 1.0))
    if not any(abs(fraction - f) < 1e-12 for f in ALLOWED_FRACTIONS):
        raise chk.error(f"{ctx}: data_fraction must be one of {ALLOWED_FRACTIONS}", "data_fraction")
    train = _train_config(chk, raw.get("train", {}), defaults, f"{ctx} train")
    train = replace(train, sampler=sampler, ratio_pct=ratio)
    try:
        train.validate()
    except ValueError as exc:
        raise chk.error(f"{ctx}: {exc}", "train") from exc
    return ExperimentSpec(name, raw["dataset"], fraction, sampler, ratio, train)


def parse_config_text(text: str, source: str = "<config>") -> GridConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno, exc.colno, source) from exc
    chk = _Checker(text, source)
    chk.obj(data, "config", {"version", "datasets", "defaults", "experiments"}, {"version", "experiments"})
    if data["version"] != CONFIG_VERSION:
        raise chk.error(f"unsupported config version {data['version']!r}", "version")
    datasets_raw = chk.obj(data.get("datasets", {}), "datasets", set(data.get("datasets", {}) or {}),
                           anchor="datasets")
    datasets = {name: _dataset(chk, name, raw) for name, raw in datasets_raw.items()}
    defaults = _train_config(chk, data.get("defaults", {}), TrainConfig(), "defaults")
    experiments_raw = data["experiments"]
    if not isinstance(experiments_raw, list):
        raise chk.error("experiments must be a list", "experiments")
    if not experiments_raw:
        raise chk.error("no experiments", "experiments")
    experiments = tuple(_experiment(chk, raw, datasets, defaults, i) for i, raw in enumerate(experiments_raw))
    names = [e.name for e in experiments]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise chk.error(f"duplicate experiment name {dupes[0]!r}", "experiments")
    return GridConfig(datasets, experiments, source)


def resolve_config_path(path: str | Path) -> Path:
    """A path on disk, or the name of a config shipped with the package."""
    p = Path(path)
    if p.exists():
        return p
    shipped = resources.files("contrastlab") / "configs" / p.name
    if shipped.is_file():
        return Path(str(shipped))
    raise FileNotFoundError(f"config {path} not found (and no shipped config of that name)")


def parse_config(path: str | Path) -> GridConfig:
    p = resolve_config_path(path)
    return parse_config_text(p.read_text(), str(path))
