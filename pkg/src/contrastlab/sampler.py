"""Batch plans: shuffled, section-balanced and case-balanced samplers.

Every batch carries a framing that decides which text is paired with the
images: even global steps use the full report, odd steps walk the 12
sections in order (step 1 -> section 0, step 3 -> section 1, ...).  The
global step is threaded across epochs through ``step_offset`` so the
alternation never restarts.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from contrastlab import N_SECTIONS


class UnsatisfiableRatioError(ValueError):
    pass


@dataclass(frozen=True)
class Framing:
    """Text view paired with images: the full report (``section is None``) or one section."""

    section: int | None = None

    def __post_init__(self):
        if self.section is not None and not 0 <= self.section < N_SECTIONS:
            raise ValueError(f"section index must lie in [0, {N_SECTIONS}), got {self.section}")

    @property
    def is_full_report(self) -> bool:
        return self.section is None

    def __str__(self) -> str:
        return "full" if self.section is None else f"section:{self.section}"

    @classmethod
    def parse(cls, text: str) -> "Framing":
        if text == "full":
            return FULL_REPORT
        kind, _, idx = text.partition(":")
        if kind != "section" or not idx.isdigit():
            raise ValueError(f"cannot parse framing {text!r}")
        return cls(int(idx))


FULL_REPORT = Framing()


def framing_for_step(global_step: int) -> Framing:
    if global_step < 0:
        raise ValueError(f"global_step must be >= 0, got {global_step}")
    if global_step % 2 == 0:
        return FULL_REPORT
    return Framing(((global_step - 1) // 2) % N_SECTIONS)


@dataclass(frozen=True)
class RatioSpec:
    normal_per_batch: int
    abnormal_per_batch: int

    def __post_init__(self):
        if self.normal_per_batch < 0 or self.abnormal_per_batch < 0:
            raise ValueError(f"ratio counts must be nonnegative: {self}")
        if self.batch_size == 0:
            raise ValueError("ratio must describe a non-empty batch")

    @property
    def batch_size(self) -> int:
        return self.normal_per_batch + self.abnormal_per_batch


def ratio_from_percent(normal_pct: int, batch_size: int) -> RatioSpec:
    if not 0 <= normal_pct <= 100:
        raise ValueError(f"normal_pct must lie in [0, 100], got {normal_pct}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    # integer round-half-up of normal_pct * batch_size / 100
    normal = (2 * normal_pct * batch_size + 100) // 200
    return RatioSpec(normal, batch_size - normal)


class SamplerKind(str, Enum):
    SHUFFLED = "shuffled"
    SECTION_BALANCED = "section_balanced"
    CASE_BALANCED = "case_balanced"

    @property
    def display_name(self) -> str:
        return {"shuffled": "Shuffled", "section_balanced": "SectionBalanced",
                "case_balanced": "CaseBalanced"}[self.value]


@dataclass(frozen=True)
class Batch:
    ids: tuple[int, ...]
    framing: Framing
    global_step: int


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[Batch, ...]
    batch_size: int
    epoch_index: int
    step_offset: int = 0

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    @property
    def next_step(self) -> int:
        return self.step_offset + len(self.batches)


def _rng(seed: int, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, tag]))


def _make_plan(chunks: Sequence[Sequence[int]], batch_size: int, epoch: int, step_offset: int) -> BatchPlan:
    batches = tuple(
        Batch(tuple(int(i) for i in ids), framing_for_step(step_offset + b), step_offset + b)
        for b, ids in enumerate(chunks)
    )
    return BatchPlan(batches, batch_size, epoch, step_offset)


def shuffled_batches(ids: Sequence[int], batch_size: int, seed: int, epoch: int,
                     step_offset: int = 0) -> BatchPlan:
    """Seeded permutation of ``ids`` cut into full batches; the remainder is dropped."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if len(ids) < batch_size:
        raise ValueError(f"need at least batch_size={batch_size} ids, got {len(ids)}")
    ids = list(ids)
    perm = _rng(seed, epoch, 0x5F1).permutation(len(ids))
    n_batches = len(ids) // batch_size
    chunks = [[ids[j] for j in perm[b * batch_size:(b + 1) * batch_size]] for b in range(n_batches)]
    return _make_plan(chunks, batch_size, epoch, step_offset)


class _Pool:
    """Endless stream of seeded permutations over a fixed id set."""

    def __init__(self, ids: Sequence[int], rng: np.random.Generator):
        self.ids = list(ids)
        self.rng = rng
        self.order: list[int] = []
        self.pos = 0

    def _refill(self):
        self.order = [self.ids[j] for j in self.rng.permutation(len(self.ids))]
        self.pos = 0

    def draw(self, n: int) -> list[int]:
        out: list[int] = []
        deferred: list[int] = []
        while len(out) < n:
            if self.pos >= len(self.order):
                self._refill()
            sid = self.order[self.pos]
            self.pos += 1
            # a fresh pass can repeat ids already in this batch; defer them
            # unless the pool is too small to avoid repeats
            if sid in out and len(self.ids) >= n:
                deferred.append(sid)
                continue
            out.append(sid)
        self.order[self.pos:self.pos] = deferred
        return out


def section_balanced_batches(
    section_labels: Mapping[int, Sequence[bool]],
    ratio: RatioSpec,
    batch_size: int,
    seed: int,
    epoch: int,
    step_offset: int = 0,
) -> BatchPlan:
    """Batches whose normal/abnormal counts follow ``ratio`` under each batch's framing.

    ``section_labels`` maps study id to 12 per-section abnormal flags.  For a
    Section(k) batch the label is the flag of section k; for full-report
    batches it is the case label (abnormal if any section is abnormal).  The
    epoch has ``len(ids) // batch_size`` batches.  Each (framing, label) pool
    is consumed as successive seeded permutations, so a pool that runs out
    (typically the minority one) is reshuffled and reused within the epoch.
    """
    if ratio.batch_size != batch_size:
        raise ValueError(f"ratio {ratio} does not sum to batch_size {batch_size}")
    ids = list(section_labels)
    if len(ids) < batch_size:
        raise ValueError(f"need at least batch_size={batch_size} ids, got {len(ids)}")
    n_batches = len(ids) // batch_size

    def label(sid: int, framing: Framing) -> bool:
        flags = section_labels[sid]
        return any(flags) if framing.is_full_report else bool(flags[framing.section])

    framings = {framing_for_step(step_offset + b) for b in range(n_batches)}
    members: dict[tuple[Framing, bool], list[int]] = {}
    for fr in sorted(framings, key=lambda f: -1 if f.section is None else f.section):
        for is_abn in (False, True):
            members[(fr, is_abn)] = [sid for sid in ids if label(sid, fr) == is_abn]
            quota = ratio.abnormal_per_batch if is_abn else ratio.normal_per_batch
            if quota > 0 and not members[(fr, is_abn)]:
                where = "full report" if fr.is_full_report else f"section {fr.section}"
                kind = "abnormal" if is_abn else "normal"
                raise UnsatisfiableRatioError(
                    f"unsatisfiable ratio {ratio.normal_per_batch}:{ratio.abnormal_per_batch}: "
                    f"no {kind} studies for {where}"
                )

    rng = _rng(seed, epoch, 0x5EC)
    pools: dict[tuple[Framing, bool], _Pool] = {}

    def pool(key):
        if key not in pools:
            pools[key] = _Pool(members[key], rng)
        return pools[key]

    chunks = []
    for b in range(n_batches):
        fr = framing_for_step(step_offset + b)
        batch: list[int] = []
        if ratio.normal_per_batch:
            batch += pool((fr, False)).draw(ratio.normal_per_batch)
        if ratio.abnormal_per_batch:
            batch += pool((fr, True)).draw(ratio.abnormal_per_batch)
        order = rng.permutation(len(batch))
        chunks.append([batch[j] for j in order])
    return _make_plan(chunks, batch_size, epoch, step_offset)


def case_balanced_batches(
    case_labels: Mapping[int, Hashable],
    ratio: RatioSpec,
    batch_size: int,
    seed: int,
    epoch: int,
    step_offset: int = 0,
    normal_label: Hashable = "normal",
) -> BatchPlan:
    """Batches with exactly ``ratio`` normal/abnormal members by case label.

    Both pools are permuted without replacement; the epoch ends as soon as a
    pool with a positive quota cannot fill another batch.
    """
    if ratio.batch_size != batch_size:
        raise ValueError(f"ratio {ratio} does not sum to batch_size {batch_size}")
    normal = [sid for sid, lab in case_labels.items() if lab == normal_label]
    abnormal = [sid for sid, lab in case_labels.items() if lab != normal_label]
    limits = []
    for pool, quota, kind in ((normal, ratio.normal_per_batch, "normal"),
                              (abnormal, ratio.abnormal_per_batch, "abnormal")):
        if quota > 0:
            if not pool:
                raise UnsatisfiableRatioError(f"unsatisfiable ratio: no {kind} studies for a positive quota")
            limits.append(len(pool) // quota)
    n_batches = min(limits)
    if n_batches == 0:
        raise UnsatisfiableRatioError("pools too small to fill a single balanced batch")
    rng = _rng(seed, epoch, 0xCA5)
    normal = [normal[j] for j in rng.permutation(len(normal))]
    abnormal = [abnormal[j] for j in rng.permutation(len(abnormal))]
    n_per, a_per = ratio.normal_per_batch, ratio.abnormal_per_batch
    chunks = []
    for b in range(n_batches):
        batch = normal[b * n_per:(b + 1) * n_per] + abnormal[b * a_per:(b + 1) * a_per]
        order = rng.permutation(len(batch))
        chunks.append([batch[j] for j in order])
    return _make_plan(chunks, batch_size, epoch, step_offset)


def framing_label_counts(plan: BatchPlan, section_labels: Mapping[int, Sequence[bool]]) -> list[tuple[int, int]]:
    """(normal, abnormal) counts of every batch with respect to its own framing label."""
    out = []
    for batch in plan:
        if batch.framing.is_full_report:
            abn = sum(any(section_labels[i]) for i in batch.ids)
        else:
            abn = sum(bool(section_labels[i][batch.framing.section]) for i in batch.ids)
        out.append((len(batch.ids) - abn, abn))
    return out


def normal_count_diversity(counts: Sequence[tuple[int, int]]) -> int:
    return len(Counter(n for n, _ in counts))


def plan_to_dict(plan: BatchPlan) -> dict:
    return {
        "epoch_index": plan.epoch_index,
        "batch_size": plan.batch_size,
        "step_offset": plan.step_offset,
        "batches": [
            {"global_step": b.global_step, "framing": str(b.framing), "ids": list(b.ids)}
            for b in plan.batches
        ],
    }


def dump_plan(plan: BatchPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=1) + "\n")
