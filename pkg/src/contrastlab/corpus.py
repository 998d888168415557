"""Study/report data model, seeded synthetic corpus, splits and subsampling.

A study pairs an image feature vector with a report made of 12 anatomical
section texts.  Texts are integer token sequences over a synthetic
vocabulary: every section carries exactly one template n-gram (the section's
"normal" template, or the template of the finding planted there) embedded in
random filler tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence, TypeVar

import numpy as np

from contrastlab import N_SECTIONS

FORMAT_VERSION = 1

EMPTY_TOKEN = 0
NEGATION_TOKEN = 1
_FIRST_TEMPLATE_TOKEN = 2

K = TypeVar("K", bound=Hashable)


class CorpusFormatError(ValueError):
    """Raised when a corpus file cannot be parsed.

    ``offset`` is the byte offset of the failure when it is known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CaseLabelMode(str, Enum):
    ANY_ABNORMAL = "any_abnormal"
    ALL_ABNORMAL = "all_abnormal"


class CaseLabel(str, Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"


@dataclass(frozen=True)
class Finding:
    id: int
    name: str
    section_index: int


@dataclass(frozen=True)
class SectionRecord:
    section_index: int
    text: tuple[int, ...]
    findings_present: frozenset[int] = frozenset()

    @property
    def is_abnormal(self) -> bool:
        return bool(self.findings_present)


@dataclass(frozen=True, eq=False)
class Study:
    study_id: int
    patient_id: int
    image_features: np.ndarray
    sections: tuple[SectionRecord, ...]

    def __post_init__(self):
        if len(self.sections) != N_SECTIONS:
            raise ValueError(f"study {self.study_id}: expected {N_SECTIONS} sections, got {len(self.sections)}")
        for k, sec in enumerate(self.sections):
            if sec.section_index != k:
                raise ValueError(f"study {self.study_id}: section {k} has index {sec.section_index}")
        feats = np.array(self.image_features, dtype=np.float64)
        feats.setflags(write=False)
        object.__setattr__(self, "image_features", feats)
        object.__setattr__(self, "_full_report", tuple(tok for sec in self.sections for tok in sec.text))

    @property
    def full_report(self) -> tuple[int, ...]:
        return self._full_report

    @property
    def section_abnormal(self) -> tuple[bool, ...]:
        return tuple(sec.is_abnormal for sec in self.sections)

    @property
    def findings(self) -> frozenset[int]:
        return frozenset().union(*(sec.findings_present for sec in self.sections))

    def __eq__(self, other):
        if not isinstance(other, Study):
            return NotImplemented
        return (
            self.study_id == other.study_id
            and self.patient_id == other.patient_id
            and self.sections == other.sections
            and np.array_equal(self.image_features, other.image_features)
        )

    __hash__ = None


@dataclass(frozen=True)
class SyntheticConfig:
    n_studies: int = 500
    n_findings: int = 8
    d_img: int = 32
    vocab_size: int = 128
    tokens_per_section: int = 4
    abnormal_section_rate: float = 0.15
    noise_sigma: float = 0.1
    seed: int = 0
    template_len: int = 2
    max_studies_per_patient: int = 1

    def validate(self) -> None:
        for name in ("n_studies", "d_img", "vocab_size", "tokens_per_section", "template_len",
                     "max_studies_per_patient"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_findings < 1:
            raise ValueError(f"n_findings must be >= 1, got {self.n_findings}")
        if not 0.0 <= self.abnormal_section_rate <= 1.0:
            raise ValueError(f"abnormal_section_rate must lie in [0, 1], got {self.abnormal_section_rate}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if self.template_len < 2:
            # normal templates are the negation token plus section tokens
            raise ValueError("template_len must be >= 2")
        if self.tokens_per_section < self.template_len:
            raise ValueError("tokens_per_section must be >= template_len")
        needed = TemplateVocab.required_vocab(self.n_findings, self.template_len)
        if self.vocab_size < needed:
            raise ValueError(
                f"vocab_size {self.vocab_size} too small to encode templates; need at least {needed}"
            )

    @classmethod
    def from_dict(cls, data: Mapping) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        cfg = cls(**dict(data))
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class TemplateVocab:
    """Fixed token layout shared by the generator and the zero-shot prompts."""

    n_findings: int
    template_len: int
    vocab_size: int

    @staticmethod
    def required_vocab(n_findings: int, template_len: int) -> int:
        # empty + negation + section templates + finding templates + one filler
        return _FIRST_TEMPLATE_TOKEN + N_SECTIONS * (template_len - 1) + n_findings * template_len + 1

    def normal_template(self, section_index: int) -> tuple[int, ...]:
        width = self.template_len - 1
        start = _FIRST_TEMPLATE_TOKEN + section_index * width
        return (NEGATION_TOKEN, *range(start, start + width))

    def finding_template(self, finding_id: int) -> tuple[int, ...]:
        start = _FIRST_TEMPLATE_TOKEN + N_SECTIONS * (self.template_len - 1) + finding_id * self.template_len
        return tuple(range(start, start + self.template_len))

    @property
    def filler_start(self) -> int:
        return self.required_vocab(self.n_findings, self.template_len) - 1


@dataclass(frozen=True, eq=False)
class Corpus:
    studies: tuple[Study, ...]
    splits: Mapping[str, tuple[int, ...]]
    config: SyntheticConfig
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        studies = tuple(self.studies)
        object.__setattr__(self, "studies", studies)
        by_id = {s.study_id: s for s in studies}
        if len(by_id) != len(studies):
            raise ValueError("duplicate study ids")
        object.__setattr__(self, "_by_id", by_id)
        splits = {name: tuple(int(i) for i in ids) for name, ids in self.splits.items()}
        owner: dict[int, str] = {}
        for name, ids in splits.items():
            for sid in ids:
                if sid not in by_id:
                    raise ValueError(f"split {name!r} references unknown study {sid}")
                pid = by_id[sid].patient_id
                if owner.setdefault(pid, name) != name:
                    raise ValueError(f"patient {pid} appears in splits {owner[pid]!r} and {name!r}")
        object.__setattr__(self, "splits", splits)

    @property
    def rng_seed(self) -> int:
        return self.config.seed

    @property
    def vocab(self) -> TemplateVocab:
        return TemplateVocab(self.config.n_findings, self.config.template_len, self.config.vocab_size)

    @property
    def findings(self) -> tuple[Finding, ...]:
        return make_findings(self.config.n_findings)

    def study(self, study_id: int) -> Study:
        return self._by_id[study_id]

    def get_studies(self, ids: Iterable[int]) -> list[Study]:
        return [self._by_id[i] for i in ids]

    def split(self, name: str) -> tuple[int, ...]:
        try:
            return self.splits[name]
        except KeyError:
            raise KeyError(f"corpus has no split {name!r}; available: {sorted(self.splits)}") from None

    def with_splits(self, splits: Mapping[str, Sequence[int]]) -> "Corpus":
        return replace(self, splits=splits)

    def finding_truth(self, finding_id: int, ids: Iterable[int]) -> dict[int, bool]:
        return {i: finding_id in self._by_id[i].findings for i in ids}

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.config == other.config and self.splits == other.splits and self.studies == other.studies

    __hash__ = None


def make_findings(n_findings: int) -> tuple[Finding, ...]:
    return tuple(Finding(f, f"finding_{f:02d}", f % N_SECTIONS) for f in range(n_findings))


def generate_synthetic_corpus(
    config: SyntheticConfig,
    splits: Sequence[float] | Mapping[str, float] | None = (0.6, 0.2, 0.2),
) -> Corpus:
    """Generate a seeded paired corpus with planted findings.

    ``abnormal_section_rate`` is the expected fraction of all sections that
    are abnormal.  Only sections hosting at least one finding can be
    abnormal, so their per-section probability is scaled up accordingly
    (capped at 1).  Image features are ``indicator(findings) @ W + noise``
    with ``W`` a seeded Gaussian matrix.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    findings = make_findings(config.n_findings)
    vocab = TemplateVocab(config.n_findings, config.template_len, config.vocab_size)
    mixing = rng.normal(size=(config.n_findings, config.d_img))

    by_section: dict[int, list[int]] = defaultdict(list)
    for f in findings:
        by_section[f.section_index].append(f.id)
    hosting = sorted(by_section)
    p_abnormal = min(1.0, config.abnormal_section_rate * N_SECTIONS / len(hosting))

    T, L = config.tokens_per_section, config.template_len

    def place(template: tuple[int, ...]) -> tuple[int, ...]:
        text = rng.integers(vocab.filler_start, config.vocab_size, size=T)
        pos = int(rng.integers(0, T - L + 1))
        text[pos:pos + L] = template
        return tuple(int(t) for t in text)

    studies = []
    patient_id = -1
    remaining_for_patient = 0
    for sid in range(config.n_studies):
        if remaining_for_patient == 0:
            patient_id += 1
            remaining_for_patient = int(rng.integers(1, config.max_studies_per_patient + 1))
        remaining_for_patient -= 1

        indicator = np.zeros(config.n_findings)
        sections = []
        for k in range(N_SECTIONS):
            planted: frozenset[int] = frozenset()
            if k in by_section and rng.random() < p_abnormal:
                f = by_section[k][int(rng.integers(len(by_section[k])))]
                planted = frozenset({f})
                indicator[f] = 1.0
                text = place(vocab.finding_template(f))
            else:
                text = place(vocab.normal_template(k))
            sections.append(SectionRecord(k, text, planted))
        noise = rng.normal(size=config.d_img)
        feats = indicator @ mixing + config.noise_sigma * noise
        studies.append(Study(sid, patient_id, feats, tuple(sections)))

    corpus = Corpus(tuple(studies), {}, config)
    if splits is not None:
        corpus = corpus.with_splits(split_patient_level(corpus, splits, config.seed))
    return corpus


def derive_case_label(study: Study, mode: CaseLabelMode = CaseLabelMode.ANY_ABNORMAL) -> CaseLabel | None:
    """Whole-study label; ``None`` marks a mixed study excluded under ALL_ABNORMAL."""
    flags = study.section_abnormal
    if CaseLabelMode(mode) is CaseLabelMode.ANY_ABNORMAL:
        return CaseLabel.ABNORMAL if any(flags) else CaseLabel.NORMAL
    if all(flags):
        return CaseLabel.ABNORMAL
    if not any(flags):
        return CaseLabel.NORMAL
    return None


def case_labels(corpus: Corpus, ids: Iterable[int], mode: CaseLabelMode = CaseLabelMode.ANY_ABNORMAL
                ) -> dict[int, CaseLabel]:
    """Case labels for ``ids``, dropping studies excluded under ``mode``."""
    out = {}
    for sid in ids:
        label = derive_case_label(corpus.study(sid), mode)
        if label is not None:
            out[sid] = label
    return out


def round_half_up(x: float) -> int:
    # the epsilon absorbs float noise such as 0.3 * 5 == 1.4999999999999998
    return math.floor(x + 0.5 + 1e-9)


def _ceil(x: float) -> int:
    return math.ceil(x - 1e-9)


def allocate_counts(total: int, weights: Sequence[float]) -> list[int]:
    """Split ``total`` proportionally to ``weights``.

    Every share is rounded half-up except the largest one (first on ties),
    which absorbs the remainder so that the counts sum to ``total``.
    """
    wsum = float(sum(weights))
    if wsum <= 0:
        raise ValueError("weights must have a positive sum")
    largest = max(range(len(weights)), key=lambda i: (weights[i], -i))
    counts = [round_half_up(total * w / wsum) for w in weights]
    counts[largest] = 0
    counts[largest] = total - sum(counts)
    if counts[largest] < 0:
        raise ValueError(f"cannot allocate {total} items over weights {list(weights)}")
    return counts


def split_patient_level(
    corpus: Corpus,
    fractions: Sequence[float] | Mapping[str, float],
    seed: int,
) -> dict[str, tuple[int, ...]]:
    """Assign whole patients to splits.

    A 3-tuple of fractions names the splits train/val/test.  Patient counts
    per split follow :func:`allocate_counts`, so each split is within one
    patient of its requested fraction.
    """
    if not isinstance(fractions, Mapping):
        fractions = dict(zip(("train", "val", "test"), fractions, strict=True))
    names = list(fractions)
    weights = [float(fractions[n]) for n in names]
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be nonnegative and sum to 1, got {dict(fractions)}")

    by_patient: dict[int, list[int]] = defaultdict(list)
    for s in corpus.studies:
        by_patient[s.patient_id].append(s.study_id)
    patients = sorted(by_patient)
    n_nonzero = sum(w > 0 for w in weights)
    if len(patients) < n_nonzero:
        raise ValueError(f"{len(patients)} patients cannot fill {n_nonzero} splits")

    counts = allocate_counts(len(patients), weights)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A17]))
    order = [patients[i] for i in rng.permutation(len(patients))]
    out = {}
    start = 0
    for name, n in zip(names, counts):
        chosen = order[start:start + n]
        start += n
        out[name] = tuple(sorted(sid for pid in chosen for sid in by_patient[pid]))
    return out


def _stratified_take(labels: Mapping[K, Hashable], n_take: int, rng: np.random.Generator) -> set[K]:
    by_class: dict[Hashable, list[K]] = defaultdict(list)
    for key, lab in labels.items():
        by_class[lab].append(key)
    classes = sorted(by_class, key=str)
    counts = allocate_counts(n_take, [len(by_class[c]) for c in classes])
    taken: set[K] = set()
    for c, n in zip(classes, counts):
        members = by_class[c]
        perm = rng.permutation(len(members))
        taken.update(members[i] for i in perm[:n])
    return taken


def _parent_size(n: int, holdout_fraction: float) -> int:
    """Smallest parent size whose training part, after a holdout, is ``n``."""
    p = n
    while p - _ceil(holdout_fraction * p) < n:
        p += 1
    return p


def stratified_subsample(
    labels: Mapping[K, Hashable],
    fraction: float,
    seed: int,
    holdout_fraction: float = 0.0,
) -> list[K]:
    """Draw a class-stratified fraction of a labelled pool.

    With ``holdout_fraction == 0`` the subsample has ``round(fraction * n)``
    members.  With a positive ``holdout_fraction`` the pool is taken to be
    the training part of a parent set that had ``ceil(holdout_fraction * P)``
    members held out; the subsample then has the size of the training part of
    the same fraction of that parent.  For a 3,489-study training pool with a
    20% holdout this yields 1,396 and 697 studies at fractions 0.4 and 0.2.

    Class counts are proportional (see :func:`allocate_counts`), so the
    normal fraction drifts by at most half a study.  Ids come back in pool
    order.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("cannot subsample an empty pool")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must lie in [0, 1), got {holdout_fraction}")
    if holdout_fraction > 0:
        parent = round_half_up(fraction * _parent_size(n, holdout_fraction))
        n_take = parent - _ceil(holdout_fraction * parent)
    else:
        n_take = round_half_up(fraction * n)
    n_take = min(max(n_take, 1), n)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B5]))
    taken = _stratified_take(labels, n_take, rng)
    return [k for k in labels if k in taken]


def stratified_holdout_split(
    labels: Mapping[K, Hashable], holdout_fraction: float, seed: int
) -> tuple[list[K], list[K]]:
    """Class-stratified (kept, held_out) split with ``ceil(holdout_fraction * n)`` held out."""
    n = len(labels)
    if n < 2:
        raise ValueError("need at least two items to split")
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    n_hold = _ceil(holdout_fraction * n)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x401D]))
    held = _stratified_take(labels, n_hold, rng)
    return [k for k in labels if k not in held], [k for k in labels if k in held]


# --------------------------------------------------------------------------- io


def corpus_to_dict(corpus: Corpus) -> dict:
    return {
        "version": FORMAT_VERSION,
        "config": asdict(corpus.config),
        "studies": [
            {
                "study_id": s.study_id,
                "patient_id": s.patient_id,
                "image_features": [float(x) for x in s.image_features],
                "sections": [
                    {"text": list(sec.text), "findings": sorted(sec.findings_present)}
                    for sec in s.sections
                ],
            }
            for s in corpus.studies
        ],
        "splits": {name: list(ids) for name, ids in corpus.splits.items()},
    }


def corpus_bytes(corpus: Corpus) -> bytes:
    return json.dumps(corpus_to_dict(corpus), separators=(",", ":"), sort_keys=True).encode("utf-8")


def corpus_hash(corpus: Corpus) -> str:
    return hashlib.sha256(corpus_bytes(corpus)).hexdigest()


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_bytes(corpus_bytes(corpus))


def corpus_from_dict(data) -> Corpus:
    if not isinstance(data, dict):
        raise CorpusFormatError("corpus file must hold a JSON object")
    missing = {"version", "config", "studies", "splits"} - set(data)
    if missing:
        raise CorpusFormatError(f"corpus file missing keys: {sorted(missing)}")
    if data["version"] != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported corpus format version {data['version']!r}")
    try:
        config = SyntheticConfig.from_dict(data["config"])
        studies = []
        for rec in data["studies"]:
            sections = tuple(
                SectionRecord(k, tuple(int(t) for t in sec["text"]), frozenset(int(f) for f in sec["findings"]))
                for k, sec in enumerate(rec["sections"])
            )
            feats = np.array(rec["image_features"], dtype=np.float64)
            studies.append(Study(int(rec["study_id"]), int(rec["patient_id"]), feats, sections))
        return Corpus(tuple(studies), data["splits"], config)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"malformed corpus content: {exc}") from exc


def load_corpus(path: str | Path) -> Corpus:
    raw = Path(path).read_bytes()
    if not raw.strip():
        raise CorpusFormatError("empty corpus file")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusFormatError("corpus file is not valid UTF-8", exc.start) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise CorpusFormatError(f"invalid corpus JSON: {exc.msg}", offset) from exc
    return corpus_from_dict(data)


def corpus_stats(corpus: Corpus) -> dict:
    n = len(corpus.studies)
    abn_sections = sum(sum(s.section_abnormal) for s in corpus.studies)
    any_labels = case_labels(corpus, (s.study_id for s in corpus.studies), CaseLabelMode.ANY_ABNORMAL)
    all_labels = case_labels(corpus, (s.study_id for s in corpus.studies), CaseLabelMode.ALL_ABNORMAL)
    prevalence = {
        f.name: sum(f.id in s.findings for s in corpus.studies) / n for f in corpus.findings
    }
    return {
        "n_studies": n,
        "n_patients": len({s.patient_id for s in corpus.studies}),
        "splits": {name: len(ids) for name, ids in corpus.splits.items()},
        "abnormal_section_fraction": abn_sections / (n * N_SECTIONS),
        "case_labels_any_abnormal": {
            lab.value: sum(v is lab for v in any_labels.values()) for lab in CaseLabel
        },
        "case_labels_all_abnormal": {
            **{lab.value: sum(v is lab for v in all_labels.values()) for lab in CaseLabel},
            "excluded": n - len(all_labels),
        },
        "finding_prevalence": prevalence,
    }
