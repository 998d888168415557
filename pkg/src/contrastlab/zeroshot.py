"""Prompt-ensemble zero-shot classification with per-finding and macro F1.

For each finding the test studies are balanced to equal positive and negative
counts.  A study is called positive when its image embedding's mean cosine
similarity to the positive prompts strictly exceeds the mean similarity to
the negative prompts.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from contrastlab.corpus import NEGATION_TOKEN, Corpus, Finding, TemplateVocab
from contrastlab.model import EncoderParams, encode_images, encode_texts

logger = logging.getLogger(__name__)

CSV_HEADER = ("finding", "tp", "fp", "tn", "fn", "f1")


class NoEvaluableFindingsError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSet:
    finding_id: int
    positive_prompts: tuple[tuple[int, ...], ...]
    negative_prompts: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.positive_prompts or not self.negative_prompts:
            raise ValueError(f"finding {self.finding_id}: prompt lists must be non-empty")


@dataclass(frozen=True)
class FindingEvalResult:
    finding_id: int
    name: str
    tp: int
    fp: int
    tn: int
    fn: int
    f1: float
    eval_ids: tuple[int, ...]


@dataclass(frozen=True)
class ZeroShotReport:
    results: tuple[FindingEvalResult, ...]
    unevaluable: tuple[int, ...]

    @property
    def macro_f1(self) -> float:
        """Unweighted mean F1 over evaluable findings, in percent."""
        return macro_f1([r.f1 for r in self.results])

    def f1_by_name(self) -> dict[str, float]:
        return {r.name: r.f1 for r in self.results}


NEGATIVE_STYLES = ("section_normal", "negated_finding")


def build_prompt_sets(vocab: TemplateVocab, findings: Sequence[Finding], n_prompts: int = 3,
                      seed: int = 0, negative_style: str = "section_normal") -> list[PromptSet]:
    """Prompts from the generator's templates.

    Positive prompts carry the finding's n-gram.  Negative prompts carry the
    "no abnormality" n-gram of the section where the finding shows up
    (``section_normal``), or the negation token followed by the finding's
    n-gram (``negated_finding``); the latter never occurs in generated text.
    Variant ``j`` appends ``j`` seeded filler tokens, shared by the positive
    and negative variant so the two lists differ only in the template.
    """
    if n_prompts < 1:
        raise ValueError("n_prompts must be >= 1")
    if negative_style not in NEGATIVE_STYLES:
        raise ValueError(f"negative_style must be one of {NEGATIVE_STYLES}, got {negative_style!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x960]))
    out = []
    for f in findings:
        pos, neg = [], []
        for j in range(n_prompts):
            fill = tuple(int(t) for t in rng.integers(vocab.filler_start, vocab.vocab_size, size=j))
            pos.append(vocab.finding_template(f.id) + fill)
            if negative_style == "section_normal":
                neg.append(vocab.normal_template(f.section_index) + fill)
            else:
                neg.append((NEGATION_TOKEN, *vocab.finding_template(f.id)) + fill)
        out.append(PromptSet(f.id, tuple(pos), tuple(neg)))
    return out


def build_balanced_eval_set(truth: Mapping[int, bool], seed: int, finding_id: int = 0) -> list[int] | None:
    """Keep every minority-class study and a seeded equal-size draw of the majority.

    Returns ``None`` when either class is empty (the finding is un-evaluable).
    """
    pos = [i for i, t in truth.items() if t]
    neg = [i for i, t in truth.items() if not t]
    if not pos or not neg:
        return None
    k = min(len(pos), len(neg))
    rng = np.random.default_rng(np.random.SeedSequence([seed, finding_id, 0xBA1]))
    keep = set()
    for group in (pos, neg):
        if len(group) > k:
            keep.update(group[j] for j in rng.choice(len(group), size=k, replace=False))
        else:
            keep.update(group)
    return [i for i in truth if i in keep]


def embed_prompts(params: EncoderParams, prompts: PromptSet) -> tuple[np.ndarray, np.ndarray]:
    pos, _ = encode_texts(params, prompts.positive_prompts)
    neg, _ = encode_texts(params, prompts.negative_prompts)
    return pos, neg


def classify_embeddings(image_emb: np.ndarray, pos_emb: np.ndarray, neg_emb: np.ndarray) -> np.ndarray:
    """Vectorised decision rule; an exact tie counts as negative."""
    image_emb = np.atleast_2d(image_emb)
    return (image_emb @ pos_emb.T).mean(axis=1) > (image_emb @ neg_emb.T).mean(axis=1)


def classify_finding(image_emb: np.ndarray, prompts: PromptSet, params: EncoderParams) -> bool:
    pos, neg = embed_prompts(params, prompts)
    return bool(classify_embeddings(image_emb, pos, neg)[0])


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f1(f1s: Iterable[float]) -> float:
    f1s = list(f1s)
    if not f1s:
        raise NoEvaluableFindingsError("no evaluable findings")
    # fsum: correctly rounded, so the result does not depend on finding order
    return 100.0 * (math.fsum(f1s) / len(f1s))


def confusion(truth: Sequence[bool], pred: Sequence[bool]) -> tuple[int, int, int, int]:
    t = np.asarray(truth, dtype=bool)
    p = np.asarray(pred, dtype=bool)
    return int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)), int(np.sum(t & ~p))


def evaluate_all_findings(
    params: EncoderParams,
    corpus: Corpus,
    findings: Sequence[Finding] | None = None,
    seed: int = 0,
    test_ids: Sequence[int] | None = None,
    prompt_sets: Sequence[PromptSet] | None = None,
    truth: Mapping[int, Mapping[int, bool]] | None = None,
    n_prompts: int = 3,
) -> ZeroShotReport:
    """Zero-shot evaluation of every finding over the test split.

    ``truth`` optionally maps finding id to a per-study truth table; by
    default a finding is present when it is planted in any section.
    """
    findings = list(corpus.findings if findings is None else findings)
    test_ids = list(corpus.split("test") if test_ids is None else test_ids)
    if prompt_sets is None:
        prompt_sets = build_prompt_sets(corpus.vocab, findings, n_prompts=n_prompts, seed=seed)
    prompts_by_id = {p.finding_id: p for p in prompt_sets}

    feats = np.stack([corpus.study(i).image_features for i in test_ids])
    image_emb, _ = encode_images(params, feats)
    row = {sid: r for r, sid in enumerate(test_ids)}

    results, unevaluable = [], []
    for f in sorted(findings, key=lambda f: f.id):
        table = truth[f.id] if truth is not None else corpus.finding_truth(f.id, test_ids)
        eval_ids = build_balanced_eval_set(table, seed, f.id)
        if eval_ids is None:
            logger.warning("finding %s (%d) is un-evaluable on %d test studies; excluded from macro F1",
                           f.name, f.id, len(test_ids))
            unevaluable.append(f.id)
            continue
        pos_emb, neg_emb = embed_prompts(params, prompts_by_id[f.id])
        pred = classify_embeddings(image_emb[[row[i] for i in eval_ids]], pos_emb, neg_emb)
        tp, fp, tn, fn = confusion([table[i] for i in eval_ids], pred)
        results.append(FindingEvalResult(f.id, f.name, tp, fp, tn, fn, f1_score(tp, fp, fn), tuple(eval_ids)))
    if not results:
        raise NoEvaluableFindingsError("no evaluable findings in the test set")
    return ZeroShotReport(tuple(results), tuple(unevaluable))


def write_zeroshot_csv(report: ZeroShotReport, path: str | Path) -> None:
    """Per-finding rows followed by a ``macro_f1=<pct>`` summary line."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in report.results:
            writer.writerow([r.name, r.tp, r.fp, r.tn, r.fn, f"{r.f1:.6f}"])
        fh.write(f"macro_f1={report.macro_f1:.2f}\n")


def read_zeroshot_csv(path: str | Path) -> tuple[dict[str, float], float]:
    """Returns ({finding name: f1}, macro F1 percent)."""
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split(",")) != CSV_HEADER:
        raise ValueError(f"{path}: not a zero-shot results file")
    f1s: dict[str, float] = {}
    macro = None
    for line in lines[1:]:
        if line.startswith("macro_f1="):
            macro = float(line.partition("=")[2])
            continue
        name, *_, f1 = line.split(",")
        f1s[name] = float(f1)
    if macro is None:
        raise ValueError(f"{path}: missing macro_f1 summary line")
    return f1s, macro
