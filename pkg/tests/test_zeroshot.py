from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastlab.corpus import NEGATION_TOKEN, SyntheticConfig, generate_synthetic_corpus
from contrastlab.model import encode_images, encode_texts, init_params
from contrastlab.trainer import TrainConfig, run_training
from contrastlab.zeroshot import (
    CSV_HEADER,
    FindingEvalResult,
    NoEvaluableFindingsError,
    PromptSet,
    ZeroShotReport,
    build_balanced_eval_set,
    build_prompt_sets,
    classify_embeddings,
    classify_finding,
    confusion,
    evaluate_all_findings,
    f1_score,
    macro_f1,
    read_zeroshot_csv,
    write_zeroshot_csv,
)

FAST = dict(d_txt=8, hidden=16, embed_dim=16)


def brute_force_f1(truth, pred):
    tp = fp = fn = 0
    for t, p in zip(truth, pred):
        if t and p:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
    return 0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


@pytest.fixture(scope="module")
def corpus():
    cfg = SyntheticConfig(n_studies=200, n_findings=6, d_img=8, vocab_size=64, tokens_per_section=3, seed=6)
    return generate_synthetic_corpus(cfg)


# --------------------------------------------------------------- eval sets


def _truth(n_pos, n_neg):
    return {i: i < n_pos for i in range(n_pos + n_neg)}


def test_balanced_eval_examples():
    ids = build_balanced_eval_set(_truth(30, 100), seed=0)
    t = _truth(30, 100)
    assert sum(t[i] for i in ids) == 30 and len(ids) == 60
    assert build_balanced_eval_set(_truth(50, 50), seed=0) == list(range(100))
    assert build_balanced_eval_set(_truth(0, 10), seed=0) is None
    assert build_balanced_eval_set(_truth(10, 0), seed=0) is None


@settings(max_examples=60, deadline=None)
@given(n_pos=st.integers(1, 80), n_neg=st.integers(1, 80), seed=st.integers(0, 500))
def test_balanced_eval_sets_are_exactly_equal(n_pos, n_neg, seed):
    truth = _truth(n_pos, n_neg)
    ids = build_balanced_eval_set(truth, seed)
    pos = sum(truth[i] for i in ids)
    assert pos == len(ids) - pos == min(n_pos, n_neg)
    assert len(set(ids)) == len(ids)
    assert ids == build_balanced_eval_set(truth, seed)


# ------------------------------------------------------------- decisions


def _embedding_with_sims(image, sims):
    # rows whose dot product with the unit vector ``image`` equal ``sims``
    other = np.zeros_like(image)
    other[1] = 1.0
    return np.stack([s * image + np.sqrt(1 - s * s) * other for s in sims])


def test_mean_similarity_rule():
    img = np.zeros(4)
    img[0] = 1.0
    pos = _embedding_with_sims(img, [0.8, 0.6])
    neg = _embedding_with_sims(img, [0.5, 0.3])
    assert classify_embeddings(img, pos, neg)[0]
    assert not classify_embeddings(img, neg, pos)[0]


def test_tie_counts_as_negative():
    img = np.zeros(4)
    img[0] = 1.0
    pos = _embedding_with_sims(img, [0.5, 0.5])
    neg = _embedding_with_sims(img, [0.75, 0.25])
    assert not classify_embeddings(img, pos, neg)[0]


def test_single_prompt_reduces_to_pairwise(corpus):
    params = init_params(TrainConfig(**FAST).model_dims(corpus), 0)
    rng = np.random.default_rng(0)
    prompts = PromptSet(0, ((20, 21, 30),), ((1, 2, 40),))
    imgs, _ = encode_images(params, rng.normal(size=(10, 8)))
    (pos,), _ = encode_texts(params, prompts.positive_prompts)
    (neg,), _ = encode_texts(params, prompts.negative_prompts)
    for row in imgs:
        assert classify_finding(row, prompts, params) == bool(row @ pos > row @ neg)


def test_prompt_duplication_and_order_invariance():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(50, 6))
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    pos, neg = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
    base = classify_embeddings(img, pos, neg)
    assert np.array_equal(base, classify_embeddings(img, pos[::-1], neg[[2, 0, 3, 1]]))
    assert np.array_equal(base, classify_embeddings(img, np.vstack([pos, pos]), np.vstack([neg, neg, neg])))


def test_prompt_sets(corpus):
    vocab = corpus.vocab
    sets = build_prompt_sets(vocab, corpus.findings, n_prompts=3, seed=0)
    for ps, f in zip(sets, corpus.findings):
        assert len(ps.positive_prompts) == len(ps.negative_prompts) == 3
        for j, (p, n) in enumerate(zip(ps.positive_prompts, ps.negative_prompts)):
            assert p[:2] == vocab.finding_template(f.id)
            assert n[:2] == vocab.normal_template(f.section_index)
            assert p[2:] == n[2:] and len(p) == 2 + j
    negated = build_prompt_sets(vocab, corpus.findings, negative_style="negated_finding")
    assert negated[0].negative_prompts[0] == (NEGATION_TOKEN, *vocab.finding_template(0))
    with pytest.raises(ValueError):
        build_prompt_sets(vocab, corpus.findings, negative_style="other")
    with pytest.raises(ValueError):
        PromptSet(0, (), ((1,),))


# --------------------------------------------------------------------- F1


def test_f1_examples():
    assert f1_score(3, 1, 1) == 0.75
    assert f1_score(0, 0, 0) == 0.0
    assert f1_score(10, 0, 0) == 1.0


def test_f1_matches_brute_force_tally():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        truth, pred = rng.random(n) < rng.random(), rng.random(n) < rng.random()
        tp, fp, tn, fn = confusion(truth, pred)
        assert tp + fp + tn + fn == n
        assert f1_score(tp, fp, fn) == brute_force_f1(truth, pred)


def test_macro_f1():
    assert macro_f1([1.0, 0.5]) == 75.0
    with pytest.raises(NoEvaluableFindingsError):
        macro_f1([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.randoms())
def test_macro_f1_permutation_invariant(f1s, rnd):
    shuffled = list(f1s)
    rnd.shuffle(shuffled)
    assert macro_f1(shuffled) == pytest.approx(macro_f1(f1s), abs=1e-12)


# ----------------------------------------------------------------- end to end


def test_evaluate_all_findings_structure(corpus):
    params = init_params(TrainConfig(**FAST).model_dims(corpus), 0)
    report = evaluate_all_findings(params, corpus, seed=0)
    assert [r.finding_id for r in report.results] == sorted(r.finding_id for r in report.results)
    for r in report.results:
        assert r.tp + r.fp + r.tn + r.fn == len(r.eval_ids)
        assert 0.0 <= r.f1 <= 1.0
    assert report.macro_f1 == pytest.approx(100 * np.mean([r.f1 for r in report.results]))
    again = evaluate_all_findings(params, corpus, seed=0)
    assert again == report


def test_unevaluable_findings_are_excluded(corpus, caplog):
    params = init_params(TrainConfig(**FAST).model_dims(corpus), 0)
    test = corpus.split("test")
    truth = {f.id: corpus.finding_truth(f.id, test) for f in corpus.findings}
    truth[2] = {i: False for i in test}
    with caplog.at_level(logging.WARNING):
        report = evaluate_all_findings(params, corpus, truth=truth)
    assert report.unevaluable == (2,)
    assert 2 not in [r.finding_id for r in report.results]
    assert "un-evaluable" in caplog.text


def test_all_unevaluable_is_an_error(corpus):
    params = init_params(TrainConfig(**FAST).model_dims(corpus), 0)
    test = corpus.split("test")
    truth = {f.id: {i: True for i in test} for f in corpus.findings}
    with pytest.raises(NoEvaluableFindingsError):
        evaluate_all_findings(params, corpus, truth=truth)


def test_noise_free_corpus_reaches_perfect_f1(tmp_path):
    cfg = SyntheticConfig(n_studies=400, n_findings=4, d_img=8, vocab_size=64, tokens_per_section=3,
                          noise_sigma=0.0, abnormal_section_rate=0.2, seed=9)
    corpus = generate_synthetic_corpus(cfg)
    result = run_training(corpus, TrainConfig(max_epochs=25, peak_lr=1e-3, **FAST), tmp_path)
    assert evaluate_all_findings(result.params, corpus).macro_f1 == 100.0


def test_csv_round_trip(tmp_path):
    results = (FindingEvalResult(0, "finding_00", 3, 1, 4, 1, 0.75, ()),
               FindingEvalResult(1, "finding_01", 2, 0, 2, 0, 1.0, ()))
    report = ZeroShotReport(results, ())
    path = tmp_path / "zeroshot.csv"
    write_zeroshot_csv(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1] == "finding_00,3,1,4,1,0.750000"
    assert lines[-1] == "macro_f1=87.50"
    f1s, macro = read_zeroshot_csv(path)
    assert f1s == {"finding_00": 0.75, "finding_01": 1.0} and macro == 87.5
