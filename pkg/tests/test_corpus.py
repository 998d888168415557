from __future__ import annotations

import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastlab import N_SECTIONS
from contrastlab.corpus import (
    CaseLabel,
    CaseLabelMode,
    Corpus,
    CorpusFormatError,
    SectionRecord,
    Study,
    SyntheticConfig,
    allocate_counts,
    corpus_bytes,
    derive_case_label,
    generate_synthetic_corpus,
    load_corpus,
    round_half_up,
    save_corpus,
    split_patient_level,
    stratified_holdout_split,
    stratified_subsample,
)


def _study(abnormal_sections, sid=0, pid=0):
    secs = tuple(SectionRecord(k, (5, k + 2), frozenset({k}) if k in abnormal_sections else frozenset())
                 for k in range(N_SECTIONS))
    return Study(sid, pid, np.zeros(3), secs)


# ---------------------------------------------------------------- generator


def test_same_seed_gives_byte_identical_corpus():
    cfg = SyntheticConfig(n_studies=60, seed=7)
    assert corpus_bytes(generate_synthetic_corpus(cfg)) == corpus_bytes(generate_synthetic_corpus(cfg))


def test_different_seed_changes_corpus():
    a = generate_synthetic_corpus(SyntheticConfig(n_studies=60, seed=7))
    b = generate_synthetic_corpus(SyntheticConfig(n_studies=60, seed=8))
    assert corpus_bytes(a) != corpus_bytes(b)


def test_zero_rate_gives_all_normal_studies():
    corpus = generate_synthetic_corpus(SyntheticConfig(n_studies=80, abnormal_section_rate=0.0))
    for s in corpus.studies:
        assert not any(s.section_abnormal)
        assert derive_case_label(s, CaseLabelMode.ANY_ABNORMAL) is CaseLabel.NORMAL
        assert derive_case_label(s, CaseLabelMode.ALL_ABNORMAL) is CaseLabel.NORMAL


def test_abnormal_section_fraction_near_rate(corpus_500):
    flags = [f for s in corpus_500.studies for f in s.section_abnormal]
    assert abs(np.mean(flags) - 0.15) <= 0.02


def test_section_invariants(small_corpus):
    vocab = small_corpus.vocab
    for s in small_corpus.studies:
        assert len(s.sections) == N_SECTIONS
        assert s.full_report == tuple(t for sec in s.sections for t in sec.text)
        for sec in s.sections:
            assert sec.is_abnormal == bool(sec.findings_present)
            for f in sec.findings_present:
                assert small_corpus.findings[f].section_index == sec.section_index
                tpl = vocab.finding_template(f)
            if not sec.is_abnormal:
                tpl = vocab.normal_template(sec.section_index)
            text = sec.text
            assert any(text[i:i + len(tpl)] == tpl for i in range(len(text) - len(tpl) + 1))


def test_findings_dense_ids_and_valid_sections(small_corpus):
    ids = [f.id for f in small_corpus.findings]
    assert ids == list(range(len(ids)))
    assert all(0 <= f.section_index < N_SECTIONS for f in small_corpus.findings)


def test_noise_free_features_are_linear_in_findings():
    cfg = SyntheticConfig(n_studies=200, n_findings=6, d_img=10, noise_sigma=0.0, abnormal_section_rate=0.3, seed=5)
    corpus = generate_synthetic_corpus(cfg)
    X = np.array([[f in s.findings for f in range(6)] for s in corpus.studies], dtype=float)
    Y = np.stack([s.image_features for s in corpus.studies])
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    assert np.max(np.abs(X @ W - Y)) < 1e-10


@pytest.mark.parametrize("kwargs", [
    {"n_findings": 0},
    {"vocab_size": 10},
    {"abnormal_section_rate": 1.5},
    {"noise_sigma": -0.1},
    {"n_studies": 0},
])
def test_rejects_bad_configs(kwargs):
    with pytest.raises(ValueError):
        generate_synthetic_corpus(SyntheticConfig(**kwargs))


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        SyntheticConfig.from_dict({"n_studies": 10, "colour": "red"})


# ------------------------------------------------------------- case labels


def test_case_label_examples():
    assert derive_case_label(_study(set()), CaseLabelMode.ANY_ABNORMAL) is CaseLabel.NORMAL
    assert derive_case_label(_study({4}), CaseLabelMode.ANY_ABNORMAL) is CaseLabel.ABNORMAL
    assert derive_case_label(_study({4}), CaseLabelMode.ALL_ABNORMAL) is None
    assert derive_case_label(_study(set(range(12))), CaseLabelMode.ALL_ABNORMAL) is CaseLabel.ABNORMAL


@given(st.sets(st.integers(0, 11)))
def test_case_label_modes_agree_with_definition(abnormal):
    s = _study(abnormal)
    any_label = derive_case_label(s, CaseLabelMode.ANY_ABNORMAL)
    assert (any_label is CaseLabel.ABNORMAL) == bool(abnormal)
    all_label = derive_case_label(s, CaseLabelMode.ALL_ABNORMAL)
    if len(abnormal) == 12:
        assert all_label is CaseLabel.ABNORMAL
    elif not abnormal:
        assert all_label is CaseLabel.NORMAL
    else:
        assert all_label is None


# --------------------------------------------------------------------- splits


def test_rounding_helpers():
    assert round_half_up(2.5) == 3
    assert round_half_up(0.3 * 5) == 2
    assert round_half_up(697.8) == 698
    assert allocate_counts(10, [1, 1, 1]) == [4, 3, 3]
    assert sum(allocate_counts(7, [0.2, 0.5, 0.3])) == 7


def test_100_patients_split_60_20_20():
    corpus = generate_synthetic_corpus(SyntheticConfig(n_studies=100), splits=None)
    splits = split_patient_level(corpus, (0.6, 0.2, 0.2), seed=1)
    assert [len(splits[k]) for k in ("train", "val", "test")] == [60, 20, 20]
    assert splits == split_patient_level(corpus, (0.6, 0.2, 0.2), seed=1)


def test_multi_study_patients_stay_together():
    cfg = SyntheticConfig(n_studies=150, max_studies_per_patient=3, seed=2)
    corpus = generate_synthetic_corpus(cfg)
    per_patient = Counter(s.patient_id for s in corpus.studies)
    assert max(per_patient.values()) == 3
    where = {}
    for name, ids in corpus.splits.items():
        for sid in ids:
            where.setdefault(corpus.study(sid).patient_id, set()).add(name)
    assert all(len(v) == 1 for v in where.values())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(12, 80), per_patient=st.integers(1, 4),
       train=st.floats(0.2, 0.8))
def test_patient_disjointness_property(seed, n, per_patient, train):
    cfg = SyntheticConfig(n_studies=n, max_studies_per_patient=per_patient, seed=seed)
    rest = 1.0 - train
    corpus = generate_synthetic_corpus(cfg, splits=(train, rest / 2, rest / 2))
    owners = {}
    for name, ids in corpus.splits.items():
        for sid in ids:
            assert owners.setdefault(corpus.study(sid).patient_id, name) == name
    n_patients = len({s.patient_id for s in corpus.studies})
    n_train = len({corpus.study(i).patient_id for i in corpus.split("train")})
    assert abs(n_train - train * n_patients) <= 1


def test_split_errors():
    corpus = generate_synthetic_corpus(SyntheticConfig(n_studies=2), splits=None)
    with pytest.raises(ValueError, match="patients"):
        split_patient_level(corpus, (0.4, 0.3, 0.3), seed=0)
    with pytest.raises(ValueError, match="sum to 1"):
        split_patient_level(corpus, (0.5, 0.2, 0.2), seed=0)


def test_corpus_rejects_patient_overlap(small_corpus):
    s = small_corpus.studies
    twin = Study(10_000, s[0].patient_id, s[0].image_features, s[0].sections)
    with pytest.raises(ValueError, match="patient"):
        Corpus(s + (twin,), {"train": (s[0].study_id,), "test": (10_000,)}, small_corpus.config)


# ----------------------------------------------------------- subsampling


def _pool(n, n_normal):
    return {i: ("normal" if i < n_normal else "abnormal") for i in range(n)}


def test_subsample_3489_pool_sizes():
    pool = _pool(3489, 1585)
    assert len(stratified_subsample(pool, 0.4, seed=0, holdout_fraction=0.2)) == 1396
    assert len(stratified_subsample(pool, 0.2, seed=0, holdout_fraction=0.2)) == 697
    # without the holdout reconstruction the count is plain round(f * n)
    assert len(stratified_subsample(pool, 0.2, seed=0)) == 698


def test_subsample_full_fraction_is_the_pool():
    pool = _pool(50, 20)
    assert stratified_subsample(pool, 1.0, seed=3) == list(pool)


def test_subsample_empty_pool_errors():
    with pytest.raises(ValueError, match="empty"):
        stratified_subsample({}, 0.5, seed=0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 400), frac_normal=st.floats(0.05, 0.95), fraction=st.sampled_from([0.2, 0.4, 0.5, 1.0]),
       seed=st.integers(0, 1000))
def test_subsample_preserves_class_ratio(n, frac_normal, fraction, seed):
    n_normal = max(1, min(n - 1, int(frac_normal * n)))
    pool = _pool(n, n_normal)
    sub = stratified_subsample(pool, fraction, seed)
    assert len(sub) == max(1, round_half_up(fraction * n))
    assert len(set(sub)) == len(sub) and set(sub) <= set(pool)
    sub_normal = sum(pool[i] == "normal" for i in sub)
    assert abs(sub_normal - fraction * n_normal) <= 1
    assert abs(sub_normal / len(sub) - n_normal / n) <= 1 / len(sub)
    assert sub == stratified_subsample(pool, fraction, seed)


def test_holdout_split_takes_ceiling():
    kept, held = stratified_holdout_split(_pool(4362, 1982), 0.2, seed=0)
    assert (len(kept), len(held)) == (3489, 873)
    assert not set(kept) & set(held)


# --------------------------------------------------------------------- io


def test_round_trip(tmp_path, small_corpus):
    path = tmp_path / "c.json"
    save_corpus(small_corpus, path)
    loaded = load_corpus(path)
    assert loaded == small_corpus
    assert corpus_bytes(loaded) == path.read_bytes()
    for a, b in zip(loaded.studies, small_corpus.studies):
        assert a.image_features.tobytes() == b.image_features.tobytes()


def test_file_top_level_keys(tmp_path, small_corpus):
    path = tmp_path / "c.json"
    save_corpus(small_corpus, path)
    assert set(json.loads(path.read_text())) == {"version", "config", "studies", "splits"}


def test_truncated_file_reports_offset(tmp_path, small_corpus):
    path = tmp_path / "c.json"
    save_corpus(small_corpus, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorpusFormatError) as exc:
        load_corpus(path)
    assert exc.value.offset is not None and 0 < exc.value.offset <= len(data) // 2


def test_empty_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_bytes(b"")
    with pytest.raises(CorpusFormatError, match="empty corpus file"):
        load_corpus(path)


def test_schema_errors(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"version": 1}))
    with pytest.raises(CorpusFormatError, match="missing keys"):
        load_corpus(path)
    path.write_text(json.dumps({"version": 99, "config": {}, "studies": [], "splits": {}}))
    with pytest.raises(CorpusFormatError, match="version"):
        load_corpus(path)
