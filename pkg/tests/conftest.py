from __future__ import annotations

import pytest

from contrastlab.corpus import SyntheticConfig, generate_synthetic_corpus


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SyntheticConfig(n_studies=120, n_findings=12, d_img=8, vocab_size=64, tokens_per_section=3, seed=3)
    return generate_synthetic_corpus(cfg)


@pytest.fixture(scope="session")
def corpus_500():
    return generate_synthetic_corpus(SyntheticConfig(n_studies=500, n_findings=8, abnormal_section_rate=0.15))


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
