import numpy as np
import pytest

from textseg.corpus import (LabeledDocument, Sentence, generate_choi_style,
                            source_vocabulary, synthetic_pool)
from textseg.embeddings import one_hot_table

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _criteria[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}")


SOURCES, WORDS_PER_SOURCE = 4, 2


def synth_vocab():
    return [w for s in range(SOURCES) for w in source_vocabulary(s, WORDS_PER_SOURCE)]


@pytest.fixture(scope="session")
def synth_table():
    """d=8 one-hot vectors: 4 sources with 2 private words each."""
    return one_hot_table(synth_vocab())


def synth_docs(n, pool_seed, seed, prefix="synth", segs_per_doc=3, seg_len=(2, 4)):
    pool = synthetic_pool(SOURCES, WORDS_PER_SOURCE, 60, (2, 5), seed=pool_seed)
    return generate_choi_style(pool, n, segs_per_doc, seg_len, seed=seed, id_prefix=prefix)


def doc_from_sizes(sizes, id="doc", words=None):
    n = sum(sizes)
    words = words or [1] * n
    sentences = [Sentence(" ".join(f"w{i}x{j}" for j in range(words[i]))) for i in range(n)]
    return LabeledDocument.from_sizes(id, sentences, sizes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_pk(ref_sizes, hyp_sizes, k):
    """Window-by-window Pk written from segment sizes, independent of textseg.metrics."""
    def owner(sizes):
        out = []
        for seg, size in enumerate(sizes):
            out += [seg] * size
        return out

    ref, hyp = owner(ref_sizes), owner(hyp_sizes)
    assert len(ref) == len(hyp)
    windows = range(len(ref) - k)
    wrong = sum((ref[i] == ref[i + k]) != (hyp[i] == hyp[i + k]) for i in windows)
    return wrong / len(windows)
