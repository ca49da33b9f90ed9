"""Pk segmentation error over sentence or word windows, plus a random baseline.

Segmentations are boundary vectors of length n-1 (1 = a segment ends after
that sentence). ``Hypothesis`` objects and ``LabeledDocument`` labels are
accepted wherever a boundary vector is.
"""

from __future__ import annotations

import time
import zlib
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .corpus import Hypothesis, LabeledDocument
from .embeddings import tokenize
from .errors import EmptyCorpus, LengthMismatch, WindowTooLarge

VARIANTS = ("sentences", "words")


def _boundaries(seg) -> np.ndarray:
    if isinstance(seg, Hypothesis):
        seg = seg.boundaries
    elif isinstance(seg, LabeledDocument):
        seg = seg.labels
    return np.asarray(seg, dtype=np.int64).reshape(-1)


def segment_ids(seg) -> np.ndarray:
    """Segment index of every sentence, length n."""
    return np.concatenate([[0], np.cumsum(_boundaries(seg) != 0)])


def window_size(ref_sizes: Sequence[int]) -> int:
    """Half the mean segment size, rounded half up, at least 1."""
    if not len(ref_sizes):
        raise ValueError("window_size needs at least one segment")
    total, count = int(sum(ref_sizes)), len(ref_sizes)
    return max(1, (total + count) // (2 * count))


def _pk_ids(ref_ids: np.ndarray, hyp_ids: np.ndarray, k: int) -> float:
    n = len(ref_ids)
    if k < 1:
        raise ValueError(f"window size must be positive, got {k}")
    if k >= n:
        raise WindowTooLarge(f"window {k} needs more than {n} positions")
    same_ref = ref_ids[:-k] == ref_ids[k:]
    same_hyp = hyp_ids[:-k] == hyp_ids[k:]
    return float(np.count_nonzero(same_ref != same_hyp)) / (n - k)


def pk_sentences(ref, hyp, k: int) -> float:
    ref_ids, hyp_ids = segment_ids(ref), segment_ids(hyp)
    if len(ref_ids) != len(hyp_ids):
        raise LengthMismatch(f"reference covers {len(ref_ids)} sentences, hypothesis {len(hyp_ids)}")
    return _pk_ids(ref_ids, hyp_ids, k)


def word_counts(doc: LabeledDocument) -> list[int]:
    # an empty sentence still occupies one (unk) position
    return [max(1, len(s.tokens or tokenize(s))) for s in doc.sentences]


def word_sizes(seg, counts: Sequence[int]) -> list[int]:
    ids = segment_ids(seg)
    return np.bincount(ids, weights=np.asarray(counts, dtype=np.float64)).astype(int).tolist()


def pk_words(ref, hyp, doc_or_counts, k_words: int) -> float:
    """Pk over word positions; each word takes its sentence's segment id."""
    counts = word_counts(doc_or_counts) if isinstance(doc_or_counts, LabeledDocument) else list(doc_or_counts)
    ref_ids, hyp_ids = segment_ids(ref), segment_ids(hyp)
    if not (len(ref_ids) == len(hyp_ids) == len(counts)):
        raise LengthMismatch(
            f"reference {len(ref_ids)}, hypothesis {len(hyp_ids)}, word counts {len(counts)}")
    return _pk_ids(np.repeat(ref_ids, counts), np.repeat(hyp_ids, counts), k_words)


def random_baseline(n: int, k_avg: float, seed) -> Hypothesis:
    """Boundary after each sentence independently with probability 1/k_avg."""
    if n < 2 or k_avg < 1:
        raise ValueError(f"random baseline needs n >= 2 and k_avg >= 1, got {n}, {k_avg}")
    rng = np.random.default_rng(seed)
    return Hypothesis(rng.random(n - 1) < 1.0 / k_avg)


def random_baseline_segmenter(corpus: Sequence[LabeledDocument], seed: int):
    """Segmenter using the corpus-average segment size; each document's draw is
    seeded from (seed, document id) so results do not depend on order."""
    sizes = [s for d in corpus for s in d.segment_sizes]
    k_avg = float(np.mean(sizes))

    def segment(doc: LabeledDocument) -> Hypothesis:
        return random_baseline(doc.n, k_avg, [seed, zlib.crc32(doc.id.encode("utf-8"))])

    return segment


# --------------------------------------------------------------- reports

@dataclass
class DocScore:
    id: str
    k: int
    pk: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class EvalReport:
    variant: str
    per_doc: list[DocScore]
    skipped: list[str] = field(default_factory=list)
    tau: float | None = None

    @property
    def mean(self) -> float | None:
        if not self.per_doc:
            return None
        return float(np.mean([d.pk for d in self.per_doc]))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "tau": self.tau,
            "pk_mean": self.mean,
            "documents": len(self.per_doc),
            "skipped": list(self.skipped),
            "per_doc": [{"id": d.id, "k": d.k, "pk": d.pk, "seconds": d.seconds} for d in self.per_doc],
        }


def score_document(doc: LabeledDocument, hyp, variant: str = "sentences") -> tuple[int, float]:
    """(k, Pk) with k taken from the document's own reference segmentation."""
    if variant == "sentences":
        k = window_size(doc.segment_sizes)
        return k, pk_sentences(doc.labels, hyp, k)
    if variant == "words":
        counts = word_counts(doc)
        k = window_size(word_sizes(doc.labels, counts))
        return k, pk_words(doc.labels, hyp, counts, k)
    raise ValueError(f"unknown Pk variant {variant!r}; choose from {VARIANTS}")


def evaluate_corpus(segmenter: Callable[[LabeledDocument], object],
                    corpus: Sequence[LabeledDocument], variant: str = "sentences",
                    tau: float | None = None) -> EvalReport:
    """Score every document; those too short for their window are listed in
    ``skipped`` and left out of the mean."""
    if not corpus:
        raise EmptyCorpus("nothing to evaluate")
    if variant not in VARIANTS:
        raise ValueError(f"unknown Pk variant {variant!r}; choose from {VARIANTS}")
    report = EvalReport(variant, [], tau=tau)
    for doc in corpus:
        start = time.perf_counter()
        hyp = segmenter(doc)
        elapsed = time.perf_counter() - start
        try:
            k, pk = score_document(doc, hyp, variant)
        except WindowTooLarge:
            report.skipped.append(doc.id)
            continue
        report.per_doc.append(DocScore(doc.id, k, pk, elapsed))
    return report
