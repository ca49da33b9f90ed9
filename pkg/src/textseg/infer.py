"""Greedy threshold decoding and threshold tuning on a validation set."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .corpus import Hypothesis, LabeledDocument
from .embeddings import EmbeddingTable
from .errors import EmptyDev
from .metrics import pk_sentences, window_size
from .model import ModelParams, predict_probs

__all__ = ["GRID", "Hypothesis", "greedy_decode", "sweep", "tune_from_probs",
           "tune_threshold", "prediction_record"]

GRID = tuple(i / 100 for i in range(101))


def greedy_decode(p, tau: float) -> Hypothesis:
    """Boundary wherever ``p_i > tau`` (strict)."""
    return Hypothesis(np.asarray(p, dtype=np.float64) > tau)


def sweep(probs: Sequence[np.ndarray], refs: Sequence[LabeledDocument],
          grid: Sequence[float] = GRID) -> list[tuple[float, float]]:
    """Corpus-mean sentence Pk for each threshold in ``grid``."""
    scored = []
    for p, ref in zip(probs, refs):
        k = window_size(ref.segment_sizes)
        if k < ref.n:
            scored.append((p, ref, k))
    if not scored:
        raise EmptyDev("no dev document is long enough for its Pk window")
    out = []
    for tau in grid:
        pks = [pk_sentences(ref.labels, greedy_decode(p, tau), k) for p, ref, k in scored]
        out.append((tau, float(np.mean(pks))))
    return out


def tune_from_probs(probs, refs, grid: Sequence[float] = GRID) -> tuple[float, float]:
    best_tau, best_pk = None, np.inf
    for tau, pk in sweep(probs, refs, sorted(grid)):
        if pk < best_pk:  # strict: ties keep the smaller tau
            best_tau, best_pk = tau, pk
    return best_tau, best_pk


def tune_threshold(model: ModelParams, dev: Sequence[LabeledDocument], table: EmbeddingTable,
                   grid: Sequence[float] = GRID) -> tuple[float, float]:
    """Smallest grid threshold minimizing mean dev Pk, and that Pk."""
    if not dev:
        raise EmptyDev("threshold tuning needs at least one dev document")
    probs = [predict_probs(model, d, table) for d in dev]
    return tune_from_probs(probs, dev, grid)


def prediction_record(doc_id: str, probs, hyp: Hypothesis) -> dict:
    return {"id": doc_id, "sizes": hyp.sizes, "probs": [float(v) for v in probs]}
