"""Per-document SGD on the summed boundary cross-entropy."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .corpus import LabeledDocument
from .embeddings import EmbeddingTable
from .errors import EmptyCorpus, LengthMismatch, NonFiniteGradient, NonFiniteLoss
from .model import ModelParams, embed_document, loss_and_grads, probs_from_vectors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 10
    clip: float | None = None
    seed: int = 13
    shuffle: bool = True
    patience: int | None = None  # early stopping on dev loss; None disables
    target_loss: float | None = None  # stop once the epoch's mean training loss is below this

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")
        if self.target_loss is not None and self.target_loss <= 0:
            raise ValueError("target_loss must be positive")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    dev_loss: list[float | None] = field(default_factory=list)
    # wall-clock is informative only; equality ignores it
    epoch_seconds: list[float] = field(default_factory=list, compare=False)

    def to_dict(self, timing: bool = False) -> dict:
        out = {"train_loss": self.train_loss, "dev_loss": self.dev_loss}
        if timing:
            out["epoch_seconds"] = self.epoch_seconds
        return out


def doc_loss(p, y) -> float:
    """Summed binary cross-entropy with probabilities clamped to [1e-12, 1-1e-12]."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.shape[0] if p.ndim else 0} probabilities vs {y.shape[0] if y.ndim else 0} labels")
    return nn.xent_loss(y, p)


def mean_doc_loss(params: ModelParams, docs: Sequence[LabeledDocument], vectors) -> float:
    losses = [doc_loss(probs_from_vectors(params, v), d.labels) for d, v in zip(docs, vectors)]
    return float(np.mean(losses))


def train(model: ModelParams, corpus: Sequence[LabeledDocument], dev: Sequence[LabeledDocument],
          table: EmbeddingTable, cfg: TrainConfig,
          on_improve: Callable[[ModelParams, int], None] | None = None,
          ) -> tuple[ModelParams, TrainHistory]:
    """Train with one SGD step per document.

    ``on_improve(params, epoch)`` fires whenever the dev loss reaches a new
    minimum. On a non-finite loss or gradient, raises ``NonFiniteLoss``
    carrying the last finite parameters.
    """
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    cap = model.config.cap
    train_vecs = [embed_document(d.sentences, table, cap) for d in corpus]
    dev_vecs = [embed_document(d.sentences, table, cap) for d in dev]
    labels = [d.labels for d in corpus]

    rng = np.random.default_rng(cfg.seed)
    params = model
    named = params.named()
    history = TrainHistory()
    best_dev, stale = np.inf, 0

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(corpus)) if cfg.shuffle else np.arange(len(corpus))
        total = 0.0
        for i in order:
            try:
                loss, grads = loss_and_grads(params, train_vecs[i], labels[i])
            except NonFiniteGradient as exc:
                raise NonFiniteLoss(f"epoch {epoch}, doc {corpus[i].id}: {exc}", params, history) from exc
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, doc {corpus[i].id}: loss {loss}", params, history)
            updated = nn.sgd_step(named, grads, cfg.lr, cfg.clip)
            if not all(np.all(np.isfinite(v)) for v in updated.values()):
                raise NonFiniteLoss(f"epoch {epoch}, doc {corpus[i].id}: parameters diverged",
                                    params, history)
            named = updated
            params = ModelParams.from_named(params.config, named)
            total += loss
        history.train_loss.append(total / len(corpus))

        dev_loss = mean_doc_loss(params, dev, dev_vecs) if dev else None
        history.dev_loss.append(dev_loss)
        history.epoch_seconds.append(time.perf_counter() - start)
        log.info("epoch %d train %.5f dev %s", epoch + 1, history.train_loss[-1], dev_loss)

        if dev_loss is not None:
            if dev_loss < best_dev:
                best_dev, stale = dev_loss, 0
                if on_improve is not None:
                    on_improve(params, epoch)
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    log.info("early stop after epoch %d", epoch + 1)
                    break
        if cfg.target_loss is not None and history.train_loss[-1] < cfg.target_loss:
            log.info("training loss below %g after epoch %d", cfg.target_loss, epoch + 1)
            break
    return params, history
