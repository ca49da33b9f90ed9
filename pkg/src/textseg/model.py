"""Hierarchical segmentation network.

A word-level BiLSTM with max-pooling over time turns each sentence into a
vector; a sentence-level BiLSTM runs over those vectors and a dense layer plus
softmax gives, for every sentence except the last, the probability that it
closes a segment.
"""

from __future__ import annotations

import os
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .corpus import LabeledDocument, Sentence
from .embeddings import EmbeddingTable, embed_sentence, tokenize
from .errors import CheckpointError, DocumentTooShort, ShapeMismatch

CHECKPOINT_VERSION = 1
BOUNDARY_INDEX = 1  # softmax column for "ends a segment"; 0 means "continues"


@dataclass(frozen=True)
class ModelConfig:
    d: int
    h1: int = 128
    h2: int = 128
    seed: int = 13
    layers: int = 2
    cap: int = 256  # max tokens per sentence

    def __post_init__(self):
        for name in ("d", "h1", "h2", "layers", "cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")


class ModelParams:
    """All weights: sentence encoder, predictor and the 2-way output layer."""

    def __init__(self, config: ModelConfig, sentence_encoder: nn.BiLstmParams,
                 predictor: nn.BiLstmParams, out_W: np.ndarray, out_b: np.ndarray):
        self.config = config
        self.sentence_encoder = sentence_encoder
        self.predictor = predictor
        self.out_W = out_W
        self.out_b = out_b
        c = config
        checks = [
            (sentence_encoder.input_size, c.d, "encoder input"),
            (sentence_encoder.hidden, c.h1, "encoder hidden"),
            (len(sentence_encoder.layers), c.layers, "encoder layers"),
            (predictor.input_size, 2 * c.h1, "predictor input"),
            (predictor.hidden, c.h2, "predictor hidden"),
            (len(predictor.layers), c.layers, "predictor layers"),
            (out_W.shape, (2, 2 * c.h2), "output weight"),
            (out_b.shape, (2,), "output bias"),
        ]
        for got, want, what in checks:
            if got != want:
                raise ShapeMismatch(f"{what}: expected {want}, got {got}")

    def named(self) -> dict[str, np.ndarray]:
        out = self.sentence_encoder.named("encoder")
        out.update(self.predictor.named("predictor"))
        out["output.W"] = self.out_W
        out["output.b"] = self.out_b
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, named) -> "ModelParams":
        return cls(config,
                   nn.BiLstmParams.from_named("encoder", named, config.layers),
                   nn.BiLstmParams.from_named("predictor", named, config.layers),
                   named["output.W"], named["output.b"])

    def __eq__(self, other):
        if not isinstance(other, ModelParams) or self.config != other.config:
            return False
        a, b = self.named(), other.named()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    def copy(self) -> "ModelParams":
        return ModelParams.from_named(self.config, {k: v.copy() for k, v in self.named().items()})


def init_params(cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    encoder = nn.BiLstmParams.init(rng, cfg.d, cfg.h1, cfg.layers)
    predictor = nn.BiLstmParams.init(rng, 2 * cfg.h1, cfg.h2, cfg.layers)
    out_W = nn.glorot(rng, 2, 2 * cfg.h2)
    return ModelParams(cfg, encoder, predictor, out_W, np.zeros(2))


# ---------------------------------------------------------------- forward

def embed_document(sentences: Sequence[Sentence], table: EmbeddingTable,
                   cap: int = 256) -> list[np.ndarray]:
    out = []
    for s in sentences:
        tokens = s.tokens or tokenize(s)
        out.append(embed_sentence(tokens[:cap], table))
    return out


def encode_sentence(params: ModelParams, vectors) -> np.ndarray:
    return nn.max_pool_time(nn.bilstm_forward(params.sentence_encoder, vectors))


def logits_from_vectors(params: ModelParams, sentence_vectors: Sequence[np.ndarray]) -> np.ndarray:
    emb = np.stack([encode_sentence(params, v) for v in sentence_vectors])
    seq = nn.bilstm_forward(params.predictor, emb)
    return seq @ params.out_W.T + params.out_b


def probs_from_vectors(params: ModelParams, sentence_vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(sentence_vectors) < 2:
        raise DocumentTooShort(f"need at least 2 sentences, got {len(sentence_vectors)}")
    logits = logits_from_vectors(params, sentence_vectors)
    return nn.softmax2(logits[:-1])[:, BOUNDARY_INDEX]


def predict_probs(params: ModelParams, doc: LabeledDocument, table: EmbeddingTable) -> np.ndarray:
    """Boundary probability for sentences 1..n-1 (the last sentence is ignored)."""
    if doc.n < 2:
        raise DocumentTooShort(f"{doc.id}: need at least 2 sentences, got {doc.n}")
    return probs_from_vectors(params, embed_document(doc.sentences, table, params.config.cap))


def tape_forward(params: ModelParams, sentence_vectors, tape: nn.Tape):
    """Same computation as ``logits_from_vectors`` but recorded for backprop."""
    nodes = tape.params(params.named())
    layers = params.config.layers
    pooled = [nn.max_pool(nn.bilstm(tape.constant(v), nodes, "encoder", layers))
              for v in sentence_vectors]
    seq = nn.bilstm(nn.stack(pooled), nodes, "predictor", layers)
    return nn.dense(seq, nodes["output.W"], nodes["output.b"])


def loss_and_grads(params: ModelParams, sentence_vectors, labels):
    if len(sentence_vectors) < 2:
        raise DocumentTooShort(f"need at least 2 sentences, got {len(sentence_vectors)}")
    tape = nn.Tape()
    loss = nn.softmax_xent(tape_forward(params, sentence_vectors, tape), labels)
    return float(loss.value), tape.backward(loss)


# ------------------------------------------------------------- checkpoint

def save_checkpoint(params: ModelParams, path) -> None:
    header = {"format_version": CHECKPOINT_VERSION, "kind": "textseg-model",
              "label_index": BOUNDARY_INDEX, **asdict(params.config)}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        nn.write_blocks(fh, header, params.named())
    os.replace(tmp, path)


def load_checkpoint(path, expected_d: int | None = None) -> ModelParams:
    with open(path, "rb") as fh:
        header, blocks = nn.read_blocks(fh)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    if header.get("label_index") != BOUNDARY_INDEX:
        raise CheckpointError(f"checkpoint uses label index {header.get('label_index')}")
    try:
        cfg = ModelConfig(**{k: int(header[k]) for k in ("d", "h1", "h2", "seed", "layers", "cap")})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from None
    if expected_d is not None and cfg.d != expected_d:
        raise CheckpointError(
            f"checkpoint expects embedding dim {cfg.d}, embedding table has dim {expected_d}")
    try:
        params = ModelParams.from_named(cfg, blocks)
    except (KeyError, ShapeMismatch) as exc:
        raise CheckpointError(f"checkpoint blocks do not match its config: {exc}") from None
    expected = set(params.named())
    if set(blocks) != expected:
        raise CheckpointError(f"unexpected blocks {sorted(set(blocks) - expected)}")
    return params
