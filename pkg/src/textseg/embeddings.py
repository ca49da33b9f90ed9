"""Word tokenization and pretrained word vectors (word2vec text format)."""

from __future__ import annotations

import io
import unicodedata
from collections.abc import Iterable, Sequence

import numpy as np

from .corpus import ABBREVIATIONS, Sentence, is_abbreviation
from .errors import BadHeader, DimensionMismatch, DuplicateToken, NonFiniteValue

OOV_POLICIES = ("zeros", "mean")

__all__ = ["ABBREVIATIONS", "EmbeddingTable", "load_vectors", "save_vectors",
           "tokenize", "embed_sentence", "one_hot_table"]


class EmbeddingTable:
    """Immutable token -> vector map. Lookup never fails: unknown tokens get ``unk``."""

    def __init__(self, tokens: Sequence[str], matrix: np.ndarray, oov: str = "zeros"):
        matrix = np.array(matrix, dtype=np.float64, copy=True)
        if matrix.ndim != 2 or matrix.shape[0] != len(tokens):
            raise ValueError(f"need a ({len(tokens)}, dim) matrix, got shape {matrix.shape}")
        if oov not in OOV_POLICIES:
            raise ValueError(f"unknown OOV policy {oov!r}; choose from {OOV_POLICIES}")
        self.dim = matrix.shape[1]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.matrix = matrix
        self.oov = oov
        if oov == "mean" and len(tokens):
            self.unk = matrix.mean(axis=0)
        else:
            self.unk = np.zeros(self.dim)
        self.matrix.flags.writeable = False
        self.unk.flags.writeable = False

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return (isinstance(other, EmbeddingTable) and self.tokens == other.tokens
                and self.dim == other.dim and np.array_equal(self.matrix, other.matrix)
                and np.array_equal(self.unk, other.unk))

    def lookup(self, token: str) -> np.ndarray:
        i = self.index.get(token)
        if i is None:
            i = self.index.get(token.lower())
        return self.unk if i is None else self.matrix[i]


def _lines(source) -> Iterable[str]:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    for line in source:
        yield line.decode("utf-8") if isinstance(line, bytes) else line


def load_vectors(source, oov: str = "zeros") -> EmbeddingTable:
    """Read ``<count> <dim>`` then ``<token> <v1> ... <vdim>`` lines.

    ``source`` is a binary or text stream, or raw bytes.
    """
    lines = iter(_lines(source))
    header = next(lines, "").split()
    try:
        count, dim = (int(v) for v in header)
    except ValueError:
        raise BadHeader(f"expected '<count> <dim>', got {' '.join(header)!r}") from None
    if count < 0 or dim < 1:
        raise BadHeader(f"invalid header values count={count} dim={dim}")

    tokens: list[str] = []
    seen = set()
    matrix = np.zeros((count, dim))
    for lineno, line in enumerate(lines, 2):
        parts = line.rstrip("\r\n").split()
        if not parts:
            continue
        if len(tokens) == count:
            raise BadHeader(f"header declares {count} vectors, found more at line {lineno}")
        token, values = parts[0], parts[1:]
        if len(values) != dim:
            raise DimensionMismatch(lineno, dim, len(values))
        if token in seen:
            raise DuplicateToken(token)
        try:
            row = np.array([float(v) for v in values])
        except ValueError:
            raise NonFiniteValue(lineno) from None
        if not np.all(np.isfinite(row)):
            raise NonFiniteValue(lineno)
        matrix[len(tokens)] = row
        tokens.append(token)
        seen.add(token)
    if len(tokens) != count:
        raise BadHeader(f"header declares {count} vectors, found {len(tokens)}")
    return EmbeddingTable(tokens, matrix, oov=oov)


def save_vectors(table: EmbeddingTable, stream) -> None:
    stream.write(f"{len(table)} {table.dim}\n")
    for token, row in zip(table.tokens, table.matrix):
        stream.write(token + " " + " ".join(repr(float(v)) for v in row) + "\n")


def one_hot_table(tokens: Sequence[str], oov: str = "zeros") -> EmbeddingTable:
    return EmbeddingTable(tokens, np.eye(len(tokens)), oov=oov)


# ------------------------------------------------------------- tokenizer

def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(s) -> list[str]:
    """Whitespace split with leading/trailing punctuation peeled off as
    one-character tokens. Known abbreviations stay whole."""
    text = s.text if isinstance(s, Sentence) else s
    tokens = []
    for chunk in text.split():
        lead, end = 0, len(chunk)
        while lead < end and _is_punct(chunk[lead]):
            lead += 1
        if not is_abbreviation(chunk[lead:]):
            while end > lead and _is_punct(chunk[end - 1]):
                end -= 1
        tokens.extend(chunk[:lead])
        if end > lead:
            tokens.append(chunk[lead:end])
        tokens.extend(chunk[end:])
    return tokens


def embed_sentence(tokens: Sequence[str], table: EmbeddingTable) -> np.ndarray:
    """(T, dim) array, one row per token; an empty sentence becomes ``[unk]``."""
    if not tokens:
        return table.unk[None, :].copy()
    return np.stack([table.lookup(t) for t in tokens])
