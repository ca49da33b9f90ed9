"""Section-annotated documents, filters, boundary labels and synthetic corpora.

On-disk document format, one document per file::

    ========,1,History.
    First paragraph. Two sentences here.
    ***LIST*** a list item
    ========,2,Early years.
    ***CODE*** print("hi")

Each ``========,<level>,<title>.`` line opens a segment. Body lines belong to
the most recently opened segment, so a segment's own sentences always precede
its children.
"""

from __future__ import annotations

import enum
import json
import random
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import (EmptyCorpus, InsufficientPool, LevelJump,
                     MalformedSeparator, ParseError)

SEPARATOR = "========"
LIST_PREFIX = "***LIST***"
CODE_PREFIX = "***CODE***"

ABBREVIATIONS = frozenset([
    "Mr.", "Mrs.", "Dr.", "Prof.", "St.", "etc.", "e.g.", "i.e.", "vs.",
    "Fig.", "No.",
])
# lowercase entries also match when capitalized at sentence start ("E.g.")
_CASELESS_ABBREVIATIONS = frozenset(a for a in ABBREVIATIONS if a.islower())

_QUOTES = "\"'“‘«"
_TERMINATOR = re.compile(r"([.!?]+)[\"'”’»)\]]*(?=\s+(\S))")


class Kind(str, enum.Enum):
    PROSE = "prose"
    LIST_ITEM = "list_item"
    CODE = "code"


@dataclass
class Sentence:
    text: str
    tokens: list[str] = field(default_factory=list, compare=False)
    kind: Kind = Kind.PROSE


@dataclass
class Segment:
    level: int
    title: str
    sentences: list[Sentence] = field(default_factory=list)
    children: list["Segment"] = field(default_factory=list)

    def subtree_size(self) -> int:
        return len(self.sentences) + sum(c.subtree_size() for c in self.children)

    def iter_sentences(self):
        yield from self.sentences
        for child in self.children:
            yield from child.iter_sentences()

    def count_segments(self) -> int:
        return 1 + sum(c.count_segments() for c in self.children)


@dataclass
class Document:
    id: str
    segments: list[Segment] = field(default_factory=list)


@dataclass
class LabeledDocument:
    """Flat sentence list with boundary labels.

    ``labels[i] == 1`` when sentence ``i`` closes a top-level segment; the last
    sentence carries no label, so ``len(labels) == len(sentences) - 1``.
    """

    id: str
    sentences: list[Sentence]
    labels: list[int]

    def __post_init__(self):
        if self.sentences and len(self.labels) != len(self.sentences) - 1:
            raise ValueError(
                f"{self.id}: {len(self.sentences)} sentences need "
                f"{len(self.sentences) - 1} labels, got {len(self.labels)}")

    @property
    def n(self) -> int:
        return len(self.sentences)

    @property
    def segment_sizes(self) -> list[int]:
        return sizes_from_labels(self.labels)

    @classmethod
    def from_sizes(cls, id, sentences, sizes):
        if sum(sizes) != len(sentences):
            raise ValueError(f"sizes {sizes} do not cover {len(sentences)} sentences")
        return cls(id, list(sentences), labels_from_sizes(sizes))

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "sentences": [s.text for s in self.sentences],
            "labels": [int(v) for v in self.labels],
        }
        if any(s.kind is not Kind.PROSE for s in self.sentences):
            rec["kinds"] = [s.kind.value for s in self.sentences]
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "LabeledDocument":
        kinds = rec.get("kinds") or [Kind.PROSE.value] * len(rec["sentences"])
        sentences = [Sentence(t, kind=Kind(k)) for t, k in zip(rec["sentences"], kinds)]
        return cls(str(rec["id"]), sentences, [int(v) for v in rec["labels"]])


@dataclass(frozen=True)
class Hypothesis:
    """Predicted segmentation: ``boundaries[i] == 1`` starts a new segment after sentence i."""

    boundaries: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))

    @property
    def n(self) -> int:
        return len(self.boundaries) + 1

    @property
    def sizes(self) -> list[int]:
        return sizes_from_labels(self.boundaries)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "Hypothesis":
        return cls(labels_from_sizes(sizes))


@dataclass(frozen=True)
class Rejected:
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    seg_len_mean: float
    seg_len_std: float
    segs_per_doc_mean: float
    segs_per_doc_std: float


def sizes_from_labels(labels: Sequence[int]) -> list[int]:
    sizes, run = [], 1
    for y in labels:
        if y:
            sizes.append(run)
            run = 1
        else:
            run += 1
    sizes.append(run)
    return sizes


def labels_from_sizes(sizes: Sequence[int]) -> list[int]:
    labels = []
    for size in sizes:
        labels.extend([0] * (size - 1) + [1])
    return labels[:-1]


# ---------------------------------------------------------------- sentences

def is_abbreviation(word: str) -> bool:
    word = word.lstrip(_QUOTES + "([")
    return word in ABBREVIATIONS or word.lower() in _CASELESS_ABBREVIATIONS


def split_sentences(text: str) -> list[Sentence]:
    """Rule-based sentence splitter.

    Splits after a run of ``.``, ``!`` or ``?`` (plus closing quotes or
    brackets) when whitespace and then an uppercase letter, digit or quote
    follow. A period ending a known abbreviation never splits.
    """
    cuts = []
    for m in _TERMINATOR.finditer(text):
        nxt = m.group(2)
        if not (nxt.isupper() or nxt.isdigit() or nxt in _QUOTES):
            continue
        if m.group(1) == ".":
            word_start = max(text.rfind(" ", 0, m.start()), text.rfind("\t", 0, m.start())) + 1
            if is_abbreviation(text[word_start:m.end(1)]):
                continue
        cuts.append(m.end())
    out, start = [], 0
    for cut in cuts + [len(text)]:
        piece = text[start:cut].strip()
        if piece:
            out.append(Sentence(piece))
        start = cut
    return out


# ------------------------------------------------------------------ parsing

def _parse_separator(line: str, lineno: int) -> tuple[int, str]:
    parts = line.split(",", 2)
    if len(parts) != 3 or parts[0] != SEPARATOR:
        raise MalformedSeparator(f"line {lineno}: expected '{SEPARATOR},<level>,<title>.', got {line!r}")
    level_text, title = parts[1].strip(), parts[2].rstrip()
    if not level_text.isdigit() or int(level_text) < 1:
        raise MalformedSeparator(f"line {lineno}: bad level {parts[1]!r}")
    if title.endswith("."):
        title = title[:-1]
    return int(level_text), title


def _body_sentences(line: str) -> list[Sentence]:
    if line.startswith(CODE_PREFIX):
        code = line[len(CODE_PREFIX):].strip()
        return [Sentence(code, kind=Kind.CODE)] if code else []
    if line.startswith(LIST_PREFIX):
        sents = split_sentences(line[len(LIST_PREFIX):])
        for s in sents:
            s.kind = Kind.LIST_ITEM
        return sents
    return split_sentences(line)


def parse_document(raw: str, id: str) -> Document:
    doc = Document(id)
    stack: list[Segment] = []
    for lineno, line in enumerate(raw.splitlines(), 1):
        if line.startswith(SEPARATOR):
            level, title = _parse_separator(line, lineno)
            while stack and stack[-1].level >= level:
                stack.pop()
            parent_level = stack[-1].level if stack else 0
            if level > parent_level + 1:
                raise LevelJump(f"line {lineno}: level {level} under level {parent_level}")
            seg = Segment(level, title)
            (stack[-1].children if stack else doc.segments).append(seg)
            stack.append(seg)
            continue
        if not line.strip():
            continue
        if not stack:
            raise ParseError(f"line {lineno}: text before the first separator")
        stack[-1].sentences.extend(_body_sentences(line.strip()))
    return doc


def serialize_document(doc: Document) -> str:
    lines = []

    def emit(seg: Segment):
        lines.append(f"{SEPARATOR},{seg.level},{seg.title}.")
        for s in seg.sentences:
            prefix = {Kind.LIST_ITEM: LIST_PREFIX + " ", Kind.CODE: CODE_PREFIX + " "}.get(s.kind, "")
            lines.append(prefix + s.text)
        for child in seg.children:
            emit(child)

    for seg in doc.segments:
        emit(seg)
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ filters

def _drop_small(segments: list[Segment]) -> list[Segment]:
    kept = []
    for seg in segments:
        seg = Segment(seg.level, seg.title, list(seg.sentences), _drop_small(seg.children))
        if seg.subtree_size() >= 2:
            kept.append(seg)
    return kept


def apply_filters(doc: Document, max_removed_fraction: float = 0.5) -> Document | Rejected:
    """Drop segments with fewer than two sentences (subtree count), then
    reject the document if more than half its segments went or fewer than
    three top-level segments are left."""
    before = sum(s.count_segments() for s in doc.segments)
    kept = _drop_small(doc.segments)
    after = sum(s.count_segments() for s in kept)
    removed = before - after
    if before and removed / before > max_removed_fraction:
        return Rejected("most_segments_filtered", f"{removed}/{before} segments removed")
    if len(kept) < 3:
        return Rejected("too_few_segments", f"{len(kept)} top-level segments left")
    return Document(doc.id, kept)


def to_labeled(doc: Document) -> LabeledDocument:
    sentences, sizes = [], []
    for seg in doc.segments:
        sents = list(seg.iter_sentences())
        if sents:
            sentences.extend(sents)
            sizes.append(len(sents))
    return LabeledDocument.from_sizes(doc.id, sentences, sizes)


def prepare_training_doc(ld: LabeledDocument, drop_first: bool = True,
                         omit_nonprose: bool = True) -> LabeledDocument | Rejected:
    """Training-time view: drop the lead segment and list/code sentences."""
    groups: list[list[Sentence]] = []
    start = 0
    for size in ld.segment_sizes:
        groups.append(ld.sentences[start:start + size])
        start += size
    if drop_first:
        groups = groups[1:]
    if omit_nonprose:
        groups = [[s for s in g if s.kind is Kind.PROSE] for g in groups]
    groups = [g for g in groups if g]
    if len(groups) < 2:
        return Rejected("too_few_training_segments", f"{len(groups)} segments left")
    return LabeledDocument.from_sizes(ld.id, [s for g in groups for s in g], [len(g) for g in groups])


# ---------------------------------------------------------------- synthetic

def generate_choi_style(passages, docs: int, segs_per_doc: int,
                        seg_len_range: tuple[int, int], seed: int,
                        id_prefix: str = "synth") -> list[LabeledDocument]:
    """Concatenate passages drawn from distinct sources.

    ``passages`` maps a source name to its sentence list (a plain sequence of
    lists is accepted too). Each passage is a contiguous run of sentences whose
    length is uniform on ``seg_len_range``.
    """
    if not isinstance(passages, Mapping):
        passages = dict(enumerate(passages))
    lo, hi = seg_len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad seg_len_range {seg_len_range}")
    sources = [name for name, sents in passages.items() if len(sents) >= hi]
    if len(sources) < segs_per_doc:
        raise InsufficientPool(
            f"need {segs_per_doc} sources with >= {hi} sentences, have {len(sources)}")
    rng = random.Random(seed)
    out = []
    for i in range(docs):
        sentences, sizes = [], []
        for src in rng.sample(sources, segs_per_doc):
            pool = passages[src]
            length = rng.randint(lo, hi)
            start = rng.randint(0, len(pool) - length)
            sentences.extend(Sentence(s.text, kind=s.kind) for s in pool[start:start + length])
            sizes.append(length)
        out.append(LabeledDocument.from_sizes(f"{id_prefix}-{i:05d}", sentences, sizes))
    return out


def source_vocabulary(source: int, words: int) -> list[str]:
    return [f"s{source}w{j}" for j in range(words)]


def synthetic_pool(sources: int, vocab_per_source: int, sentences_per_source: int,
                   sentence_len: tuple[int, int] = (2, 5), seed: int = 0) -> dict[str, list[Sentence]]:
    """Random sentences where every source owns a disjoint vocabulary."""
    rng = random.Random(seed)
    pool = {}
    for s in range(sources):
        vocab = source_vocabulary(s, vocab_per_source)
        pool[f"source{s}"] = [
            Sentence(" ".join(rng.choice(vocab) for _ in range(rng.randint(*sentence_len))))
            for _ in range(sentences_per_source)
        ]
    return pool


# -------------------------------------------------------------------- stats

def corpus_stats(corpus: Sequence[LabeledDocument]) -> CorpusStats:
    if not corpus:
        raise EmptyCorpus("cannot compute statistics of an empty corpus")
    seg_lens = np.array([s for d in corpus for s in d.segment_sizes], dtype=float)
    per_doc = np.array([len(d.segment_sizes) for d in corpus], dtype=float)
    return CorpusStats(
        doc_count=len(corpus),
        seg_len_mean=float(seg_lens.mean()),
        seg_len_std=float(seg_lens.std()),
        segs_per_doc_mean=float(per_doc.mean()),
        segs_per_doc_std=float(per_doc.std()),
    )


# ---------------------------------------------------------------------- I/O

def dump_record(ld: LabeledDocument) -> str:
    return json.dumps(ld.to_record(), ensure_ascii=False, sort_keys=True)


def split_80_10_10(ids: Sequence[str], seed: int) -> tuple[list[str], list[str], list[str]]:
    """Seeded shuffle; dev and test get floor(10%) each, train the rest."""
    order = sorted(ids)
    random.Random(seed).shuffle(order)
    n_held = len(order) // 10
    dev, test = order[:n_held], order[n_held:2 * n_held]
    return order[2 * n_held:], dev, test
