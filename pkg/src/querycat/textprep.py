"""Query normalization, vocabulary construction, and integer encoding.

Queries become fixed-length integer vectors: each word maps to a unique id,
unknown words map to a reserved id, and the vector is right-padded with the
reserved padding id up to the sequence length.
"""

from __future__ import annotations

import hashlib
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatVersionMismatch, InvalidArgument
from .fsio import atomic_write_text, read_text

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

# Cache of "is this character punctuation" decisions; query corpora reuse a
# small alphabet so this avoids a unicodedata lookup per character.
_PUNCT_CACHE: dict[str, bool] = {}


def _is_punct(ch: str) -> bool:
    hit = _PUNCT_CACHE.get(ch)
    if hit is None:
        hit = unicodedata.category(ch).startswith("P")
        _PUNCT_CACHE[ch] = hit
    return hit


def normalize(raw: str) -> str:
    """Lower-case, replace punctuation with spaces, collapse whitespace.

    Punctuation is replaced by a space rather than deleted so that "b&q"
    tokenizes as two words instead of fusing into one. Idempotent; may
    return the empty string.
    """
    lowered = raw.lower()
    chars = [" " if _is_punct(ch) else ch for ch in lowered]
    return " ".join("".join(chars).split())


@dataclass
class Vocabulary:
    """Word-to-id table with reserved padding (0) and unknown (1) ids.

    ``max_size`` bounds the whole table including the two specials, so at
    most ``max_size - 2`` real words are admitted.
    """

    word_to_id: dict[str, int]
    id_to_word: list[str]
    max_size: int

    def __len__(self) -> int:
        return len(self.id_to_word)

    @property
    def num_rows(self) -> int:
        """Size of the id table (embedding row count)."""
        return len(self.id_to_word)

    def id_for(self, word: str) -> int:
        return self.word_to_id.get(word, UNK_ID)

    def to_tsv(self) -> str:
        return "".join(f"{w}\t{i}\n" for i, w in enumerate(self.id_to_word))

    def content_hash(self) -> str:
        """SHA-256 of the canonical TSV serialization."""
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_tsv())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = read_text(path)
        id_to_word: list[str] = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].isdigit():
                raise FormatVersionMismatch(f"vocab file: bad line {line_no}")
            word, ident = parts[0], int(parts[1])
            if ident != len(id_to_word):
                raise FormatVersionMismatch(f"vocab file: non-contiguous id at line {line_no}")
            id_to_word.append(word)
        if len(id_to_word) < 2 or id_to_word[0] != PAD_TOKEN or id_to_word[1] != UNK_TOKEN:
            raise FormatVersionMismatch("vocab file: reserved tokens missing")
        word_to_id = {w: i for i, w in enumerate(id_to_word)}
        if len(word_to_id) != len(id_to_word):
            raise FormatVersionMismatch("vocab file: duplicate words")
        return cls(word_to_id=word_to_id, id_to_word=id_to_word, max_size=len(id_to_word))


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Build a vocabulary from normalized queries.

    Words are ranked by descending frequency with lexicographic tie-break,
    and the top ``max_size - 2`` receive ids 2, 3, ... in rank order.
    """
    if max_size < 3:
        raise InvalidArgument(f"max_size must be >= 3, got {max_size}")
    counts: Counter[str] = Counter()
    for query in corpus:
        counts.update(query.split())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    id_to_word = [PAD_TOKEN, UNK_TOKEN] + [w for w, _ in ranked[: max_size - 2]]
    word_to_id = {w: i for i, w in enumerate(id_to_word)}
    return Vocabulary(word_to_id=word_to_id, id_to_word=id_to_word, max_size=max_size)


def encode(query: str, vocab: Vocabulary, seq_len: int) -> np.ndarray:
    """Encode a normalized query to a fixed-length integer vector.

    Tokens are whitespace-split; unknown words map to the unk id; the
    result is right-padded with the pad id, or truncated to the first
    ``seq_len`` tokens.
    """
    if seq_len < 1:
        raise InvalidArgument(f"seq_len must be >= 1, got {seq_len}")
    out = np.zeros(seq_len, dtype=np.int64)
    for i, token in enumerate(query.split()[:seq_len]):
        out[i] = vocab.id_for(token)
    return out


@dataclass(frozen=True)
class EncodedQuery:
    """One encoded example: an id vector of fixed length plus a class index."""

    ids: np.ndarray
    label: int


@dataclass
class Dataset:
    """Encoded examples stored as dense arrays.

    ``ids`` is (N, seq_len) int64, ``labels`` is (N,) int64, and
    ``class_ids`` maps class index to the original category id.
    """

    ids: np.ndarray
    labels: np.ndarray
    class_ids: list[int]
    seq_len: int

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids.ndim != 2 or self.ids.shape[1] != self.seq_len:
            raise InvalidArgument("dataset ids must be (N, seq_len)")
        if self.labels.shape != (self.ids.shape[0],):
            raise InvalidArgument("labels must be one per example")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_ids)):
            raise InvalidArgument("labels must index class_ids")

    def __len__(self) -> int:
        return self.ids.shape[0]

    def example(self, i: int) -> EncodedQuery:
        return EncodedQuery(ids=self.ids[i], label=int(self.labels[i]))


def encode_dataset(
    pairs: Sequence[tuple[str, int]],
    vocab: Vocabulary,
    seq_len: int,
    class_ids: Sequence[int] | None = None,
) -> Dataset:
    """Encode (normalized query, category id) pairs into a Dataset.

    Class indices are positions in ``class_ids`` (ascending category id by
    default, derived from the pairs).
    """
    if class_ids is None:
        class_ids = sorted({cat for _, cat in pairs})
    index = {cat: i for i, cat in enumerate(class_ids)}
    ids = np.zeros((len(pairs), seq_len), dtype=np.int64)
    labels = np.zeros(len(pairs), dtype=np.int64)
    for row, (query, cat) in enumerate(pairs):
        if cat not in index:
            raise InvalidArgument(f"category {cat} not in class_ids")
        ids[row] = encode(query, vocab, seq_len)
        labels[row] = index[cat]
    return Dataset(ids=ids, labels=labels, class_ids=list(class_ids), seq_len=seq_len)


def split(dataset: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministically shuffle and partition into train/test.

    The training side receives ceil(N * ratio) examples, the test side the
    remainder; together they are a disjoint, exhaustive partition.
    """
    if not (0.0 < ratio < 1.0):
        raise InvalidArgument(f"ratio must be in (0,1), got {ratio}")
    n = len(dataset)
    n_train = math.ceil(n * ratio)
    perm = np.random.default_rng(seed).permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    make = lambda idx: Dataset(
        ids=dataset.ids[idx].copy(),
        labels=dataset.labels[idx].copy(),
        class_ids=list(dataset.class_ids),
        seq_len=dataset.seq_len,
    )
    return make(tr), make(te)


def persist_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset file: one header line, then one TSV row per example."""
    lines = [f"seq_len={dataset.seq_len} classes={','.join(str(c) for c in dataset.class_ids)}\n"]
    for row in range(len(dataset)):
        ids = " ".join(str(int(v)) for v in dataset.ids[row])
        lines.append(f"{int(dataset.labels[row])}\t{ids}\n")
    atomic_write_text(path, "".join(lines))


def load_dataset(path: str | Path) -> Dataset:
    text = read_text(path)
    lines = text.splitlines()
    if not lines:
        raise FormatVersionMismatch("dataset file: empty")
    header = lines[0].split()
    if len(header) != 2 or not header[0].startswith("seq_len=") or not header[1].startswith("classes="):
        raise FormatVersionMismatch("dataset file: bad header")
    try:
        seq_len = int(header[0][len("seq_len="):])
        class_ids = [int(c) for c in header[1][len("classes="):].split(",")]
    except ValueError as exc:
        raise FormatVersionMismatch("dataset file: bad header") from exc
    if seq_len < 1 or not class_ids:
        raise FormatVersionMismatch("dataset file: bad header values")
    n = len(lines) - 1
    ids = np.zeros((n, seq_len), dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    for row, line in enumerate(lines[1:]):
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatVersionMismatch(f"dataset file: bad row {row + 2}")
        try:
            label = int(parts[0])
            vec = [int(v) for v in parts[1].split(" ")]
        except ValueError as exc:
            raise FormatVersionMismatch(f"dataset file: bad row {row + 2}") from exc
        if len(vec) != seq_len or label < 0 or label >= len(class_ids) or any(v < 0 for v in vec):
            raise FormatVersionMismatch(f"dataset file: bad row {row + 2}")
        ids[row] = vec
        labels[row] = label
    return Dataset(ids=ids, labels=labels, class_ids=class_ids, seq_len=seq_len)
