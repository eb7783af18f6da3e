"""Subword vocabulary training and entity-aware encoding.

Words are split on whitespace; non-initial pieces carry a ``##`` prefix.
The vocabulary starts from every character seen in initial and continuation
position and grows by merging the most frequent adjacent pair.
"""
from __future__ import annotations

import collections
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .entities import EntitySpan, EntityType
from .exceptions import ConfigurationError, ValidationError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
CONT = "##"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK) + tuple(t.placeholder for t in EntityType)
N_SPECIAL = len(SPECIAL_TOKENS)  # 15


class Vocab:
    """Ordered token list; ids are line numbers in the vocab file."""

    pad_id, unk_id, cls_id, sep_id, mask_id = range(5)

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise ValidationError("vocabulary must start with the 15 reserved tokens in fixed order")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("duplicate token in vocabulary")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        self._max_piece = max((len(t) for t in tokens[N_SPECIAL:]), default=1)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @staticmethod
    def entity_id(entity_type: EntityType) -> int:
        return 5 + EntityType(entity_type).rank

    @property
    def entity_ids(self) -> np.ndarray:
        return np.arange(5, N_SPECIAL)

    def piece_id(self, piece: str):
        """Id of an ordinary (non-reserved) piece, or ``None``."""
        idx = self.index.get(piece)
        return idx if idx is not None and idx >= N_SPECIAL else None

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_text().encode("utf-8"))
        return path

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text("utf-8").split("\n")[:-1])


def _normalize(word: str, lowercase: bool) -> str:
    if not lowercase:
        return word
    low = word.lower()
    # Offsets must stay aligned with the source text.
    return low if len(low) == len(word) else word


def train_vocab(texts: Sequence[str], target_size: int, lowercase: bool = True) -> Vocab:
    """Frequency-driven pair merging until the vocabulary holds ``target_size`` tokens."""
    if not texts:
        raise ConfigurationError("cannot train a vocabulary on an empty corpus")
    freq: collections.Counter = collections.Counter()
    for text in texts:
        freq.update(_normalize(w, lowercase) for w in text.split())
    if not freq:
        raise ConfigurationError("corpus contains no words")

    words = list(freq)
    splits = [[w[0]] + [CONT + ch for ch in w[1:]] for w in words]
    counts = [freq[w] for w in words]
    initial = sorted({s[0] for s in splits})
    continuation = sorted({p for s in splits for p in s[1:]})
    base = initial + continuation
    if target_size <= N_SPECIAL + len(base):
        raise ConfigurationError(
            f"target size {target_size} must exceed {N_SPECIAL} reserved + {len(base)} base tokens"
        )
    tokens = list(SPECIAL_TOKENS) + base
    known = set(tokens)

    pair_freq: collections.Counter = collections.Counter()
    where = collections.defaultdict(set)
    for wi, pieces in enumerate(splits):
        for a, b in zip(pieces, pieces[1:]):
            pair_freq[(a, b)] += counts[wi]
            where[(a, b)].add(wi)

    while len(tokens) < target_size:
        pair_freq += collections.Counter()  # drop non-positive entries
        if not pair_freq:
            break
        best_count = max(pair_freq.values())
        a, b = min(p for p, c in pair_freq.items() if c == best_count)
        merged = a + b[len(CONT):]
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
        for wi in sorted(where.pop((a, b), ())):
            pieces = splits[wi]
            c = counts[wi]
            for x, y in zip(pieces, pieces[1:]):
                pair_freq[(x, y)] -= c
            out, i = [], 0
            while i < len(pieces):
                if i + 1 < len(pieces) and pieces[i] == a and pieces[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(pieces[i])
                    i += 1
            splits[wi] = out
            for x, y in zip(out, out[1:]):
                pair_freq[(x, y)] += c
                where[(x, y)].add(wi)
        pair_freq.pop((a, b), None)
    return Vocab(tokens)


def wordpiece(word: str, vocab: Vocab) -> list[tuple[int, int, int]]:
    """Greedy longest-match split of one normalized word into (id, start, end) pieces."""
    out = []
    start = 0
    n = len(word)
    while start < n:
        prefix = CONT if start > 0 else ""
        end = min(n, start + vocab._max_piece)
        found = None
        while end > start:
            tid = vocab.piece_id(prefix + word[start:end])
            if tid is not None:
                found = tid
                break
            end -= 1
        if found is None:
            found, end = Vocab.unk_id, start + 1
        out.append((found, start, end))
        start = end
    return out


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length encoded tweet. ``offsets`` holds the source character
    range per position, ``(-1, -1)`` for CLS/SEP/PAD."""

    ids: np.ndarray
    is_special: np.ndarray
    is_entity: np.ndarray
    is_continuation: np.ndarray
    offsets: np.ndarray

    @property
    def attention_mask(self) -> np.ndarray:
        return self.ids != Vocab.pad_id

    @property
    def length(self) -> int:
        return int(self.attention_mask.sum())

    def __len__(self):
        return len(self.ids)


def encode(
    text: str,
    entities: Sequence[EntitySpan],
    vocab: Vocab,
    max_len: int = 64,
    lowercase: bool = True,
) -> TokenSequence:
    """Encode ``text`` with every entity span collapsed into its entity token."""
    if max_len < 2:
        raise ConfigurationError("max_len must leave room for CLS and SEP")
    spans = sorted(entities, key=lambda s: s.start)
    content: list[tuple[int, int, int, bool, bool]] = []  # id, start, end, entity, continuation

    def add_segment(lo: int, hi: int):
        pos = lo
        for word in text[lo:hi].split():
            ws = text.index(word, pos)
            pos = ws + len(word)
            for k, (tid, s, e) in enumerate(wordpiece(_normalize(word, lowercase), vocab)):
                content.append((tid, ws + s, ws + e, False, k > 0))

    cursor = 0
    for span in spans:
        if span.start < cursor:
            raise ValidationError(f"overlapping entity span {span.key}")
        add_segment(cursor, span.start)
        content.append((vocab.entity_id(span.entity_type), span.start, span.end, True, False))
        cursor = span.end
    add_segment(cursor, len(text))
    content = content[: max_len - 2]

    ids = np.full(max_len, Vocab.pad_id, dtype=np.int64)
    is_special = np.ones(max_len, dtype=bool)
    is_entity = np.zeros(max_len, dtype=bool)
    is_cont = np.zeros(max_len, dtype=bool)
    offsets = np.full((max_len, 2), -1, dtype=np.int64)
    ids[0] = Vocab.cls_id
    for pos, (tid, s, e, ent, cont) in enumerate(content, start=1):
        ids[pos] = tid
        is_special[pos] = ent
        is_entity[pos] = ent
        is_cont[pos] = cont
        offsets[pos] = (s, e)
    ids[len(content) + 1] = Vocab.sep_id
    return TokenSequence(ids, is_special, is_entity, is_cont, offsets)


def decode(seq, vocab: Vocab) -> str:
    """Render ids back to text; entity tokens become ``<type>`` placeholders."""
    ids = seq.ids if isinstance(seq, TokenSequence) else np.asarray(seq)
    words: list[str] = []
    for tid in ids.tolist():
        if not 0 <= tid < len(vocab):
            raise ValidationError(f"token id {tid} outside vocabulary of size {len(vocab)}")
        if tid < 5:
            continue
        tok = vocab.tokens[tid]
        if tid >= N_SPECIAL and tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass(frozen=True)
class EncodedBatch:
    """Row-stacked :class:`TokenSequence` arrays."""

    ids: np.ndarray
    is_special: np.ndarray
    is_entity: np.ndarray

    @property
    def attention_mask(self) -> np.ndarray:
        return self.ids != Vocab.pad_id

    def __len__(self):
        return self.ids.shape[0]

    def __getitem__(self, idx) -> "EncodedBatch":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return EncodedBatch(self.ids[idx], self.is_special[idx], self.is_entity[idx])

    @classmethod
    def stack(cls, seqs: Sequence[TokenSequence]) -> "EncodedBatch":
        return cls(
            np.stack([s.ids for s in seqs]),
            np.stack([s.is_special for s in seqs]),
            np.stack([s.is_entity for s in seqs]),
        )

    def sequence(self, i: int) -> TokenSequence:
        n = self.ids.shape[1]
        return TokenSequence(
            self.ids[i], self.is_special[i], self.is_entity[i],
            np.zeros(n, dtype=bool), np.full((n, 2), -1, dtype=np.int64),
        )


class SubwordTokenizer(BaseEstimator, TransformerMixin):
    """Learns a subword vocabulary and encodes tweets into fixed-length id arrays.

    ``use_entities`` selects whether annotated entity spans are collapsed into
    entity tokens (entity-masked input) or left as plain text.
    """

    def __init__(self, vocab_size=800, max_len=64, lowercase=True, use_entities=True):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.lowercase = lowercase
        self.use_entities = use_entities

    def fit(self, X, y=None):
        self.vocab_ = train_vocab([_text(x) for x in X], self.vocab_size, self.lowercase)
        return self

    def transform(self, X) -> EncodedBatch:
        check_is_fitted(self, "vocab_")
        return EncodedBatch.stack([self.encode_one(x) for x in X])

    def encode_one(self, x) -> TokenSequence:
        entities = getattr(x, "entities", ()) if self.use_entities else ()
        return encode(_text(x), entities, self.vocab_, self.max_len, self.lowercase)


def _text(x) -> str:
    return x if isinstance(x, str) else x.text
