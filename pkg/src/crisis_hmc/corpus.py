"""Tweet data model, JSON Lines I/O and event-aware dataset splitting."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .entities import EntitySpan, check_spans
from .exceptions import CorpusParseError, ValidationError
from .ontology import LabelOntology, derive_upper_labels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnnotatedTweet:
    id: str
    event_id: str
    event_type: str
    text: str
    entities: tuple[EntitySpan, ...] = ()
    lower_labels: frozenset[str] = frozenset()
    upper_labels: frozenset[str] = field(default=frozenset())

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(sorted(self.entities)))
        object.__setattr__(self, "lower_labels", frozenset(self.lower_labels))
        object.__setattr__(self, "upper_labels", frozenset(self.upper_labels))
        check_spans(self.text, self.entities)

    @classmethod
    def create(cls, id, event_id, event_type, text, lower_labels, ontology: LabelOntology, entities=()):
        """Build a tweet, deriving its upper labels from ``lower_labels``."""
        lower = frozenset(lower_labels)
        return cls(
            id=str(id),
            event_id=str(event_id),
            event_type=str(event_type),
            text=text,
            entities=tuple(entities),
            lower_labels=lower,
            upper_labels=frozenset(derive_upper_labels(lower, ontology)),
        )

    def with_entities(self, entities) -> "AnnotatedTweet":
        return AnnotatedTweet(
            self.id, self.event_id, self.event_type, self.text,
            tuple(entities), self.lower_labels, self.upper_labels,
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "event_id": self.event_id,
            "event_type": self.event_type,
            "text": self.text,
            "lower_labels": sorted(self.lower_labels),
            "entities": [s.to_json() for s in self.entities],
        }


@dataclass(frozen=True)
class DatasetSplit:
    train_event_ids: frozenset[str]
    test_event_ids: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "train_event_ids", frozenset(map(str, self.train_event_ids)))
        object.__setattr__(self, "test_event_ids", frozenset(map(str, self.test_event_ids)))
        shared = self.train_event_ids & self.test_event_ids
        if shared:
            raise ValidationError(f"events in both train and test: {sorted(shared)}")


_REQUIRED = ("id", "event_id", "event_type", "text", "lower_labels")


def parse_tweet(obj, ontology: LabelOntology, lineno=None) -> AnnotatedTweet:
    if not isinstance(obj, dict):
        raise CorpusParseError("expected a JSON object", lineno)
    for key in _REQUIRED:
        if key not in obj:
            raise CorpusParseError(f"missing key {key!r}", lineno)
    labels = obj["lower_labels"]
    if not isinstance(labels, list):
        raise CorpusParseError("lower_labels must be an array", lineno)
    try:
        ontology.check_lower(labels)
        entities = [EntitySpan.from_json(e) for e in obj.get("entities") or []]
        return AnnotatedTweet.create(
            obj["id"], obj["event_id"], obj["event_type"], obj["text"], labels, ontology, entities
        )
    except ValidationError as exc:
        if lineno is None:
            raise
        raise ValidationError(f"line {lineno}: {exc}") from exc


def load_corpus(path, ontology: LabelOntology) -> list[AnnotatedTweet]:
    """Read a JSON Lines corpus; blank lines are skipped."""
    tweets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            tweets.append(parse_tweet(obj, ontology, lineno))
    return tweets


def save_corpus(tweets: Iterable[AnnotatedTweet], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tweet in tweets:
            fh.write(json.dumps(tweet.to_json(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")
    return path


def split_by_event(corpus: Sequence[AnnotatedTweet], split: DatasetSplit):
    """Partition ``corpus`` into (train, test) lists by event id."""
    train, test = [], []
    for tweet in corpus:
        if tweet.event_id in split.train_event_ids:
            train.append(tweet)
        elif tweet.event_id in split.test_event_ids:
            test.append(tweet)
        else:
            raise ValidationError(f"event {tweet.event_id!r} is in neither train nor test split")
    return train, test


def _refine_by_swaps(corpus, side, labels, dev_share, max_rounds=50):
    """Swap fit/dev pairs while that lowers the squared per-label share error.

    Sizes are untouched. Candidates are scanned in index order, so the result
    is deterministic given the starting assignment.
    """
    if not labels:
        return
    col = {lab: j for j, lab in enumerate(labels)}
    Y = np.zeros((len(corpus), len(labels)))
    for i, t in enumerate(corpus):
        for lab in t.lower_labels:
            Y[i, col[lab]] = 1.0
    target = dev_share * Y.sum(0)
    for _ in range(max_rounds):
        diff = Y[side == 1].sum(0) - target
        dev_idx = np.flatnonzero(side == 1)
        fit_idx = np.flatnonzero(side == 0)
        # moving d out and f in changes diff by Y[f] - Y[d]
        base = (diff**2).sum()
        best, best_pair = -1e-9, None
        for lo in range(0, len(dev_idx), 64):
            rows = dev_idx[lo : lo + 64]
            delta = Y[fit_idx][None, :, :] - Y[rows][:, None, :]
            gain = ((diff + delta) ** 2).sum(-1) - base
            k = int(np.argmin(gain))
            if gain.flat[k] < best:
                best = gain.flat[k]
                d, f = divmod(k, len(fit_idx))
                best_pair = (rows[d], fit_idx[f])
        if best_pair is None:
            break
        side[best_pair[0]], side[best_pair[1]] = 0, 1


def stratified_dev_split(corpus: Sequence[AnnotatedTweet], ratio: float = 0.9, seed: int = 13):
    """Multi-label stratified (fit, dev) split.

    Iterative stratification: labels are processed rarest first and each
    example carrying the current label goes to the side that still wants the
    most positives of it. Unlabelled leftovers fill the remaining quotas.
    """
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(corpus)
    if n < 2:
        raise ValidationError("need at least two tweets to split")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_fit = int(round(ratio * n))
    n_fit = min(max(n_fit, 1), n - 1)
    want_total = np.array([n_fit, n - n_fit], dtype=float)
    share = np.array([ratio, 1.0 - ratio])

    labels = sorted({lab for t in corpus for lab in t.lower_labels})
    want_label = {}
    for lab in labels:
        count = sum(lab in t.lower_labels for t in corpus)
        want_label[lab] = share * count

    side = np.full(n, -1, dtype=int)
    remaining = {lab: [i for i in order if lab in corpus[i].lower_labels] for lab in labels}

    def pick(wants):
        best = np.flatnonzero(wants == wants.max())
        if len(best) > 1:
            sub = want_total[best]
            best = best[sub == sub.max()]
        return int(best[0]) if len(best) == 1 else int(rng.choice(best))

    while True:
        live = [(len(v), lab) for lab, v in remaining.items() if v]
        if not live:
            break
        _, lab = min(live)
        for i in remaining[lab]:
            s = pick(want_label[lab])
            side[i] = s
            want_total[s] -= 1
            for other in corpus[i].lower_labels:
                want_label[other][s] -= 1
        for other in remaining:
            remaining[other] = [i for i in remaining[other] if side[i] < 0]

    for i in order:
        if side[i] < 0:
            s = pick(want_total.copy())
            side[i] = s
            want_total[s] -= 1

    # Label-driven placement ignores the size quota; move the least-labelled
    # examples across until the dev side holds exactly n - n_fit.
    excess = int((side == 1).sum()) - (n - n_fit)
    if excess:
        src = 1 if excess > 0 else 0
        movable = sorted((len(corpus[i].lower_labels), k, i) for k, i in enumerate(order) if side[i] == src)
        for _, _, i in movable[: abs(excess)]:
            side[i] = 1 - src

    _refine_by_swaps(corpus, side, labels, 1.0 - ratio)

    fit = [t for t, s in zip(corpus, side) if s == 0]
    dev = [t for t, s in zip(corpus, side) if s == 1]
    logger.debug("stratified split: %d fit / %d dev", len(fit), len(dev))
    return fit, dev
