"""Rule and gazetteer based entity annotation, strict span scoring and a remote-annotator client."""
from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from .entities import EntitySpan, EntityType, check_spans
from .exceptions import RemoteAnnotatorError, ValidationError

logger = logging.getLogger(__name__)

GAZETTEER_TYPES = (
    EntityType.PERSON,
    EntityType.LOCATION,
    EntityType.ORGANIZATION,
    EntityType.EVENT,
    EntityType.ADDRESS,
)

_MONTH = (
    r"(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?"
    r"|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)"
)
_DAY = r"\d{1,2}(?:st|nd|rd|th)?"

URL_RE = re.compile(r"(?:https?://|www\.)[^\s]+?(?=[.,;:!?)\]]*(?:\s|$))", re.IGNORECASE)
HASHTAG_RE = re.compile(r"(?<![\w#])#\w+")
PHONE_RE = re.compile(r"(?<![\w+])\+?(?:\(\d{2,4}\)|\d{2,4})(?:[-.\s]\(?\d{2,4}\)?){1,4}(?![\w])")
DATE_RE = re.compile(
    rf"(?<!\w)(?:{_MONTH}\.?\s+{_DAY}(?:,?\s+\d{{4}})?"
    rf"|{_DAY}\s+{_MONTH}(?:,?\s+\d{{4}})?"
    r"|\d{4}-\d{1,2}-\d{1,2}|\d{1,2}/\d{1,2}/\d{2,4})(?!\w)",
    re.IGNORECASE,
)
NUMBER_RE = re.compile(r"(?<![\d.,])\d+(?:[.,]\d+)*(?![\d])")
_WORD_RE = re.compile(r"\w+|[^\w\s]")


def _phone_ok(surface: str) -> bool:
    return sum(ch.isdigit() for ch in surface) >= 7


@dataclass(frozen=True)
class Gazetteer:
    """Surface forms per entity type, matched case-insensitively on whole tokens."""

    entries: Mapping[EntityType, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for etype, forms in dict(self.entries).items():
            etype = EntityType(etype)
            seen, kept = set(), []
            for form in forms:
                form = " ".join(form.split())
                if not form or form.casefold() in seen:
                    continue
                seen.add(form.casefold())
                kept.append(form)
            if kept:
                clean[etype] = tuple(kept)
        object.__setattr__(self, "entries", clean)
        index, longest = {}, 0
        for etype in EntityType:
            for form in clean.get(etype, ()):
                key = tuple(t.casefold() for t in _WORD_RE.findall(form))
                # First type in enumeration order wins when a form is listed twice.
                index.setdefault(key, []).append(etype)
                longest = max(longest, len(key))
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_longest", longest)

    @classmethod
    def from_dir(cls, directory) -> "Gazetteer":
        """Load ``<entity_type>.txt`` files, one surface form per line."""
        directory = Path(directory)
        entries = {}
        for etype in EntityType:
            path = directory / f"{etype.value}.txt"
            if path.exists():
                entries[etype] = tuple(path.read_text("utf-8").splitlines())
        return cls(entries)

    def to_dir(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for etype, forms in self.entries.items():
            path = directory / f"{etype.value}.txt"
            path.write_text("\n".join(forms) + "\n", encoding="utf-8")
            written.append(path)
        return written

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def matches(self, text: str) -> list[EntitySpan]:
        """All whole-token gazetteer matches, possibly overlapping."""
        if not self._index:
            return []
        tokens = [(m.start(), m.end(), m.group().casefold()) for m in _WORD_RE.finditer(text)]
        found = []
        for i in range(len(tokens)):
            for k in range(1, min(self._longest, len(tokens) - i) + 1):
                key = tuple(t[2] for t in tokens[i : i + k])
                for etype in self._index.get(key, ()):
                    start, end = tokens[i][0], tokens[i + k - 1][1]
                    found.append(EntitySpan(start, end, etype, text[start:end]))
        return found


def pattern_matches(text: str) -> list[EntitySpan]:
    """Candidate spans from the regular-expression annotators."""
    spans = []
    for regex, etype in ((URL_RE, EntityType.URL), (HASHTAG_RE, EntityType.HASHTAG), (DATE_RE, EntityType.DATE)):
        spans.extend(EntitySpan(m.start(), m.end(), etype, m.group()) for m in regex.finditer(text))
    dates = {(s.start, s.end) for s in spans if s.entity_type is EntityType.DATE}
    for m in PHONE_RE.finditer(text):
        # a digit run that is exactly a date reads as the date
        if _phone_ok(m.group()) and (m.start(), m.end()) not in dates:
            spans.append(EntitySpan(m.start(), m.end(), EntityType.PHONE_NUMBER, m.group()))
    return spans


def resolve_overlaps(spans: Iterable[EntitySpan]) -> list[EntitySpan]:
    """Keep a non-overlapping subset: longest first, then smaller start, then type order."""
    ranked = sorted(set(spans), key=lambda s: (-(s.end - s.start), s.start, s.entity_type.rank))
    kept: list[EntitySpan] = []
    for span in ranked:
        if not any(span.overlaps(k) for k in kept):
            kept.append(span)
    return sorted(kept, key=lambda s: s.start)


def annotate(text: str, gazetteer: Gazetteer | None = None) -> list[EntitySpan]:
    """Annotate one text with pattern and gazetteer entities."""
    if not text:
        return []
    candidates = pattern_matches(text)
    if gazetteer is not None:
        candidates.extend(gazetteer.matches(text))
    spans = resolve_overlaps(candidates)
    # Numbers only fill the gaps left by every other entity type.
    for m in NUMBER_RE.finditer(text):
        num = EntitySpan(m.start(), m.end(), EntityType.NUMBER, m.group())
        if not any(num.overlaps(s) for s in spans):
            spans.append(num)
    return sorted(spans, key=lambda s: s.start)


def strict_ner_f1(gold: Sequence[Sequence[EntitySpan]], pred: Sequence[Sequence[EntitySpan]]) -> dict:
    """Micro-averaged precision/recall/F1 under exact boundary and type match."""
    if len(gold) != len(pred):
        raise ValidationError(f"{len(gold)} gold documents but {len(pred)} predicted")
    tp = n_gold = n_pred = 0
    for g_doc, p_doc in zip(gold, pred):
        unmatched = [s.key for s in g_doc]
        n_gold += len(unmatched)
        n_pred += len(p_doc)
        for span in p_doc:
            if span.key in unmatched:
                unmatched.remove(span.key)
                tp += 1
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "n_gold": n_gold, "n_pred": n_pred}


class EntityAnnotator(BaseEstimator, TransformerMixin):
    """Stateless annotator; ``transform`` maps texts (or tweets) to span lists."""

    def __init__(self, gazetteer: Gazetteer | None = None):
        self.gazetteer = gazetteer

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return [annotate(_text_of(x), self.gazetteer) for x in X]


def _text_of(x) -> str:
    return x if isinstance(x, str) else x.text


def annotate_corpus(tweets, gazetteer: Gazetteer | None = None):
    """Return copies of ``tweets`` whose entities come from :func:`annotate`."""
    return [t.with_entities(annotate(t.text, gazetteer)) for t in tweets]


# -- remote annotator -------------------------------------------------------


@dataclass(frozen=True)
class RemoteAnnotatorConfig:
    url: str
    timeout: float = 10.0
    max_retries: int = 3
    batch_size: int = 32
    backoff: float = 0.5


def _parse_remote_doc(text: str, payload) -> list[EntitySpan]:
    spans = [EntitySpan.from_json(e) for e in payload.get("entities", [])]
    check_spans(text, spans)
    return sorted(spans, key=lambda s: s.start)


def fetch_remote_annotations(
    texts: Sequence[str],
    config: RemoteAnnotatorConfig,
    fallback: Gazetteer | None = None,
    report: list | None = None,
    session=None,
) -> list[list[EntitySpan]]:
    """Annotate ``texts`` through an HTTP annotator.

    Documents whose returned spans fail validation are annotated locally
    instead and recorded in ``report`` as ``{"id", "reason"}`` entries.
    Transport failures are retried ``config.max_retries`` times per batch.
    """
    import requests

    session = session or requests.Session()
    results: list[list[EntitySpan]] = []
    for offset in range(0, len(texts), config.batch_size):
        batch = texts[offset : offset + config.batch_size]
        body = {"documents": [{"id": str(offset + i), "text": t} for i, t in enumerate(batch)]}
        payload = None
        for attempt in range(config.max_retries + 1):
            try:
                resp = session.post(config.url, json=body, timeout=config.timeout)
                resp.raise_for_status()
                payload = resp.json()
                break
            except (requests.RequestException, ValueError) as exc:
                logger.warning("remote annotator attempt %d failed: %s", attempt + 1, exc)
                if attempt == config.max_retries:
                    raise RemoteAnnotatorError(
                        f"annotator at {config.url} failed after {attempt + 1} attempts: {exc}"
                    ) from exc
                time.sleep(config.backoff * (2**attempt))
        by_id = {}
        for doc in (payload or {}).get("documents", []) if isinstance(payload, dict) else []:
            if isinstance(doc, dict) and "id" in doc:
                by_id[str(doc["id"])] = doc
        for i, text in enumerate(batch):
            doc_id = str(offset + i)
            try:
                if doc_id not in by_id:
                    raise ValidationError("document missing from response")
                results.append(_parse_remote_doc(text, by_id[doc_id]))
            except (ValidationError, TypeError, AttributeError) as exc:
                if report is not None:
                    report.append({"id": doc_id, "reason": str(exc)})
                logger.info("rejected remote annotation for doc %s: %s", doc_id, exc)
                results.append(annotate(text, fallback))
    return results
