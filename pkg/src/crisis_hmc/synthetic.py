"""Synthetic crisis-tweet corpus with event-specific entities and tunable spurious correlation.

Every event owns a private pool of invented names (locations, people,
organisations, addresses, hashtags, the event's own name). For each
(event, label) pair one pool entity is the *signature*; with probability
``spurious_correlation`` a label fragment is prefixed with it, which makes
entity identity predictive of the label inside training events but useless
on unseen events.
"""
from __future__ import annotations

import json
import re
import string
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .corpus import AnnotatedTweet, DatasetSplit
from .entities import EntitySpan, EntityType
from .exceptions import ConfigurationError
from .ner import Gazetteer
from .ontology import LabelOntology, default_ontology

_SLOT_RE = re.compile(r"\{(\w+)\}")
_POOL_TYPES = ("location", "person", "organization", "event", "address", "hashtag")
_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"] + ["ar", "en", "ol", "is", "um"]
_ORG_SUFFIX = ("Relief", "Council", "Services", "Foundation", "Alliance", "Network")
_STREET = ("Street", "Road", "Avenue", "Lane")
_MONTHS = ("January", "February", "March", "April", "June", "July", "August",
           "September", "October", "November", "December")

DEFAULT_POOL_SIZES = {"location": 6, "person": 6, "organization": 3, "event": 1, "address": 4, "hashtag": 3}


def load_templates(path=None) -> dict:
    if path is None:
        text = resources.files("crisis_hmc").joinpath("data/templates.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class SyntheticSpec:
    event_types: tuple = ("flood", "wildfire", "earthquake", "hurricane")
    n_events: int = 4
    tweets_per_event: int = 60
    entity_pool_sizes: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_POOL_SIZES))
    templates: str | None = None  # path; None = bundled templates
    spurious_correlation: float = 0.0
    multi_label_p: float = 0.3
    filler_p: float = 0.3
    seed: int = 13

    def __post_init__(self):
        if not 0.0 <= self.spurious_correlation <= 1.0:
            raise ConfigurationError("spurious_correlation must lie in [0, 1]")
        if self.n_events <= 0 or self.tweets_per_event <= 0 or not self.event_types:
            raise ConfigurationError("need at least one event type, event and tweet")
        for etype, size in self.entity_pool_sizes.items():
            if etype not in _POOL_TYPES or size <= 0:
                raise ConfigurationError(f"bad entity pool entry {etype}={size}")
        object.__setattr__(self, "event_types", tuple(self.event_types))
        object.__setattr__(self, "entity_pool_sizes", dict(self.entity_pool_sizes))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        d = dict(d)
        if "event_types" in d:
            d["event_types"] = tuple(d["event_types"])
        if "entity_pool_sizes" in d:
            d["entity_pool_sizes"] = {**DEFAULT_POOL_SIZES, **d["entity_pool_sizes"]}
        return cls(**d)


@dataclass
class SyntheticEvent:
    event_id: str
    event_type: str
    pool: dict  # entity type -> list of surface forms
    signature: dict  # lower label -> (entity type, surface)


@dataclass
class SyntheticCorpus:
    tweets: list
    events: list
    gazetteer: Gazetteer
    spec: SyntheticSpec

    def __iter__(self):
        return iter(self.tweets)

    def __len__(self):
        return len(self.tweets)

    def __getitem__(self, i):
        return self.tweets[i]

    def split(self, n_test_per_type: int = 1) -> DatasetSplit:
        """Hold out the last ``n_test_per_type`` events of every event type."""
        train, test = set(), set()
        for etype in self.spec.event_types:
            ids = [e.event_id for e in self.events if e.event_type == etype]
            if n_test_per_type >= len(ids):
                raise ConfigurationError("need at least one training event per type")
            train.update(ids[: len(ids) - n_test_per_type])
            test.update(ids[len(ids) - n_test_per_type :])
        return DatasetSplit(frozenset(train), frozenset(test))


class _Names:
    """Invented capitalised names whose tokens never repeat or clash with template words."""

    def __init__(self, rng, reserved):
        self.rng = rng
        self.used = {w.casefold() for w in reserved}

    def __call__(self):
        while True:
            k = int(self.rng.integers(2, 4))
            name = "".join(self.rng.choice(_SYLLABLES, size=k)).capitalize()
            if name.casefold() not in self.used:
                self.used.add(name.casefold())
                return name


def _template_words(templates) -> set:
    words = set()
    for entry in templates["labels"].values():
        for t in entry["templates"]:
            words.update(re.findall(r"\w+", _SLOT_RE.sub(" ", t)))
    for t in templates.get("filler", []):
        words.update(re.findall(r"\w+", t))
    for variants in templates.get("event_types", {}).values():
        words.update(variants)
    return words | set(_ORG_SUFFIX) | set(_STREET) | set(_MONTHS)


def _make_pool(names, rng, etype, sizes, type_words) -> dict:
    pool = {}
    for kind in _POOL_TYPES:
        n = sizes.get(kind, 0)
        if kind == "location":
            forms = [names() for _ in range(n)]
        elif kind == "person":
            forms = [f"{names()} {names()}" for _ in range(n)]
        elif kind == "organization":
            forms = [f"{names()} {rng.choice(_ORG_SUFFIX)}" for _ in range(n)]
        elif kind == "event":
            forms = [f"{names()} {type_words[0].capitalize()}" for _ in range(n)]
        elif kind == "address":
            forms = [f"{int(rng.integers(2, 300))} {names()} {rng.choice(_STREET)}" for _ in range(n)]
        else:
            forms = [f"#{names().lower()}{type_words[0]}" for _ in range(n)]
        pool[kind] = forms
    return pool


def _pattern_entity(kind, rng) -> str:
    if kind == "url":
        return "https://t.co/" + "".join(rng.choice(list(string.ascii_letters + string.digits), size=8))
    if kind == "number":
        value = int(rng.integers(2, 5000))
        return f"{value:,}" if value >= 1000 and rng.random() < 0.5 else str(value)
    if kind == "date":
        return f"{rng.choice(_MONTHS)} {int(rng.integers(1, 29))}"
    if kind == "phone_number":
        return f"{int(rng.integers(200, 999))}-{int(rng.integers(200, 999))}-{int(rng.integers(1000, 9999))}"
    raise ConfigurationError(f"unknown template slot {{{kind}}}")


def _render(template, event, rng, start_offset):
    """Fill slots; returns the text and the spans (offsets relative to the full tweet)."""
    out, spans, pos = [], [], 0
    used = {}
    for m in _SLOT_RE.finditer(template):
        out.append(template[pos : m.start()])
        kind = m.group(1)
        if kind in event.pool:
            options = [f for f in event.pool[kind] if f not in used.get(kind, ())] or event.pool[kind]
            surface = str(rng.choice(options))
            used.setdefault(kind, set()).add(surface)
        else:
            surface = _pattern_entity(kind, rng)
        begin = start_offset + sum(len(s) for s in out)
        spans.append(EntitySpan(begin, begin + len(surface), EntityType(kind), surface))
        out.append(surface)
        pos = m.end()
    out.append(template[pos:])
    return "".join(out), spans


def generate_synthetic(spec: SyntheticSpec, ontology: LabelOntology | None = None) -> SyntheticCorpus:
    ontology = ontology or default_ontology()
    templates = load_templates(spec.templates)
    label_entries = templates.get("labels") or {}
    if not label_entries or not any(e.get("templates") for e in label_entries.values()):
        raise ConfigurationError("template set is empty")
    ontology.check_lower(label_entries)
    labels = [l for l in ontology.lower_labels if label_entries.get(l, {}).get("templates")]
    weights = np.array([float(label_entries[l].get("weight", 1.0)) for l in labels])
    weights /= weights.sum()
    fillers = templates.get("filler", [])
    type_words = templates.get("event_types", {})

    rng = np.random.default_rng(spec.seed)
    names = _Names(rng, _template_words(templates))
    events = []
    for etype in spec.event_types:
        words = type_words.get(etype, [etype])
        for k in range(spec.n_events):
            pool = _make_pool(names, rng, etype, spec.entity_pool_sizes, words)
            flat = [(kind, f) for kind in ("location", "person", "organization", "hashtag") for f in pool[kind]]
            signature = {}
            for label in labels:
                kind, form = flat[int(rng.integers(len(flat)))]
                signature[label] = (kind, form)
            events.append(SyntheticEvent(f"{etype}-{k + 1:02d}", etype, pool, signature))

    tweets = []
    for event in events:
        for n in range(spec.tweets_per_event):
            chosen = [labels[int(rng.choice(len(labels), p=weights))]]
            if rng.random() < spec.multi_label_p:
                second = labels[int(rng.choice(len(labels), p=weights))]
                if second not in chosen:
                    chosen.append(second)
            text, spans = "", []
            for label in chosen:
                if text:
                    text += ". "
                if rng.random() < spec.spurious_correlation:
                    kind, form = event.signature[label]
                    spans.append(EntitySpan(len(text), len(text) + len(form), EntityType(kind), form))
                    text += form + ": "
                entry = label_entries[label]["templates"]
                frag, frag_spans = _render(str(rng.choice(entry)), event, rng, len(text))
                text += frag
                spans.extend(frag_spans)
            if fillers and rng.random() < spec.filler_p:
                text += " " + str(rng.choice(fillers))
            tweets.append(
                AnnotatedTweet.create(f"{event.event_id}-{n:04d}", event.event_id, event.event_type,
                                      text, chosen, ontology, spans)
            )

    gaz = {}
    for event in events:
        for kind, forms in event.pool.items():
            if kind != "hashtag":
                gaz.setdefault(EntityType(kind), []).extend(forms)
    return SyntheticCorpus(tweets, events, Gazetteer({k: tuple(v) for k, v in gaz.items()}), spec)
