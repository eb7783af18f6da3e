"""Entity types and character spans shared by the NER, corpus and tokenizer modules."""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .exceptions import ValidationError


class EntityType(str, enum.Enum):
    # Declaration order is the tie-break order used by overlap resolution
    # and the order of the entity tokens in the vocabulary.
    HASHTAG = "hashtag"
    URL = "url"
    PERSON = "person"
    LOCATION = "location"
    ORGANIZATION = "organization"
    EVENT = "event"
    ADDRESS = "address"
    PHONE_NUMBER = "phone_number"
    DATE = "date"
    NUMBER = "number"

    @property
    def rank(self) -> int:
        return _RANK[self]

    @property
    def placeholder(self) -> str:
        return f"<{self.value}>"


_RANK = {t: i for i, t in enumerate(EntityType)}


@dataclass(frozen=True, order=True)
class EntitySpan:
    """Half-open character range ``[start, end)`` holding one entity."""

    start: int
    end: int
    entity_type: EntityType
    surface: str

    def __post_init__(self):
        if not isinstance(self.entity_type, EntityType):
            try:
                object.__setattr__(self, "entity_type", EntityType(self.entity_type))
            except ValueError:
                raise ValidationError(f"unknown entity type {self.entity_type!r}") from None
        if not 0 <= self.start < self.end:
            raise ValidationError(f"bad span offsets ({self.start}, {self.end})")
        if len(self.surface) != self.end - self.start:
            raise ValidationError(
                f"surface {self.surface!r} does not fit span ({self.start}, {self.end})"
            )

    @property
    def key(self) -> tuple[int, int, EntityType]:
        return (self.start, self.end, self.entity_type)

    def overlaps(self, other: "EntitySpan") -> bool:
        return self.start < other.end and other.start < self.end

    def check_against(self, text: str) -> None:
        if self.end > len(text):
            raise ValidationError(f"span ({self.start}, {self.end}) exceeds text length {len(text)}")
        if text[self.start:self.end] != self.surface:
            raise ValidationError(
                f"span ({self.start}, {self.end}) surface {self.surface!r} "
                f"!= text slice {text[self.start:self.end]!r}"
            )

    def to_json(self) -> dict:
        return {"start": self.start, "end": self.end, "type": self.entity_type.value, "text": self.surface}

    @classmethod
    def from_json(cls, obj: dict) -> "EntitySpan":
        try:
            return cls(int(obj["start"]), int(obj["end"]), obj["type"], obj["text"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed entity object {obj!r}") from exc


def check_spans(text: str, spans) -> None:
    """Raise unless every span fits ``text`` and no two spans overlap."""
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    for span in ordered:
        span.check_against(text)
    for left, right in zip(ordered, ordered[1:]):
        if left.overlaps(right):
            raise ValidationError(f"overlapping spans {left.key} and {right.key}")
