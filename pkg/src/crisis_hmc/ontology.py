"""Two-level label hierarchy for crisis information types."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class LabelOntology:
    """Upper (parent) labels, lower (leaf) labels and the actionable subset.

    Label order is the order of first appearance in the source mapping and
    fixes the column order of every score and indicator matrix.
    """

    upper_labels: tuple[str, ...]
    lower_labels: tuple[str, ...]
    parent_of: Mapping[str, str]
    ait: frozenset[str]
    _upper_index: dict = field(init=False, repr=False, compare=False)
    _lower_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.lower_labels)) != len(self.lower_labels):
            raise ValidationError("duplicate lower label")
        if len(set(self.upper_labels)) != len(self.upper_labels):
            raise ValidationError("duplicate upper label")
        for low in self.lower_labels:
            if self.parent_of.get(low) not in self.upper_labels:
                raise ValidationError(f"lower label {low!r} has no known parent")
        if set(self.parent_of) != set(self.lower_labels):
            raise ValidationError("parent map keys differ from lower labels")
        missing = self.ait - set(self.lower_labels)
        if missing:
            raise ValidationError(f"AIT labels not in ontology: {sorted(missing)}")
        object.__setattr__(self, "_upper_index", {u: i for i, u in enumerate(self.upper_labels)})
        object.__setattr__(self, "_lower_index", {c: i for i, c in enumerate(self.lower_labels)})

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "LabelOntology":
        mapping = dict(mapping)
        ait = mapping.pop("ait", [])
        upper = []
        for parent in mapping.values():
            if not isinstance(parent, str):
                raise ValidationError(f"parent must be a string, got {parent!r}")
            if parent not in upper:
                upper.append(parent)
        return cls(tuple(upper), tuple(mapping), dict(mapping), frozenset(ait))

    @property
    def n_upper(self) -> int:
        return len(self.upper_labels)

    @property
    def n_lower(self) -> int:
        return len(self.lower_labels)

    @property
    def ait_labels(self) -> list[str]:
        """AIT labels in ontology (column) order."""
        return [c for c in self.lower_labels if c in self.ait]

    def children(self, upper: str) -> list[str]:
        return [c for c in self.lower_labels if self.parent_of[c] == upper]

    def child_indices(self, upper: str) -> np.ndarray:
        return np.array([self._lower_index[c] for c in self.children(upper)], dtype=np.intp)

    def parent_index_array(self) -> np.ndarray:
        """For every lower column, the column index of its parent."""
        return np.array([self._upper_index[self.parent_of[c]] for c in self.lower_labels], dtype=np.intp)

    def upper_index(self, label: str) -> int:
        return self._upper_index[label]

    def lower_index(self, label: str) -> int:
        try:
            return self._lower_index[label]
        except KeyError:
            raise ValidationError(f"unknown label {label!r}") from None

    def check_lower(self, labels: Iterable[str]) -> None:
        for label in labels:
            if label not in self._lower_index:
                raise ValidationError(f"unknown label {label!r}")

    def lower_indicator(self, label_sets) -> np.ndarray:
        out = np.zeros((len(label_sets), self.n_lower), dtype=np.float64)
        for row, labels in enumerate(label_sets):
            for label in labels:
                out[row, self.lower_index(label)] = 1.0
        return out

    def upper_indicator(self, label_sets) -> np.ndarray:
        """Indicator matrix of *derived* upper labels for lower label sets."""
        out = np.zeros((len(label_sets), self.n_upper), dtype=np.float64)
        for row, labels in enumerate(label_sets):
            for label in derive_upper_labels(labels, self):
                out[row, self._upper_index[label]] = 1.0
        return out

    def to_mapping(self) -> dict:
        out = {c: self.parent_of[c] for c in self.lower_labels}
        out["ait"] = self.ait_labels
        return out


def derive_upper_labels(lower: Iterable[str], ontology: LabelOntology) -> set[str]:
    """Map a set of lower labels onto the set of their parents."""
    lower = set(lower)
    ontology.check_lower(lower)
    return {ontology.parent_of[c] for c in lower}


def load_ontology(path: str | Path | None = None) -> LabelOntology:
    """Read an ontology JSON file; ``None`` loads the bundled TREC-IS ontology."""
    if path is None:
        text = resources.files("crisis_hmc").joinpath("data/ontology.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    try:
        mapping = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"ontology file is not valid JSON: {exc}") from exc
    if not isinstance(mapping, dict):
        raise ValidationError("ontology file must hold a JSON object")
    return LabelOntology.from_mapping(mapping)


_DEFAULT = None


def default_ontology() -> LabelOntology:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_ontology()
    return _DEFAULT
