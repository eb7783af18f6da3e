"""Entity-aware masked-language-model corruption."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError
from .tokenizer import N_SPECIAL, EncodedBatch, TokenSequence, Vocab

IGNORE = -100


@dataclass(frozen=True)
class MaskingConfig:
    """Selection probabilities for entity tokens (``alpha``) and ordinary subwords (``beta``)."""

    alpha: float = 0.5
    beta: float = 0.1
    replace_mask_p: float = 0.8
    replace_random_p: float = 0.1
    keep_p: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "replace_mask_p", "replace_random_p", "keep_p"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name}={value} is not a probability")
        total = self.replace_mask_p + self.replace_random_p + self.keep_p
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"replacement probabilities sum to {total}, not 1")


def standard_mlm_config() -> MaskingConfig:
    """Plain MLM: every content token selected at the usual 15% rate."""
    return MaskingConfig(alpha=0.15, beta=0.15)


@dataclass(frozen=True)
class MaskedExample:
    input_ids: np.ndarray
    target_ids: np.ndarray
    selection_flags: np.ndarray
    # 0 = untouched, 1 = [MASK], 2 = random token, 3 = kept
    replacement: np.ndarray


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def mask_sequence(
    seq: TokenSequence,
    cfg: MaskingConfig,
    seed: int,
    index: int = 0,
    vocab_size: int | None = None,
) -> MaskedExample:
    """Corrupt one sequence; the draw depends only on ``(seed, index)``."""
    ids = np.asarray(seq.ids)
    is_entity = np.asarray(seq.is_entity, dtype=bool)
    is_special = np.asarray(seq.is_special, dtype=bool)
    if vocab_size is None:
        vocab_size = int(ids.max()) + 1
    rng = example_rng(seed, index)
    n = ids.shape[0]
    u_select = rng.random(n)
    u_kind = rng.random(n)
    random_ids = rng.integers(N_SPECIAL, max(vocab_size, N_SPECIAL + 1), size=n)

    ordinary = ~is_special & ~is_entity
    selected = (is_entity & (u_select < cfg.alpha)) | (ordinary & (u_select < cfg.beta))

    to_mask = selected & (u_kind < cfg.replace_mask_p)
    to_random = selected & ~to_mask & (u_kind < cfg.replace_mask_p + cfg.replace_random_p)
    kept = selected & ~to_mask & ~to_random

    inputs = ids.copy()
    inputs[to_mask] = Vocab.mask_id
    if vocab_size > N_SPECIAL:
        inputs[to_random] = random_ids[to_random]
    targets = np.where(selected, ids, IGNORE)
    replacement = np.zeros(n, dtype=np.int8)
    replacement[to_mask] = 1
    replacement[to_random] = 2
    replacement[kept] = 3
    return MaskedExample(inputs, targets, selected, replacement)


def mask_batch(batch: EncodedBatch, cfg: MaskingConfig, seed: int, indices: Sequence[int], vocab_size: int):
    """Mask rows of ``batch``; ``indices`` are the rows' corpus-level example indices."""
    examples = [
        mask_sequence(batch.sequence(r), cfg, seed, idx, vocab_size) for r, idx in enumerate(indices)
    ]
    return (
        np.stack([e.input_ids for e in examples]),
        np.stack([e.target_ids for e in examples]),
    )


def masking_statistics(examples: Sequence[MaskedExample], sequences: Sequence[TokenSequence]) -> dict:
    n_ent = n_ord = sel_ent = sel_ord = 0
    kinds = np.zeros(4, dtype=np.int64)
    for ex, seq in zip(examples, sequences):
        ent = np.asarray(seq.is_entity, dtype=bool)
        ordinary = ~np.asarray(seq.is_special, dtype=bool) & ~ent
        n_ent += int(ent.sum())
        n_ord += int(ordinary.sum())
        sel_ent += int((ex.selection_flags & ent).sum())
        sel_ord += int((ex.selection_flags & ordinary).sum())
        kinds += np.bincount(ex.replacement, minlength=4)
    n_sel = int(kinds[1:].sum())
    return {
        "entity_positions": n_ent,
        "entity_selected": sel_ent,
        "entity_rate": sel_ent / n_ent if n_ent else 0.0,
        "subword_positions": n_ord,
        "subword_selected": sel_ord,
        "subword_rate": sel_ord / n_ord if n_ord else 0.0,
        "mask_share": kinds[1] / n_sel if n_sel else 0.0,
        "random_share": kinds[2] / n_sel if n_sel else 0.0,
        "keep_share": kinds[3] / n_sel if n_sel else 0.0,
    }


def write_statistics_csv(stats: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["statistic", "value"])
        for key, value in stats.items():
            writer.writerow([key, repr(float(value)) if isinstance(value, float) else value])
