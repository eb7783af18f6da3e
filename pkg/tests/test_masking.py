import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crisis_hmc.exceptions import ConfigurationError
from crisis_hmc.masking import (
    IGNORE,
    MaskingConfig,
    mask_batch,
    mask_sequence,
    masking_statistics,
    standard_mlm_config,
    write_statistics_csv,
)
from crisis_hmc.tokenizer import N_SPECIAL, EncodedBatch, TokenSequence, Vocab

V = 200


def make_seq(kinds):
    """kinds: string over c (CLS), s (SEP), p (PAD), e (entity), w (word)."""
    ids, special, entity = [], [], []
    for i, k in enumerate(kinds):
        if k == "c":
            ids.append(Vocab.cls_id)
        elif k == "s":
            ids.append(Vocab.sep_id)
        elif k == "p":
            ids.append(Vocab.pad_id)
        elif k == "e":
            ids.append(5 + i % 10)
        else:
            ids.append(N_SPECIAL + 3 + i)
        special.append(k in "cspe")
        entity.append(k == "e")
    n = len(kinds)
    return TokenSequence(
        np.array(ids), np.array(special), np.array(entity), np.zeros(n, bool), np.full((n, 2), -1)
    )


SEQ = make_seq("cweewwwewsppp")


def test_config_validation():
    with pytest.raises(ConfigurationError):
        MaskingConfig(alpha=1.5)
    with pytest.raises(ConfigurationError):
        MaskingConfig(replace_mask_p=0.5)
    assert standard_mlm_config().alpha == standard_mlm_config().beta == 0.15


def test_zero_probabilities_select_nothing():
    ex = mask_sequence(SEQ, MaskingConfig(alpha=0.0, beta=0.0), seed=1, vocab_size=V)
    assert not ex.selection_flags.any()
    assert (ex.target_ids == IGNORE).all()
    assert np.array_equal(ex.input_ids, SEQ.ids)


def test_alpha_one_selects_exactly_entities():
    for s in range(20):
        ex = mask_sequence(SEQ, MaskingConfig(alpha=1.0, beta=0.0), seed=s, vocab_size=V)
        assert np.array_equal(ex.selection_flags, SEQ.is_entity)
        assert np.array_equal(ex.target_ids[SEQ.is_entity], SEQ.ids[SEQ.is_entity])


def test_replacement_kinds_consistent():
    cfg = MaskingConfig(alpha=1.0, beta=1.0)
    for s in range(50):
        ex = mask_sequence(SEQ, cfg, seed=s, vocab_size=V)
        sel = ex.selection_flags
        assert (ex.replacement[~sel] == 0).all() and (ex.replacement[sel] > 0).all()
        assert (ex.input_ids[ex.replacement == 1] == Vocab.mask_id).all()
        assert (ex.input_ids[ex.replacement == 3] == SEQ.ids[ex.replacement == 3]).all()
        rand = ex.input_ids[ex.replacement == 2]
        assert ((rand >= N_SPECIAL) & (rand < V)).all()


def test_rates_over_many_draws():
    cfg = MaskingConfig(alpha=0.5, beta=0.1)
    examples = [mask_sequence(SEQ, cfg, 7, i, V) for i in range(10_000)]
    stats = masking_statistics(examples, [SEQ] * len(examples))
    assert stats["entity_rate"] == pytest.approx(0.5, abs=0.02)
    assert stats["subword_rate"] == pytest.approx(0.1, abs=0.01)
    assert stats["mask_share"] == pytest.approx(0.8, abs=0.02)
    assert stats["random_share"] == pytest.approx(0.1, abs=0.02)
    assert stats["keep_share"] == pytest.approx(0.1, abs=0.02)


def test_draw_depends_only_on_seed_and_index():
    cfg = MaskingConfig()
    a = mask_sequence(SEQ, cfg, 3, 17, V)
    b = mask_sequence(SEQ, cfg, 3, 17, V)
    assert np.array_equal(a.input_ids, b.input_ids) and np.array_equal(a.target_ids, b.target_ids)
    differs = any(
        not np.array_equal(mask_sequence(SEQ, cfg, 3, i, V).selection_flags, a.selection_flags) for i in range(20)
    )
    assert differs


def test_mask_batch_row_order_irrelevant():
    seqs = [make_seq("cwwwesp"), make_seq("cewwwws")]
    batch = EncodedBatch.stack(seqs)
    cfg = MaskingConfig(alpha=0.7, beta=0.5)
    inp, tgt = mask_batch(batch, cfg, 5, [10, 11], V)
    rev = batch[[1, 0]]
    inp2, tgt2 = mask_batch(rev, cfg, 5, [11, 10], V)
    assert np.array_equal(inp, inp2[::-1]) and np.array_equal(tgt, tgt2[::-1])


def test_standard_mlm_treats_entities_like_words_when_absent():
    plain = make_seq("cwwwwwwwsp")
    std = mask_sequence(plain, standard_mlm_config(), 2, 0, V)
    emlm = mask_sequence(plain, MaskingConfig(alpha=0.9, beta=0.15), 2, 0, V)
    # without entity tokens alpha plays no role
    assert np.array_equal(std.selection_flags, emlm.selection_flags)


def test_statistics_csv(tmp_path):
    examples = [mask_sequence(SEQ, MaskingConfig(), 0, i, V) for i in range(10)]
    stats = masking_statistics(examples, [SEQ] * 10)
    write_statistics_csv(stats, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "statistic,value" and len(lines) == len(stats) + 1


@settings(max_examples=200, deadline=None)
@given(
    st.text(alphabet="wep", min_size=0, max_size=30),
    st.floats(0, 1),
    st.floats(0, 1),
    st.integers(0, 2**31),
)
def test_specials_never_selected(body, alpha, beta, seed):
    seq = make_seq("c" + body.replace("p", "") + "s" + "p" * body.count("p"))
    ex = mask_sequence(seq, MaskingConfig(alpha=alpha, beta=beta), seed, 0, V)
    structural = seq.is_special & ~seq.is_entity
    assert not ex.selection_flags[structural].any()
    assert np.array_equal(ex.input_ids[structural], seq.ids[structural])
