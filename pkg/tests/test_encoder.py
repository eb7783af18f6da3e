import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crisis_hmc import encoder as enc
from crisis_hmc.exceptions import ConfigurationError, NumericError, ValidationError
from crisis_hmc.gradcheck import check_gradients, numeric_gradients, relative_error, rounding_floor
from crisis_hmc.masking import IGNORE

TOY = enc.EncoderConfig(vocab_size=40, n_layers=1, n_heads=2, d_model=16, d_ff=32, max_len=8, dropout=0.0, init_std=0.2)


def toy_batch(seed=1):
    rng = np.random.default_rng(seed)
    ids = rng.integers(15, 40, (3, 8))
    ids[:, 0] = 2
    ids[1, 5:] = 0
    ids[2, 3:] = 0
    targets = np.full(ids.shape, IGNORE)
    targets[0, 2], targets[1, 1], targets[2, 2], targets[0, 5] = 20, 33, 17, 25
    return ids, targets


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        enc.EncoderConfig(vocab_size=10, d_model=30, n_heads=4)
    with pytest.raises(ConfigurationError):
        enc.EncoderConfig(vocab_size=0)
    with pytest.raises(ConfigurationError):
        enc.EncoderConfig(vocab_size=10, dropout=1.0)


def test_param_shapes():
    p = enc.init_params(TOY)
    assert p["tok_emb"].shape == (40, 16) and p["pos_emb"].shape == (8, 16)
    assert p["layer0.w1"].shape == (16, 32) and p["mlm_bias"].shape == (40,)
    assert all(v.dtype == np.float32 for v in p.values())
    assert (p["layer0.ln1_g"] == 1).all() and (p["layer0.bq"] == 0).all()


def test_zero_layers_is_embedding_layer_norm():
    cfg = enc.EncoderConfig(vocab_size=30, n_layers=0, n_heads=2, d_model=8, d_ff=8, max_len=6, dropout=0.0)
    p = enc.init_params(cfg, dtype=np.float64)
    ids = np.array([[2, 20, 21, 3, 0, 0]])
    e = p["tok_emb"][ids] + p["pos_emb"][:6]
    mu = e.mean(-1, keepdims=True)
    expected = (e - mu) / np.sqrt(e.var(-1, keepdims=True) + enc.LN_EPS)
    out = enc.forward(p, cfg, ids)
    np.testing.assert_allclose(out.hidden_states, expected, atol=1e-12)


def test_attention_rows_sum_to_one():
    p = enc.init_params(TOY, seed=3)
    ids, _ = toy_batch()
    out = enc.forward(p, TOY, ids, ids != 0, return_attention=True)
    for pr in out.attentions:
        np.testing.assert_allclose(pr.sum(-1), 1.0, atol=1e-6)
        # no weight on PAD keys
        assert pr[2, :, :, 3:].max() < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**16))
def test_pad_tail_permutation_leaves_cls_unchanged(n_real, seed):
    p = enc.init_params(TOY, seed=2)
    rng = np.random.default_rng(seed)
    ids = np.zeros(8, dtype=int)
    ids[0] = 2
    ids[1 : n_real + 1] = rng.integers(15, 40, n_real)
    # whatever sits in the masked tail must not reach CLS
    other = ids.copy()
    other[n_real + 1 :] = rng.integers(15, 40, 8 - n_real - 1)
    mask = ids != 0
    a = enc.forward(p, TOY, ids, mask).cls_embedding
    b = enc.forward(p, TOY, other, mask).cls_embedding
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_cls_embedding_deterministic_and_bounded():
    p = enc.init_params(TOY, seed=4, init_std=1.0)
    ids, _ = toy_batch()
    a = enc.cls_embedding(p, TOY, ids[0])
    b = enc.cls_embedding(p, TOY, ids[0])
    assert a.shape == (16,)
    assert np.array_equal(a, b)
    assert (np.abs(a) < 1).all()


def test_forward_errors():
    p = enc.init_params(TOY)
    with pytest.raises(ValidationError):
        enc.forward(p, TOY, np.array([[2, 40]]))
    with pytest.raises(ValidationError):
        enc.forward(p, TOY, np.full((1, 9), 2))
    bad = dict(p)
    bad["layer0.w1"] = np.full_like(p["layer0.w1"], np.inf)
    with pytest.raises(NumericError) as info, np.errstate(invalid="ignore"):
        enc.forward(bad, TOY, np.array([[2, 20, 3]]))
    assert info.value.layer == 0


def test_uniform_logits_give_log_vocab():
    p = {k: np.zeros_like(v) for k, v in enc.init_params(TOY, dtype=np.float64).items()}
    ids, targets = toy_batch()
    loss, grads = enc.mlm_loss_and_grads(p, TOY, ids, targets)
    assert loss == pytest.approx(np.log(40), abs=1e-12)
    assert set(grads) == set(p)


def test_confident_logit_gives_near_zero_loss():
    p = enc.init_params(TOY, dtype=np.float64)
    ids, targets = toy_batch()
    sel = targets != IGNORE
    targets[sel] = 20
    p["mlm_bias"][20] = 1e3
    loss, _ = enc.mlm_loss_and_grads(p, TOY, ids, targets)
    assert loss < 1e-12


def test_no_targets_zero_loss():
    p = enc.init_params(TOY)
    ids, _ = toy_batch()
    loss, grads = enc.mlm_loss_and_grads(p, TOY, ids, np.full(ids.shape, IGNORE))
    assert loss == 0.0 and all(not g.any() for g in grads.values())


def test_mlm_gradients_match_finite_differences():
    p = enc.init_params(TOY, seed=0, dtype=np.float64)
    ids, targets = toy_batch()
    errors = check_gradients(lambda q: enc.mlm_loss_and_grads(q, TOY, ids, targets), p)
    assert set(errors) == set(p)
    assert max(errors.values()) < 1e-4


def test_gradients_with_fixed_dropout_mask():
    cfg = enc.EncoderConfig(40, 1, 2, 16, 32, 8, dropout=0.3, init_std=0.2)
    p = enc.init_params(cfg, seed=5, dtype=np.float64)
    ids, targets = toy_batch(2)

    def f(q):
        return enc.mlm_loss_and_grads(q, cfg, ids, targets, rng=np.random.default_rng(9))

    names = ["tok_emb", "emb_ln_g", "layer0.w1", "layer0.wo"]
    _, analytic = f(p)
    numeric = numeric_gradients(lambda q: f(q)[0], p, names=names)
    assert max(relative_error(analytic[k], numeric[k]) for k in names) < 1e-4


def test_dropout_off_forward_is_bitwise_deterministic():
    p = enc.init_params(TOY, seed=1)
    ids, _ = toy_batch()
    a = enc.forward(p, TOY, ids, ids != 0).hidden_states
    b = enc.forward(p, TOY, ids, ids != 0).hidden_states
    assert a.tobytes() == b.tobytes()


def test_relative_error_conventions():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    # roughly 2.2e-16 * 4 / 1e-6 per entry, x4 for 16 entries, x10 margin
    assert rounding_floor(4.0, 1e-6, 16) == pytest.approx(3.55e-8, rel=1e-2)
    assert rounding_floor(0.1, 1e-6, 1) == rounding_floor(1.0, 1e-6, 1)
