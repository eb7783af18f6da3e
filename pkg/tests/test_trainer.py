import numpy as np
import pytest

from crisis_hmc.checkpoint import Checkpoint
from crisis_hmc.encoder import EncoderConfig, init_params
from crisis_hmc.exceptions import ConfigurationError, TrainingDiverged, ValidationError
from crisis_hmc.heads import init_head_params
from crisis_hmc.masking import MaskingConfig
from crisis_hmc.ontology import LabelOntology
from crisis_hmc.tokenizer import SubwordTokenizer
from crisis_hmc.trainer import (
    HierarchicalClassifier,
    MaskedLMPretrainer,
    TrainConfig,
    finetune,
    pretrain,
)

ONTO = LabelOntology.from_mapping({"alpha": "A", "bravo": "A", "charlie": "B", "delta": "B"})
FILLER = "the of news update today people area report city help".split()


def separable(n, seed):
    """Each document carries exactly one keyword naming its label."""
    rng = np.random.default_rng(seed)
    texts, Y = [], np.zeros((n, 4))
    for i in range(n):
        k = i % 4
        words = list(rng.choice(FILLER, 5))
        words.insert(int(rng.integers(0, 6)), ONTO.lower_labels[k])
        texts.append(" ".join(words))
        Y[i, k] = 1
    return texts, Y


@pytest.fixture(scope="module")
def data():
    tr, ytr = separable(128, 0)
    dv, ydv = separable(64, 1)
    tok = SubwordTokenizer(vocab_size=80, max_len=12, use_entities=False).fit(tr)
    return tok.transform(tr), ytr, tok.transform(dv), ydv, len(tok.vocab_)


def ecfg(v, dropout=0.0):
    return EncoderConfig(v, 1, 2, 32, 64, 12, dropout, 0.1)


def quick(**kw):
    base = dict(learning_rate=3e-3, epochs=4, eval_interval=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(mtl_lambda=1.5)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    d = TrainConfig()
    assert (d.learning_rate, d.batch_size, d.mtl_lambda) == (5e-5, 32, 0.1)
    assert (d.adam_beta1, d.adam_beta2, d.adam_eps, d.weight_decay) == (0.9, 0.999, 1e-8, 0.01)


def test_zero_learning_rate_leaves_params(data):
    X, _, Xd, _, V = data
    cfg = ecfg(V)
    r = pretrain(X, cfg, MaskingConfig(), quick(learning_rate=0.0), dev=Xd)
    start = init_params(cfg, 0)
    for k, v in start.items():
        assert np.array_equal(r.checkpoint.encoder_params[k], v)


def test_pretrain_deterministic_and_selects_min_dev_loss(data):
    X, _, Xd, _, V = data
    a = pretrain(X, ecfg(V, 0.1), MaskingConfig(), quick(epochs=6), dev=Xd)
    b = pretrain(X, ecfg(V, 0.1), MaskingConfig(), quick(epochs=6), dev=Xd)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    losses = [row["dev_loss"] for row in a.trace]
    assert a.checkpoint.metric_value == min(losses)
    assert a.checkpoint.step == a.trace[int(np.argmin(losses))]["step"]


def test_pretrain_empty_corpus(data):
    X, *_ = data
    with pytest.raises(ValidationError):
        pretrain(X[np.zeros(0, dtype=int)], ecfg(data[4]), MaskingConfig())


def test_divergence_reports_last_good_checkpoint(data):
    X, _, Xd, _, V = data
    with pytest.raises(TrainingDiverged) as info, np.errstate(all="ignore"):
        pretrain(X, ecfg(V), MaskingConfig(), quick(learning_rate=1e12, epochs=50, eval_interval=1), dev=Xd)
    ck = info.value.checkpoint
    assert isinstance(ck, Checkpoint)
    assert all(np.isfinite(v).all() for v in ck.encoder_params.values())


def test_finetune_separable_corpus(data):
    X, y, Xd, yd, V = data
    r = finetune(None, "lcl", X, y, quick(epochs=20, eval_interval=20), Xd, yd, ONTO, ecfg(V), prior_bias=True)
    assert r.checkpoint.metric_value >= 0.95
    scores = [row["dev_macro_f1_lower"] for row in r.trace]
    assert r.checkpoint.metric_value == max(scores)
    assert r.checkpoint.step == r.trace[int(np.argmax(scores))]["step"]


def test_frozen_encoder_bit_identical(data):
    X, y, Xd, yd, V = data
    start = pretrain(X, ecfg(V), MaskingConfig(), quick(epochs=1)).checkpoint
    r = finetune(start, "hmcn_local", X, y, quick(freeze_encoder=True), Xd, yd, ONTO)
    for k, v in start.encoder_params.items():
        assert r.checkpoint.encoder_params[k].tobytes() == v.tobytes()


def test_lambda_zero_leaves_lcl_upper_layer(data):
    X, y, _, _, V = data
    start = pretrain(X, ecfg(V), MaskingConfig(), quick(epochs=1)).checkpoint
    r0 = finetune(start, "lcl", X, y, quick(mtl_lambda=0.0, weight_decay=0.0, epochs=1, eval_interval=1000),
                  ontology=ONTO)
    r1 = finetune(start, "lcl", X, y, quick(mtl_lambda=0.5, weight_decay=0.0, epochs=1, eval_interval=1000),
                  ontology=ONTO)
    init = init_head_params("lcl", 32, ONTO, seed=1)
    assert np.array_equal(r0.checkpoint.head_params["upper_w"], init["upper_w"])
    assert np.array_equal(r0.checkpoint.head_params["upper_b"], init["upper_b"])
    assert not np.array_equal(r1.checkpoint.head_params["upper_w"], init["upper_w"])


def test_finetune_label_shape_checked(data):
    X, y, _, _, V = data
    with pytest.raises(ValidationError):
        finetune(None, "lcl", X, y[:, :3], quick(), ontology=ONTO, encoder_config=ecfg(V))
    with pytest.raises(ConfigurationError):
        finetune(None, "lcl", X, y, quick(), ontology=ONTO)


def test_estimators(data):
    X, y, Xd, yd, V = data
    pre = MaskedLMPretrainer(d_model=32, d_ff=64, n_layers=1, n_heads=2, max_len=12, epochs=2,
                             learning_rate=3e-3, eval_interval=5, seed=0).fit(X, X_dev=Xd)
    assert pre.transform(Xd).shape == (64, 32)
    clf = HierarchicalClassifier(head_kind="lcl", init_checkpoint=pre.checkpoint_, learning_rate=3e-3, epochs=20,
                                 eval_interval=20, prior_bias=True, seed=0, ontology=ONTO)
    clf.fit(X, y, Xd, yd)
    assert clf.predict(Xd).shape == (64, 4)
    assert clf.score(Xd, yd) >= 0.9
    up, low = clf.predict_labels(Xd[np.arange(4)])
    assert len(up) == len(low) == 4
    assert clf.get_params()["head_kind"] == "lcl"
