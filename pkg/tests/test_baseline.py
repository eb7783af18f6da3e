import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from crisis_hmc.baseline import (
    LogRegFit,
    TfidfConfig,
    TfidfLogRegClassifier,
    baseline_scores,
    fit_tfidf,
    grid_search,
    logreg_objective,
    predict_baseline,
    to_matrix,
    train_ovr_logreg,
    transform,
)
from crisis_hmc.exceptions import ConfigurationError, ValidationError
from crisis_hmc.synthetic import SyntheticSpec, generate_synthetic


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TfidfConfig((2, 1))
    with pytest.raises(ConfigurationError):
        TfidfConfig((1, 1), 0)


def test_idf_values():
    space = fit_tfidf(["fire here", "fire there"], TfidfConfig((1, 1)))
    idf = dict(zip(space.vocabulary, space.idf))
    assert idf["fire"] == 1.0
    assert idf["here"] == pytest.approx(math.log(3 / 2) + 1, abs=1e-12)
    assert idf["here"] == pytest.approx(1.4055, abs=1e-4)


def test_cap_tie_keeps_lexicographically_smaller():
    space = fit_tfidf(["beta alpha"], TfidfConfig((1, 1), max_features=1))
    assert space.vocabulary == ("alpha",)


def test_empty_corpus():
    with pytest.raises(ValidationError):
        fit_tfidf([])


def test_bigrams_included():
    space = fit_tfidf(["Road closed near #Bridge"], TfidfConfig((1, 2)))
    assert "road closed" in space.vocabulary and "#bridge" in space.vocabulary


def test_transform_examples():
    space = fit_tfidf(["a b", "a c", "b c"], TfidfConfig((1, 1)))
    single = transform("a", space)
    assert single.weights.tolist() == [1.0]
    assert len(transform("", space)) == 0
    assert len(transform("zzz", space)) == 0
    two = transform("a a b", space)  # a and b share df = 2
    np.testing.assert_allclose(two.weights, np.array([2.0, 1.0]) / math.sqrt(5), atol=1e-15)
    assert (np.diff(two.indices) > 0).all()


def test_feature_space_deterministic():
    texts = [t.text for t in generate_synthetic(SyntheticSpec(n_events=2, tweets_per_event=20, seed=3))]
    a, b = fit_tfidf(texts), fit_tfidf(list(texts))
    assert a.vocabulary == b.vocabulary and a.idf.tobytes() == b.idf.tobytes()


def test_separable_1d():
    X = sp.csr_matrix(np.array([[-2.0], [-1.0], [1.0], [2.0]]))
    y = np.array([[0], [0], [1], [1]])
    fit = train_ovr_logreg(X, y, l2=1e-4)
    assert ((X @ fit.weights.T + fit.bias).ravel() > 0).tolist() == [False, False, True, True]
    assert fit.grad_norm[0] < 1e-6


def test_gradient_norm_and_objective_oracle():
    rng = np.random.default_rng(0)
    X = sp.csr_matrix(rng.normal(size=(40, 6)))
    y = (rng.random((40, 2)) < 0.4).astype(float)
    fit = train_ovr_logreg(X, y, l2=1e-2)
    for j in range(2):
        theta = np.append(fit.weights[j], fit.bias[j])
        obj, grad = logreg_objective(theta, X, y[:, j], 1e-2)
        assert np.linalg.norm(grad) < 1e-6
        assert obj == pytest.approx(fit.objective[j], abs=1e-15)


def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    X = sp.csr_matrix(rng.normal(size=(10, 3)))
    y = (rng.random(10) < 0.5).astype(float)
    theta = rng.normal(size=4)
    _, g = logreg_objective(theta, X, y, 0.3)
    eps = 1e-6
    num = [(logreg_objective(theta + eps * e, X, y, 0.3)[0] - logreg_objective(theta - eps * e, X, y, 0.3)[0]) / (2 * eps)
           for e in np.eye(4)]
    np.testing.assert_allclose(g, num, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 1.0))
def test_doubling_l2_never_increases_norm(seed, l2):
    rng = np.random.default_rng(seed)
    X = sp.csr_matrix(rng.normal(size=(30, 4)))
    y = (rng.random((30, 1)) < 0.5).astype(float)
    y[0, 0], y[1, 0] = 0, 1
    a = train_ovr_logreg(X, y, l2=l2)
    b = train_ovr_logreg(X, y, l2=2 * l2)
    assert np.linalg.norm(b.weights) <= np.linalg.norm(a.weights) + 1e-9


def test_restarts_reach_same_objective():
    rng = np.random.default_rng(2)
    X = sp.csr_matrix(rng.normal(size=(50, 8)))
    y = (rng.random((50, 3)) < 0.3).astype(float)
    base = train_ovr_logreg(X, y, l2=1e-3)
    for seed in (1, 2, 3):
        other = train_ovr_logreg(X, y, l2=1e-3, seed=seed)
        np.testing.assert_allclose(other.objective, base.objective, rtol=0, atol=1e-8)


def test_single_class_label_skipped(caplog):
    X = sp.csr_matrix(np.eye(3))
    y = np.array([[1, 0], [0, 0], [1, 0]], dtype=float)
    fit = train_ovr_logreg(X, y)
    assert fit.trained.tolist() == [True, False]
    assert "single class" in caplog.text
    assert (baseline_scores(fit, X)[:, 1] == 0).all()


def test_non_finite_features_rejected():
    with pytest.raises(ValidationError):
        train_ovr_logreg(sp.csr_matrix(np.array([[np.nan]])), np.array([[1.0]]))


def test_zero_weights_predict_everything(ontology):
    fit = LogRegFit(np.zeros((25, 3)), np.zeros(25), np.ones(25, bool), np.zeros(25), np.zeros(25))
    X = sp.csr_matrix(np.ones((2, 3)))
    assert (baseline_scores(fit, X) == 0.5).all()
    up, low = predict_baseline(fit, X, ontology, 0.5)
    assert up.all() and low.all()


def test_large_aligned_weight_saturates():
    fit = LogRegFit(np.array([[100.0, 0.0]]), np.zeros(1), np.ones(1, bool), np.zeros(1), np.zeros(1))
    assert baseline_scores(fit, sp.csr_matrix([[1.0, 0.0]]))[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_hand_built_scores():
    X = to_matrix([transform("a", fit_tfidf(["a", "b"], TfidfConfig((1, 1)))),
                   transform("b", fit_tfidf(["a", "b"], TfidfConfig((1, 1))))], 2)
    W = np.array([[0.5, -1.0], [2.0, 0.25]])
    b = np.array([0.1, -0.3])
    fit = LogRegFit(W, b, np.ones(2, bool), np.zeros(2), np.zeros(2))
    expected = 1 / (1 + np.exp(-(np.eye(2) @ W.T + b)))
    np.testing.assert_allclose(baseline_scores(fit, X), expected, atol=1e-9)


@pytest.fixture(scope="module")
def synth(ontology):
    corpus = generate_synthetic(SyntheticSpec(n_events=4, tweets_per_event=40, seed=1))
    return list(corpus.tweets)


def test_estimator_roundtrip(synth, ontology, tmp_path):
    texts = [t.text for t in synth]
    y = [t.lower_labels for t in synth]
    model = TfidfLogRegClassifier(ngram_range=(1, 1), max_features=300).fit(texts, y)
    assert model.get_params()["l2"] == 1e-3
    jpath, bpath = model.save(tmp_path / "bl")
    assert jpath.suffix == ".json" and bpath.suffix == ".bin"
    again = TfidfLogRegClassifier.load(tmp_path / "bl")
    np.testing.assert_array_equal(again.predict_proba(texts), model.predict_proba(texts))
    assert 0.0 <= model.score(texts, y) <= 1.0


def test_grid_search_returns_best(synth):
    fit_t, dev_t = synth[:120], synth[120:]
    grid = [{"ngram_range": (1, 1), "l2": 1e-2}, {"ngram_range": (1, 2), "l2": 1e-3}]
    best, rows = grid_search([t.text for t in fit_t], [t.lower_labels for t in fit_t],
                             [t.text for t in dev_t], [t.lower_labels for t in dev_t], grid)
    scores = [r["dev_macro_f1_lower"] for r in rows]
    assert best.l2 == grid[int(np.argmax(scores))]["l2"]
