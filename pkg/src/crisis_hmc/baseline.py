"""TF-IDF features with one-vs-rest L2 logistic regression."""
from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, ClassifierMixin

from .evaluation import macro_f1
from .exceptions import ConfigurationError, ValidationError
from .ontology import LabelOntology, default_ontology

logger = logging.getLogger(__name__)

TOKEN_RE = re.compile(r"[#@]?\w+", re.UNICODE)
GRAD_TOL = 1e-6


@dataclass(frozen=True)
class TfidfConfig:
    ngram_range: tuple[int, int] = (1, 2)
    max_features: int = 5000

    def __post_init__(self):
        lo, hi = self.ngram_range
        object.__setattr__(self, "ngram_range", (int(lo), int(hi)))
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"invalid ngram_range {self.ngram_range}")
        if self.max_features <= 0:
            raise ConfigurationError("max_features must be positive")


@dataclass(frozen=True)
class SparseDoc:
    indices: np.ndarray  # strictly increasing int64
    weights: np.ndarray  # float64, unit L2 norm unless empty

    def __len__(self):
        return len(self.indices)


def ngrams(text: str, ngram_range=(1, 1)) -> list[str]:
    tokens = TOKEN_RE.findall(text.lower())
    lo, hi = ngram_range
    out = []
    for n in range(lo, hi + 1):
        out.extend(" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return out


@dataclass(frozen=True)
class FeatureSpace:
    vocabulary: tuple[str, ...]
    idf: np.ndarray
    config: TfidfConfig

    def index(self) -> dict:
        return {t: i for i, t in enumerate(self.vocabulary)}

    def __len__(self):
        return len(self.vocabulary)


def fit_tfidf(texts: Sequence[str], cfg: TfidfConfig = TfidfConfig()) -> FeatureSpace:
    """Keep the ``max_features`` terms with highest document frequency.

    Ties go to the lexicographically smaller term. idf uses the smoothed
    form ln((1 + N) / (1 + df)) + 1.
    """
    if not len(texts):
        raise ValidationError("cannot fit TF-IDF on an empty corpus")
    df = Counter()
    for text in texts:
        df.update(set(ngrams(text, cfg.ngram_range)))
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))[: cfg.max_features]
    vocab = tuple(sorted(t for t, _ in ranked))
    n = len(texts)
    idf = np.array([math.log((1 + n) / (1 + df[t])) + 1.0 for t in vocab])
    return FeatureSpace(vocab, idf, cfg)


def transform(text: str, space: FeatureSpace, index: dict | None = None) -> SparseDoc:
    index = space.index() if index is None else index
    counts = Counter(i for g in ngrams(text, space.config.ngram_range) if (i := index.get(g)) is not None)
    if not counts:
        return SparseDoc(np.zeros(0, dtype=np.int64), np.zeros(0))
    idx = np.array(sorted(counts), dtype=np.int64)
    w = np.array([counts[i] for i in idx], dtype=np.float64) * space.idf[idx]
    return SparseDoc(idx, w / np.linalg.norm(w))


def to_matrix(docs: Sequence[SparseDoc], n_features: int) -> sp.csr_matrix:
    indptr = np.cumsum([0] + [len(d) for d in docs])
    indices = np.concatenate([d.indices for d in docs]) if docs else np.zeros(0, dtype=np.int64)
    data = np.concatenate([d.weights for d in docs]) if docs else np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(docs), n_features))


# -- logistic regression -----------------------------------------------------


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def logreg_objective(theta, X, y, l2):
    """Mean logistic loss plus (l2 / 2)·|w|²; the bias is not penalised."""
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    s = 2.0 * y - 1.0
    loss = _log1pexp(-s * z).mean() + 0.5 * l2 * (w @ w)
    r = -s * _sigmoid(-s * z) / X.shape[0]
    grad = np.append(X.T @ r + l2 * w, r.sum())
    return float(loss), grad


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _hessp(theta, v, X, y, l2):
    w, b = theta[:-1], theta[-1]
    p = _sigmoid(X @ w + b)
    d = p * (1.0 - p) / X.shape[0]
    u = d * (X @ v[:-1] + v[-1])
    return np.append(X.T @ u + l2 * v[:-1], u.sum())


@dataclass
class LogRegFit:
    weights: np.ndarray  # (n_labels, n_features)
    bias: np.ndarray  # (n_labels,)
    trained: np.ndarray  # bool per label
    objective: np.ndarray
    grad_norm: np.ndarray


def train_ovr_logreg(X, Y, l2: float = 1e-3, max_iter: int = 200, seed: int | None = None) -> LogRegFit:
    """Fit one L2-regularised logistic regression per label column of ``Y``.

    Each problem is strictly convex in the weights, so the minimiser does not
    depend on the starting point; ``seed`` only picks a random start, which is
    useful for checking exactly that. Labels without both classes are skipped.
    """
    X = sp.csr_matrix(X, dtype=np.float64)
    if not np.all(np.isfinite(X.data)):
        raise ValidationError("features contain non-finite values")
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != X.shape[0]:
        raise ValidationError(f"label matrix shape {Y.shape} does not match {X.shape[0]} documents")
    if l2 <= 0:
        raise ConfigurationError("l2 must be positive")
    n_labels, d = Y.shape[1], X.shape[1]
    W, b = np.zeros((n_labels, d)), np.zeros(n_labels)
    trained = np.zeros(n_labels, dtype=bool)
    obj, gnorm = np.full(n_labels, np.nan), np.full(n_labels, np.nan)
    rng = np.random.default_rng(seed) if seed is not None else None
    for j in range(n_labels):
        y = Y[:, j]
        if y.min() == y.max():
            logger.warning("label column %d has a single class; it will score 0", j)
            continue
        theta0 = np.zeros(d + 1) if rng is None else rng.normal(0.0, 1.0, d + 1)
        res = minimize(
            logreg_objective, theta0, args=(X, y, l2), jac=True, hessp=_hessp,
            method="trust-ncg", options={"gtol": GRAD_TOL / 10, "maxiter": max_iter},
        )
        W[j], b[j] = res.x[:-1], res.x[-1]
        obj[j], g = logreg_objective(res.x, X, y, l2)
        gnorm[j] = np.linalg.norm(g)
        trained[j] = True
        if gnorm[j] >= GRAD_TOL:
            logger.warning("label column %d stopped at gradient norm %.3g", j, gnorm[j])
    return LogRegFit(W, b, trained, obj, gnorm)


def baseline_scores(fit: LogRegFit, X) -> np.ndarray:
    """Sigmoid scores per lower label; untrained labels score 0."""
    X = sp.csr_matrix(X, dtype=np.float64)
    scores = _sigmoid(X @ fit.weights.T + fit.bias)
    scores[:, ~fit.trained] = 0.0
    return scores


def predict_baseline(fit: LogRegFit, X, ontology: LabelOntology, threshold: float = 0.5):
    """Return (upper, lower) int8 indicators; upper scores are the max over children."""
    lower_scores = baseline_scores(fit, X)
    parent = ontology.parent_index_array()
    upper_scores = np.stack(
        [lower_scores[:, parent == j].max(1) for j in range(ontology.n_upper)], axis=1
    )
    return (upper_scores >= threshold).astype(np.int8), (lower_scores >= threshold).astype(np.int8)


# -- estimator ---------------------------------------------------------------


def _texts(X) -> list[str]:
    return [x if isinstance(x, str) else x.text for x in X]


class TfidfLogRegClassifier(ClassifierMixin, BaseEstimator):
    """Non-neural baseline: TF-IDF n-grams into per-label logistic regressions.

    ``fit`` takes texts (or tweets) and a lower-label indicator matrix or a list
    of label sets; ``predict`` returns the lower indicator matrix.
    """

    def __init__(self, ngram_range=(1, 2), max_features=5000, l2=1e-3, threshold=0.5,
                 max_iter=200, ontology=None):
        self.ngram_range = ngram_range
        self.max_features = max_features
        self.l2 = l2
        self.threshold = threshold
        self.max_iter = max_iter
        self.ontology = ontology

    def _ontology(self) -> LabelOntology:
        return self.ontology or default_ontology()

    def _labels(self, y) -> np.ndarray:
        ont = self._ontology()
        if isinstance(y, np.ndarray) and y.ndim == 2:
            return y.astype(np.float64)
        return ont.lower_indicator(list(y)).astype(np.float64)

    def fit(self, X, y):
        texts = _texts(X)
        self.space_ = fit_tfidf(texts, TfidfConfig(tuple(self.ngram_range), self.max_features))
        self.fit_ = train_ovr_logreg(self.features(texts), self._labels(y), self.l2, self.max_iter)
        return self

    def features(self, X) -> sp.csr_matrix:
        index = self.space_.index()
        return to_matrix([transform(t, self.space_, index) for t in _texts(X)], len(self.space_))

    def predict_proba(self, X) -> np.ndarray:
        return baseline_scores(self.fit_, self.features(X))

    def predict_levels(self, X):
        return predict_baseline(self.fit_, self.features(X), self._ontology(), self.threshold)

    def predict(self, X) -> np.ndarray:
        return self.predict_levels(X)[1]

    def score(self, X, y, sample_weight=None) -> float:
        ont = self._ontology()
        return macro_f1(self.predict(X), self._labels(y), ont.lower_labels)["macro"]

    def save(self, path) -> tuple[Path, Path]:
        """Write ``<path>.json`` (config, vocabulary) and ``<path>.bin`` (float64 arrays)."""
        path = Path(path)
        meta = {
            "format": "tfidf-lr-v1",
            "params": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in self.get_params().items() if k != "ontology"},
            "vocabulary": list(self.space_.vocabulary),
            "n_labels": int(self.fit_.weights.shape[0]),
            "trained": self.fit_.trained.astype(int).tolist(),
        }
        jpath, bpath = path.with_suffix(".json"), path.with_suffix(".bin")
        jpath.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        blob = np.concatenate([self.space_.idf, self.fit_.weights.ravel(), self.fit_.bias])
        bpath.write_bytes(blob.astype("<f8").tobytes())
        return jpath, bpath

    @classmethod
    def load(cls, path, ontology=None) -> "TfidfLogRegClassifier":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        params = dict(meta["params"])
        params["ngram_range"] = tuple(params["ngram_range"])
        model = cls(ontology=ontology, **params)
        blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        v, k = len(meta["vocabulary"]), meta["n_labels"]
        if blob.size != v + k * v + k:
            raise ValidationError("baseline sidecar size does not match its header")
        model.space_ = FeatureSpace(tuple(meta["vocabulary"]), blob[:v].copy(),
                                    TfidfConfig(params["ngram_range"], params["max_features"]))
        W = blob[v : v + k * v].reshape(k, v).copy()
        model.fit_ = LogRegFit(W, blob[v + k * v :].copy(), np.array(meta["trained"], dtype=bool),
                               np.full(k, np.nan), np.full(k, np.nan))
        return model


def grid_search(fit_X, fit_y, dev_X, dev_y, grid: Sequence[dict], ontology=None):
    """Pick the parameter dict with the best dev lower macro F1 (first wins on ties)."""
    best, best_score, rows = None, -1.0, []
    for params in grid:
        model = TfidfLogRegClassifier(ontology=ontology, **params).fit(fit_X, fit_y)
        score = model.score(dev_X, dev_y)
        rows.append({**params, "dev_macro_f1_lower": score})
        if score > best_score:
            best, best_score = model, score
    return best, rows
