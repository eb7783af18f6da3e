"""Hierarchical multi-label classification heads over the CLS embedding."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .ontology import LabelOntology

_EPS = 1e-12


class HeadKind(str, enum.Enum):
    SINGLE_TASK = "single_task"
    LCL = "lcl"
    LCPN = "lcpn"
    HMCN_LOCAL = "hmcn_local"
    HMCN_GLOBAL = "hmcn_global"

    @property
    def is_hmcn(self) -> bool:
        return self in (HeadKind.HMCN_LOCAL, HeadKind.HMCN_GLOBAL)


@dataclass
class ScoreSet:
    """Sigmoid scores, one row per document."""

    upper_scores: np.ndarray  # (B, n_upper)
    lower_scores: np.ndarray  # (B, n_lower)
    global_scores: np.ndarray | None = None  # (B, n_upper + n_lower)

    def __len__(self):
        return self.lower_scores.shape[0]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def init_head_params(kind, d_in: int, ontology: LabelOntology, seed: int = 0, dtype=np.float32) -> dict:
    kind = HeadKind(kind)
    rng = np.random.default_rng(seed)
    U, L = ontology.n_upper, ontology.n_lower

    def layer(name, n_in, n_out):
        p[name + "_w"] = (rng.standard_normal((n_in, n_out)) * 0.02).astype(dtype)
        p[name + "_b"] = np.zeros(n_out, dtype)

    p: dict = {}
    if kind is HeadKind.SINGLE_TASK:
        layer("lower", d_in, L)
    elif kind is HeadKind.LCL:
        layer("upper", d_in, U)
        layer("lower", d_in, L)
    elif kind is HeadKind.LCPN:
        layer("upper", d_in, U)
        for j, parent in enumerate(ontology.upper_labels):
            layer(f"child{j}", d_in, len(ontology.children(parent)))
    else:
        layer("pool1", d_in, d_in)
        layer("upper", d_in, U)
        layer("pool2", d_in, d_in)
        layer("lower", d_in, L)
        if kind is HeadKind.HMCN_GLOBAL:
            layer("global", d_in, U + L)
    return p


def set_prior_biases(kind, hp: dict, y_upper, y_lower, ontology: LabelOntology, floor: float = 1e-3) -> dict:
    """Set output biases to the logit of each label's training frequency.

    The head then starts at the label prior instead of spending its first
    steps learning it, which otherwise flattens the CLS signal early on.
    """
    kind = HeadKind(kind)

    def logit(y):
        p = np.clip(np.asarray(y, dtype=np.float64).mean(0), floor, 1.0 - floor)
        return np.log(p / (1.0 - p))

    lo, up = logit(y_lower), logit(y_upper)
    out = dict(hp)
    if "upper_b" in out:
        out["upper_b"] = up.astype(out["upper_b"].dtype)
    if "lower_b" in out:
        out["lower_b"] = lo.astype(out["lower_b"].dtype)
    if kind is HeadKind.LCPN:
        for j, parent in enumerate(ontology.upper_labels):
            out[f"child{j}_b"] = lo[ontology.child_indices(parent)].astype(out[f"child{j}_b"].dtype)
    if "global_b" in out:
        out["global_b"] = np.concatenate([up, lo]).astype(out["global_b"].dtype)
    return out


def _forward(kind, hp, cls, ontology, gating):
    kind = HeadKind(kind)
    cls = np.asarray(cls)
    if cls.ndim == 1:
        cls = cls[None]
    first = "pool1_w" if kind.is_hmcn else ("upper_w" if "upper_w" in hp else "lower_w")
    if hp[first].shape[0] != cls.shape[1]:
        raise ValidationError(f"CLS dimension {cls.shape[1]} != head input {hp[first].shape[0]}")
    B = cls.shape[0]
    c = {"cls": cls}
    glob = None
    if kind is HeadKind.SINGLE_TASK:
        lower = _sigmoid(cls @ hp["lower_w"] + hp["lower_b"])
        upper = np.stack([lower[:, ontology.child_indices(u)].max(1) for u in ontology.upper_labels], 1)
    elif kind is HeadKind.LCL:
        upper = _sigmoid(cls @ hp["upper_w"] + hp["upper_b"])
        lower = _sigmoid(cls @ hp["lower_w"] + hp["lower_b"])
    elif kind is HeadKind.LCPN:
        upper = _sigmoid(cls @ hp["upper_w"] + hp["upper_b"])
        child = np.zeros((B, ontology.n_lower), dtype=cls.dtype)
        for j, parent in enumerate(ontology.upper_labels):
            child[:, ontology.child_indices(parent)] = _sigmoid(cls @ hp[f"child{j}_w"] + hp[f"child{j}_b"])
        c["child"] = child
        lower = child * upper[:, ontology.parent_index_array()] if gating else child
    else:
        p1 = np.tanh(cls @ hp["pool1_w"] + hp["pool1_b"])
        upper = _sigmoid(p1 @ hp["upper_w"] + hp["upper_b"])
        p2 = np.tanh(p1 @ hp["pool2_w"] + hp["pool2_b"])
        lower = _sigmoid(p2 @ hp["lower_w"] + hp["lower_b"])
        c["p1"], c["p2"] = p1, p2
        if kind is HeadKind.HMCN_GLOBAL:
            glob = _sigmoid(p2 @ hp["global_w"] + hp["global_b"])
    return ScoreSet(upper, lower, glob), c


def head_forward(kind, hp: dict, cls_embedding, ontology: LabelOntology, gating: bool = False) -> ScoreSet:
    """Score a batch (or a single vector) of CLS embeddings."""
    return _forward(kind, hp, cls_embedding, ontology, gating)[0]


def _bce(p, y):
    p = np.clip(p, _EPS, 1.0 - _EPS)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


def _check_probs(arr, name):
    if arr is not None and (not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(f"{name} contains values outside [0, 1]")


def mtl_loss(scores: ScoreSet, y_upper, y_lower, lam: float, kind=HeadKind.LCL) -> float:
    """``lam * upper BCE + (1 - lam) * lower BCE`` (plus the global term for HMCN-global).

    Single-task heads are trained on the lower-level BCE alone.
    """
    kind = HeadKind(kind)
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    for arr, name in ((scores.upper_scores, "upper_scores"), (scores.lower_scores, "lower_scores"),
                      (scores.global_scores, "global_scores")):
        _check_probs(arr, name)
    y_upper = np.asarray(y_upper, dtype=float).reshape(scores.upper_scores.shape)
    y_lower = np.asarray(y_lower, dtype=float).reshape(scores.lower_scores.shape)
    lower = _bce(scores.lower_scores, y_lower)
    if kind is HeadKind.SINGLE_TASK:
        return lower
    total = lam * _bce(scores.upper_scores, y_upper) + (1.0 - lam) * lower
    if kind is HeadKind.HMCN_GLOBAL:
        total += _bce(scores.global_scores, np.concatenate([y_upper, y_lower], axis=1))
    return total


def _dbce(p, y):
    """d mean-BCE / dp."""
    p = np.clip(p, _EPS, 1.0 - _EPS)
    return (p - y) / (p * (1.0 - p)) / p.size


def head_loss_and_grads(kind, hp: dict, cls, y_upper, y_lower, lam: float, ontology: LabelOntology, gating=False):
    """Loss, head-parameter gradients and the gradient w.r.t. ``cls``."""
    kind = HeadKind(kind)
    scores, c = _forward(kind, hp, cls, ontology, gating)
    cls = c["cls"]
    y_upper = np.asarray(y_upper, dtype=cls.dtype)
    y_lower = np.asarray(y_lower, dtype=cls.dtype)
    loss = mtl_loss(scores, y_upper, y_lower, lam, kind)
    g = {k: np.zeros_like(v) for k, v in hp.items()}
    w_up = 0.0 if kind is HeadKind.SINGLE_TASK else lam
    w_low = 1.0 if kind is HeadKind.SINGLE_TASK else 1.0 - lam
    up, low = scores.upper_scores, scores.lower_scores
    # Gradients w.r.t. the pre-sigmoid logits.
    dz_up = w_up * _dbce(up, y_upper) * up * (1.0 - up)
    dp_low = w_low * _dbce(low, y_lower)

    def dense(name, x, dz):
        g[name + "_w"] += x.T @ dz
        g[name + "_b"] += dz.sum(0)
        return dz @ hp[name + "_w"].T

    if kind is HeadKind.SINGLE_TASK:
        d_cls = dense("lower", cls, dp_low * low * (1.0 - low))
    elif kind is HeadKind.LCL:
        d_cls = dense("upper", cls, dz_up) + dense("lower", cls, dp_low * low * (1.0 - low))
    elif kind is HeadKind.LCPN:
        child = c["child"]
        parent_idx = ontology.parent_index_array()
        if gating:
            gate = up[:, parent_idx]
            dchild = dp_low * gate
            dgate = dp_low * child
            dup = np.zeros_like(up)
            np.add.at(dup.T, parent_idx, dgate.T)
            dz_up = dz_up + dup * up * (1.0 - up)
        else:
            dchild = dp_low
        dz_child = dchild * child * (1.0 - child)
        d_cls = dense("upper", cls, dz_up)
        for j, parent in enumerate(ontology.upper_labels):
            idx = ontology.child_indices(parent)
            d_cls = d_cls + dense(f"child{j}", cls, dz_child[:, idx])
    else:
        p1, p2 = c["p1"], c["p2"]
        dp2 = dense("lower", p2, dp_low * low * (1.0 - low))
        if kind is HeadKind.HMCN_GLOBAL:
            gl = scores.global_scores
            y_gl = np.concatenate([y_upper, y_lower], axis=1)
            dp2 = dp2 + dense("global", p2, _dbce(gl, y_gl) * gl * (1.0 - gl))
        dp1 = dense("upper", p1, dz_up) + dense("pool2", p1, dp2 * (1.0 - p2 * p2))
        d_cls = dense("pool1", cls, dp1 * (1.0 - p1 * p1))
    return loss, g, d_cls, scores


def decision_scores(scores: ScoreSet, kind, global_weight: float = 0.5):
    """Scores compared against the threshold: the global slice is blended in for HMCN-global."""
    kind = HeadKind(kind)
    up, low = scores.upper_scores, scores.lower_scores
    if kind is HeadKind.HMCN_GLOBAL and scores.global_scores is not None:
        n_up = up.shape[-1]
        up = (1.0 - global_weight) * up + global_weight * scores.global_scores[..., :n_up]
        low = (1.0 - global_weight) * low + global_weight * scores.global_scores[..., n_up:]
    return up, low


def predict(scores: ScoreSet, kind, threshold: float = 0.5, global_weight: float = 0.5):
    """Indicator matrices ``(upper, lower)``; a score equal to the threshold counts as positive."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    up, low = decision_scores(scores, kind, global_weight)
    return (up >= threshold).astype(np.int8), (low >= threshold).astype(np.int8)


def indicators_to_sets(indicator, labels) -> list[set]:
    return [{labels[j] for j in np.flatnonzero(row)} for row in np.atleast_2d(indicator)]
