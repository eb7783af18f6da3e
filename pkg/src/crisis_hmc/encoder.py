"""Small post-LN transformer encoder with hand-written backpropagation.

Parameters live in a flat ``dict`` of numpy arrays keyed by name; the
dtype of the arrays (float32 for training, float64 for gradient checks)
sets the compute precision.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse

from .exceptions import ConfigurationError, NumericError, ValidationError
from .masking import IGNORE

logger = logging.getLogger(__name__)

LN_EPS = 1e-12
_GELU_C = float(np.sqrt(2.0 / np.pi))


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_len: int = 64
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "d_ff", "max_len", "n_heads"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ConfigurationError("n_layers must be non-negative")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.init_std <= 0:
            raise ConfigurationError("init_std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float32, init_std: float | None = None) -> dict:
    """Normal(0, init_std) weights, zero biases, unit layer-norm gains."""
    init_std = cfg.init_std if init_std is None else init_std
    rng = np.random.default_rng(seed)
    D, F = cfg.d_model, cfg.d_ff

    def w(*shape):
        return (rng.standard_normal(shape) * init_std).astype(dtype)

    p = {
        "tok_emb": w(cfg.vocab_size, D),
        "pos_emb": w(cfg.max_len, D),
        "emb_ln_g": np.ones(D, dtype),
        "emb_ln_b": np.zeros(D, dtype),
    }
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = w(D, D)
            p[pre + "b" + name[1]] = np.zeros(D, dtype)
        p[pre + "ln1_g"] = np.ones(D, dtype)
        p[pre + "ln1_b"] = np.zeros(D, dtype)
        p[pre + "w1"] = w(D, F)
        p[pre + "b1"] = np.zeros(F, dtype)
        p[pre + "w2"] = w(F, D)
        p[pre + "b2"] = np.zeros(D, dtype)
        p[pre + "ln2_g"] = np.ones(D, dtype)
        p[pre + "ln2_b"] = np.zeros(D, dtype)
    p["mlm_bias"] = np.zeros(cfg.vocab_size, dtype)
    p["pooler_w"] = w(D, D)
    p["pooler_b"] = np.zeros(D, dtype)
    return p


def cast_params(params: dict, dtype) -> dict:
    return {k: v.astype(dtype) for k, v in params.items()}


# -- primitive layers ------------------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layer_norm_back(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def _dense_back(dy, x, w):
    d = dy.shape[-1]
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, d)
    db = dy.reshape(-1, d).sum(0)
    return dy @ w.T, dw, db


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype) * (1.0 / (1.0 - rate))
    return x * keep, keep


def _scatter_rows(index, rows, n_rows):
    """``out[index[i]] += rows[i]`` via a sparse product (much faster than ``np.add.at``)."""
    onehot = sparse.csr_matrix(
        (np.ones(len(index), dtype=rows.dtype), (index, np.arange(len(index)))), shape=(n_rows, len(index))
    )
    return np.asarray(onehot @ rows)


def _check_finite(x, layer):
    if not np.isfinite(x).all():
        raise NumericError("non-finite activation", layer=layer)


# -- forward / backward ----------------------------------------------------


@dataclass
class EncoderOutput:
    hidden_states: np.ndarray  # (B, T, D)
    cls_embedding: np.ndarray  # (B, D)
    attentions: list | None = None
    cache: dict | None = None


def forward(
    params: dict,
    cfg: EncoderConfig,
    input_ids,
    attention_mask=None,
    rng: np.random.Generator | None = None,
    return_attention: bool = False,
    keep_cache: bool = False,
) -> EncoderOutput:
    """Run the encoder. Dropout is applied only when ``rng`` is given."""
    ids = np.asarray(input_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, T = ids.shape
    if T > cfg.max_len:
        raise ValidationError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValidationError(f"token id outside [0, {cfg.vocab_size})")
    mask = np.ones((B, T), dtype=bool) if attention_mask is None else np.asarray(attention_mask, dtype=bool).reshape(B, T)
    dtype = params["tok_emb"].dtype
    H, D = cfg.n_heads, cfg.d_model
    dh = D // H
    scale = 1.0 / float(np.sqrt(dh))
    key_bias = np.where(mask, 0.0, -1e9).astype(dtype)[:, None, None, :]

    cache = {"ids": ids, "mask": mask, "layers": []}
    e = params["tok_emb"][ids] + params["pos_emb"][:T]
    h, cache["emb_ln"] = _layer_norm(e, params["emb_ln_g"], params["emb_ln_b"])
    h, cache["emb_drop"] = _dropout(h, cfg.dropout, rng)
    _check_finite(h, "embedding")
    attentions = []

    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        x = h
        q = (x @ params[pre + "wq"] + params[pre + "bq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (x @ params[pre + "wk"] + params[pre + "bk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (x @ params[pre + "wv"] + params[pre + "bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) * scale + key_bias
        s = s - s.max(-1, keepdims=True)
        pr = np.exp(s)
        pr /= pr.sum(-1, keepdims=True)
        ctx = (pr @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        a = ctx @ params[pre + "wo"] + params[pre + "bo"]
        a, drop1 = _dropout(a, cfg.dropout, rng)
        h1, ln1 = _layer_norm(x + a, params[pre + "ln1_g"], params[pre + "ln1_b"])
        z = h1 @ params[pre + "w1"] + params[pre + "b1"]
        g, t = _gelu(z)
        f = g @ params[pre + "w2"] + params[pre + "b2"]
        f, drop2 = _dropout(f, cfg.dropout, rng)
        h, ln2 = _layer_norm(h1 + f, params[pre + "ln2_g"], params[pre + "ln2_b"])
        _check_finite(h, i)
        if return_attention:
            attentions.append(pr)
        if keep_cache:
            cache["layers"].append(dict(x=x, q=q, k=k, v=v, pr=pr, ctx=ctx, drop1=drop1, ln1=ln1,
                                        h1=h1, z=z, g=g, t=t, drop2=drop2, ln2=ln2))

    cls = np.tanh(h[:, 0] @ params["pooler_w"] + params["pooler_b"])
    _check_finite(cls, "pooler")
    cache["h_last"] = h
    cache["cls"] = cls
    return EncoderOutput(h, cls, attentions if return_attention else None, cache if keep_cache else None)


def backward(params: dict, cfg: EncoderConfig, cache: dict, d_hidden=None, d_cls=None) -> dict:
    """Gradients of a scalar loss given its derivatives w.r.t. the final
    hidden states and/or the pooled CLS embedding."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    h = cache["h_last"]
    B, T, D = h.shape
    H = cfg.n_heads
    dh_ = D // H
    scale = 1.0 / float(np.sqrt(dh_))
    dh = np.zeros_like(h) if d_hidden is None else d_hidden.astype(h.dtype, copy=True)

    if d_cls is not None:
        cls = cache["cls"]
        dpre = d_cls * (1.0 - cls * cls)
        grads["pooler_w"] += h[:, 0].T @ dpre
        grads["pooler_b"] += dpre.sum(0)
        dh[:, 0] += dpre @ params["pooler_w"].T

    for i in reversed(range(cfg.n_layers)):
        pre = f"layer{i}."
        c = cache["layers"][i]
        dsum, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layer_norm_back(dh, c["ln2"])
        dh1 = dsum
        df = dsum if c["drop2"] is None else dsum * c["drop2"]
        dg, grads[pre + "w2"], grads[pre + "b2"] = _dense_back(df, c["g"], params[pre + "w2"])
        dz = _gelu_back(dg, c["z"], c["t"])
        dx1, grads[pre + "w1"], grads[pre + "b1"] = _dense_back(dz, c["h1"], params[pre + "w1"])
        dh1 = dh1 + dx1
        dsum, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layer_norm_back(dh1, c["ln1"])
        dx = dsum
        da = dsum if c["drop1"] is None else dsum * c["drop1"]
        dctx, grads[pre + "wo"], grads[pre + "bo"] = _dense_back(da, c["ctx"], params[pre + "wo"])
        dctx = dctx.reshape(B, T, H, dh_).transpose(0, 2, 1, 3)
        pr, q, k, v = c["pr"], c["q"], c["k"], c["v"]
        dpr = dctx @ v.transpose(0, 1, 3, 2)
        dv = pr.transpose(0, 1, 3, 2) @ dctx
        ds = pr * (dpr - (dpr * pr).sum(-1, keepdims=True))
        dq = ds @ k * scale
        dk = ds.transpose(0, 1, 3, 2) @ q * scale
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dproj = dproj.transpose(0, 2, 1, 3).reshape(B, T, D)
            dxp, grads[pre + "w" + name], grads[pre + "b" + name] = _dense_back(dproj, c["x"], params[pre + "w" + name])
            dx = dx + dxp
        dh = dx

    if cache["emb_drop"] is not None:
        dh = dh * cache["emb_drop"]
    de, grads["emb_ln_g"], grads["emb_ln_b"] = _layer_norm_back(dh, cache["emb_ln"])
    grads["pos_emb"][:T] += de.sum(0)
    grads["tok_emb"] += _scatter_rows(cache["ids"].reshape(-1), de.reshape(-1, D), cfg.vocab_size)
    return grads


def cls_embedding(params: dict, cfg: EncoderConfig, input_ids, attention_mask=None) -> np.ndarray:
    """Pooled sentence vector(s) in inference mode."""
    out = forward(params, cfg, input_ids, attention_mask)
    return out.cls_embedding[0] if np.asarray(input_ids).ndim == 1 else out.cls_embedding


def mlm_logits(params: dict, hidden_rows: np.ndarray) -> np.ndarray:
    """Output projection tied to the token embeddings."""
    return hidden_rows @ params["tok_emb"].T + params["mlm_bias"]


def mlm_loss_and_grads(params: dict, cfg: EncoderConfig, input_ids, target_ids, attention_mask=None, rng=None):
    """Mean cross-entropy over non-ignored targets and its gradients."""
    ids = np.asarray(input_ids)
    targets = np.asarray(target_ids)
    if ids.ndim == 1:
        ids, targets = ids[None], targets[None]
    if attention_mask is None:
        attention_mask = ids != 0
    sel = targets != IGNORE
    n = int(sel.sum())
    if n == 0:
        logger.info("MLM batch without targets; loss defined as 0")
        return 0.0, {k: np.zeros_like(v) for k, v in params.items()}
    out = forward(params, cfg, ids, attention_mask, rng=rng, keep_cache=True)
    rows = out.hidden_states[sel]
    logits = mlm_logits(params, rows)
    logits = logits - logits.max(-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    gold = targets[sel]
    loss = float(-logp[np.arange(n), gold].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(n), gold] -= 1.0
    dlogits /= n
    d_hidden = np.zeros_like(out.hidden_states)
    d_hidden[sel] = dlogits @ params["tok_emb"]
    grads = backward(params, cfg, out.cache, d_hidden=d_hidden)
    grads["tok_emb"] += dlogits.T @ rows
    grads["mlm_bias"] += dlogits.sum(0)
    return loss, grads


def mlm_predictions(params: dict, cfg: EncoderConfig, input_ids, target_ids, attention_mask=None) -> np.ndarray:
    """Top-1 predicted id at every non-ignored target position."""
    ids = np.asarray(input_ids)
    targets = np.asarray(target_ids)
    if attention_mask is None:
        attention_mask = ids != 0
    out = forward(params, cfg, ids, attention_mask)
    sel = targets != IGNORE
    return mlm_logits(params, out.hidden_states[sel]).argmax(-1)
