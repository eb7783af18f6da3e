"""Central finite-difference checks for the analytic gradients."""
from __future__ import annotations

import numpy as np

from . import encoder as enc
from .heads import head_loss_and_grads


def relative_error(analytic, numeric, atol: float = 1e-10) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Frobenius norm.

    Returns 0 when both norms are below ``atol``: some gradients vanish by
    construction (a key bias shifts every attention logit of a query equally)
    and their ratio would only compare rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale < atol else float(np.linalg.norm(a - n) / scale)


def numeric_gradients(loss_fn, params: dict, eps: float = 1e-6, names=None) -> dict:
    """Central differences of ``loss_fn(params)`` for every entry of the named tensors.

    Entries are perturbed in place and restored, so ``params`` must be 64-bit.
    """
    out = {}
    for name in names or params:
        p = params[name]
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn(params)
            flat[i] = orig - eps
            lo = loss_fn(params)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        out[name] = g
    return out


def joint_loss_and_grads(params: dict, cfg: enc.EncoderConfig, kind, ids, y_upper, y_lower, lam, ontology,
                         gating=False, dropout_seed=None):
    """Head loss on top of the encoder and gradients for both, keyed ``name`` / ``head.name``."""
    enc_params = {k: v for k, v in params.items() if not k.startswith("head.")}
    head = {k[5:]: v for k, v in params.items() if k.startswith("head.")}
    ids = np.asarray(ids)
    rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
    out = enc.forward(enc_params, cfg, ids, ids != 0, rng=rng, keep_cache=True)
    loss, hgrads, d_cls, _ = head_loss_and_grads(kind, head, out.cls_embedding, y_upper, y_lower, lam, ontology, gating)
    grads = enc.backward(enc_params, cfg, out.cache, d_cls=d_cls)
    grads.update({"head." + k: v for k, v in hgrads.items()})
    return loss, grads


def rounding_floor(loss: float, eps: float, size: int) -> float:
    """Norm of the rounding noise a central difference adds to a tensor of ``size`` entries, with a 10x margin."""
    return 10.0 * np.finfo(np.float64).eps * max(1.0, abs(loss)) / eps * np.sqrt(size)


def check_gradients(loss_and_grads, params: dict, eps: float = 1e-6) -> dict:
    """Per-tensor relative error between analytic and finite-difference gradients.

    Tensors whose gradients both sit below the rounding floor count as exact.
    """
    loss, analytic = loss_and_grads(params)
    numeric = numeric_gradients(lambda p: loss_and_grads(p)[0], params, eps)
    return {k: relative_error(analytic[k], numeric[k], rounding_floor(loss, eps, params[k].size)) for k in params}
