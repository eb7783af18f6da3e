"""Adaptive MLM pre-training and multi-task fine-tuning with interval-based checkpoint selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import encoder as enc
from .checkpoint import Checkpoint
from .evaluation import macro_f1
from .exceptions import ConfigurationError, NumericError, TrainingDiverged, ValidationError
from .heads import HeadKind, head_forward, head_loss_and_grads, init_head_params, predict, set_prior_biases
from .masking import IGNORE, MaskingConfig, mask_batch
from .ontology import LabelOntology, default_ontology
from .tokenizer import EncodedBatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 32
    mtl_lambda: float = 0.1
    epochs: int = 15
    max_steps: int = 0  # 0 = no cap beyond ``epochs``
    eval_interval: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0
    seed: int = 13
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigurationError("learning_rate must be >= 0, batch_size and epochs positive")
        if not 0.0 <= self.mtl_lambda <= 1.0:
            raise ConfigurationError("mtl_lambda must lie in [0, 1]")
        if self.eval_interval <= 0 or self.max_steps < 0 or self.warmup_steps < 0:
            raise ConfigurationError("eval_interval must be positive; max_steps, warmup_steps >= 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


PRETRAIN_DEFAULTS = TrainConfig(epochs=50)
FINETUNE_DEFAULTS = TrainConfig(epochs=15)


def _no_decay(name: str) -> bool:
    return name.endswith(("_b", "_g", "bias")) or name.split(".")[-1].startswith("b")


class AdamW:
    """Adam with decoupled weight decay (biases and layer-norm gains are not decayed)."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float, frozen=()):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            if name in frozen or name not in grads:
                continue
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if cfg.weight_decay and not _no_decay(name):
                p -= lr * cfg.weight_decay * p
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    return cfg.learning_rate


def _trim(ids, *others):
    """Drop trailing all-PAD columns shared by the whole batch."""
    width = max(int((ids != 0).sum(1).max()), 1)
    return (ids[:, :width],) + tuple(o[:, :width] for o in others)


def _batches(n: int, cfg: TrainConfig, epoch: int):
    order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(n)
    for i in range(0, n, cfg.batch_size):
        yield order[i : i + cfg.batch_size]


def _total_steps(n: int, cfg: TrainConfig) -> int:
    steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    return min(steps, cfg.max_steps) if cfg.max_steps else steps


def _copy(params):
    return {k: v.copy() for k, v in params.items()}


# -- pre-training ------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list  # one row per evaluation
    losses: list  # training loss per step


def dev_mlm_loss(params, cfg, dev: EncodedBatch, mask_cfg: MaskingConfig, seed: int, batch_size: int = 64):
    """Mean masked-token cross-entropy on a dev set corrupted with a fixed stream."""
    inputs, targets = mask_batch(dev, mask_cfg, seed, range(len(dev)), cfg.vocab_size)
    total, count = 0.0, 0
    for i in range(0, len(dev), batch_size):
        ids, tg = _trim(inputs[i : i + batch_size], targets[i : i + batch_size])
        sel = tg != IGNORE
        n = int(sel.sum())
        if not n:
            continue
        out = enc.forward(params, cfg, ids, dev.ids[i : i + batch_size, : ids.shape[1]] != 0)
        logits = enc.mlm_logits(params, out.hidden_states[sel]).astype(np.float64)
        logits -= logits.max(-1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        total += float(-logp[np.arange(n), tg[sel]].sum())
        count += n
    return total / count if count else float("nan")


def pretrain(
    train: EncodedBatch,
    encoder_config: enc.EncoderConfig,
    mask_cfg: MaskingConfig,
    cfg: TrainConfig = PRETRAIN_DEFAULTS,
    dev: EncodedBatch | None = None,
    init_params: dict | None = None,
) -> TrainResult:
    """MLM optimisation; the returned checkpoint has the lowest dev loss seen at an eval point."""
    if len(train) == 0:
        raise ValidationError("empty pre-training corpus")
    params = _copy(init_params) if init_params is not None else enc.init_params(encoder_config, cfg.seed)
    opt = AdamW(params, cfg)
    total = _total_steps(len(train), cfg)
    dev_seed = cfg.seed + 1_000_003
    best = None
    last_good = Checkpoint(encoder_config.to_dict(), _copy(params), step=0)
    trace, losses, window = [], [], []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(train), cfg, epoch):
            if step >= total:
                break
            step += 1
            rows = train[idx]
            inputs, targets = mask_batch(rows, mask_cfg, cfg.seed, epoch * len(train) + idx, encoder_config.vocab_size)
            inputs, targets, mask = _trim(inputs, targets, rows.ids != 0)
            rng = np.random.default_rng([cfg.seed, 11, step]) if encoder_config.dropout else None
            try:
                loss, grads = enc.mlm_loss_and_grads(params, encoder_config, inputs, targets, mask, rng=rng)
            except NumericError as exc:
                raise TrainingDiverged(f"MLM step {step}: {exc}", checkpoint=best or last_good) from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"MLM loss became {loss} at step {step}", checkpoint=best or last_good)
            opt.step(params, grads, _lr_at(cfg, step))
            losses.append(loss)
            window.append(loss)
            if step % cfg.eval_interval == 0 or step == total:
                row = {"step": step, "epoch": epoch, "train_loss": float(np.mean(window))}
                window = []
                if dev is not None and len(dev):
                    try:
                        row["dev_loss"] = dev_mlm_loss(params, encoder_config, dev, mask_cfg, dev_seed)
                    except NumericError as exc:
                        raise TrainingDiverged(f"dev loss at step {step}: {exc}", checkpoint=best or last_good) from exc
                    metric = row["dev_loss"]
                else:
                    metric = row["train_loss"]
                trace.append(row)
                last_good = Checkpoint(encoder_config.to_dict(), _copy(params), step=step,
                                       metric_name="dev_mlm_loss", metric_value=metric)
                if best is None or metric < best.metric_value:
                    best = last_good
                logger.info("pretrain step %d: %s", step, row)
        if step >= total:
            break
    return TrainResult(best or last_good, trace, losses)


# -- fine-tuning -------------------------------------------------------------


def _head_scores(params, head, kind, encoder_config, batch: EncodedBatch, ontology, gating, chunk=128):
    outs = []
    for i in range(0, len(batch), chunk):
        (ids,) = _trim(batch.ids[i : i + chunk])
        cls = enc.forward(params, encoder_config, ids, ids != 0).cls_embedding
        outs.append(head_forward(kind, head, cls, ontology, gating))
    from .heads import ScoreSet

    glob = None if outs[0].global_scores is None else np.concatenate([o.global_scores for o in outs])
    return ScoreSet(
        np.concatenate([o.upper_scores for o in outs]),
        np.concatenate([o.lower_scores for o in outs]),
        glob,
    )


def finetune(
    start: Checkpoint | None,
    kind,
    train: EncodedBatch,
    y_lower: np.ndarray,
    cfg: TrainConfig = FINETUNE_DEFAULTS,
    dev: EncodedBatch | None = None,
    y_dev: np.ndarray | None = None,
    ontology: LabelOntology | None = None,
    encoder_config: enc.EncoderConfig | None = None,
    threshold: float = 0.5,
    global_weight: float = 0.5,
    lcpn_gating: bool = False,
    prior_bias: bool = False,
) -> TrainResult:
    """Train a head (and, unless frozen, the encoder) on lower-label indicators.

    Upper targets are derived from ``y_lower``. Every ``eval_interval`` steps
    the dev lower-level macro F1 is recorded; the best checkpoint wins.
    """
    kind = HeadKind(kind)
    ontology = ontology or default_ontology()
    y_lower = np.asarray(y_lower, dtype=np.float64)
    if y_lower.shape != (len(train), ontology.n_lower):
        raise ValidationError(f"label matrix shape {y_lower.shape} != ({len(train)}, {ontology.n_lower})")
    if start is not None:
        encoder_config = enc.EncoderConfig(**start.encoder_config)
        params = _copy(start.encoder_params)
    elif encoder_config is not None:
        params = enc.init_params(encoder_config, cfg.seed)
    else:
        raise ConfigurationError("finetune needs a start checkpoint or an encoder config")
    parent_idx = ontology.parent_index_array()
    y_upper = np.zeros((len(train), ontology.n_upper))
    for j in range(ontology.n_upper):
        y_upper[:, j] = y_lower[:, parent_idx == j].max(1)

    head = init_head_params(kind, encoder_config.d_model, ontology, seed=cfg.seed + 1)
    if prior_bias:
        head = set_prior_biases(kind, head, y_upper, y_lower, ontology)
    all_params = dict(params)
    all_params.update({"head." + k: v for k, v in head.items()})
    opt = AdamW(all_params, cfg)
    frozen = set(params) if cfg.freeze_encoder else set()
    total = _total_steps(len(train), cfg)
    metric_name = "dev_macro_f1_lower"

    def snapshot(step, metric):
        return Checkpoint(encoder_config.to_dict(), _copy(params), kind.value, _copy(head), step,
                          metric_name, metric,
                          extra={"threshold": threshold, "global_weight": global_weight, "lcpn_gating": lcpn_gating})

    best = None
    last_good = snapshot(0, None)
    trace, losses, window = [], [], []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(train), cfg, epoch):
            if step >= total:
                break
            step += 1
            (ids,) = _trim(train.ids[idx])
            rng = np.random.default_rng([cfg.seed, 17, step]) if encoder_config.dropout else None
            try:
                out = enc.forward(params, encoder_config, ids, ids != 0, rng=rng, keep_cache=not cfg.freeze_encoder)
                loss, hgrads, d_cls, _ = head_loss_and_grads(
                    kind, head, out.cls_embedding, y_upper[idx], y_lower[idx], cfg.mtl_lambda, ontology, lcpn_gating
                )
            except (NumericError, ValidationError) as exc:
                raise TrainingDiverged(f"fine-tuning step {step}: {exc}", checkpoint=best or last_good) from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"fine-tuning loss became {loss} at step {step}", checkpoint=best or last_good)
            grads = {"head." + k: v for k, v in hgrads.items()}
            if not cfg.freeze_encoder:
                grads.update(enc.backward(params, encoder_config, out.cache, d_cls=d_cls.astype(out.cls_embedding.dtype)))
            opt.step(all_params, grads, _lr_at(cfg, step), frozen)
            losses.append(loss)
            window.append(loss)
            if step % cfg.eval_interval == 0 or step == total:
                row = {"step": step, "epoch": epoch, "train_loss": float(np.mean(window))}
                window = []
                if dev is not None and len(dev):
                    try:
                        scores = _head_scores(params, head, kind, encoder_config, dev, ontology, lcpn_gating)
                    except NumericError as exc:
                        raise TrainingDiverged(f"dev scoring at step {step}: {exc}",
                                               checkpoint=best or last_good) from exc
                    _, pred_low = predict(scores, kind, threshold, global_weight)
                    row[metric_name] = macro_f1(pred_low, np.asarray(y_dev), ontology.lower_labels)["macro"]
                    metric = row[metric_name]
                else:
                    metric = -row["train_loss"]
                trace.append(row)
                last_good = snapshot(step, metric)
                if best is None or metric > best.metric_value:
                    best = last_good
                logger.info("finetune step %d: %s", step, row)
        if step >= total:
            break
    return TrainResult(best or last_good, trace, losses)


def checkpoint_scores(ckpt: Checkpoint, batch: EncodedBatch, ontology: LabelOntology | None = None):
    ontology = ontology or default_ontology()
    cfg = enc.EncoderConfig(**ckpt.encoder_config)
    gating = bool(ckpt.extra.get("lcpn_gating", False))
    return _head_scores(ckpt.encoder_params, ckpt.head_params, ckpt.head_kind, cfg, batch, ontology, gating)


# -- estimators --------------------------------------------------------------


def _label_matrix(y, ontology: LabelOntology) -> np.ndarray:
    if isinstance(y, np.ndarray) and y.ndim == 2:
        if y.shape[1] != ontology.n_lower:
            raise ValidationError(f"expected {ontology.n_lower} label columns, got {y.shape[1]}")
        return y.astype(np.float64)
    return ontology.lower_indicator(list(y))


def _check_batch(X) -> EncodedBatch:
    if not isinstance(X, EncodedBatch):
        raise ValidationError("expected an EncodedBatch (use SubwordTokenizer.transform)")
    return X


class MaskedLMPretrainer(BaseEstimator):
    """Adaptive (entity-masked) MLM pre-training of a fresh or given encoder.

    With ``alpha == beta`` this is ordinary MLM; ``alpha > beta`` favours
    entity tokens.
    """

    def __init__(self, vocab_size=None, n_layers=2, n_heads=4, d_model=64, d_ff=256, max_len=64,
                 dropout=0.1, init_std=0.02, alpha=0.5, beta=0.1, learning_rate=5e-5, batch_size=32, epochs=50,
                 max_steps=0, eval_interval=1000, weight_decay=0.01, warmup_steps=0, seed=13):
        self.vocab_size = vocab_size
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.max_len = max_len
        self.dropout = dropout
        self.init_std = init_std
        self.alpha = alpha
        self.beta = beta
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.eval_interval = eval_interval
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.seed = seed

    def _configs(self, vocab_size):
        ecfg = enc.EncoderConfig(vocab_size, self.n_layers, self.n_heads, self.d_model, self.d_ff,
                                 self.max_len, self.dropout, self.init_std)
        tcfg = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                           max_steps=self.max_steps, eval_interval=self.eval_interval,
                           weight_decay=self.weight_decay, warmup_steps=self.warmup_steps, seed=self.seed)
        return ecfg, tcfg, MaskingConfig(alpha=self.alpha, beta=self.beta)

    def fit(self, X, y=None, X_dev=None):
        X = _check_batch(X)
        vocab_size = self.vocab_size or int(X.ids.max()) + 1
        ecfg, tcfg, mcfg = self._configs(vocab_size)
        result = pretrain(X, ecfg, mcfg, tcfg, dev=X_dev)
        self.checkpoint_ = result.checkpoint
        self.trace_ = result.trace
        self.losses_ = result.losses
        self.encoder_config_ = ecfg
        return self

    def transform(self, X):
        """CLS embeddings of the selected checkpoint."""
        check_is_fitted(self, "checkpoint_")
        X = _check_batch(X)
        return enc.cls_embedding(self.checkpoint_.encoder_params, self.encoder_config_, X.ids, X.attention_mask)


class HierarchicalClassifier(ClassifierMixin, BaseEstimator):
    """Encoder + hierarchical multi-label head.

    ``y`` is a lower-level indicator matrix (columns in ontology order) or a
    list of lower-label sets. ``predict`` returns the lower-level indicator
    matrix; :meth:`predict_labels` returns upper and lower label sets.
    """

    def __init__(self, head_kind="hmcn_local", init_checkpoint=None, vocab_size=None, n_layers=2, n_heads=4,
                 d_model=64, d_ff=256, max_len=64, dropout=0.1, init_std=0.02, mtl_lambda=0.1, learning_rate=5e-5,
                 batch_size=32, epochs=15, max_steps=0, eval_interval=1000, weight_decay=0.01,
                 warmup_steps=0, freeze_encoder=False, threshold=0.5, global_weight=0.5,
                 lcpn_gating=False, prior_bias=False, seed=13, ontology=None):
        self.head_kind = head_kind
        self.init_checkpoint = init_checkpoint
        self.vocab_size = vocab_size
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.max_len = max_len
        self.dropout = dropout
        self.init_std = init_std
        self.mtl_lambda = mtl_lambda
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.eval_interval = eval_interval
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.freeze_encoder = freeze_encoder
        self.threshold = threshold
        self.global_weight = global_weight
        self.lcpn_gating = lcpn_gating
        self.prior_bias = prior_bias
        self.seed = seed
        self.ontology = ontology

    def fit(self, X, y, X_dev=None, y_dev=None):
        X = _check_batch(X)
        ontology = self.ontology or default_ontology()
        Y = _label_matrix(y, ontology)
        Y_dev = None if y_dev is None else _label_matrix(y_dev, ontology)
        tcfg = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           mtl_lambda=self.mtl_lambda, epochs=self.epochs, max_steps=self.max_steps,
                           eval_interval=self.eval_interval, weight_decay=self.weight_decay,
                           warmup_steps=self.warmup_steps, seed=self.seed, freeze_encoder=self.freeze_encoder)
        ecfg = None
        if self.init_checkpoint is None:
            vocab_size = self.vocab_size or int(X.ids.max()) + 1
            ecfg = enc.EncoderConfig(vocab_size, self.n_layers, self.n_heads, self.d_model, self.d_ff,
                                     self.max_len, self.dropout, self.init_std)
        result = finetune(self.init_checkpoint, self.head_kind, X, Y, tcfg, X_dev, Y_dev, ontology, ecfg,
                          self.threshold, self.global_weight, self.lcpn_gating, self.prior_bias)
        self.checkpoint_ = result.checkpoint
        self.trace_ = result.trace
        self.losses_ = result.losses
        self.ontology_ = ontology
        self.classes_ = np.array(ontology.lower_labels)
        return self

    def predict_proba(self, X):
        """:class:`~crisis_hmc.heads.ScoreSet` for every row of ``X``."""
        check_is_fitted(self, "checkpoint_")
        return checkpoint_scores(self.checkpoint_, _check_batch(X), self.ontology_)

    def predict(self, X):
        return predict(self.predict_proba(X), self.head_kind, self.threshold, self.global_weight)[1]

    def predict_labels(self, X):
        up, low = predict(self.predict_proba(X), self.head_kind, self.threshold, self.global_weight)
        ont = self.ontology_
        return (
            [{ont.upper_labels[j] for j in np.flatnonzero(r)} for r in up],
            [{ont.lower_labels[j] for j in np.flatnonzero(r)} for r in low],
        )

    def score(self, X, y, sample_weight=None):
        """Lower-level macro F1."""
        Y = _label_matrix(y, self.ontology_)
        return macro_f1(self.predict(X), Y, self.ontology_.lower_labels)["macro"]
