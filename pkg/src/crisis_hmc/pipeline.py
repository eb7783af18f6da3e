"""INI-configured end-to-end runs: annotate, encode, pre-train, fine-tune, evaluate."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from . import encoder as enc
from .checkpoint import Checkpoint
from .corpus import DatasetSplit, load_corpus, save_corpus, split_by_event, stratified_dev_split
from .evaluation import emit_report, evaluate, write_json
from .exceptions import ConfigurationError, ValidationError
from .heads import HeadKind, indicators_to_sets, predict
from .masking import MaskingConfig, mask_sequence, masking_statistics
from .ner import Gazetteer, RemoteAnnotatorConfig, annotate, fetch_remote_annotations, strict_ner_f1
from .ontology import LabelOntology, default_ontology
from .synthetic import SyntheticSpec, generate_synthetic
from .tokenizer import SubwordTokenizer
from .trainer import TrainConfig, checkpoint_scores, finetune, pretrain

logger = logging.getLogger(__name__)

# Seeds come from the command line, never from the file.
_TRAIN_KEYS = [f for f in TrainConfig.field_names() if f != "seed"]
_MASK_KEYS = [f.name for f in dataclasses.fields(MaskingConfig)]


def _train_defaults(**over):
    base = {k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS}
    base.update(over)
    return base


# Desk-scale defaults: a small encoder trained from scratch needs a larger
# step size and init than a pre-trained base model would, and starting the
# output biases at the label prior avoids a long plateau.
DEFAULTS: dict[str, dict] = {
    "data": {
        "corpus": "",
        "test_events": "",
        "n_test_per_type": 1,
        "dev_ratio": 0.9,
        "event_types": "flood,wildfire,earthquake,hurricane",
        "n_events": 4,
        "tweets_per_event": 60,
        "spurious_correlation": 0.9,
        "multi_label_p": 0.3,
        "filler_p": 0.3,
    },
    "ner": {
        "annotator": "gazetteer",
        "gazetteer_dir": "",
        "remote_url": "",
        "remote_timeout": 10.0,
        "remote_retries": 3,
    },
    "tokenizer": {
        "vocab_size": 600,
        "max_len": 48,
        "lowercase": True,
        "use_entities": True,
    },
    "encoder": {
        "n_layers": 2,
        "n_heads": 4,
        "d_model": 64,
        "d_ff": 128,
        "dropout": 0.1,
        "init_std": 0.1,
    },
    "pretrain": {
        "enabled": True,
        **{k: getattr(MaskingConfig(), k) for k in _MASK_KEYS},
        **_train_defaults(learning_rate=3e-3, epochs=30, eval_interval=100),
    },
    "finetune": {
        "head_kind": "hmcn_local",
        "threshold": 0.5,
        "global_weight": 0.5,
        "lcpn_gating": False,
        "prior_bias": True,
        **_train_defaults(learning_rate=3e-3, epochs=40, eval_interval=44),
    },
    "eval": {
        "skip_zero_support": False,
        "formats": "json,csv,svg",
    },
}


def config_keys() -> list[tuple[str, str, object]]:
    return [(s, k, v) for s, keys in DEFAULTS.items() for k, v in keys.items()]


def _coerce(section: str, key: str, raw):
    if section not in DEFAULTS:
        raise ConfigurationError(f"unknown config section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigurationError(f"unknown config key {section}.{key}")
    default = DEFAULTS[section][key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


@dataclass(frozen=True)
class PipelineConfig:
    sections: Mapping[str, Mapping[str, object]]

    def __getitem__(self, section) -> dict:
        return dict(self.sections[section])

    def to_dict(self) -> dict:
        return {s: dict(v) for s, v in self.sections.items()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: Mapping[str, object]) -> "PipelineConfig":
        """``overrides`` maps ``section.key`` to a raw string or typed value."""
        data = self.to_dict()
        for dotted, raw in overrides.items():
            if "." not in dotted:
                raise ConfigurationError(f"override {dotted!r} is not of the form section.key")
            section, key = dotted.split(".", 1)
            data.setdefault(section, {})[key] = _coerce(section, key, raw)
        return PipelineConfig(data)

    def masking(self) -> MaskingConfig:
        p = self["pretrain"]
        return MaskingConfig(**{k: p[k] for k in _MASK_KEYS})

    def train_config(self, section: str, seed: int) -> TrainConfig:
        p = self[section]
        return TrainConfig(seed=seed, **{k: p[k] for k in _TRAIN_KEYS})


def default_config() -> PipelineConfig:
    return PipelineConfig({s: dict(v) for s, v in DEFAULTS.items()})


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Defaults, then the INI file (if any), then ``overrides``."""
    cfg = default_config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        from_file = {f"{s}.{k}": v for s in parser.sections() for k, v in parser[s].items()}
        cfg = cfg.with_overrides(from_file)
    return cfg.with_overrides(overrides or {})


def write_config(cfg: PipelineConfig, path) -> Path:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in cfg.to_dict().items():
        parser[section] = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in keys.items()}
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        parser.write(fh)
    return path


# -- helpers -----------------------------------------------------------------


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import scipy
    import sklearn

    return {
        "crisis_hmc": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
    }


def write_trace_csv(rows, path) -> Path:
    path = Path(path)
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "step", k))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def synthetic_spec(cfg: PipelineConfig, seed: int) -> SyntheticSpec:
    d = cfg["data"]
    return SyntheticSpec(
        event_types=tuple(t.strip() for t in d["event_types"].split(",") if t.strip()),
        n_events=d["n_events"],
        tweets_per_event=d["tweets_per_event"],
        spurious_correlation=d["spurious_correlation"],
        multi_label_p=d["multi_label_p"],
        filler_p=d["filler_p"],
        seed=seed,
    )


@dataclass
class PreparedData:
    train: list
    test: list
    gold_entities: list | None  # for every train + test tweet, as loaded
    gazetteer: Gazetteer | None
    input_digest: dict


def load_data(cfg: PipelineConfig, seed: int, ontology: LabelOntology) -> PreparedData:
    d = cfg["data"]
    if d["corpus"]:
        tweets = load_corpus(d["corpus"], ontology)
        digest = {"corpus": sha256_file(d["corpus"])}
        events = sorted({(t.event_type, t.event_id) for t in tweets})
        if d["test_events"]:
            test_ids = {e.strip() for e in d["test_events"].split(",") if e.strip()}
        else:
            test_ids = set()
            for etype in sorted({t for t, _ in events}):
                ids = [e for t, e in events if t == etype]
                if d["n_test_per_type"] >= len(ids):
                    raise ConfigurationError(f"event type {etype!r} has too few events to hold any out")
                test_ids.update(ids[len(ids) - d["n_test_per_type"] :])
        split = DatasetSplit(frozenset(e for _, e in events if e not in test_ids), frozenset(test_ids))
        gaz = None
    else:
        spec = synthetic_spec(cfg, seed)
        corpus = generate_synthetic(spec, ontology)
        tweets = corpus.tweets
        split = corpus.split(d["n_test_per_type"])
        gaz = corpus.gazetteer
        digest = {"synthetic_spec": hashlib.sha256(
            json.dumps(spec.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()}
    train, test = split_by_event(tweets, split)
    gold = [t.entities for t in train + test]
    if cfg["ner"]["gazetteer_dir"]:
        gaz = Gazetteer.from_dir(cfg["ner"]["gazetteer_dir"])
    return PreparedData(train, test, gold, gaz, digest)


def annotate_tweets(tweets, cfg: PipelineConfig, gazetteer: Gazetteer | None, report: list | None = None):
    kind = cfg["ner"]["annotator"]
    if kind == "gold":
        return list(tweets)
    if kind == "rules":
        return [t.with_entities(annotate(t.text, None)) for t in tweets]
    if kind == "gazetteer":
        return [t.with_entities(annotate(t.text, gazetteer)) for t in tweets]
    if kind == "remote":
        n = cfg["ner"]
        if not n["remote_url"]:
            raise ConfigurationError("ner.annotator = remote needs ner.remote_url")
        rc = RemoteAnnotatorConfig(n["remote_url"], timeout=n["remote_timeout"], max_retries=n["remote_retries"])
        spans = fetch_remote_annotations([t.text for t in tweets], rc, fallback=gazetteer, report=report)
        return [t.with_entities(s) for t, s in zip(tweets, spans)]
    raise ConfigurationError(f"unknown annotator {kind!r} (expected gold, rules, gazetteer or remote)")


def encoder_config(cfg: PipelineConfig, vocab_size: int) -> enc.EncoderConfig:
    e = cfg["encoder"]
    return enc.EncoderConfig(vocab_size, e["n_layers"], e["n_heads"], e["d_model"], e["d_ff"],
                             cfg["tokenizer"]["max_len"], e["dropout"], e["init_std"])


# -- the run -----------------------------------------------------------------


class _Run:
    def __init__(self, out_dir: Path):
        self.out = out_dir
        self.stages: dict[str, str] = {}
        self.outputs: list[Path] = []

    def add(self, *paths):
        self.outputs.extend(Path(p) for p in paths)

    def rel(self, path) -> str:
        return Path(path).relative_to(self.out).as_posix()


STAGES = ("data", "annotate", "encode", "pretrain", "finetune", "evaluate")


def run_pipeline(cfg: PipelineConfig, out_dir, seed: int = 13, ontology: LabelOntology | None = None,
                 pretrained: Checkpoint | None = None, until: str = "evaluate", start: Checkpoint | None = None) -> dict:
    """Execute every stage, writing artifacts and ``manifest.json`` under ``out_dir``.

    ``pretrained`` short-cuts the pre-training stage (the ablation suite uses
    it to share one encoder across rows with identical pre-training settings);
    ``start`` replaces the pre-training stage entirely with a given encoder.
    ``until`` names the last stage to execute. Returns the manifest. A failing stage raises :class:`StageError` after the
    partial manifest has been written.
    """
    ontology = ontology or default_ontology()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(out)
    manifest = {
        "schema": "manifest-v1",
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seeds": {"global": seed, "synthetic": seed, "dev_split": seed, "pretrain": seed, "finetune": seed},
        "versions": versions(),
        "conventions": {
            "pretrain_selection": "lowest dev MLM loss at an eval point",
            "finetune_selection": "highest dev lower-level macro F1 at an eval point",
            "zero_support_labels": "skipped" if cfg["eval"]["skip_zero_support"] else "included with F1 0",
        },
    }
    state: dict = {}

    def stage(name, fn):
        try:
            fn()
        except Exception as exc:
            run.stages[name] = "failed"
            _finish(run, manifest, failed=name, error=str(exc))
            raise StageError(name, exc) from exc
        run.stages[name] = "ok"

    def s_data():
        data = load_data(cfg, seed, ontology)
        state["data"] = data
        manifest["inputs"] = data.input_digest
        manifest["split"] = {
            "train_events": sorted({t.event_id for t in data.train}),
            "test_events": sorted({t.event_id for t in data.test}),
        }

    def s_annotate():
        data = state["data"]
        rejected: list = []
        tweets = annotate_tweets(data.train + data.test, cfg, data.gazetteer, rejected)
        n = len(data.train)
        state["train"], state["test"] = tweets[:n], tweets[n:]
        (out / "data").mkdir(exist_ok=True)
        run.add(save_corpus(state["train"], out / "data" / "train.jsonl"),
                save_corpus(state["test"], out / "data" / "test.jsonl"))
        ner = {"annotator": cfg["ner"]["annotator"], "remote_rejections": rejected}
        if any(data.gold_entities) and cfg["ner"]["annotator"] != "gold":
            ner["strict"] = strict_ner_f1(data.gold_entities, [t.entities for t in tweets])
        run.add(write_json(ner, out / "ner_report.json"))

    def s_encode():
        t = cfg["tokenizer"]
        fit, dev = stratified_dev_split(state["train"], cfg["data"]["dev_ratio"], seed)
        tok = SubwordTokenizer(t["vocab_size"], t["max_len"], t["lowercase"], t["use_entities"])
        tok.fit(state["train"])
        vocab_path = out / "vocab.txt"
        tok.vocab_.save(vocab_path)
        run.add(vocab_path)
        state.update(fit=fit, dev=dev, tok=tok,
                     X_fit=tok.transform(fit), X_dev=tok.transform(dev), X_test=tok.transform(state["test"]))
        state["ecfg"] = encoder_config(cfg, len(tok.vocab_))

    def s_pretrain():
        if start is not None:
            state["start"] = start
            manifest["init_checkpoint_sha256"] = hashlib.sha256(start.to_bytes()).hexdigest()
            return
        if not cfg["pretrain"]["enabled"]:
            state["start"] = None
            return
        mcfg = cfg.masking()
        if pretrained is not None:
            result_ckpt, trace = pretrained, []
            manifest["pretrain_reused"] = True
        else:
            result = pretrain(state["X_fit"], state["ecfg"], mcfg, cfg.train_config("pretrain", seed),
                              dev=state["X_dev"])
            result_ckpt, trace = result.checkpoint, result.trace
        state["start"] = result_ckpt
        run.add(result_ckpt.save(out / "pretrain.ckpt"))
        if trace:
            run.add(write_trace_csv(trace, out / "pretrain_trace.csv"))
        X = state["X_fit"]
        inputs = range(len(X))
        examples = [mask_sequence(X.sequence(i), mcfg, seed, index=i, vocab_size=state["ecfg"].vocab_size)
                    for i in inputs]
        run.add(write_json(masking_statistics(examples, [X.sequence(i) for i in inputs]),
                           out / "masking_stats.json"))

    def s_finetune():
        f = cfg["finetune"]
        y_fit = ontology.lower_indicator([t.lower_labels for t in state["fit"]])
        y_dev = ontology.lower_indicator([t.lower_labels for t in state["dev"]])
        result = finetune(state["start"], f["head_kind"], state["X_fit"], y_fit, cfg.train_config("finetune", seed),
                          state["X_dev"], y_dev, ontology, state["ecfg"], f["threshold"], f["global_weight"],
                          f["lcpn_gating"], f["prior_bias"])
        state["model"] = result.checkpoint
        run.add(result.checkpoint.save(out / "finetune.ckpt"), write_trace_csv(result.trace, out / "finetune_trace.csv"))

    def s_evaluate():
        f, e = cfg["finetune"], cfg["eval"]
        formats = [x.strip() for x in e["formats"].split(",") if x.strip()]
        kind = HeadKind(f["head_kind"])
        reports = {}
        for split, X, gold in (("dev", state["X_dev"], state["dev"]), ("test", state["X_test"], state["test"])):
            scores = checkpoint_scores(state["model"], X, ontology)
            up, low = predict(scores, kind, f["threshold"], f["global_weight"])
            rep = evaluate(indicators_to_sets(low, ontology.lower_labels), gold, ontology,
                           pred_upper=indicators_to_sets(up, ontology.upper_labels),
                           skip_zero_support=e["skip_zero_support"],
                           config={"head_kind": kind.value, "split": split, "config_hash": manifest["config_hash"]})
            run.add(*emit_report(rep, out, formats, stem=f"report_{split}"))
            reports[split] = rep
        state["reports"] = reports
        manifest["results"] = {s: r.row() for s, r in reports.items()}

    if until not in STAGES:
        raise ConfigurationError(f"unknown stage {until!r}")
    fns = (s_data, s_annotate, s_encode, s_pretrain, s_finetune, s_evaluate)
    for name, fn in zip(STAGES, fns):
        stage(name, fn)
        if name == until:
            break
    _finish(run, manifest)
    manifest["_state"] = state
    return manifest


def _finish(run: _Run, manifest: dict, failed: str | None = None, error: str | None = None):
    manifest["stages"] = dict(run.stages)
    if failed:
        manifest["failed_stage"] = failed
        manifest["error"] = error
    manifest["outputs"] = {run.rel(p): sha256_file(p) for p in sorted(set(run.outputs)) if p.exists()}
    write_json({k: v for k, v in manifest.items() if not k.startswith("_")}, run.out / "manifest.json")


def rerun_from_manifest(manifest_path, out_dir) -> dict:
    """Re-execute a run from its manifest alone."""
    m = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    cfg = PipelineConfig(m["config"])
    if cfg.digest() != m["config_hash"]:
        raise ValidationError("manifest config does not match its hash")
    return run_pipeline(cfg, out_dir, seed=m["seeds"]["global"])
