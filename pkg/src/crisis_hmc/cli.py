"""``crisis-hmc`` command line: one binary, one subcommand per stage."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .exceptions import ConfigurationError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("synth", "annotate", "ner-eval", "vocab", "pretrain", "finetune", "evaluate", "ablate", "baseline", "run")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
COMMON = ("command", "config", "out", "seed", "threads", "set", "manifest")
PATH_ARGS = ("spec", "corpus", "gazetteer", "gold", "pred", "init", "checkpoint", "vocab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _config_epilog() -> str:
    from .pipeline import config_keys

    lines = ["config keys (INI section.key = default; override with --set section.key=value):"]
    for section, key, default in config_keys():
        shown = str(default).lower() if isinstance(default, bool) else repr(default) if default == "" else default
        lines.append(f"  {section}.{key} = {shown}")
    lines.append("")
    lines.append("environment: CRISIS_HMC_LOG = error | info | debug (default info)")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=13, help="global seed (default 13)")
    common.add_argument("--threads", type=int, default=None, help="cap numeric worker threads; 1 = bit-reproducible")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--manifest", help="repeat the invocation recorded in this manifest.json")

    epilog = _config_epilog()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="crisis-hmc", description=__doc__, epilog=epilog, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, epilog=epilog, formatter_class=fmt)

    p = add("synth", "generate a synthetic corpus with gold entities")
    p.add_argument("--spec", help="JSON synthetic-corpus spec")
    p = add("annotate", "annotate a corpus with the rule/gazetteer (or remote) annotator")
    p.add_argument("--corpus", help="JSONL corpus (required)")
    p.add_argument("--gazetteer", help="directory of <type>.txt gazetteer files")
    p = add("ner-eval", "strict NER F1 of predicted against gold entities")
    p.add_argument("--gold", help="gold JSONL corpus (required)")
    p.add_argument("--pred", help="predicted JSONL corpus (required)")
    p = add("vocab", "train a subword vocabulary")
    p.add_argument("--corpus", help="JSONL corpus (required)")
    add("pretrain", "adaptive MLM pre-training")
    p = add("finetune", "fine-tune a classification head")
    p.add_argument("--init", help="encoder checkpoint to start from (skips pre-training)")
    p = add("evaluate", "evaluate a fine-tuned checkpoint")
    p.add_argument("--checkpoint", help="fine-tuned checkpoint (required)")
    p.add_argument("--vocab", help="vocabulary file (required)")
    p.add_argument("--corpus", help="JSONL corpus to score (required)")
    p.add_argument("--skip-zero-support", action="store_true", help="leave labels without gold support out of the macro")
    add("ablate", "six-row ablation table")
    p = add("baseline", "TF-IDF + logistic regression baseline")
    p.add_argument("--l2", type=float, action="append", help="regularisation grid (repeatable)")
    add("run", "full pipeline")
    return parser


def _need(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if not getattr(args, n, None)]
    if missing:
        raise ConfigurationError(f"{args.command} needs {', '.join(missing)}")


def _arguments(args) -> dict:
    """Command-specific arguments, with paths made absolute so a manifest stands on its own."""
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in COMMON or k.startswith("_"):
            continue
        out[k] = str(Path(v).resolve()) if k in PATH_ARGS and v else v
    return out


def _from_manifest(args) -> argparse.Namespace:
    from .pipeline import PipelineConfig

    m = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    cfg = PipelineConfig(m["config"])
    if cfg.digest() != m.get("config_hash"):
        raise ValidationError("manifest config does not match its hash")
    command = m.get("command", args.command)
    if command != args.command:
        raise ConfigurationError(f"manifest was written by {command!r}, not {args.command!r}")
    ns = argparse.Namespace(**m.get("arguments", {}))
    ns.command, ns.config, ns.set, ns.manifest = command, None, [], None
    ns.seed, ns.out, ns.threads = m["seeds"]["global"], args.out, args.threads
    ns._cfg = cfg
    return ns


def _stamp_manifest(out: Path, args) -> None:
    """Record the invocation in a manifest written by a library routine."""
    from .evaluation import write_json

    path = out / "manifest.json"
    m = json.loads(path.read_text(encoding="utf-8"))
    m["command"] = args.command
    m["arguments"] = _arguments(args)
    write_json(m, path)


def _out(args) -> Path:
    if not args.out:
        raise ConfigurationError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args):
    from .pipeline import load_config, parse_overrides

    if getattr(args, "_cfg", None) is not None:
        return args._cfg
    return load_config(args.config, parse_overrides(args.set))


def _write_manifest(out: Path, command: str, args, extra: dict, outputs) -> None:
    from .evaluation import write_json
    from .pipeline import sha256_file, versions

    cfg = _config(args)
    manifest = {
        "schema": "manifest-v1",
        "command": command,
        "arguments": _arguments(args),
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seeds": {"global": args.seed},
        "versions": versions(),
        **extra,
        "outputs": {Path(p).relative_to(out).as_posix(): sha256_file(p) for p in sorted(map(Path, outputs))},
    }
    write_json(manifest, out / "manifest.json")


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    from .corpus import save_corpus
    from .synthetic import SyntheticSpec, generate_synthetic
    from .evaluation import write_json
    from .pipeline import synthetic_spec

    out = _out(args)
    if args.spec:
        spec_dict = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        spec_dict.setdefault("seed", args.seed)
        spec = SyntheticSpec.from_dict(spec_dict)
    else:
        spec = synthetic_spec(_config(args), args.seed)
    corpus = generate_synthetic(spec)
    split = corpus.split(_config(args)["data"]["n_test_per_type"])
    paths = [save_corpus(corpus.tweets, out / "corpus.jsonl")]
    paths += corpus.gazetteer.to_dir(out / "gazetteer")
    paths.append(write_json(spec.to_dict(), out / "spec.json"))
    paths.append(write_json({"train_events": sorted(split.train_event_ids), "test_events": sorted(split.test_event_ids)},
                            out / "split.json"))
    _write_manifest(out, "synth", args, {}, paths)
    print(f"wrote {len(corpus)} tweets to {out / 'corpus.jsonl'}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    from .corpus import load_corpus, save_corpus
    from .evaluation import write_json
    from .ner import Gazetteer
    from .ontology import default_ontology
    from .pipeline import annotate_tweets, sha256_file

    _need(args, "corpus")
    out = _out(args)
    cfg = _config(args)
    tweets = load_corpus(args.corpus, default_ontology())
    gaz_dir = args.gazetteer or cfg["ner"]["gazetteer_dir"]
    gaz = Gazetteer.from_dir(gaz_dir) if gaz_dir else None
    rejected: list = []
    annotated = annotate_tweets(tweets, cfg, gaz, rejected)
    paths = [save_corpus(annotated, out / "annotated.jsonl"),
             write_json({"remote_rejections": rejected}, out / "annotate_report.json")]
    _write_manifest(out, "annotate", args, {"inputs": {"corpus": sha256_file(args.corpus)}}, paths)
    return EXIT_OK


def cmd_ner_eval(args) -> int:
    from .corpus import load_corpus
    from .evaluation import write_json
    from .ner import strict_ner_f1
    from .ontology import default_ontology
    from .pipeline import sha256_file

    _need(args, "gold", "pred")
    out = _out(args)
    ont = default_ontology()
    gold = {t.id: t.entities for t in load_corpus(args.gold, ont)}
    pred = {t.id: t.entities for t in load_corpus(args.pred, ont)}
    if set(gold) != set(pred):
        raise ValidationError("gold and predicted corpora cover different tweet ids")
    ids = sorted(gold)
    result = strict_ner_f1([gold[i] for i in ids], [pred[i] for i in ids])
    path = write_json(result, out / "ner_eval.json")
    _write_manifest(out, "ner-eval", args,
                    {"inputs": {"gold": sha256_file(args.gold), "pred": sha256_file(args.pred)}}, [path])
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_vocab(args) -> int:
    from .corpus import load_corpus
    from .ontology import default_ontology
    from .pipeline import sha256_file
    from .tokenizer import train_vocab

    _need(args, "corpus")
    out = _out(args)
    t = _config(args)["tokenizer"]
    texts = [tw.text for tw in load_corpus(args.corpus, default_ontology())]
    path = train_vocab(texts, t["vocab_size"], t["lowercase"]).save(out / "vocab.txt")
    _write_manifest(out, "vocab", args, {"inputs": {"corpus": sha256_file(args.corpus)}}, [path])
    return EXIT_OK


def cmd_pipeline(args, until: str) -> int:
    from .checkpoint import Checkpoint
    from .pipeline import run_pipeline

    out = _out(args)
    start = Checkpoint.load(args.init) if getattr(args, "init", None) else None
    manifest = run_pipeline(_config(args), out, seed=args.seed, until=until, start=start)
    _stamp_manifest(out, args)
    if "results" in manifest:
        print(json.dumps(manifest["results"], sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .checkpoint import Checkpoint
    from .corpus import load_corpus
    from .evaluation import emit_report, evaluate
    from .heads import HeadKind, indicators_to_sets, predict
    from .ontology import default_ontology
    from .pipeline import sha256_file
    from .tokenizer import SubwordTokenizer, Vocab
    from .trainer import checkpoint_scores

    _need(args, "checkpoint", "vocab", "corpus")
    out = _out(args)
    cfg = _config(args)
    ont = default_ontology()
    ckpt = Checkpoint.load(args.checkpoint)
    if ckpt.head_kind is None:
        raise ValidationError("checkpoint has no classification head")
    t = cfg["tokenizer"]
    tok = SubwordTokenizer(t["vocab_size"], t["max_len"], t["lowercase"], t["use_entities"])
    tok.vocab_ = Vocab.load(args.vocab)
    gold = load_corpus(args.corpus, ont)
    kind = HeadKind(ckpt.head_kind)
    threshold = float(ckpt.extra.get("threshold", 0.5))
    gw = float(ckpt.extra.get("global_weight", 0.5))
    up, low = predict(checkpoint_scores(ckpt, tok.transform(gold), ont), kind, threshold, gw)
    skip = args.skip_zero_support or cfg["eval"]["skip_zero_support"]
    report = evaluate(indicators_to_sets(low, ont.lower_labels), gold, ont,
                      pred_upper=indicators_to_sets(up, ont.upper_labels), skip_zero_support=skip,
                      config={"head_kind": kind.value, "skip_zero_support": skip})
    formats = [x.strip() for x in cfg["eval"]["formats"].split(",") if x.strip()]
    paths = emit_report(report, out, formats)
    inputs = {k: sha256_file(getattr(args, k)) for k in ("checkpoint", "vocab", "corpus")}
    _write_manifest(out, "evaluate", args, {"inputs": inputs}, paths)
    print(json.dumps(report.row(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import ablation_suite

    out = _out(args)
    rows = ablation_suite(_config(args), out, seed=args.seed)
    _stamp_manifest(out, args)
    for r in rows:
        print(f"{r['row']} {r['configuration']:<12} L_T={r['L_T']:.3f} L_B={r['L_B']:.3f} AIT={r['AIT']:.3f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .baseline import grid_search
    from .corpus import stratified_dev_split
    from .evaluation import emit_report, evaluate, write_json
    from .heads import indicators_to_sets
    from .ontology import default_ontology
    from .pipeline import load_data

    out = _out(args)
    cfg = _config(args)
    ont = default_ontology()
    data = load_data(cfg, args.seed, ont)
    fit, dev = stratified_dev_split(data.train, cfg["data"]["dev_ratio"], args.seed)
    grid = [{"ngram_range": ng, "l2": l2} for ng in ((1, 1), (1, 2)) for l2 in (args.l2 or (1e-4, 1e-3, 1e-2))]
    y = lambda ts: ont.lower_indicator([t.lower_labels for t in ts])  # noqa: E731
    model, rows = grid_search(fit, y(fit), dev, y(dev), grid, ont)
    up, low = model.predict_levels(data.test)
    report = evaluate(indicators_to_sets(low, ont.lower_labels), data.test, ont,
                      pred_upper=indicators_to_sets(up, ont.upper_labels),
                      skip_zero_support=cfg["eval"]["skip_zero_support"],
                      config={"model": "tfidf_lr", **{k: list(v) if isinstance(v, tuple) else v
                                                      for k, v in model.get_params().items() if k != "ontology"}})
    formats = [x.strip() for x in cfg["eval"]["formats"].split(",") if x.strip()]
    paths = list(emit_report(report, out, formats, stem="report_test"))
    paths += list(model.save(out / "baseline"))
    for r in rows:
        r["ngram_range"] = list(r["ngram_range"])
    paths.append(write_json({"grid": rows, "max_grad_norm": float(max(model.fit_.grad_norm[model.fit_.trained]))},
                            out / "baseline_fit.json"))
    _write_manifest(out, "baseline", args, {"inputs": data.input_digest, "results": {"test": report.row()}}, paths)
    print(json.dumps(report.row(), sort_keys=True))
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "annotate": cmd_annotate,
    "ner-eval": cmd_ner_eval,
    "vocab": cmd_vocab,
    "pretrain": lambda a: cmd_pipeline(a, "pretrain"),
    "finetune": lambda a: cmd_pipeline(a, "finetune"),
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "baseline": cmd_baseline,
    "run": lambda a: cmd_pipeline(a, "evaluate"),
}


def _is_validation(exc: BaseException) -> bool:
    from .pipeline import StageError

    if isinstance(exc, StageError):
        exc = exc.cause
    return isinstance(exc, (ValidationError, ConfigurationError))


def main(argv=None) -> int:
    level = os.environ.get("CRISIS_HMC_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.manifest:
            args = _from_manifest(args)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigurationError("--threads must be at least 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return HANDLERS[args.command](args)
        return HANDLERS[args.command](args)
    except Exception as exc:  # mapped to exit codes
        code = EXIT_INVALID if _is_validation(exc) else EXIT_RUNTIME
        print(f"crisis-hmc {args.command}: {exc}", file=sys.stderr)
        logging.getLogger(__name__).debug("failure", exc_info=True)
        return code


if __name__ == "__main__":
    sys.exit(main())
