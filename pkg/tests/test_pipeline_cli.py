import json

import pytest

from crisis_hmc.ablation import ABLATION_ROWS, plain_baseline_config
from crisis_hmc.cli import main
from crisis_hmc.exceptions import ConfigurationError
from crisis_hmc.pipeline import config_keys, default_config, load_config, parse_overrides

TINY = {
    "data.event_types": "flood,wildfire", "data.n_events": "2", "data.tweets_per_event": "15",
    "tokenizer.vocab_size": "150", "tokenizer.max_len": "24",
    "encoder.n_layers": "1", "encoder.d_model": "16", "encoder.d_ff": "32", "encoder.n_heads": "2",
    "pretrain.epochs": "1", "pretrain.eval_interval": "5", "finetune.epochs": "2", "finetune.eval_interval": "5",
}
TINY_ARGS = [a for k, v in TINY.items() for a in ("--set", f"{k}={v}")]


def run(*argv):
    return main([str(a) for a in argv])


def test_config_file_and_overrides(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[finetune]\nhead_kind = lcl\nmtl_lambda = 0.3\n")
    cfg = load_config(ini, parse_overrides(["finetune.mtl_lambda=0.7"]))
    assert cfg["finetune"]["head_kind"] == "lcl" and cfg["finetune"]["mtl_lambda"] == 0.7
    assert cfg.digest() != default_config().digest()
    with pytest.raises(ConfigurationError):
        load_config(overrides=parse_overrides(["finetune.colour=red"]))
    bad = tmp_path / "bad.ini"
    bad.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigurationError):
        load_config(bad)


def test_help_lists_every_key(capsys):
    assert run("run", "--help") == 0
    text = capsys.readouterr().out
    for section, key, _ in config_keys():
        assert f"{section}.{key} =" in text
    assert "CRISIS_HMC_LOG" in text


def test_unknown_flag_and_missing_argument(tmp_path, capsys):
    assert run("synth", "--bogus") == 1
    assert "usage" in capsys.readouterr().err
    assert run("ner-eval", "--out", tmp_path) == 1
    assert run("run", "--out", tmp_path, "--set", "encoder.n_layers=x") == 1


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", out, *TINY_ARGS) == 0
    return out


def test_synth_outputs(synth_dir):
    assert (synth_dir / "corpus.jsonl").exists() and (synth_dir / "gazetteer").is_dir()
    m = json.loads((synth_dir / "manifest.json").read_text())
    assert m["command"] == "synth" and "corpus.jsonl" in m["outputs"]
    assert len((synth_dir / "corpus.jsonl").read_text().splitlines()) == 60


def test_ner_eval_of_gold_against_itself(synth_dir, tmp_path, capsys):
    corpus = synth_dir / "corpus.jsonl"
    assert run("ner-eval", "--gold", corpus, "--pred", corpus, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "ner_eval.json").read_text())["f1"] == 1.0


def test_annotate_and_vocab_rerun_from_manifest(synth_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("annotate", "--corpus", synth_dir / "corpus.jsonl", "--gazetteer", synth_dir / "gazetteer",
               "--out", a, *TINY_ARGS) == 0
    assert run("annotate", "--manifest", a / "manifest.json", "--out", b) == 0
    assert (a / "annotated.jsonl").read_bytes() == (b / "annotated.jsonl").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    v = tmp_path / "v"
    assert run("vocab", "--corpus", b / "annotated.jsonl", "--out", v, *TINY_ARGS) == 0
    assert run("vocab", "--manifest", v / "manifest.json", "--out", tmp_path / "v2") == 0
    assert (v / "vocab.txt").read_bytes() == (tmp_path / "v2" / "vocab.txt").read_bytes()


def test_manifest_for_other_command_rejected(synth_dir, tmp_path):
    assert run("vocab", "--manifest", synth_dir / "manifest.json", "--out", tmp_path) == 1


def test_tampered_manifest_rejected(synth_dir, tmp_path):
    m = json.loads((synth_dir / "manifest.json").read_text())
    m["config"]["encoder"]["d_model"] = 999
    path = tmp_path / "m.json"
    path.write_text(json.dumps(m))
    assert run("synth", "--manifest", path, "--out", tmp_path / "o") == 1


def test_stage_failure_leaves_partial_manifest(tmp_path):
    out = tmp_path / "run"
    code = run("run", "--out", out, "--set", f"data.corpus={tmp_path / 'missing.jsonl'}", *TINY_ARGS)
    assert code in (1, 2)
    m = json.loads((out / "manifest.json").read_text())
    assert m["failed_stage"] == "data" and m["stages"]["data"] == "failed"


def test_run_rerun_and_evaluate(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("run", "--out", a, "--threads", 1, *TINY_ARGS) == 0
    assert run("run", "--manifest", a / "manifest.json", "--out", b, "--threads", 1) == 0
    for name in ("manifest.json", "report_test.json", "finetune.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ev = tmp_path / "ev"
    assert run("evaluate", "--checkpoint", a / "finetune.ckpt", "--vocab", a / "vocab.txt",
               "--corpus", a / "data" / "test.jsonl", "--out", ev, *TINY_ARGS) == 0
    ours = json.loads((ev / "report.json").read_text())
    theirs = json.loads((a / "report_test.json").read_text())
    for key in ("macro_f1_upper", "macro_f1_lower", "macro_f1_ait"):
        assert ours[key] == theirs[key]


def test_pretrain_stops_before_finetune(tmp_path):
    assert run("pretrain", "--out", tmp_path, *TINY_ARGS) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert "finetune" not in m["stages"] and (tmp_path / "pretrain.ckpt").exists()


def test_ablation_rows(tmp_path):
    assert [name for name, _ in ABLATION_ROWS] == ["HMCN_local", "-Hierarchy", "-Multi-Task", "-MLM", "-Entities",
                                                    "BERT_MLM"]
    base = load_config(overrides=parse_overrides([f"{k}={v}" for k, v in TINY.items()]))
    assert run("ablate", "--out", tmp_path, "--threads", 1, *TINY_ARGS) == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(lines) == 7 and (tmp_path / "ablation.svg").exists()
    row5 = lines[5].split(",")
    assert row5[1] == "-Entities" and row5[-1] == plain_baseline_config(base).digest()
    row2 = json.loads((tmp_path / "rows" / "2_hierarchy" / "manifest.json").read_text())
    assert row2["config"]["finetune"]["head_kind"] == "lcl"
