import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crisis_hmc.corpus import AnnotatedTweet
from crisis_hmc.evaluation import emit_report, evaluate, macro_f1, per_event_type_report
from crisis_hmc.exceptions import ValidationError


def tweet(i, event, etype, labels, ontology=None):
    if ontology is not None:
        return AnnotatedTweet.create(i, event, etype, "x", labels, ontology)
    return AnnotatedTweet(str(i), event, etype, "x", lower_labels=frozenset(labels))


def test_perfect_predictions():
    gold = [{"A"}, {"B"}, {"A", "B"}]
    assert macro_f1(gold, gold, ["A", "B"])["macro"] == 1.0


def test_hand_count_oracle():
    gold = [{"A"}, {"A"}, {"B"}]
    pred = [{"A"}, {"B"}, {"B"}]
    r = macro_f1(pred, gold, ["A", "B"])
    assert r["per_label"]["A"]["f1"] == pytest.approx(2 / 3, abs=1e-12)
    assert r["per_label"]["B"]["precision"] == 0.5 and r["per_label"]["B"]["recall"] == 1.0
    assert r["macro"] == pytest.approx(0.6667, abs=1e-4)


def test_indicator_matrices_accepted():
    r = macro_f1(np.array([[1, 0], [0, 1], [0, 1]]), np.array([[1, 0], [1, 0], [0, 1]]), ["A", "B"])
    assert r["macro"] == pytest.approx(2 / 3)


def test_zero_support_conventions():
    gold = [{"A"}]
    pred = [{"A"}]
    assert macro_f1(pred, gold, ["A", "B"])["macro"] == 0.5
    assert macro_f1(pred, gold, ["A", "B"], skip_zero_support=True)["macro"] == 1.0


def test_length_mismatch():
    with pytest.raises(ValidationError):
        macro_f1([{"A"}], [], ["A"])


label_sets = st.lists(st.frozensets(st.sampled_from("ABCDE")), min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(label_sets, st.randoms(use_true_random=False))
def test_permutation_invariance(gold, rnd):
    pred = [frozenset(sorted(g)[:1]) | {"E"} for g in gold]
    labels = list("ABCDE")
    base = macro_f1(pred, gold, labels)["macro"]
    order = list(range(len(gold)))
    rnd.shuffle(order)
    shuffled_labels = labels[:]
    rnd.shuffle(shuffled_labels)
    again = macro_f1([pred[i] for i in order], [gold[i] for i in order], shuffled_labels)["macro"]
    assert again == pytest.approx(base, abs=1e-12)


def test_per_event_mean_and_population_std():
    labels = list("abcde")
    gold = [tweet(1, "e1", "fire", {"a"}), tweet(2, "e2", "fire", {"a", "b"})]
    pred = [{"a"}, {"a", "b"}]
    rep = per_event_type_report(pred, gold, labels)["event_types"]["fire"]
    assert rep["events"] == {"e1": pytest.approx(0.2), "e2": pytest.approx(0.4)}
    assert rep["mean"] == pytest.approx(0.3, abs=1e-12)
    assert rep["std"] == pytest.approx(0.1, abs=1e-12)


def test_single_event_type_identical_scores_zero_std():
    gold = [tweet(1, "e1", "flood", {"a"}), tweet(2, "e2", "flood", {"a"})]
    rep = per_event_type_report([{"a"}, {"a"}], gold, ["a"])["event_types"]["flood"]
    assert rep["std"] == 0.0 and rep["mean"] == 1.0


def test_singleton_type_mean_is_event_score():
    gold = [tweet(1, "e1", "quake", {"a"}), tweet(2, "e1", "quake", {"b"})]
    pred = [{"a"}, set()]
    rep = per_event_type_report(pred, gold, ["a", "b"])
    assert rep["event_types"]["quake"]["mean"] == macro_f1(pred, [{"a"}, {"b"}], ["a", "b"])["macro"]


def test_missing_event_type_omitted_with_notice():
    gold = [tweet(1, "e1", "fire", {"a"}), tweet(2, "e2", "storm", {"a"})]
    rep = per_event_type_report({"1": {"a"}}, gold, ["a"])
    assert list(rep["event_types"]) == ["fire"]
    assert rep["notices"] and "storm" in rep["notices"][0]


@pytest.fixture
def small_eval(ontology):
    rng = random.Random(0)
    labels = list(ontology.lower_labels)
    gold = [tweet(i, f"e{i % 3}", ["fire", "flood"][i % 2], set(rng.sample(labels, 2)), ontology) for i in range(30)]
    pred = [set(rng.sample(labels, 2)) | set(list(t.lower_labels)[:1]) for t in gold]
    return gold, pred


def test_ait_equals_restricted_macro(small_eval, ontology):
    gold, pred = small_eval
    report = evaluate(pred, gold, ontology)
    restricted = macro_f1(pred, [t.lower_labels for t in gold], ontology.ait_labels)["macro"]
    assert report.macro_f1_ait == restricted
    assert len(ontology.ait_labels) == 6
    for v in (report.macro_f1_upper, report.macro_f1_lower, report.macro_f1_ait):
        assert 0.0 <= v <= 1.0


def test_emit_report_files(small_eval, ontology, tmp_path):
    gold, pred = small_eval
    report = evaluate(pred, gold, ontology, config={"k": 1})
    paths = emit_report(report, tmp_path)
    assert sorted(p.name for p in paths) == ["report.csv", "report.json", "report.svg"]
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["schema"] == "eval-v1" and data["config"] == {"k": 1}
    csv_lines = (tmp_path / "report.csv").read_text().splitlines()
    assert csv_lines[0] == "label,support,precision,recall,f1" and len(csv_lines) == 26
    assert (tmp_path / "report.svg").read_text().lstrip().startswith("<?xml")


def test_emit_report_is_byte_deterministic(small_eval, ontology, tmp_path):
    gold, pred = small_eval
    report = evaluate(pred, gold, ontology)
    a = emit_report(report, tmp_path / "a")
    b = emit_report(report, tmp_path / "b")
    for x, y in zip(sorted(a), sorted(b)):
        assert x.read_bytes() == y.read_bytes()


def test_emit_report_unwritable(small_eval, ontology, tmp_path):
    gold, pred = small_eval
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report(evaluate(pred, gold, ontology), blocker / "sub")
