import dataclasses
import json
import math

import numpy as np
import pytest

from sceneforge import nontemporal
from sceneforge.inference import Selection, evaluate, infer, select_labels, write_predictions, write_report
from sceneforge.numerics import ConfigError

SCORES = {"A": 2.0, "B": -1.0, "C": 0.5}


def test_selection_examples():
    assert select_labels(SCORES, Selection(threshold=0.0)) == ["A", "C"]
    assert select_labels(SCORES, Selection(topk=1)) == ["A"]
    assert select_labels(SCORES, Selection(threshold=math.inf)) == []
    assert select_labels(SCORES, Selection(topk=0)) == []
    assert select_labels(SCORES, Selection(topk=10)) == ["A", "B", "C"]


def test_selection_ties_resolve_by_index():
    assert Selection(topk=1).mask(np.array([1.0, 1.0])).tolist() == [True, False]


def test_selection_needs_one_rule():
    with pytest.raises(ConfigError):
        Selection()
    with pytest.raises(ConfigError):
        Selection(topk=1, threshold=0.0)
    with pytest.raises(ConfigError):
        Selection(topk=-1)


def test_infer_runs_no_nontemporal_operation(model, corpus):
    nontemporal.op_counter.clear()
    preds = infer(model, corpus.records, Selection(threshold=0.0))
    assert sum(nontemporal.op_counter.values()) == 0
    assert len(preds) == len(corpus.records)
    for p in preds:
        assert set(p.selected) <= set(model.hierarchy.level2)
        assert all(math.isfinite(v) for v in p.scores.values())
        assert p.selected == [q for q, v in p.scores.items() if v >= 0.0]
    # the counter is live: a two-stream forward does increment it
    from sceneforge.data import FeatureCache
    from sceneforge.model import make_batch

    model.nontemporal_scores(make_batch(corpus.records[:1], FeatureCache(), model.hierarchy))
    assert nontemporal.op_counter["label_matching_scores"] == 1


def test_infer_infinite_threshold_selects_nothing(model, corpus):
    assert all(p.selected == [] for p in infer(model, corpus.records, Selection(threshold=math.inf)))


def test_infer_unknown_label(model, corpus):
    bad = dataclasses.replace(corpus.records[0], label_paths=[("P0", "not_a_label")])
    with pytest.raises(ConfigError):
        infer(model, [bad], Selection(topk=1))


def test_reports_are_deterministic(model, corpus, tmp_path):
    for name in ("a", "b"):
        write_report(tmp_path / name, evaluate(model, corpus.records))
        write_predictions(tmp_path / f"{name}.jsonl", infer(model, corpus.records, Selection(topk=2)))
    for suffix in ("", ".json", ".jsonl"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
    rep = json.loads((tmp_path / "a.json").read_text())
    assert {"f1", "precision", "recall", "rp90", "rp90_threshold", "level1_f1"} <= set(rep)
    assert all(0.0 <= rep[k] <= 1.0 for k in ("f1", "precision", "recall", "rp90"))
    line = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(line) == {"video_id", "selected", "scores"} and len(line["selected"]) == 2
