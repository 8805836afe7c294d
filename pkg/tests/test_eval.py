import json

import numpy as np
import pytest

from cbdistill.data import Dataset, ShotSplit
from cbdistill.eval import (CSV_HEADER, EvalReport, emit_report, evaluate, ncm_probe,
                            read_csv_reports, read_json_report, split_accuracies, top1_accuracy)
from cbdistill.model import CosineClassifier, FeatureExtractor, Model
from cbdistill.tensor import Tensor


def balanced(c, per_class, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(c), per_class)
    return Dataset(rng.standard_normal((labels.size, dim)), labels, c)


def test_perfect_classifier():
    test = balanced(3, 4)
    acc = top1_accuracy(lambda x: test.labels.copy(), test, ShotSplit(10, 2), np.array([20, 5, 1]))
    assert acc == {"overall": 1.0, "many": 1.0, "mid": 1.0, "few": 1.0}


def test_constant_classifier_is_one_over_c():
    for c in (2, 5, 7):
        test = balanced(c, 6)
        acc = top1_accuracy(lambda x: np.zeros(len(x), dtype=int), test, ShotSplit(), np.full(c, 10))
        assert acc["overall"] == pytest.approx(1 / c, abs=1e-12)


def test_hand_built_six_instances():
    # classes 0 (many), 1 (mid), 2 (few); two test instances each
    test = Dataset(np.zeros((6, 1)), [0, 0, 1, 1, 2, 2], 3)
    pred = np.array([0, 0, 1, 0, 2, 1])  # correct: T T T F T F -> 4 of 6
    acc = split_accuracies(pred, test, ["many", "mid", "few"])
    assert acc["overall"] == pytest.approx(0.6667, abs=1e-4)
    assert acc["overall"] == pytest.approx(4 / 6, abs=1e-9)
    assert acc["many"] == 1.0 and acc["mid"] == 0.5 and acc["few"] == 0.5


def test_empty_split_is_none():
    test = balanced(2, 3)
    acc = split_accuracies(test.labels, test, ["many", "many"])
    assert acc["mid"] is None and acc["few"] is None


@pytest.mark.parametrize("seed", range(5))
def test_splits_recompose_overall(seed):
    rng = np.random.default_rng(seed)
    c = 9
    test = balanced(c, rng.integers(1, 8))
    tags = [["many", "mid", "few"][i % 3] for i in range(c)]
    pred = rng.integers(0, c, len(test))
    acc = split_accuracies(pred, test, tags)
    inst_tags = np.asarray(tags)[test.labels]
    weighted = sum(acc[t] * np.mean(inst_tags == t) for t in ("many", "mid", "few"))
    assert abs(weighted - acc["overall"]) <= 1e-12


def axis_model(c):
    """Identity extractor plus unit-axis classifier on c-dimensional inputs."""
    fe = FeatureExtractor([Tensor(np.eye(c))], [Tensor(np.zeros(c))])
    return Model(fe, CosineClassifier(Tensor(np.eye(c))))


def test_ncm_orthogonal_axes_is_perfect():
    c = 4
    rng = np.random.default_rng(0)

    def make(n):
        y = np.repeat(np.arange(c), n)
        x = np.eye(c)[y] * rng.uniform(0.5, 3.0, (y.size, 1))
        return Dataset(x, y, c)

    assert ncm_probe(axis_model(c), make(5), make(3)) == 1.0


def test_ncm_random_extractor_near_chance():
    c, per = 5, 200
    rng = np.random.default_rng(1)
    train = Dataset(rng.standard_normal((c * 40, 8)), np.repeat(np.arange(c), 40), c)
    test = Dataset(rng.standard_normal((c * per, 8)), np.repeat(np.arange(c), per), c)
    m = Model.init([8, 16, 6], c, seed=3)
    acc = ncm_probe(m, train, test)
    p, n = 1 / c, c * per
    assert abs(acc - p) <= 3 * np.sqrt(p * (1 - p) / n)


def sample_report(ncm=0.5):
    return EvalReport("cbd", 3, 0.123456789, 0.9, None, 0.1, ncm, config={"alpha": 0.4},
                      split_thresholds={"many": 120, "few": 40}, timestamp="2020-01-01T00:00:00Z")


def test_json_round_trip(tmp_path):
    r = sample_report()
    emit_report(r, "json", tmp_path / "r.json")
    assert read_json_report(tmp_path / "r.json") == r
    keys = list(json.loads((tmp_path / "r.json").read_text()))
    assert keys == ["method", "seed", "overall_acc", "many_acc", "mid_acc", "few_acc",
                    "ncm_overall_acc", "config", "split_thresholds", "timestamp"]


def test_csv_header_and_round_trip(tmp_path):
    r = sample_report()
    emit_report(r, "csv", tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert text.splitlines()[0] == "method,seed,overall_acc,many_acc,mid_acc,few_acc,ncm_overall_acc"
    assert ",".join(CSV_HEADER) == text.splitlines()[0]
    (row,) = read_csv_reports(tmp_path / "r.csv")
    assert row["overall_acc"] == pytest.approx(r.overall_acc, abs=1e-6)
    assert row["mid_acc"] is None and row["seed"] == 3


def test_missing_ncm_serialisation(tmp_path):
    r = sample_report(ncm=None)
    emit_report(r, "json", tmp_path / "r.json")
    emit_report(r, "csv", tmp_path / "r.csv")
    assert json.loads((tmp_path / "r.json").read_text())["ncm_overall_acc"] is None
    assert (tmp_path / "r.csv").read_text().splitlines()[1].endswith(",")


def test_io_error_names_path(tmp_path):
    bad = tmp_path / "missing" / "r.json"
    with pytest.raises(OSError, match="missing"):
        emit_report(sample_report(), "json", bad)


def test_timestamp_honours_source_date_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert EvalReport("x", 0, 1.0, 1.0, 1.0, 1.0).timestamp == "1970-01-01T00:00:00Z"


def test_evaluate_is_pure(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    train, test = balanced(3, 10, dim=3, seed=1), balanced(3, 5, dim=3, seed=2)
    m = axis_model(3)
    a = evaluate(m, "instance", 0, train, test, ShotSplit(5, 2))
    b = evaluate(m, "instance", 0, train, test, ShotSplit(5, 2))
    assert a == b
    assert 0.0 <= a.overall_acc <= 1.0 and a.ncm_overall_acc is not None
