"""Split-wise top-1 accuracy, NCM probing and report serialisation."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, ShotSplit, split_classes
from .model import Model, fit_ncm, ncm_predict

CSV_HEADER = ("method", "seed", "overall_acc", "many_acc", "mid_acc", "few_acc", "ncm_overall_acc")


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp for reproducible artefacts
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (datetime.fromtimestamp(int(epoch), timezone.utc) if epoch
            else datetime.now(timezone.utc))
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class EvalReport:
    method: str
    seed: int
    overall_acc: float
    many_acc: float | None
    mid_acc: float | None
    few_acc: float | None
    ncm_overall_acc: float | None = None
    config: dict = field(default_factory=dict)
    split_thresholds: dict = field(default_factory=dict)
    timestamp: str = field(default_factory=_timestamp)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> list[str]:
        def cell(v):
            return "" if v is None else repr(float(v))
        return [self.method, str(self.seed), cell(self.overall_acc), cell(self.many_acc),
                cell(self.mid_acc), cell(self.few_acc), cell(self.ncm_overall_acc)]

    def summary(self) -> str:
        def pct(v):
            return "  n/a" if v is None else f"{100 * v:5.1f}"
        ncm = "" if self.ncm_overall_acc is None else f"  ncm {pct(self.ncm_overall_acc)}"
        return (f"{self.method:<16} seed {self.seed:<4} all {pct(self.overall_acc)}  many "
                f"{pct(self.many_acc)}  mid {pct(self.mid_acc)}  few {pct(self.few_acc)}{ncm}")


def split_accuracies(pred: np.ndarray, test: Dataset, tags: list[str]) -> dict[str, float | None]:
    """Overall and per-split accuracy; empty splits map to None."""
    correct = np.asarray(pred) == test.labels
    inst_tags = np.asarray(tags, dtype=object)[test.labels]
    out: dict[str, float | None] = {"overall": float(correct.mean())}
    for t in ("many", "mid", "few"):
        mask = inst_tags == t
        out[t] = float(correct[mask].mean()) if mask.any() else None
    return out


def top1_accuracy(model: Model | Callable[[np.ndarray], np.ndarray], test: Dataset,
                  split: ShotSplit, train_counts: np.ndarray) -> dict[str, float | None]:
    """Per-instance argmax accuracy aggregated overall and per shot split.

    Splits are assigned from *training* counts; ``model`` may be a Model or any
    callable returning predicted labels.
    """
    predict = model.predict if isinstance(model, Model) else model
    tags = [split.tag(int(n)) for n in train_counts]
    return split_accuracies(predict(test.features), test, tags)


def ncm_probe(model: Model, train: Dataset, test: Dataset) -> float:
    """NCM accuracy in the classifier's input space (h(v) when a head exists)."""
    ncm = fit_ncm(model.embed(train.features), train.labels, train.num_classes)
    return float(np.mean(ncm_predict(ncm, model.embed(test.features)) == test.labels))


def evaluate(model, method: str, seed: int, train: Dataset, test: Dataset, split: ShotSplit,
             ncm: bool = True, config: dict | None = None) -> EvalReport:
    acc = top1_accuracy(model, test, split, train.class_counts)
    ncm_acc = ncm_probe(model, train, test) if ncm and isinstance(model, Model) else None
    return EvalReport(method, seed, acc["overall"], acc["many"], acc["mid"], acc["few"], ncm_acc,
                      config=dict(config or {}), split_thresholds=split.as_dict())


# --- serialisation -------------------------------------------------------

def emit_report(r: EvalReport, fmt: str, path) -> None:
    path = Path(path)
    try:
        if fmt == "json":
            path.write_text(json.dumps(r.to_dict(), indent=2, sort_keys=False) + "\n", encoding="utf-8")
        elif fmt == "csv":
            write_csv([r], path)
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e.strerror}") from e


def write_csv(reports, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_json_report(path) -> EvalReport:
    return EvalReport(**json.loads(Path(path).read_text(encoding="utf-8")))


def read_csv_reports(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected CSV header")
    out = []
    for row in rows[1:]:
        rec = dict(zip(CSV_HEADER, row))
        for k in CSV_HEADER[2:]:
            rec[k] = None if rec[k] == "" else float(rec[k])
        rec["seed"] = int(rec["seed"])
        out.append(rec)
    return out
