"""
Round reports, the CSV/JSON metrics sink and run comparison.

Files written per run (under ExperimentConfig.output_dir):
    metrics.csv    one row per RoundReport, in round order
    summary.json   final metrics + config echo, written once at completion
"""

import csv
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import IncompatibleRunsError
from .logging import get_logger

logger = get_logger("metrics")

SUMMARY_SCHEMA_VERSION = 1
TIMING_COLUMNS = ("wall_time",)


@dataclass
class RoundReport:
    """Metrics of one communication round."""
    phase: int
    round: int
    selected: List[int] = field(default_factory=list)
    client_losses: Dict[int, float] = field(default_factory=dict)
    weights: List[float] = field(default_factory=list)  # aligned with `selected`
    weight_sum: float = 0.0
    frequencies: List[int] = field(default_factory=list)  # F_t used for the weights
    lr: float = 0.0
    eval_loss: Optional[float] = None
    test_accuracy: Optional[float] = None
    contrastive_loss: Optional[float] = None
    upload_bytes: int = 0
    wall_time: float = 0.0

    def csv_row(self) -> Dict[str, str]:
        """Flat text cells; floats use repr so reruns compare byte for byte."""
        def num(x):
            return "" if x is None else repr(float(x))

        return {
            "phase": str(self.phase),
            "round": str(self.round),
            "selected": " ".join(str(i) for i in self.selected),
            "client_losses": " ".join(f"{k}:{float(v)!r}" for k, v in sorted(self.client_losses.items())),
            "weights": " ".join(repr(float(w)) for w in self.weights),
            "weight_sum": num(self.weight_sum),
            "frequencies": " ".join(str(f) for f in self.frequencies),
            "lr": num(self.lr),
            "eval_loss": num(self.eval_loss),
            "test_accuracy": num(self.test_accuracy),
            "contrastive_loss": num(self.contrastive_loss),
            "upload_bytes": str(self.upload_bytes),
            "wall_time": num(self.wall_time),
        }


CSV_COLUMNS = tuple(f.name for f in fields(RoundReport))


class MetricsSink:
    """
    Streams RoundReports to CSV and writes the JSON summary once.

    Usage:
        sink = MetricsSink(output_dir)
        sink.append(report)          # per round, in order
        sink.write_summary({...})    # at completion
    """

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.output_dir / "metrics.csv"
        self.summary_path = self.output_dir / "summary.json"
        self.reports: List[RoundReport] = []
        self._summary_written = False
        with open(self.csv_path, "w", newline="", encoding="utf-8") as fh:
            csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\r\n").writeheader()

    def append(self, report: RoundReport) -> None:
        if self.reports:
            last = self.reports[-1]
            if (report.phase, report.round) <= (last.phase, last.round):
                raise ValueError(
                    f"Report ({report.phase}, {report.round}) arrived after ({last.phase}, {last.round})"
                )
        self.reports.append(report)
        with open(self.csv_path, "a", newline="", encoding="utf-8") as fh:
            csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\r\n").writerow(report.csv_row())

    def write_summary(self, summary: Dict[str, Any]) -> Path:
        if self._summary_written:
            raise RuntimeError("Summary already written for this run")
        payload = {"schema_version": SUMMARY_SCHEMA_VERSION, **summary}
        self.summary_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        self._summary_written = True
        return self.summary_path


def read_metrics(path: Union[str, Path], drop_timing: bool = True) -> List[Dict[str, str]]:
    """CSV rows as dicts, optionally without timing columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if drop_timing:
        for row in rows:
            for col in TIMING_COLUMNS:
                row.pop(col, None)
    return rows


def load_summary(path: Union[str, Path]) -> Dict[str, Any]:
    return json.loads(Path(path).read_text())


# -- comparison -------------------------------------------------------------

ConditionKey = Tuple[str, float, float, float]


@dataclass
class ComparisonRow:
    method: str
    delta: float
    label_fraction: float
    beta: float
    seeds: List[int]
    accuracies: List[float]
    mean_accuracy: float
    accuracy_delta: float  # mean_accuracy minus the reference condition's
    comparable: bool = True
    note: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "delta": self.delta,
            "label_fraction": self.label_fraction,
            "beta": self.beta,
            "seeds": self.seeds,
            "accuracies": self.accuracies,
            "mean_accuracy": self.mean_accuracy,
            "accuracy_delta": self.accuracy_delta,
            "comparable": self.comparable,
            "note": self.note,
        }


def _condition(summary: Dict[str, Any]) -> ConditionKey:
    cfg = summary["config"]
    method = f"{cfg['mode']}/{cfg['federation']['aggregation']}"
    return (method, float(cfg["partition"]["delta"]), float(cfg["label_fraction"]), float(cfg["federation"]["beta"]))


def _protocol(summary: Dict[str, Any]) -> Tuple:
    cfg = summary["config"]
    fed = cfg["federation"]
    return (json.dumps(cfg["arch"], sort_keys=True), fed["num_clients"], fed["rounds_pretrain"], fed["rounds_finetune"])


def compare_runs(summaries: Sequence[Dict[str, Any]]) -> List[ComparisonRow]:
    """
    Align run summaries by (method, delta, label fraction, beta).

    Runs of one condition (different seeds) are averaged. Deltas are taken
    against the first condition seen. Conditions that differ from the
    reference in architecture, client count or round budget are flagged
    as not comparable.
    """
    if len(summaries) < 2:
        raise IncompatibleRunsError("Need at least two summaries to compare")
    datasets = {json.dumps(s["config"]["dataset"], sort_keys=True) for s in summaries}
    if len(datasets) > 1:
        raise IncompatibleRunsError("Summaries were produced on different dataset specs")
    for s in summaries:
        if s.get("final", {}).get("test_accuracy") is None:
            raise IncompatibleRunsError(f"Run {s.get('run_id')} reports no test accuracy")

    groups: Dict[ConditionKey, List[Dict[str, Any]]] = {}
    for s in summaries:
        groups.setdefault(_condition(s), []).append(s)

    reference_key = next(iter(groups))
    reference_protocol = _protocol(groups[reference_key][0])
    means = {
        key: float(np.mean([g["final"]["test_accuracy"] for g in members]))
        for key, members in groups.items()
    }

    rows = []
    for key, members in groups.items():
        method, delta, fraction, beta = key
        protocols = {_protocol(m) for m in members}
        comparable = protocols == {reference_protocol}
        rows.append(ComparisonRow(
            method=method,
            delta=delta,
            label_fraction=fraction,
            beta=beta,
            seeds=[m["config"]["seed"] for m in members],
            accuracies=[m["final"]["test_accuracy"] for m in members],
            mean_accuracy=means[key],
            accuracy_delta=means[key] - means[reference_key],
            comparable=comparable,
            note="" if comparable else "architecture, client count or round budget differs from reference",
        ))
    return rows


def write_comparison(rows: Sequence[ComparisonRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["method", "delta", "label_fraction", "beta", "seeds", "mean_accuracy", "accuracy_delta", "comparable", "note"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\r\n")
        writer.writeheader()
        for row in rows:
            d = row.to_dict()
            d["seeds"] = " ".join(str(s) for s in row.seeds)
            d.pop("accuracies")
            writer.writerow(d)
    return path
