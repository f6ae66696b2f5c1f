"""Per-round metrics, summary statistics and CSV/JSON reports."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ReportingError

CSV_COLUMNS = ("round", "test_accuracy", "test_loss", "uplink_units", "downlink_units", "peer_units")


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    test_accuracy: float
    test_loss: float
    uplink_units: int = 0
    downlink_units: int = 0
    peer_units: int = 0


@dataclass
class MetricsLog:
    records: list[MetricsRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def append(self, record: MetricsRecord) -> None:
        if self.records:
            last = self.records[-1]
            if record.round <= last.round:
                raise ReportingError(f"round {record.round} does not follow round {last.round}")
            if (record.uplink_units < last.uplink_units or record.downlink_units < last.downlink_units
                    or record.peer_units < last.peer_units):
                raise ReportingError(f"communication counters decreased at round {record.round}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.records]


@dataclass(frozen=True)
class SummaryStats:
    rnd_to_target: int | None
    max_accuracy: float
    tail_mean: float
    tail_stdev: float
    cc_ratio: float | None = None
    target_accuracy: float | None = None
    window: int | None = None


def rounds_to_target(log: MetricsLog, target_accuracy: float) -> int | None:
    """First round whose test accuracy reaches ``target_accuracy``."""
    for r in log.records:
        if r.test_accuracy >= target_accuracy:
            return r.round
    return None


def cc_ratio(log: MetricsLog, baseline: MetricsLog, target_accuracy: float) -> float | None:
    """Rounds-to-target of ``log`` relative to ``baseline`` (baseline = 1)."""
    mine = rounds_to_target(log, target_accuracy)
    base = rounds_to_target(baseline, target_accuracy)
    if mine is None or base is None:
        return None
    if base == 0:
        return 1.0 if mine == 0 else math.inf
    return mine / base


def tail_stats(log: MetricsLog, window: int) -> tuple[float, float]:
    """Sample mean and sample standard deviation of the last ``window`` accuracies."""
    if window < 1:
        raise ReportingError(f"window must be positive, got {window}")
    if len(log) < window:
        raise ReportingError(f"log has {len(log)} records, window needs {window}")
    tail = log.accuracies[-window:]
    mean = statistics.fmean(tail)
    stdev = statistics.stdev(tail) if window > 1 else 0.0
    return mean, stdev


def summarize(log: MetricsLog, target_accuracy: float, window: int,
              baseline: MetricsLog | None = None) -> SummaryStats:
    if not log.records:
        raise ReportingError("cannot summarize an empty log")
    window = min(window, len(log))
    mean, stdev = tail_stats(log, window)
    return SummaryStats(
        rnd_to_target=rounds_to_target(log, target_accuracy),
        max_accuracy=max(log.accuracies),
        tail_mean=mean,
        tail_stdev=stdev,
        cc_ratio=None if baseline is None else cc_ratio(log, baseline, target_accuracy),
        target_accuracy=target_accuracy,
        window=window,
    )


def _csv_row(r: MetricsRecord) -> list[str]:
    return [str(r.round), f"{r.test_accuracy:.6f}", f"{r.test_loss:.6f}",
            str(r.uplink_units), str(r.downlink_units), str(r.peer_units)]


def emit(log: MetricsLog, path, fmt: str = "csv", summary: SummaryStats | None = None) -> Path:
    """Write ``log`` as CSV or JSON.  JSON keeps full float precision."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            with path.open("w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(CSV_COLUMNS)
                writer.writerows(_csv_row(r) for r in log.records)
        elif fmt == "json":
            doc = {
                "config": log.config,
                "summary": None if summary is None else asdict(summary),
                "records": [asdict(r) for r in log.records],
            }
            path.write_text(json.dumps(doc, indent=2, allow_nan=True))
        else:
            raise ReportingError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise ReportingError(f"cannot write {path}: {exc}") from exc
    return path


def load_json(path) -> tuple[MetricsLog, SummaryStats | None]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ReportingError(f"cannot read {path}: {exc}") from exc
    log = MetricsLog([MetricsRecord(**r) for r in doc["records"]], doc.get("config") or {})
    summary = doc.get("summary")
    return log, None if summary is None else SummaryStats(**summary)


def load_csv(path) -> MetricsLog:
    with Path(path).open(newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ReportingError(f"{path}: unexpected header {reader.fieldnames}")
        return MetricsLog([
            MetricsRecord(int(row["round"]), float(row["test_accuracy"]), float(row["test_loss"]),
                          int(row["uplink_units"]), int(row["downlink_units"]), int(row["peer_units"]))
            for row in reader
        ])
