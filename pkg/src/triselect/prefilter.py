"""Stage I: metadata pre-selection.

Each record is checked by independent predicates (format, capture time,
distance to the task target, altitude, resolution) and kept only when all of
them hold. Records belonging to another task fail an extra ``task-mismatch``
check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .metadata import ImageRecord, TaskSpec, geo_distance

FILTER_NAMES = ("format", "time", "gps", "altitude", "resolution", "task-mismatch")


def filter_format(r: ImageRecord, task: TaskSpec) -> bool:
    return r.format.strip().lower() in task.formats


def filter_spatiotemporal(r: ImageRecord, task: TaskSpec) -> tuple:
    """Return ``(time_ok, gps_ok)``; both intervals are closed."""
    start, end = task.whn
    time_ok = start <= r.time <= end
    d = geo_distance(r.locat, task.whr)
    gps_ok = task.d_min <= d <= task.d_max
    return time_ok, gps_ok


def filter_altitude(r: ImageRecord, task: TaskSpec) -> bool:
    if task.alt_range is None:
        return True
    lo, hi = task.alt_range
    return lo <= r.heig <= hi


def filter_resolution(r: ImageRecord, task: TaskSpec) -> bool:
    return r.resol.p_class >= task.resol_min


def evaluate_filters(r: ImageRecord, task: TaskSpec) -> dict:
    """Outcome of every predicate for one record, keyed by filter name."""
    time_ok, gps_ok = filter_spatiotemporal(r, task)
    return {
        "format": filter_format(r, task),
        "time": time_ok,
        "gps": gps_ok,
        "altitude": filter_altitude(r, task),
        "resolution": filter_resolution(r, task),
        "task-mismatch": r.tid == task.tid,
    }


@dataclass
class FilterReport:
    original_count: int = 0
    kept_count: int = 0
    per_filter_pass_counts: dict = field(default_factory=lambda: dict.fromkeys(FILTER_NAMES, 0))
    rejected: list = field(default_factory=list)

    @property
    def reduction_rate(self) -> float:
        if self.original_count == 0:
            return 0.0
        return 1.0 - self.kept_count / self.original_count

    def to_dict(self) -> dict:
        return {
            "original_count": self.original_count,
            "kept_count": self.kept_count,
            "per_filter_pass_counts": dict(self.per_filter_pass_counts),
            "rejected": [{"pid": pid, "failed": sorted(failed)} for pid, failed in self.rejected],
            "reduction_rate": self.reduction_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterReport":
        return cls(
            original_count=d["original_count"],
            kept_count=d["kept_count"],
            per_filter_pass_counts=dict(d["per_filter_pass_counts"]),
            rejected=[(e["pid"], frozenset(e["failed"])) for e in d["rejected"]],
        )


def preselect(records, task: TaskSpec):
    """Keep the records that pass every filter.

    Returns ``(kept, report)``; `kept` preserves input order.
    """
    report = FilterReport(original_count=len(records))
    kept = []
    for r in records:
        outcome = evaluate_filters(r, task)
        failed = frozenset(name for name, ok in outcome.items() if not ok)
        for name, ok in outcome.items():
            report.per_filter_pass_counts[name] += ok
        if failed:
            report.rejected.append((r.pid, failed))
        else:
            kept.append(r)
    report.kept_count = len(kept)
    return kept, report


class MetadataPreselector(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`preselect`.

    ``fit`` records the filter report for the given records; ``transform``
    returns the surviving records of any record list.

    Parameters
    ----------
    task : TaskSpec
        The sensing task whose constraints are enforced.

    Attributes
    ----------
    report_ : FilterReport
    kept_pids_ : list of int
    """

    def __init__(self, task=None):
        self.task = task

    def _check_task(self):
        if not isinstance(self.task, TaskSpec):
            raise TypeError(f"task must be a TaskSpec, got {type(self.task).__name__}")

    def fit(self, records, y=None):
        self._check_task()
        kept, self.report_ = preselect(list(records), self.task)
        self.kept_pids_ = [r.pid for r in kept]
        return self

    def transform(self, records):
        check_is_fitted(self, "report_")
        kept, _ = preselect(list(records), self.task)
        return kept

    def fit_transform(self, records, y=None):
        self.fit(records)
        pids = set(self.kept_pids_)
        return [r for r in records if r.pid in pids]
