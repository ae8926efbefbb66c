"""Data model and CSV ingestion for irregular multivariate functional observations."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError

MIN_OBSERVATIONS = 2


@dataclass(frozen=True)
class ColumnConfig:
    """Column-name mapping for the long CSV format."""

    subject: str = "subject"
    variable: str = "variable"
    time: str = "time"
    value: str = "value"


@dataclass(frozen=True)
class FunctionalDataset:
    """Irregular per-subject, per-variable observation series on [0, 1].

    ``times[i][j]`` and ``values[i][j]`` hold the sorted observation grid and
    measurements of subject i on variable j.  Instances are immutable and
    safe to share across threads.
    """

    subject_ids: tuple[str, ...]
    variable_names: tuple[str, ...]
    times: tuple[tuple[np.ndarray, ...], ...]
    values: tuple[tuple[np.ndarray, ...], ...]
    time_range: tuple[float, float]

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def p(self) -> int:
        return len(self.variable_names)

    def counts(self, j: int) -> np.ndarray:
        """Observation counts n_i for variable j across subjects."""
        return np.array([self.times[i][j].size for i in range(self.n)], dtype=int)

    def subset_variable(self, j: int) -> "FunctionalDataset":
        """Single-variable view, used for univariate comparison runs."""
        return FunctionalDataset(
            subject_ids=self.subject_ids,
            variable_names=(self.variable_names[j],),
            times=tuple((self.times[i][j],) for i in range(self.n)),
            values=tuple((self.values[i][j],) for i in range(self.n)),
            time_range=self.time_range,
        )

    def fingerprint(self) -> str:
        """SHA-256 over ids, names, and all observation bytes."""
        h = hashlib.sha256()
        h.update("\x1f".join(self.subject_ids).encode())
        h.update("\x1f".join(self.variable_names).encode())
        for i in range(self.n):
            for j in range(self.p):
                h.update(np.ascontiguousarray(self.times[i][j]).tobytes())
                h.update(np.ascontiguousarray(self.values[i][j]).tobytes())
        return h.hexdigest()


@dataclass
class VariableSummary:
    name: str
    median_count: float
    min_count: int
    max_count: int


@dataclass
class ValidationReport:
    passed: bool
    n: int
    p: int
    summaries: list[VariableSummary] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)


def build_dataset(subject_ids, variable_names, series, time_range=None) -> FunctionalDataset:
    """Assemble and validate a dataset from per-(subject, variable) series.

    ``series[(sid, var)]`` is a list of (time, value) pairs.  Times are
    min-max normalized to [0, 1] with a single dataset-wide affine map; the
    original range is retained.
    """
    all_times = []
    for sid in subject_ids:
        for var in variable_names:
            pairs = series.get((sid, var), [])
            for t, v in pairs:
                if not np.isfinite(t) or not np.isfinite(v):
                    raise ValidationError(
                        f"non-finite observation for subject {sid!r}, variable {var!r}")
                all_times.append(t)
    if not all_times:
        raise ValidationError("dataset contains no observations")

    lo, hi = float(min(all_times)), float(max(all_times))
    if time_range is None:
        time_range = (lo, hi)
    # Times already inside [0, 1] are taken as-is so that normalization is
    # idempotent and simulated datasets round-trip exactly; anything else is
    # mapped by the single dataset-wide affine transform.
    if 0.0 <= lo and hi <= 1.0:
        lo, span = 0.0, 1.0
    else:
        span = hi - lo
        if span <= 0:
            raise ValidationError("all observation times are identical; cannot normalize")

    offenders = []
    times_rows, values_rows = [], []
    for sid in subject_ids:
        t_row, v_row = [], []
        for var in variable_names:
            pairs = series.get((sid, var), [])
            if len(pairs) < MIN_OBSERVATIONS:
                offenders.append(f"subject {sid!r}, variable {var!r} "
                                 f"({len(pairs)} observation(s))")
                t_row.append(np.zeros(0))
                v_row.append(np.zeros(0))
                continue
            arr = np.array(sorted(pairs, key=lambda p: p[0]), dtype=float)
            t = (arr[:, 0] - lo) / span
            if np.any(np.diff(t) <= 0):
                raise ValidationError(
                    f"duplicate timestamps for subject {sid!r}, variable {var!r}")
            t.setflags(write=False)
            v = arr[:, 1].copy()
            v.setflags(write=False)
            t_row.append(t)
            v_row.append(v)
        times_rows.append(tuple(t_row))
        values_rows.append(tuple(v_row))

    if offenders:
        raise ValidationError(
            "series with fewer than "
            f"{MIN_OBSERVATIONS} observations: " + "; ".join(offenders))

    return FunctionalDataset(
        subject_ids=tuple(str(s) for s in subject_ids),
        variable_names=tuple(str(v) for v in variable_names),
        times=tuple(times_rows),
        values=tuple(values_rows),
        time_range=(float(time_range[0]), float(time_range[1])),
    )


def load_long_csv(path, config: ColumnConfig | None = None) -> FunctionalDataset:
    """Load a long-format CSV (subject, variable, time, value) into a dataset."""
    config = config or ColumnConfig()
    series: dict[tuple[str, str], list[tuple[float, float]]] = {}
    subject_order: list[str] = []
    variable_order: list[str] = []
    seen_subjects, seen_variables = set(), set()

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty file, header required")
        missing = [c for c in (config.subject, config.variable, config.time, config.value)
                   if c not in reader.fieldnames]
        if missing:
            raise ConfigurationError(
                f"{path}: missing required column(s) {missing}; header has {reader.fieldnames}")
        for rownum, row in enumerate(reader, start=2):
            sid = row[config.subject]
            var = row[config.variable]
            try:
                t = float(row[config.time])
                v = float(row[config.value])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}: unparsable numeric cell at row {rownum}") from exc
            if sid not in seen_subjects:
                seen_subjects.add(sid)
                subject_order.append(sid)
            if var not in seen_variables:
                seen_variables.add(var)
                variable_order.append(var)
            series.setdefault((sid, var), []).append((t, v))

    if not series:
        raise ValidationError(f"{path}: no data rows")
    return build_dataset(subject_order, variable_order, series)


def validate(dataset: FunctionalDataset) -> ValidationReport:
    """Per-variable count summaries and invariant checks; never raises."""
    problems: list[str] = []
    if dataset.n == 0:
        problems.append("dataset has no subjects")
    if dataset.p == 0:
        problems.append("dataset has no variables")

    summaries = []
    for j, name in enumerate(dataset.variable_names):
        counts = dataset.counts(j)
        if counts.size == 0:
            summaries.append(VariableSummary(name, 0.0, 0, 0))
            continue
        summaries.append(VariableSummary(
            name=name,
            median_count=float(np.median(counts)),
            min_count=int(counts.min()),
            max_count=int(counts.max()),
        ))
        if counts.min() < MIN_OBSERVATIONS:
            problems.append(f"variable {name!r} has a series with fewer than "
                            f"{MIN_OBSERVATIONS} observations")

    for i in range(dataset.n):
        for j in range(dataset.p):
            t = dataset.times[i][j]
            v = dataset.values[i][j]
            if t.size and (t.min() < 0.0 or t.max() > 1.0):
                problems.append(f"times outside [0, 1] for subject "
                                f"{dataset.subject_ids[i]!r}, variable "
                                f"{dataset.variable_names[j]!r}")
            if t.size > 1 and np.any(np.diff(t) <= 0):
                problems.append(f"non-increasing times for subject "
                                f"{dataset.subject_ids[i]!r}")
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
                problems.append(f"non-finite values for subject "
                                f"{dataset.subject_ids[i]!r}")

    return ValidationReport(passed=not problems, n=dataset.n, p=dataset.p,
                            summaries=summaries, problems=problems)


def write_long_csv(dataset: FunctionalDataset, path, config: ColumnConfig | None = None) -> None:
    """Write the dataset in long format with round-trip-safe float formatting."""
    config = config or ColumnConfig()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([config.subject, config.variable, config.time, config.value])
        for i, sid in enumerate(dataset.subject_ids):
            for j, var in enumerate(dataset.variable_names):
                for t, v in zip(dataset.times[i][j], dataset.values[i][j]):
                    writer.writerow([sid, var, f"{t:.17g}", f"{v:.17g}"])
