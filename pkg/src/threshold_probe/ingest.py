"""CSV ingestion, validation, and feature standardization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import Case, Dataset, build_dataset


class IngestError(ValueError):
    """Fatal ingestion problem (missing column, unreadable stream)."""


@dataclass(frozen=True)
class SchemaConfig:
    feature_columns: tuple[str, ...]
    case_id_column: str = "case_id"
    judge_column: str = "judge_id"
    group_column: str = "race"
    bail_column: str = "bail_assigned"
    released_column: str = "released"
    skipped_column: str = "skipped"
    true_values: frozenset = frozenset({"1", "true", "yes"})
    false_values: frozenset = frozenset({"0", "false", "no"})
    missing_tokens: frozenset = frozenset({""})

    def __post_init__(self):
        cols = self.required_columns()
        if len(cols) != len(set(cols)):
            raise ValueError("schema column names must be distinct")

    def required_columns(self):
        return [self.case_id_column, self.judge_column, self.group_column,
                self.bail_column, self.released_column, self.skipped_column,
                *self.feature_columns]


@dataclass
class IngestReport:
    total_rows: int = 0
    kept_rows: int = 0
    dropped: dict = field(default_factory=dict)  # reason -> count
    warnings: list = field(default_factory=list)

    def drop(self, reason: str):
        self.dropped[reason] = self.dropped.get(reason, 0) + 1

    @property
    def dropped_rows(self) -> int:
        return sum(self.dropped.values())


def _parse_bool(token: str, schema: SchemaConfig):
    t = token.strip().lower()
    if t in schema.missing_tokens:
        return None
    if t in schema.true_values:
        return True
    if t in schema.false_values:
        return False
    raise ValueError(f"unrecognized boolean token {token!r}")


def parse_dataset(source, schema: SchemaConfig):
    """Read case records from a CSV byte or text stream.

    Returns (Dataset, IngestReport). Rows that violate the censoring rule
    (a skip outcome recorded for a defendant who was not released) are
    dropped and counted, as are rows with missing or unparseable fields.
    A missing column is fatal.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        source = io.StringIO(source)
    elif hasattr(source, "read") and isinstance(source.read(0), bytes):
        source = io.TextIOWrapper(source, encoding="utf-8")
    reader = csv.DictReader(source)
    if reader.fieldnames is None:
        raise IngestError("empty input: no header row")
    missing = [c for c in schema.required_columns() if c not in reader.fieldnames]
    if missing:
        raise IngestError(f"missing required column(s): {', '.join(missing)}")

    report = IngestReport()
    cases = []
    for row in reader:
        report.total_rows += 1
        try:
            bail = _parse_bool(row[schema.bail_column], schema)
            released = _parse_bool(row[schema.released_column], schema)
            skipped = _parse_bool(row[schema.skipped_column], schema)
        except ValueError:
            report.drop("bad boolean")
            continue
        if bail is None or released is None:
            report.drop("missing decision field")
            continue
        if skipped is not None and not released:
            report.drop("censoring violation")
            continue
        if released and skipped is None:
            report.drop("missing skip outcome for released case")
            continue
        feats = np.empty(len(schema.feature_columns))
        ok = True
        for k, col in enumerate(schema.feature_columns):
            token = row[col].strip() if row[col] is not None else ""
            if token.lower() in schema.missing_tokens:
                report.drop("missing feature value")
                ok = False
                break
            try:
                feats[k] = float(token)
            except ValueError:
                report.drop("unparseable numeric")
                ok = False
                break
            if not math.isfinite(feats[k]):
                report.drop("non-finite feature value")
                ok = False
                break
        if not ok:
            continue
        judge = row[schema.judge_column].strip()
        group = row[schema.group_column].strip()
        if not judge or not group:
            report.drop("missing judge or group label")
            continue
        cases.append(Case(
            case_id=row[schema.case_id_column].strip(),
            judge=judge, group=group, features=feats,
            bail_assigned=bail, released=released, skipped=skipped,
        ))
        report.kept_rows += 1
    if report.total_rows == 0:
        report.warnings.append("input contains a header but no data rows")
    data = build_dataset(cases, schema.feature_columns)
    return data, report


def serialize_dataset(data: Dataset, schema: SchemaConfig | None = None) -> str:
    """Render a Dataset back to the ingestion CSV schema."""
    schema = schema or SchemaConfig(feature_columns=data.feature_names)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([schema.case_id_column, schema.judge_column,
                     schema.group_column, schema.bail_column,
                     schema.released_column, schema.skipped_column,
                     *schema.feature_columns])
    for c in data.cases:
        skipped = "" if c.skipped is None else str(int(c.skipped))
        writer.writerow([
            c.case_id, c.judge, c.group, str(int(c.bail_assigned)),
            str(int(c.released)), skipped,
            *(f"{x:.17g}" for x in c.features),
        ])
    return buf.getvalue()


def standardize_features(data: Dataset):
    """Center and scale every feature to mean 0, population sd 1.

    Returns (Dataset, warnings). Near-constant features (sd < 1e-12) are
    centered only and reported.
    """
    if len(data.cases) < 2:
        raise IngestError("standardization needs at least 2 cases")
    X = np.array([c.features for c in data.cases])
    means = X.mean(axis=0)
    sds = X.std(axis=0)  # population sd
    warnings_out = []
    scale = sds.copy()
    for k, name in enumerate(data.feature_names):
        if sds[k] < 1e-12:
            scale[k] = 1.0
            warnings_out.append(
                f"feature {name!r} is constant; centered but not scaled")
    Xs = (X - means) / scale
    cases = tuple(
        replace(c, features=Xs[i]) for i, c in enumerate(data.cases)
    )
    record = tuple((float(means[k]), float(scale[k]))
                   for k in range(len(data.feature_names)))
    return Dataset(
        cases=cases, judge_index=data.judge_index, group_index=data.group_index,
        feature_names=data.feature_names, standardization=record,
    ), warnings_out


def apply_standardization(data: Dataset, record) -> Dataset:
    """Apply a stored (mean, scale) transform to raw features."""
    cases = tuple(
        replace(c, features=(c.features - np.array([m for m, _ in record]))
                / np.array([s for _, s in record]))
        for c in data.cases
    )
    return Dataset(cases=cases, judge_index=data.judge_index,
                   group_index=data.group_index,
                   feature_names=data.feature_names,
                   standardization=tuple(record))


@dataclass(frozen=True)
class ValidationIssue:
    level: str  # "error" | "warning"
    message: str


def validate_dataset(data: Dataset, min_cell_count: int = 10):
    """Structural checks; returns a list of issues, never raises."""
    issues = []
    judges = {c.judge for c in data.cases}
    groups = {c.group for c in data.cases}
    if judges - set(data.judge_index):
        issues.append(ValidationIssue(
            "error", f"index coverage: judges missing from judge_index: "
                     f"{sorted(judges - set(data.judge_index))}"))
    if groups - set(data.group_index):
        issues.append(ValidationIssue(
            "error", f"index coverage: groups missing from group_index: "
                     f"{sorted(groups - set(data.group_index))}"))
    d = data.d
    for c in data.cases:
        if c.features.shape != (d,):
            issues.append(ValidationIssue(
                "error", f"case {c.case_id}: feature dimension "
                         f"{c.features.shape[0]} != {d}"))
    counts = {}
    for c in data.cases:
        counts[(c.judge, c.group)] = counts.get((c.judge, c.group), 0) + 1
    for (judge, group), n in sorted(counts.items()):
        if n < min_cell_count:
            issues.append(ValidationIssue(
                "warning", f"sparse cell: judge {judge}, group {group} has "
                           f"only {n} decided cases"))
    return issues
