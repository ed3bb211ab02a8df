"""Cohort index and expert-score files.

A cohort file is JSON: ``{"cohort_id": ..., "cases": [...]}`` where each
case carries ``case_id``, ``slide_manifest``, ``gene_profile`` and an
optional ``label``. Labels give ``event`` plus exactly one of
``time_months`` or ``time_days``; day counts convert at the fixed 30.44
days per month. Relative paths resolve against the cohort file's
directory, so a cohort directory can be moved wholesale.

Expert model scores arrive as CSV with a ``case_id,model_name,risk_score``
header; higher scores mean worse prognosis.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Mapping, Sequence

from .types import (
    CaseRecord,
    ExpertPrediction,
    PipelineError,
    SurvivalLabel,
    days_to_months,
)

EXPERT_FIELDS = ("case_id", "model_name", "risk_score")


class CohortError(PipelineError):
    pass


class DuplicateCase(CohortError):
    pass


class DuplicateExpert(CohortError):
    pass


def _parse_label(case_id: str, raw: Any) -> SurvivalLabel | None:
    if raw is None:
        return None
    if not isinstance(raw, Mapping):
        raise CohortError(f"{case_id}: label must be an object or null")
    if "event" not in raw or not isinstance(raw["event"], bool):
        raise CohortError(f"{case_id}: label needs a boolean 'event'")
    has_months = "time_months" in raw
    has_days = "time_days" in raw
    if has_months == has_days:
        raise CohortError(
            f"{case_id}: label needs exactly one of time_months or time_days"
        )
    try:
        months = (
            float(raw["time_months"])
            if has_months
            else days_to_months(float(raw["time_days"]))
        )
    except (TypeError, ValueError) as exc:
        raise CohortError(f"{case_id}: unreadable label time: {exc}") from exc
    return SurvivalLabel(time_months=months, event=raw["event"])


def load_cohort(path: str | Path) -> list[CaseRecord]:
    """Load a cohort file; paths come back absolute, case ids unique."""
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CohortError(f"{p}: unreadable cohort file: {exc}") from exc
    if not isinstance(data, Mapping) or "cases" not in data:
        raise CohortError(f"{p}: cohort file must be an object with 'cases'")

    root = p.parent
    cases: list[CaseRecord] = []
    seen: set[str] = set()
    for raw in data["cases"]:
        case_id = str(raw.get("case_id", ""))
        if not case_id:
            raise CohortError(f"{p}: case without case_id")
        if case_id in seen:
            raise DuplicateCase(f"{p}: duplicate case_id {case_id!r}")
        seen.add(case_id)
        for key in ("slide_manifest", "gene_profile"):
            if key not in raw:
                raise CohortError(f"{case_id}: missing {key}")
        cases.append(
            CaseRecord(
                case_id=case_id,
                slide_manifest=str((root / raw["slide_manifest"]).resolve()),
                gene_profile=str((root / raw["gene_profile"]).resolve()),
                label=_parse_label(case_id, raw.get("label")),
            )
        )
    if not cases:
        raise CohortError(f"{p}: cohort has no cases")
    return cases


def write_cohort(path: str | Path, cases: Sequence[CaseRecord], cohort_id: str = "cohort") -> None:
    """Write a cohort file; paths are stored exactly as given."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = {"cohort_id": cohort_id, "cases": [c.to_dict() for c in cases]}
    p.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_expert_predictions(path: str | Path) -> list[ExpertPrediction]:
    """Load expert scores; (case_id, model_name) pairs must be unique."""
    p = Path(path)
    preds: list[ExpertPrediction] = []
    seen: set[tuple[str, str]] = set()
    try:
        with p.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = tuple(reader.fieldnames or ())
            if not set(EXPERT_FIELDS) <= set(header):
                raise CohortError(
                    f"{p}: expert CSV must have columns {','.join(EXPERT_FIELDS)}"
                )
            for row in reader:
                key = (row["case_id"], row["model_name"])
                if key in seen:
                    raise DuplicateExpert(f"{p}: duplicate row for {key}")
                seen.add(key)
                try:
                    score = float(row["risk_score"])
                except (TypeError, ValueError) as exc:
                    raise CohortError(
                        f"{p}: unreadable risk_score for {key}: {row['risk_score']!r}"
                    ) from exc
                preds.append(
                    ExpertPrediction(
                        case_id=row["case_id"], model_name=row["model_name"], risk_score=score
                    )
                )
    except OSError as exc:
        raise CohortError(f"{p}: unreadable expert file: {exc}") from exc
    if not preds:
        raise CohortError(f"{p}: expert file has no rows")
    return preds


def write_expert_predictions(path: str | Path, preds: Sequence[ExpertPrediction]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXPERT_FIELDS)
        for pred in preds:
            writer.writerow([pred.case_id, pred.model_name, f"{pred.risk_score:.6f}"])
