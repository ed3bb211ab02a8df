"""Shared domain types for the survival case-reasoning pipeline.

Everything downstream (slide mining, gene profiling, case banks, retrieval,
inference, evaluation) exchanges data through the dataclasses defined here.
All types serialize to plain JSON-compatible dicts via ``to_dict`` and
reconstruct via ``from_dict``; round-tripping preserves every field.

Survival times are always in months. Day-valued inputs are converted with
``days_to_months`` (fixed 30.44 days per month).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Sequence

import numpy as np

DAYS_PER_MONTH = 30.44

# Magnification <-> pyramid level. Level 1 is the highest resolution;
# level-1 pixel coordinates are exactly 2x level-2 coordinates.
MAGNIFICATION_TO_LEVEL = {2.5: 3, 10.0: 2, 20.0: 1}
LEVEL_TO_MAGNIFICATION = {v: k for k, v in MAGNIFICATION_TO_LEVEL.items()}


def days_to_months(days: float) -> float:
    """Convert a day count to months using the fixed 30.44 day month."""
    return days / DAYS_PER_MONTH


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PipelineError):
    """A record or file violates a structural invariant."""


class ReportSource(str, Enum):
    """Where a textual report came from in the pipeline."""

    GLOBAL = "global"
    MAG10 = "mag10"
    MAG20 = "mag20"
    WSI_SUMMARY = "wsi_summary"
    GENE_CATEGORY = "gene_category"
    GENE_SUMMARY = "gene_summary"
    REASONING = "reasoning"


class Confidence(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class Quality(str, Enum):
    LOW = "low"
    HIGH = "high"


class Modality(str, Enum):
    WSI = "wsi"
    GENE = "gene"


class GeneCategory(str, Enum):
    """Functional gene categories used to stratify expression profiles."""

    TUMOR_SUPPRESSOR = "TumorSuppressor"
    ONCOGENE = "Oncogene"
    PROTEIN_KINASE = "ProteinKinase"
    DIFFERENTIATION_MARKER = "DifferentiationMarker"
    TRANSCRIPTION_FACTOR = "TranscriptionFactor"
    CYTOKINE_GROWTH_FACTOR = "CytokineGrowthFactor"


@dataclass(frozen=True)
class Interval:
    """Half-open survival interval [lo, hi) in months. hi may be +inf."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (self.lo < self.hi):
            raise ValidationError(f"empty interval [{self.lo}, {self.hi})")

    def contains(self, months: float) -> bool:
        return self.lo <= months < self.hi

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.hi)

    def midpoint(self, unbounded_surrogate: float = 48.0) -> float:
        """Interval midpoint; the open-ended interval uses a fixed surrogate."""
        if not self.bounded:
            return unbounded_surrogate
        return (self.lo + self.hi) / 2.0

    def label(self) -> str:
        if not self.bounded:
            return f"{_fmt_months(self.lo)}+"
        return f"{_fmt_months(self.lo)}-{_fmt_months(self.hi)}"

    def to_dict(self) -> dict[str, Any]:
        return {"lo": self.lo, "hi": None if not self.bounded else self.hi}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Interval":
        hi = d["hi"]
        return cls(lo=float(d["lo"]), hi=math.inf if hi is None else float(hi))


def _fmt_months(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else str(x)


class RiskStratum(str, Enum):
    """Four prognostic strata with fixed half-open month intervals."""

    HIGH = "high"
    HIGH_INTERMEDIATE = "high-intermediate"
    LOW_INTERMEDIATE = "low-intermediate"
    LOW = "low"

    @property
    def interval(self) -> Interval:
        return STRATUM_INTERVALS[self]


STRATUM_INTERVALS: dict[RiskStratum, Interval] = {
    RiskStratum.HIGH: Interval(0.0, 12.0),
    RiskStratum.HIGH_INTERMEDIATE: Interval(12.0, 24.0),
    RiskStratum.LOW_INTERMEDIATE: Interval(24.0, 36.0),
    RiskStratum.LOW: Interval(36.0, math.inf),
}

# Strata ordered from worst to best prognosis.
STRATA_BY_SEVERITY = (
    RiskStratum.HIGH,
    RiskStratum.HIGH_INTERMEDIATE,
    RiskStratum.LOW_INTERMEDIATE,
    RiskStratum.LOW,
)


def stratum_for_time(months: float) -> RiskStratum:
    """Map an observed survival time to its stratum interval."""
    if not math.isfinite(months) or months < 0:
        raise ValidationError(f"survival time must be finite and >= 0, got {months}")
    for stratum in STRATA_BY_SEVERITY:
        if stratum.interval.contains(months):
            return stratum
    # Unreachable: the four intervals cover [0, inf).
    raise AssertionError(f"no stratum covers {months}")


@dataclass(frozen=True)
class SurvivalLabel:
    """Observed follow-up time in months and whether the event occurred.

    event=False means the case is right-censored at time_months.
    """

    time_months: float
    event: bool

    def __post_init__(self) -> None:
        if not math.isfinite(self.time_months):
            raise ValidationError("NonFiniteTime: label time must be finite")
        if self.time_months < 0:
            raise ValidationError("NegativeTime: label time must be >= 0")

    @property
    def stratum(self) -> RiskStratum:
        return stratum_for_time(self.time_months)

    def to_dict(self) -> dict[str, Any]:
        return {"time_months": self.time_months, "event": self.event}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SurvivalLabel":
        return cls(time_months=float(d["time_months"]), event=bool(d["event"]))


@dataclass(frozen=True)
class PatchRecord:
    """One tile of a slide pyramid level.

    Coordinates and size are pixels at the tile's own level. ``image_ref``
    and ``embedding`` are optional: attention-only rows (used for region
    proposal) carry neither.
    """

    patch_id: str
    level: int
    x: int
    y: int
    w: int
    h: int
    image_ref: Optional[str] = None
    embedding: Optional[np.ndarray] = field(default=None, compare=False)
    attention: Optional[float] = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.level not in LEVEL_TO_MAGNIFICATION:
            raise ValidationError(f"unknown pyramid level {self.level}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"patch {self.patch_id}: non-positive size")
        if self.embedding is not None:
            emb = np.asarray(self.embedding, dtype=np.float64)
            norm = float(np.linalg.norm(emb))
            if abs(norm - 1.0) > 1e-6:
                raise ValidationError(
                    f"EmbeddingNorm: patch {self.patch_id} embedding norm {norm:.8f} != 1"
                )
            object.__setattr__(self, "embedding", emb)

    @property
    def magnification(self) -> float:
        return LEVEL_TO_MAGNIFICATION[self.level]

    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "patch_id": self.patch_id,
            "level": self.level,
            "x": self.x,
            "y": self.y,
            "w": self.w,
            "h": self.h,
        }
        if self.image_ref is not None:
            d["image_ref"] = self.image_ref
        if self.embedding is not None:
            d["embedding"] = [float(v) for v in self.embedding]
        if self.attention is not None:
            d["attention"] = self.attention
        if self.meta:
            d["meta"] = dict(self.meta)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PatchRecord":
        emb = d.get("embedding")
        return cls(
            patch_id=str(d["patch_id"]),
            level=int(d["level"]),
            x=int(d["x"]),
            y=int(d["y"]),
            w=int(d["w"]),
            h=int(d["h"]),
            image_ref=d.get("image_ref"),
            embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
            attention=None if d.get("attention") is None else float(d["attention"]),
            meta=dict(d.get("meta", {})),
        )


@dataclass(frozen=True)
class Report:
    """A textual report tied to its source step and its subject.

    ``subject_id`` names what the report is about: a patch id, a case id,
    or a gene category. Confidence is only meaningful on per-patch reports
    (the 10x/20x magnifications).
    """

    source: ReportSource
    text: str
    subject_id: str = ""
    confidence: Optional[Confidence] = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError(f"empty report from {self.source.value}")
        if self.confidence is not None and self.source not in (
            ReportSource.MAG10,
            ReportSource.MAG20,
        ):
            raise ValidationError(
                f"confidence only applies to patch reports, not {self.source.value}"
            )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "source": self.source.value,
            "text": self.text,
            "subject_id": self.subject_id,
        }
        if self.confidence is not None:
            d["confidence"] = self.confidence.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Report":
        conf = d.get("confidence")
        return cls(
            source=ReportSource(d["source"]),
            text=str(d["text"]),
            subject_id=str(d.get("subject_id", "")),
            confidence=None if conf is None else Confidence(conf),
        )


@dataclass(frozen=True)
class StructuredWsiReport:
    """Checklist-structured slide report plus a free-text summary tail.

    ``attributes`` maps every checklist attribute name to its extracted
    value ("not assessed" when no evidence was found).
    """

    attributes: Mapping[str, str]
    summary: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", dict(self.attributes))

    def render(self) -> str:
        lines = [f"{name}: {value}" for name, value in self.attributes.items()]
        lines.append(f"Summary: {self.summary}")
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {"attributes": dict(self.attributes), "summary": self.summary}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StructuredWsiReport":
        return cls(attributes=dict(d["attributes"]), summary=str(d["summary"]))


@dataclass(frozen=True)
class GeneRecord:
    """One gene measurement: expression value and mutation flag."""

    symbol: str
    expression: float
    mutated: bool

    def __post_init__(self) -> None:
        if not self.symbol or self.symbol != self.symbol.strip():
            raise ValidationError(f"bad gene symbol {self.symbol!r}")
        if not math.isfinite(self.expression):
            raise ValidationError(
                f"NonFiniteExpression: gene {self.symbol} expression not finite"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "symbol": self.symbol,
            "expression": self.expression,
            "mutated": self.mutated,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GeneRecord":
        return cls(
            symbol=str(d["symbol"]),
            expression=float(d["expression"]),
            mutated=bool(d["mutated"]),
        )


@dataclass(frozen=True)
class GeneCategoryStats:
    """Per-category expression statistics: mean, median, mutation ratio."""

    category: GeneCategory
    mean: float
    median: float
    mutation_ratio: float
    n_genes: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "category": self.category.value,
            "mean": self.mean,
            "median": self.median,
            "mutation_ratio": self.mutation_ratio,
            "n_genes": self.n_genes,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GeneCategoryStats":
        return cls(
            category=GeneCategory(d["category"]),
            mean=float(d["mean"]),
            median=float(d["median"]),
            mutation_ratio=float(d["mutation_ratio"]),
            n_genes=int(d["n_genes"]),
        )


@dataclass(frozen=True)
class CotRecord:
    """A reasoning trace for a bank case, with its review outcome.

    ``rounds`` counts refinement revisions applied after the initial
    generation. ``force_accept`` marks a trace kept despite a final low
    review. ``risk_overridden`` marks a stated risk level that had to be
    replaced with the label-derived stratum. ``censored_stratum`` marks a
    risk level derived from a censoring time (a lower bound, not the true
    class).
    """

    case_id: str
    modality: Modality
    text: str
    risk_level: RiskStratum
    key_evidence: tuple[str, ...]
    uncertainty: str
    quality: Quality = Quality.LOW
    rounds: int = 0
    force_accept: bool = False
    risk_overridden: bool = False
    censored_stratum: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "key_evidence", tuple(self.key_evidence))
        if self.rounds < 0:
            raise ValidationError("rounds must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "modality": self.modality.value,
            "text": self.text,
            "risk_level": self.risk_level.value,
            "key_evidence": list(self.key_evidence),
            "uncertainty": self.uncertainty,
            "quality": self.quality.value,
            "rounds": self.rounds,
            "force_accept": self.force_accept,
            "risk_overridden": self.risk_overridden,
            "censored_stratum": self.censored_stratum,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CotRecord":
        return cls(
            case_id=str(d["case_id"]),
            modality=Modality(d["modality"]),
            text=str(d["text"]),
            risk_level=RiskStratum(d["risk_level"]),
            key_evidence=tuple(d["key_evidence"]),
            uncertainty=str(d["uncertainty"]),
            quality=Quality(d["quality"]),
            rounds=int(d["rounds"]),
            force_accept=bool(d["force_accept"]),
            risk_overridden=bool(d["risk_overridden"]),
            censored_stratum=bool(d["censored_stratum"]),
        )


@dataclass(frozen=True)
class BankEntry:
    """One stored case of a single modality: report, reasoning, label.

    The embedding is the summarized report's text embedding, computed at
    insertion time; it is None only transiently before insertion.
    """

    case_id: str
    modality: Modality
    summarized_report: Report
    cot: CotRecord
    label: SurvivalLabel
    embedding: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.cot.case_id != self.case_id:
            raise ValidationError(
                f"cot case_id {self.cot.case_id} != entry case_id {self.case_id}"
            )
        if self.cot.modality != self.modality:
            raise ValidationError("cot modality does not match entry modality")
        if self.embedding is not None:
            object.__setattr__(
                self, "embedding", as_unit_vector(self.embedding, "report embedding")
            )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "case_id": self.case_id,
            "modality": self.modality.value,
            "summarized_report": self.summarized_report.to_dict(),
            "cot": self.cot.to_dict(),
            "label": self.label.to_dict(),
        }
        if self.embedding is not None:
            d["embedding"] = [float(v) for v in self.embedding]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BankEntry":
        emb = d.get("embedding")
        return cls(
            case_id=str(d["case_id"]),
            modality=Modality(d["modality"]),
            summarized_report=Report.from_dict(d["summarized_report"]),
            cot=CotRecord.from_dict(d["cot"]),
            label=SurvivalLabel.from_dict(d["label"]),
            embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
        )


@dataclass(frozen=True)
class ExpertPrediction:
    """A risk score for one case from one external expert model."""

    case_id: str
    model_name: str
    risk_score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.risk_score):
            raise ValidationError(
                f"expert score for {self.case_id}/{self.model_name} not finite"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "model_name": self.model_name,
            "risk_score": self.risk_score,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExpertPrediction":
        return cls(
            case_id=str(d["case_id"]),
            model_name=str(d["model_name"]),
            risk_score=float(d["risk_score"]),
        )


@dataclass(frozen=True)
class RetrievedCase:
    """A bank case returned by retrieval, with its combined score."""

    case_id: str
    score: float
    wsi_entry: BankEntry
    gene_entry: BankEntry

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "score": self.score,
            "wsi_entry": self.wsi_entry.to_dict(),
            "gene_entry": self.gene_entry.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RetrievedCase":
        return cls(
            case_id=str(d["case_id"]),
            score=float(d["score"]),
            wsi_entry=BankEntry.from_dict(d["wsi_entry"]),
            gene_entry=BankEntry.from_dict(d["gene_entry"]),
        )


@dataclass(frozen=True)
class InferenceResult:
    """Final output for one case: interval path, exact time, risk score."""

    case_id: str
    decisions: tuple[str, ...]
    final_interval: Interval
    stratum: RiskStratum
    predicted_months: float
    risk_score: float
    retrieved_case_ids: tuple[str, ...]
    wsi_report: Report
    gene_report: Report
    reasoning_report: Report
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "decisions", tuple(self.decisions))
        object.__setattr__(self, "retrieved_case_ids", tuple(self.retrieved_case_ids))
        object.__setattr__(self, "flags", tuple(self.flags))
        if not self.final_interval.contains(self.predicted_months):
            raise ValidationError(
                f"predicted {self.predicted_months} outside {self.final_interval.label()}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "decisions": list(self.decisions),
            "final_interval": self.final_interval.to_dict(),
            "stratum": self.stratum.value,
            "predicted_months": self.predicted_months,
            "risk_score": self.risk_score,
            "retrieved_case_ids": list(self.retrieved_case_ids),
            "wsi_report": self.wsi_report.to_dict(),
            "gene_report": self.gene_report.to_dict(),
            "reasoning_report": self.reasoning_report.to_dict(),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "InferenceResult":
        return cls(
            case_id=str(d["case_id"]),
            decisions=tuple(d["decisions"]),
            final_interval=Interval.from_dict(d["final_interval"]),
            stratum=RiskStratum(d["stratum"]),
            predicted_months=float(d["predicted_months"]),
            risk_score=float(d["risk_score"]),
            retrieved_case_ids=tuple(d["retrieved_case_ids"]),
            wsi_report=Report.from_dict(d["wsi_report"]),
            gene_report=Report.from_dict(d["gene_report"]),
            reasoning_report=Report.from_dict(d["reasoning_report"]),
            flags=tuple(d["flags"]),
        )


@dataclass(frozen=True)
class CaseRecord:
    """One cohort case: id, input file paths, optional survival label.

    Paths are absolute (resolved against the cohort file location at load
    time).
    """

    case_id: str
    slide_manifest: str
    gene_profile: str
    label: Optional[SurvivalLabel] = None

    def __post_init__(self) -> None:
        if not self.case_id:
            raise ValidationError("case_id must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "slide_manifest": self.slide_manifest,
            "gene_profile": self.gene_profile,
            "label": None if self.label is None else self.label.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CaseRecord":
        lab = d.get("label")
        return cls(
            case_id=str(d["case_id"]),
            slide_manifest=str(d["slide_manifest"]),
            gene_profile=str(d["gene_profile"]),
            label=None if lab is None else SurvivalLabel.from_dict(lab),
        )


@dataclass(frozen=True)
class Violation:
    """One validation finding: a stable code plus a human-readable detail."""

    code: str
    detail: str

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "detail": self.detail}


def validate_case(case: CaseRecord) -> list[Violation]:
    """Check a case's label and input files; return all violations found.

    Codes: NegativeTime, NonFiniteTime, MissingFile, IOViolation,
    LevelMappingViolation, EmbeddingNorm, DuplicateSymbol,
    NonFiniteExpression.
    """
    # Local imports: manifest/genes import from this module.
    from . import genes as genes_mod
    from . import manifest as manifest_mod

    out: list[Violation] = []
    if case.label is not None:
        t = case.label.time_months
        if not math.isfinite(t):
            out.append(Violation("NonFiniteTime", f"{case.case_id}: label time {t}"))
        elif t < 0:
            out.append(Violation("NegativeTime", f"{case.case_id}: label time {t}"))

    import os

    for kind, path in (
        ("slide_manifest", case.slide_manifest),
        ("gene_profile", case.gene_profile),
    ):
        if not os.path.isfile(path):
            out.append(Violation("MissingFile", f"{case.case_id}: {kind} {path}"))

    if os.path.isfile(case.slide_manifest):
        try:
            manifest_mod.load_manifest(case.slide_manifest)
        except PipelineError as exc:
            out.append(_violation_from_error(case.case_id, exc))
        except Exception as exc:  # unreadable / malformed JSON
            out.append(Violation("IOViolation", f"{case.case_id}: {exc}"))

    if os.path.isfile(case.gene_profile):
        try:
            genes_mod.load_gene_profile(case.gene_profile)
        except PipelineError as exc:
            out.append(_violation_from_error(case.case_id, exc))
        except Exception as exc:
            out.append(Violation("IOViolation", f"{case.case_id}: {exc}"))
    return out


_VIOLATION_CODES = (
    "EmbeddingNorm",
    "DuplicateSymbol",
    "NonFiniteExpression",
    "LevelMappingViolation",
    "NegativeTime",
    "NonFiniteTime",
)


def _violation_from_error(case_id: str, exc: PipelineError) -> Violation:
    # The code comes from the exception class when it is named after one
    # (DuplicateSymbol and friends), else from a message prefix, else the
    # finding is a generic read failure.
    text = str(exc)
    code = "IOViolation"
    if type(exc).__name__ in _VIOLATION_CODES:
        code = type(exc).__name__
    else:
        for known in _VIOLATION_CODES:
            if text.startswith(known):
                code = known
                text = text[len(known) :].lstrip(": ")
                break
    return Violation(code, f"{case_id}: {text}")


def as_unit_vector(values: Sequence[float] | np.ndarray, what: str = "embedding") -> np.ndarray:
    """Coerce to a float64 vector and require unit L2 norm (1e-6 tol)."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ValidationError(f"{what} must be one-dimensional")
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > 1e-6:
        raise ValidationError(f"EmbeddingNorm: {what} norm {norm:.8f} != 1")
    return vec
