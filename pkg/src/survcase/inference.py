"""Dichotomy-based survival inference for one test case.

The final stage fuses four evidence sources: the test case's summarized
slide and gene reports, the retrieved bank cases (their reasoning chains
and observed outcomes), and the risk strata implied by external expert
model scores. Two sequential constrained-choice decisions narrow the
survival interval (under vs over 24 months, then one of the four strata),
and a last call pins an exact month figure inside the final interval.

Every step degrades instead of failing: unparseable decisions fall back
to a majority vote of the expert strata (ties resolve to the shorter
branch), and unusable time answers clamp to the interval edge or its
midpoint. Whatever the backend returns, a valid result comes out.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

from .backend.base import Backend, PromptRequest
from .retrieval import DEFAULT_K, RetrievalIndex, retrieve
from .stats import quartiles, risk_score
from .types import (
    ExpertPrediction,
    InferenceResult,
    Interval,
    PipelineError,
    Report,
    ReportSource,
    RetrievedCase,
    RiskStratum,
    ValidationError,
)

logger = logging.getLogger(__name__)

__all__ = [
    "DICHOTOMY_DEPTH",
    "LEVEL1_INTERVALS",
    "InferenceError",
    "MissingExpertPredictions",
    "QuartileBoundaries",
    "InferenceContext",
    "compute_quartiles",
    "map_risk_to_stratum",
    "level1_branch",
    "children_of",
    "format_retrieved_cases",
    "format_retrieved_times",
    "format_expert_strata",
    "dichotomy_step",
    "predict_time",
    "risk_score",
    "run_inference",
]

DICHOTOMY_DEPTH = 2

# Level-1 split at 24 months, so the level-2 children are exactly the
# four strata intervals.
LEVEL1_INTERVALS: dict[int, Interval] = {
    1: Interval(0.0, 24.0),
    2: Interval(24.0, float("inf")),
}

# Children ordered shorter-survival first; ties in fallback votes pick
# the first (conservative) child.
_CHILDREN: dict[int, tuple[RiskStratum, RiskStratum]] = {
    1: (RiskStratum.HIGH, RiskStratum.HIGH_INTERMEDIATE),
    2: (RiskStratum.LOW_INTERMEDIATE, RiskStratum.LOW),
}

# Clamp floor: a predicted time of exactly 0 months has no finite risk
# score, so the lower edge of the shortest interval is nudged inside.
_MIN_POSITIVE_MONTHS = 0.01

_DECISION_RE = re.compile(r"\b([12])\b")
_NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")


class InferenceError(PipelineError):
    pass


class MissingExpertPredictions(InferenceError):
    """The test case has no expert model scores at all."""


@dataclass(frozen=True)
class QuartileBoundaries:
    """Risk-score quartiles of one expert's bank-population scores."""

    q25: float
    q50: float
    q75: float

    def __post_init__(self) -> None:
        if not (self.q25 <= self.q50 <= self.q75):
            raise ValidationError(
                f"quartiles out of order: {self.q25}, {self.q50}, {self.q75}"
            )


def compute_quartiles(scores: Sequence[float]) -> QuartileBoundaries:
    """Nearest-rank quartile boundaries of an expert's score population."""
    q25, q50, q75 = quartiles(scores)
    return QuartileBoundaries(q25=q25, q50=q50, q75=q75)


def map_risk_to_stratum(score: float, q: QuartileBoundaries) -> RiskStratum:
    """Place one score among its population's quartiles.

    Higher risk means shorter expected survival. Boundaries are closed
    from below ("<=") so a constant score population maps to Low.
    """
    if score <= q.q25:
        return RiskStratum.LOW
    if score <= q.q50:
        return RiskStratum.LOW_INTERMEDIATE
    if score <= q.q75:
        return RiskStratum.HIGH_INTERMEDIATE
    return RiskStratum.HIGH


def level1_branch(stratum: RiskStratum) -> int:
    """Which level-1 branch a stratum belongs to (1 short, 2 long)."""
    return 1 if stratum in _CHILDREN[1] else 2


def children_of(y1: int) -> tuple[RiskStratum, RiskStratum]:
    if y1 not in _CHILDREN:
        raise InferenceError(f"level-1 decision must be 1 or 2, got {y1!r}")
    return _CHILDREN[y1]


def _outcome_phrase(case: RetrievedCase) -> str:
    label = case.wsi_entry.label
    if label.event:
        return f"survival of {label.time_months:.1f} months (event observed)"
    return (
        f"survival of at least {label.time_months:.1f} months"
        " (censored at last follow-up)"
    )


def format_retrieved_cases(retrieved: Sequence[RetrievedCase]) -> str:
    """Retrieved-case block for the dichotomy prompts.

    Each case contributes its stratum, observed outcome, and both stored
    reasoning chains; the chains are the in-context exemplars that the
    bank exists to provide.
    """
    if not retrieved:
        return "(no similar cases available)"
    blocks = []
    for case in retrieved:
        stratum = case.wsi_entry.cot.risk_level
        blocks.append(
            f"Case {case.case_id} ({stratum.value} risk): {_outcome_phrase(case)}.\n"
            f"Slide reasoning:\n{case.wsi_entry.cot.text}\n"
            f"Genomic reasoning:\n{case.gene_entry.cot.text}"
        )
    return "\n\n".join(blocks)


def format_retrieved_times(retrieved: Sequence[RetrievedCase]) -> str:
    """Outcome-only block for the time-prediction prompt."""
    if not retrieved:
        return "(no similar cases available)"
    return "\n".join(
        f"Case {case.case_id}: {_outcome_phrase(case)}." for case in retrieved
    )


def format_expert_strata(strata: Mapping[str, RiskStratum]) -> str:
    if not strata:
        return "(no expert predictions available)"
    return "\n".join(f"{name}: {strata[name].value} risk" for name in sorted(strata))


@dataclass(frozen=True)
class InferenceContext:
    """Everything the three inference prompts draw on, fixed up front.

    The expert block and retrieved blocks are derived once from this
    context, so every prompt in the case sees identical evidence text.
    """

    case_id: str
    wsi_summary: Report
    gene_summary: Report
    retrieved: tuple[RetrievedCase, ...]
    expert_strata: Mapping[str, RiskStratum]

    def common_variables(self) -> dict[str, str]:
        return {
            "wsi_summary": self.wsi_summary.text,
            "gene_summary": self.gene_summary.text,
            "retrieved_cases": format_retrieved_cases(self.retrieved),
            "expert_strata": format_expert_strata(self.expert_strata),
        }


def _majority_branch(strata: Iterable[RiskStratum]) -> int:
    votes = [level1_branch(s) for s in strata]
    # Tie (or no experts at all) resolves to the shorter branch.
    return 1 if votes.count(1) >= votes.count(2) else 2


def _majority_child(
    strata: Iterable[RiskStratum], children: tuple[RiskStratum, RiskStratum]
) -> RiskStratum:
    short, long = children
    n_short = sum(1 for s in strata if s is short)
    n_long = sum(1 for s in strata if s is long)
    return long if n_long > n_short else short


def _parse_level1(text: str) -> Optional[int]:
    m = _DECISION_RE.search(text)
    return int(m.group(1)) if m else None


def _parse_level2(text: str, children: tuple[RiskStratum, RiskStratum]) -> Optional[RiskStratum]:
    answer = text.strip()
    by_label = {c.interval.label().casefold(): c for c in children}
    exact = by_label.get(answer.casefold())
    if exact is not None:
        return exact
    hits = [c for c in children if c.interval.label() in answer]
    # Both labels quoted back means the model did not actually choose.
    return hits[0] if len(hits) == 1 else None


def dichotomy_step(
    ctx: InferenceContext,
    backend: Backend,
    level: int,
    previous: Optional[int] = None,
) -> tuple[Union[int, RiskStratum], list[str]]:
    """One constrained-choice decision; never fails.

    Level 1 returns 1 ([0,24) months) or 2 ([24,inf)). Level 2 returns
    the chosen child stratum of ``previous``. A parse failure earns one
    re-prompt; a second failure falls back to the majority vote of the
    expert strata at the requested granularity.
    """
    flags: list[str] = []
    if level == 1:
        req = PromptRequest(
            template_id="infer.dichotomy.level1.v1",
            variables=ctx.common_variables(),
            tag=f"infer.level1:{ctx.case_id}",
        )
        for _ in range(2):
            decision = _parse_level1(backend.chat_complete(req))
            if decision is not None:
                return decision, flags
        decision = _majority_branch(ctx.expert_strata.values())
        logger.warning(
            "case %s: level-1 decision unparseable twice, expert majority -> %d",
            ctx.case_id,
            decision,
        )
        flags.append("dichotomy_fallback:level1")
        return decision, flags

    if level == 2:
        if previous is None:
            raise InferenceError("level 2 requires the level-1 decision")
        children = children_of(previous)
        req = PromptRequest(
            template_id="infer.dichotomy.level2.v1",
            variables={
                **ctx.common_variables(),
                "parent_interval": LEVEL1_INTERVALS[previous].label(),
                "choices": "\n".join(c.interval.label() for c in children),
            },
            tag=f"infer.level2:{ctx.case_id}",
        )
        for _ in range(2):
            stratum = _parse_level2(backend.chat_complete(req), children)
            if stratum is not None:
                return stratum, flags
        stratum = _majority_child(ctx.expert_strata.values(), children)
        logger.warning(
            "case %s: level-2 decision unparseable twice, expert majority -> %s",
            ctx.case_id,
            stratum.value,
        )
        flags.append("dichotomy_fallback:level2")
        return stratum, flags

    raise InferenceError(f"dichotomy level must be 1 or 2, got {level!r}")


def _clamp_into(months: float, interval: Interval) -> float:
    if months < interval.lo:
        return max(interval.lo, _MIN_POSITIVE_MONTHS)
    # Above the interval implies a finite upper bound: the open-ended
    # interval accepts everything from its lower edge up.
    return interval.hi - 0.01


def predict_time(
    ctx: InferenceContext, interval: Interval, backend: Backend
) -> tuple[float, list[str]]:
    """Exact month prediction inside the decided interval; never fails.

    An out-of-interval number earns one re-prompt, then clamps to the
    nearest interior point. No parseable number in two attempts falls
    back to the interval midpoint (48.0 for the open-ended interval).
    Both degradations are flagged.
    """
    req = PromptRequest(
        template_id="infer.predict_time.v1",
        variables={
            "interval": interval.label(),
            "wsi_summary": ctx.wsi_summary.text,
            "gene_summary": ctx.gene_summary.text,
            "retrieved_times": format_retrieved_times(ctx.retrieved),
        },
        tag=f"infer.predict_time:{ctx.case_id}",
    )
    parsed: Optional[float] = None
    for _ in range(2):
        m = _NUMBER_RE.search(backend.chat_complete(req))
        if m is None:
            continue
        parsed = float(m.group(0))
        if interval.contains(parsed):
            return parsed, []
    if parsed is None:
        months = interval.midpoint()
        logger.warning(
            "case %s: no parseable months in two attempts, midpoint %.2f",
            ctx.case_id,
            months,
        )
        return months, ["time_fallback_midpoint"]
    months = _clamp_into(parsed, interval)
    logger.warning(
        "case %s: predicted %.2f outside %s twice, clamped to %.2f",
        ctx.case_id,
        parsed,
        interval.label(),
        months,
    )
    return months, ["time_clamped"]


def _expert_strata_for(
    case_id: str,
    predictions: Sequence[ExpertPrediction],
    boundaries: Mapping[str, QuartileBoundaries],
) -> dict[str, RiskStratum]:
    strata: dict[str, RiskStratum] = {}
    for pred in predictions:
        if pred.case_id != case_id:
            continue
        if pred.model_name in strata:
            raise InferenceError(
                f"duplicate expert prediction for {case_id}/{pred.model_name}"
            )
        q = boundaries.get(pred.model_name)
        if q is None:
            raise InferenceError(
                f"no quartile boundaries for expert {pred.model_name!r}"
            )
        strata[pred.model_name] = map_risk_to_stratum(pred.risk_score, q)
    return strata


def _reasoning_text(
    ctx: InferenceContext,
    y1: int,
    stratum: RiskStratum,
    months: float,
    score: float,
    flags: Sequence[str],
) -> str:
    ids = ", ".join(c.case_id for c in ctx.retrieved) or "(none)"
    experts = (
        "; ".join(f"{n}={ctx.expert_strata[n].value}" for n in sorted(ctx.expert_strata))
        or "(none)"
    )
    return (
        f"Survival inference for case {ctx.case_id}.\n"
        f"Retrieved cases ({len(ctx.retrieved)}): {ids}.\n"
        f"Expert risk strata: {experts}.\n"
        f"Decision 1: branch {y1}, survival interval {LEVEL1_INTERVALS[y1].label()} months.\n"
        f"Decision 2: {stratum.value} risk, survival interval {stratum.interval.label()} months.\n"
        f"Predicted survival: {months:.2f} months (risk score {score:+.4f}).\n"
        f"Flags: {', '.join(flags) if flags else '(none)'}."
    )


def run_inference(
    case_id: str,
    wsi_summary: Report,
    gene_summary: Report,
    index: RetrievalIndex,
    expert_predictions: Sequence[ExpertPrediction],
    expert_quartiles: Mapping[str, QuartileBoundaries],
    backend: Backend,
    *,
    k: int = DEFAULT_K,
    depth: int = DICHOTOMY_DEPTH,
    exclude_self: bool = True,
) -> InferenceResult:
    """Full inference for one test case.

    ``expert_predictions`` may cover the whole cohort; only rows for
    ``case_id`` are used, and at least one must exist. Each expert's
    score is placed among that expert's own quartile boundaries,
    computed over the bank-building population. ``exclude_self`` drops
    the test case from retrieval when it happens to sit in the index.
    """
    if depth != DICHOTOMY_DEPTH:
        raise InferenceError(f"only depth {DICHOTOMY_DEPTH} is supported, got {depth}")
    strata = _expert_strata_for(case_id, expert_predictions, expert_quartiles)
    if not strata:
        raise MissingExpertPredictions(f"no expert predictions for case {case_id}")

    flags: list[str] = []
    retrieved = retrieve(
        wsi_summary,
        gene_summary,
        index,
        backend,
        k=k,
        exclude_case_id=case_id if exclude_self else None,
    )
    if len(retrieved) < k:
        logger.warning(
            "case %s: requested k=%d but only %d bank cases available",
            case_id,
            k,
            len(retrieved),
        )
        flags.append(f"retrieval_truncated:{len(retrieved)}")

    ctx = InferenceContext(
        case_id=case_id,
        wsi_summary=wsi_summary,
        gene_summary=gene_summary,
        retrieved=tuple(retrieved),
        expert_strata=strata,
    )
    y1, f1 = dichotomy_step(ctx, backend, level=1)
    assert isinstance(y1, int)
    stratum, f2 = dichotomy_step(ctx, backend, level=2, previous=y1)
    assert isinstance(stratum, RiskStratum)
    months, f3 = predict_time(ctx, stratum.interval, backend)
    flags.extend(f1 + f2 + f3)
    score = risk_score(months)

    reasoning = Report(
        text=_reasoning_text(ctx, y1, stratum, months, score, flags),
        source=ReportSource.REASONING,
        subject_id=case_id,
    )
    return InferenceResult(
        case_id=case_id,
        decisions=(str(y1), stratum.value),
        final_interval=stratum.interval,
        stratum=stratum,
        predicted_months=months,
        risk_score=score,
        retrieved_case_ids=tuple(c.case_id for c in retrieved),
        wsi_report=wsi_summary,
        gene_report=gene_summary,
        reasoning_report=reasoning,
        flags=tuple(flags),
    )
