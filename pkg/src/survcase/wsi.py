"""Hierarchical slide analysis.

The per-case flow: a low-magnification screen of the whole-slide
overview, attention-density region proposal to focus the 10x pass,
per-patch description, similarity-based patch mining in both the visual
and report-text spaces, confidence-driven 20x refinement of unclear
patches, checklist-structured attribute extraction, and a final
prognostic summary.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.cluster import DBSCAN

from .backend.base import Backend, PromptRequest
from .manifest import SlideManifest, global_image, subtiles_for
from .types import (
    Confidence,
    PatchRecord,
    PipelineError,
    Report,
    ReportSource,
    StructuredWsiReport,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.93
DEFAULT_EPS = 4.0
DEFAULT_MIN_PTS = 10
DEFAULT_ATTENTION_PERCENTILE = 90.0


class WsiError(PipelineError):
    pass


class BadThreshold(WsiError):
    pass


class DimensionMismatch(WsiError):
    pass


class ParseFailure(WsiError):
    """The model's answer could not be parsed even after a re-prompt."""


class SelectionPolicy(str, Enum):
    """How near-duplicate patches are dropped.

    LITERAL keeps patch i only when its maximum similarity to every other
    patch stays below the threshold, so both members of a near-duplicate
    pair are dropped. GREEDY scans patches in priority order and keeps
    one representative per duplicate group.
    """

    LITERAL = "literal"
    GREEDY = "greedy"


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric pairwise-cosine matrix with a unit diagonal."""

    n: int
    values: np.ndarray = dataclasses.field(compare=False)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (self.n, self.n):
            raise ValidationError(f"similarity matrix shape {vals.shape} != ({self.n}, {self.n})")
        if self.n and float(np.abs(vals - vals.T).max()) > 1e-9:
            raise ValidationError("similarity matrix asymmetry exceeds 1e-9")
        vals = (vals + vals.T) / 2.0
        np.fill_diagonal(vals, 1.0)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class Region:
    """A proposed region of interest: member patches and a level-2 bbox."""

    region_id: str
    patch_ids: tuple[str, ...]
    bbox_level2: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "patch_ids", tuple(self.patch_ids))


def pairwise_cosine(vectors: Sequence[np.ndarray]) -> SimilarityMatrix:
    """Pairwise cosine similarity of unit vectors.

    All vectors must share one dimension (DimensionMismatch otherwise)
    and be unit-norm within 1e-6.
    """
    if not len(vectors):
        return SimilarityMatrix(0, np.zeros((0, 0)))
    dims = {int(np.asarray(v).shape[-1]) for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed embedding dimensions: {sorted(dims)}")
    mat = np.asarray([np.asarray(v, dtype=np.float64) for v in vectors])
    norms = np.linalg.norm(mat, axis=1)
    if float(np.abs(norms - 1.0).max()) > 1e-6:
        raise ValidationError("pairwise_cosine requires unit-norm vectors")
    sims = np.clip(mat @ mat.T, -1.0, 1.0)
    return SimilarityMatrix(len(vectors), sims)


def threshold_select(
    S: SimilarityMatrix,
    tau: float,
    policy: SelectionPolicy = SelectionPolicy.LITERAL,
    order: Optional[Sequence[int]] = None,
) -> set[int]:
    """Select patch indices whose similarity structure passes the threshold.

    LITERAL: keep i iff max_{j != i} S_ij < tau (a single patch is always
    kept; the empty maximum counts as 0). GREEDY: scan in ``order`` and
    keep i iff its similarity to every already-kept index stays below
    tau.
    """
    if not (0.0 < tau <= 1.0):
        raise BadThreshold(f"tau must be in (0, 1], got {tau}")
    n = S.n
    if n == 0:
        return set()
    if n == 1:
        return {0}
    vals = S.values
    if policy is SelectionPolicy.LITERAL:
        off = vals - 2.0 * np.eye(n)  # push the diagonal below any real similarity
        return {i for i in range(n) if float(off[i].max()) < tau}
    scan = list(order) if order is not None else list(range(n))
    if sorted(scan) != list(range(n)):
        raise WsiError("order must be a permutation of all indices")
    kept: list[int] = []
    for i in scan:
        if all(vals[i, j] < tau for j in kept):
            kept.append(i)
    return set(kept)


def attention_order(patches: Sequence[PatchRecord]) -> list[int]:
    """Greedy scan order: descending attention, ties by index; patches
    without attention sort last in index order."""
    def key(i: int) -> tuple[float, int]:
        att = patches[i].attention
        return (-(att if att is not None else float("-inf")), i)

    return sorted(range(len(patches)), key=key)


def propose_regions(
    patches: Sequence[PatchRecord],
    eps: float = DEFAULT_EPS,
    min_pts: int = DEFAULT_MIN_PTS,
    attention_percentile: float = DEFAULT_ATTENTION_PERCENTILE,
) -> list[Region]:
    """Density-based region proposal over high-attention patches.

    Patches at or above the attention percentile cut enter a DBSCAN-style
    clustering on the tile grid (units = patch indices, Euclidean
    metric); noise points are discarded. Region bounding boxes are
    reported in level-2 pixel coordinates.
    """
    attended = [p for p in patches if p.attention is not None]
    if not attended:
        return []
    scores = np.array([p.attention for p in attended])
    cut = np.percentile(scores, attention_percentile)
    hot = [p for p, s in zip(attended, scores) if s >= cut]
    if len(hot) < min_pts:
        return []
    grid = np.array([[p.x // p.w, p.y // p.h] for p in hot], dtype=np.float64)
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(grid)

    from .manifest import LEVEL_TO_L2_SCALE

    regions = []
    for cluster_id in sorted(set(labels)):
        if cluster_id < 0:
            continue
        members = [p for p, lab in zip(hot, labels) if lab == cluster_id]
        scale = LEVEL_TO_L2_SCALE[members[0].level]
        x0 = min(p.x for p in members) * scale
        y0 = min(p.y for p in members) * scale
        x1 = max(p.x + p.w for p in members) * scale
        y1 = max(p.y + p.h for p in members) * scale
        regions.append(
            Region(
                region_id=f"region_{cluster_id}",
                patch_ids=tuple(p.patch_id for p in members),
                bbox_level2=(x0, y0, x1, y1),
            )
        )
    return regions


def filter_by_regions(
    tiles: Sequence[PatchRecord], regions: Sequence[Region]
) -> tuple[list[PatchRecord], bool]:
    """Keep level-2 tiles whose footprint intersects any proposed region.

    With no regions the filter is a no-op (all tiles pass) and the second
    return value flags that analysis fell back to the full slide.
    """
    if not regions:
        return list(tiles), True
    kept = []
    for t in tiles:
        for r in regions:
            x0, y0, x1, y1 = r.bbox_level2
            if t.x < x1 and t.x + t.w > x0 and t.y < y1 and t.y + t.h > y0:
                kept.append(t)
                break
    if not kept:
        return list(tiles), True
    return kept, False


def lm_screen(
    manifest: SlideManifest, backend: Backend, workdir: Optional[str | Path] = None
) -> tuple[Report, list[str]]:
    """Low-magnification screen: describe the level-3 overview.

    Returns the Global report and any flags raised (a synthesized
    overview is flagged).
    """
    image_path, synthesized = global_image(manifest, workdir)
    req = PromptRequest(
        template_id="wsi.global.v1",
        variables={"slide_id": manifest.slide_id},
        temperature=0.7,
        tag="lm_screen",
    )
    text = backend.describe_image(image_path, req)
    flags = ["synthetic_overview"] if synthesized else []
    return Report(source=ReportSource.GLOBAL, text=text, subject_id=manifest.slide_id), flags


def describe_patch(patch: PatchRecord, backend: Backend) -> Report:
    """Preliminary per-patch description at the patch's magnification."""
    source = ReportSource.MAG10 if patch.level == 2 else ReportSource.MAG20
    req = PromptRequest(
        template_id="wsi.describe_patch.v1",
        variables={
            "patch_id": patch.patch_id,
            "magnification": f"{patch.magnification:g}",
        },
        temperature=0.7,
        tag=f"describe_{source.value}",
    )
    if patch.image_ref is None:
        raise WsiError(f"patch {patch.patch_id} has no image to describe")
    text = backend.describe_image(patch.image_ref, req)
    return Report(source=source, text=text, subject_id=patch.patch_id)


def cos_mine(
    patches: Sequence[PatchRecord],
    reports: Sequence[Report],
    backend: Backend,
    tau_v: float = DEFAULT_TAU,
    tau_t: float = DEFAULT_TAU,
    policy: SelectionPolicy = SelectionPolicy.LITERAL,
) -> tuple[list[PatchRecord], list[Report]]:
    """Similarity-aware patch mining across both modalities.

    Selects the intersection of the visual-embedding selection and the
    report-text-embedding selection, each computed by threshold_select
    with the same policy. Requires one preliminary report per patch and a
    visual embedding on every patch.
    """
    if len(patches) != len(reports):
        raise WsiError("one report per patch required")
    if not patches:
        return [], []
    missing = [p.patch_id for p in patches if p.embedding is None]
    if missing:
        raise ValidationError(f"patches without visual embeddings: {missing}")
    order = attention_order(patches)
    visual = pairwise_cosine([p.embedding for p in patches])
    textual = pairwise_cosine([backend.embed_text(r.text) for r in reports])
    keep_v = threshold_select(visual, tau_v, policy, order)
    keep_t = threshold_select(textual, tau_t, policy, order)
    keep = sorted(keep_v & keep_t)
    return [patches[i] for i in keep], [reports[i] for i in keep]


_CONFIDENCE_RE = re.compile(r"\b(low|medium|high)\b", re.IGNORECASE)


def assess_confidence(report: Report, backend: Backend) -> tuple[Confidence, bool]:
    """Ask how complete a 10x patch report is; parse low/medium/high.

    One re-prompt on an unparseable answer, then fall back to Medium with
    a warning (second return value).
    """
    if report.source is not ReportSource.MAG10:
        raise WsiError("confidence assessment applies to 10x patch reports")
    req = PromptRequest(
        template_id="wsi.confidence.v1",
        variables={"report": report.text},
        temperature=0.0,
        tag="assess_confidence",
    )
    for _ in range(2):
        answer = backend.chat_complete(req)
        match = _CONFIDENCE_RE.search(answer)
        if match:
            return Confidence(match.group(1).lower()), False
    logger.warning("unparseable confidence for %s; defaulting to medium", report.subject_id)
    return Confidence.MEDIUM, True


def conf_mine(
    low_conf_patches: Sequence[PatchRecord],
    manifest: SlideManifest,
    backend: Backend,
    tau_v: float = DEFAULT_TAU,
    tau_t: float = DEFAULT_TAU,
    policy: SelectionPolicy = SelectionPolicy.LITERAL,
) -> tuple[list[PatchRecord], list[Report], list[str]]:
    """Zoom into low-confidence patches at 20x.

    Each parent's level-1 sub-tiles are described and mined with the same
    similarity criteria; the union over parents is returned. Parents
    without sub-tiles are skipped with a flag.
    """
    selected: list[PatchRecord] = []
    reports: list[Report] = []
    flags: list[str] = []
    for parent in low_conf_patches:
        subs = subtiles_for(manifest, parent)
        if not subs:
            logger.warning("no sub-tiles for low-confidence patch %s", parent.patch_id)
            flags.append(f"missing_subtiles:{parent.patch_id}")
            continue
        prelim = [describe_patch(s, backend) for s in subs]
        kept_patches, kept_reports = cos_mine(subs, prelim, backend, tau_v, tau_t, policy)
        selected.extend(kept_patches)
        reports.extend(kept_reports)
    return selected, reports, flags


def load_checklist(path: Optional[str | Path] = None) -> list[str]:
    """Checklist attribute names, from an override file or the bundled one."""
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    else:
        ref = resources.files("survcase").joinpath("resources", "wsi_checklist.json")
        data = json.loads(ref.read_text(encoding="utf-8"))
    names = [str(a["name"]) for a in data["attributes"]]
    if len(names) != len({n.lower() for n in names}):
        raise ValidationError("checklist attribute names must be unique")
    return names


def extract_attributes(
    global_report: Report,
    mag10_reports: Sequence[Report],
    mag20_reports: Sequence[Report],
    checklist: Sequence[str],
    backend: Backend,
) -> tuple[StructuredWsiReport, list[str]]:
    """Fill the checklist from the collected reports.

    The model answers one ``Name: value`` line per attribute; lines are
    matched case-insensitively, unmatched attributes become "not
    assessed", and unknown names are dropped. A response with no
    recognizable line is re-prompted once, then raises ParseFailure.
    Returns the structured report (summary left empty) plus warnings.
    """
    req = PromptRequest(
        template_id="wsi.extract_attributes.v1",
        variables={
            "checklist": "\n".join(checklist),
            "global_report": global_report.text,
            "mag10_reports": "\n\n".join(r.text for r in mag10_reports) or "(none)",
            "mag20_reports": "\n\n".join(r.text for r in mag20_reports) or "(none)",
        },
        temperature=0.0,
        max_tokens=2048,
        tag="extract_attributes",
    )
    canonical = {name.lower(): name for name in checklist}
    warnings: list[str] = []
    parsed: dict[str, str] = {}
    for attempt in range(2):
        parsed.clear()
        answer = backend.chat_complete(req)
        for line in answer.splitlines():
            if ":" not in line:
                continue
            key, _, value = line.partition(":")
            name = canonical.get(key.strip().lower())
            if name is None:
                if key.strip():
                    warnings.append(f"unknown_attribute:{key.strip()}")
                continue
            parsed[name] = value.strip()
        if parsed:
            break
        if attempt == 0:
            logger.warning("attribute extraction returned no parseable lines; re-prompting")
    if not parsed:
        raise ParseFailure("attribute extraction produced no recognizable key:value lines")
    attributes = {}
    for name in checklist:
        if name in parsed and parsed[name]:
            attributes[name] = parsed[name]
        else:
            attributes[name] = "not assessed"
            warnings.append(f"missing_attribute:{name}")
    return StructuredWsiReport(attributes=attributes, summary=""), warnings


def summarize_wsi(structured: StructuredWsiReport, backend: Backend) -> tuple[Report, list[str]]:
    """Condense a structured report into the per-case slide summary."""
    body = "\n".join(f"{k}: {v}" for k, v in structured.attributes.items())
    req = PromptRequest(
        template_id="wsi.summarize.v1",
        variables={"structured_report": body},
        temperature=0.7,
        tag="summarize_wsi",
    )
    text = backend.chat_complete(req)
    flags = []
    informative = [
        v for v in structured.attributes.values()
        if v.lower() not in ("not assessed", "not identified")
    ]
    if not informative:
        flags.append("low_information_summary")
    return Report(source=ReportSource.WSI_SUMMARY, text=text), flags


@dataclass(frozen=True)
class WsiAnalysis:
    """Everything the slide pipeline produced for one case."""

    case_id: str
    global_report: Report
    regions: tuple[Region, ...]
    selected_mag10: tuple[Report, ...]
    mag20_reports: tuple[Report, ...]
    structured: StructuredWsiReport
    summary: Report
    flags: tuple[str, ...]


def analyze_slide(
    case_id: str,
    manifest: SlideManifest,
    backend: Backend,
    *,
    checklist: Sequence[str],
    tau_v: float = DEFAULT_TAU,
    tau_t: float = DEFAULT_TAU,
    policy: SelectionPolicy = SelectionPolicy.LITERAL,
    eps: float = DEFAULT_EPS,
    min_pts: int = DEFAULT_MIN_PTS,
    attention_percentile: float = DEFAULT_ATTENTION_PERCENTILE,
    workdir: Optional[str | Path] = None,
) -> WsiAnalysis:
    """Run the full hierarchical slide pipeline for one case."""
    flags: list[str] = []
    global_report, screen_flags = lm_screen(manifest, backend, workdir)
    flags.extend(screen_flags)

    attended = [p for p in manifest.levels.get(1, ()) if p.attention is not None]
    if not attended:
        attended = [
            p
            for level_tiles in manifest.levels.values()
            for p in level_tiles
            if p.attention is not None
        ]
    regions = propose_regions(attended, eps, min_pts, attention_percentile)

    level2 = [t for t in manifest.tiles(2) if t.image_ref is not None]
    candidates, fallback = filter_by_regions(level2, regions)
    if fallback:
        flags.append("region_fallback_full_slide")

    prelim = [describe_patch(p, backend) for p in candidates]
    selected_patches, selected_reports = cos_mine(
        candidates, prelim, backend, tau_v, tau_t, policy
    )

    confident_reports: list[Report] = []
    low_conf_patches: list[PatchRecord] = []
    for patch, report in zip(selected_patches, selected_reports):
        confidence, warned = assess_confidence(report, backend)
        if warned:
            flags.append(f"confidence_fallback:{patch.patch_id}")
        confident_reports.append(dataclasses.replace(report, confidence=confidence))
        if confidence is Confidence.LOW:
            low_conf_patches.append(patch)

    _, mag20_reports, conf_flags = conf_mine(
        low_conf_patches, manifest, backend, tau_v, tau_t, policy
    )
    flags.extend(conf_flags)

    structured, warn = extract_attributes(
        global_report, confident_reports, mag20_reports, checklist, backend
    )
    flags.extend(warn)
    summary, sum_flags = summarize_wsi(structured, backend)
    flags.extend(sum_flags)
    structured = StructuredWsiReport(attributes=structured.attributes, summary=summary.text)

    return WsiAnalysis(
        case_id=case_id,
        global_report=global_report,
        regions=tuple(regions),
        selected_mag10=tuple(confident_reports),
        mag20_reports=tuple(mag20_reports),
        structured=structured,
        summary=dataclasses.replace(summary, subject_id=case_id),
        flags=tuple(flags),
    )
