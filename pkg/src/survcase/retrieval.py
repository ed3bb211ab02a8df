"""Similar-case retrieval over the two banks.

A test case's summarized slide and gene reports are embedded and scored
against every banked case present in both modalities; the score is a
weighted sum of the per-modality cosines. Linear scan: banks stay small
enough that nothing fancier pays for itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backend.base import Backend
from .cotbank import CaseBank
from .types import BankEntry, PipelineError, Report, RetrievedCase

logger = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_WEIGHTS = (0.5, 0.5)


class RetrievalError(PipelineError):
    pass


class NoOverlap(RetrievalError):
    """No case appears in both banks."""


class EmptyIndex(RetrievalError):
    pass


class WeightsNotNormalized(RetrievalError):
    pass


@dataclass(frozen=True)
class RetrievalIndex:
    """Row-aligned embedding matrices over the cases both banks share."""

    case_ids: tuple[str, ...]
    wsi_matrix: np.ndarray = field(compare=False)
    gene_matrix: np.ndarray = field(compare=False)
    weights: tuple[float, float]
    wsi_entries: dict[str, BankEntry] = field(compare=False)
    gene_entries: dict[str, BankEntry] = field(compare=False)
    skipped: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.case_ids)


def build_index(
    bank_wsi: CaseBank,
    bank_gene: CaseBank,
    weights: tuple[float, float] = DEFAULT_WEIGHTS,
) -> RetrievalIndex:
    """Intersect the banks and stack their embeddings in sorted-id order.

    Cases present in only one bank are skipped with a warning; weights
    must be non-negative and sum to 1.
    """
    w_wsi, w_gene = float(weights[0]), float(weights[1])
    if w_wsi < 0 or w_gene < 0 or abs(w_wsi + w_gene - 1.0) > 1e-9:
        raise WeightsNotNormalized(f"weights {weights} must be >= 0 and sum to 1")
    wsi_by_id = {e.case_id: e for e in bank_wsi.entries}
    gene_by_id = {e.case_id: e for e in bank_gene.entries}
    shared = sorted(set(wsi_by_id) & set(gene_by_id))
    skipped = tuple(sorted(set(wsi_by_id) ^ set(gene_by_id)))
    for case_id in skipped:
        logger.warning("case %s present in only one bank; not indexed", case_id)
    if not shared:
        raise NoOverlap("banks share no case_id")
    return RetrievalIndex(
        case_ids=tuple(shared),
        wsi_matrix=np.stack([wsi_by_id[c].embedding for c in shared]),
        gene_matrix=np.stack([gene_by_id[c].embedding for c in shared]),
        weights=(w_wsi, w_gene),
        wsi_entries={c: wsi_by_id[c] for c in shared},
        gene_entries={c: gene_by_id[c] for c in shared},
        skipped=skipped,
    )


def retrieve(
    test_wsi_report: Report,
    test_gene_report: Report,
    index: RetrievalIndex,
    backend: Backend,
    k: int = DEFAULT_K,
    exclude_case_id: Optional[str] = None,
) -> list[RetrievedCase]:
    """Top-k banked cases by combined report similarity.

    score = w_wsi * cos(slide reports) + w_gene * cos(gene reports);
    descending, ties broken by case_id. Returns min(k, candidates).
    ``exclude_case_id`` drops the test case itself in leave-one-out runs.
    """
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise EmptyIndex("retrieval index has no cases")
    e_wsi = backend.embed_text(test_wsi_report.text)
    e_gene = backend.embed_text(test_gene_report.text)
    # Row-wise dots keep scores bit-reproducible by an independent
    # recompute (a blocked matmul may round ties differently).
    candidates = [
        (
            index.weights[0] * float(np.dot(index.wsi_matrix[i], e_wsi))
            + index.weights[1] * float(np.dot(index.gene_matrix[i], e_gene)),
            case_id,
        )
        for i, case_id in enumerate(index.case_ids)
        if case_id != exclude_case_id
    ]
    if not candidates:
        raise EmptyIndex(f"no candidates remain after excluding {exclude_case_id!r}")
    candidates.sort(key=lambda pair: (-pair[0], pair[1]))
    return [
        RetrievedCase(
            case_id=case_id,
            score=score,
            wsi_entry=index.wsi_entries[case_id],
            gene_entry=index.gene_entries[case_id],
        )
        for score, case_id in candidates[:k]
    ]
