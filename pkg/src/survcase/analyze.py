"""Cohort orchestration: per-case analysis, fold banks, evaluation.

One case flows through both modality pipelines exactly once; everything
derived from its own report and label (summaries, CoT, embedding) is
fold-independent and cached. Only bank membership, the retrieval index,
and per-expert quartiles are fold-scoped, because those aggregate over
other cases and would otherwise leak test information.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from . import stats
from .backend.base import Backend
from .cohort import load_cohort, load_expert_predictions
from .config import ConfigError, RunConfig
from .cotbank import BankEntry, CaseBank, append_entry, build_cot, create_bank, load_bank
from .genes import DEFAULT_MAX_KEY_GENES, GeneAnalysis, analyze_genes, load_gene_profile
from .inference import QuartileBoundaries, compute_quartiles, run_inference
from .manifest import load_manifest
from .retrieval import RetrievalIndex, build_index
from .stats import KmCurve, LogRankResult
from .types import (
    CaseRecord,
    ExpertPrediction,
    InferenceResult,
    Modality,
    PipelineError,
    Report,
)
from .wsi import (
    DEFAULT_ATTENTION_PERCENTILE,
    DEFAULT_EPS,
    DEFAULT_MIN_PTS,
    DEFAULT_TAU,
    SelectionPolicy,
    WsiAnalysis,
    analyze_slide,
    load_checklist,
)

logger = logging.getLogger(__name__)

FOLDS_DIRNAME = "folds"
BANK_WSI_FILENAME = "bank_wsi.jsonl"
BANK_GENE_FILENAME = "bank_gene.jsonl"
INFERENCES_FILENAME = "inferences.jsonl"


class AnalysisError(PipelineError):
    pass


class LeakageError(PipelineError):
    """A fold-scoped artifact touched data from its own test fold."""


@dataclass(frozen=True)
class CaseAnalysis:
    """Both pipeline outputs for one case."""

    case_id: str
    wsi: WsiAnalysis
    gene: GeneAnalysis

    @property
    def wsi_summary(self) -> Report:
        return self.wsi.summary

    @property
    def gene_summary(self) -> Report:
        return self.gene.summary

    @property
    def flags(self) -> tuple[str, ...]:
        return tuple(self.wsi.flags) + tuple(self.gene.flags)


def analyze_case(
    case: CaseRecord,
    backend: Backend,
    *,
    checklist: Optional[Sequence[str]] = None,
    tau_v: float = DEFAULT_TAU,
    tau_t: float = DEFAULT_TAU,
    policy: SelectionPolicy = SelectionPolicy.LITERAL,
    eps: float = DEFAULT_EPS,
    min_pts: int = DEFAULT_MIN_PTS,
    attention_percentile: float = DEFAULT_ATTENTION_PERCENTILE,
    max_key_genes: int = DEFAULT_MAX_KEY_GENES,
) -> CaseAnalysis:
    """Run the slide and gene pipelines for one case."""
    manifest = load_manifest(case.slide_manifest)
    wsi = analyze_slide(
        case.case_id,
        manifest,
        backend,
        checklist=checklist if checklist is not None else load_checklist(),
        tau_v=tau_v,
        tau_t=tau_t,
        policy=policy,
        eps=eps,
        min_pts=min_pts,
        attention_percentile=attention_percentile,
    )
    records = load_gene_profile(case.gene_profile)
    gene = analyze_genes(case.case_id, records, backend, max_k=max_key_genes)
    return CaseAnalysis(case_id=case.case_id, wsi=wsi, gene=gene)


def analyze_cohort(
    cases: Sequence[CaseRecord],
    backend: Backend,
    *,
    jobs: int = 1,
    **kwargs,
) -> dict[str, CaseAnalysis]:
    """Analyze many cases, optionally with a thread pool.

    Returns a dict in input order regardless of completion order, so
    downstream artifacts do not depend on scheduling.
    """
    if jobs < 1:
        raise AnalysisError(f"jobs must be >= 1, got {jobs}")
    if jobs == 1 or len(cases) <= 1:
        results = [analyze_case(c, backend, **kwargs) for c in cases]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda c: analyze_case(c, backend, **kwargs), cases))
    return {a.case_id: a for a in results}


# ----------------------------------------------------------------------
# bank construction
# ----------------------------------------------------------------------


def bank_entries_for(
    case: CaseRecord,
    analysis: CaseAnalysis,
    backend: Backend,
    *,
    max_rounds: int = 3,
) -> tuple[BankEntry, BankEntry]:
    """Build the WSI and Gene bank entries for one labeled case.

    The CoT sees the case's own label (bank cases are training data);
    embeddings are computed here once so fold banks can reuse them.
    """
    if case.label is None:
        raise AnalysisError(f"{case.case_id}: unlabeled case cannot enter a bank")
    entries = []
    for modality, report in (
        (Modality.WSI, analysis.wsi_summary),
        (Modality.GENE, analysis.gene_summary),
    ):
        cot = build_cot(case.case_id, modality, report, case.label, backend, max_rounds)
        entries.append(
            BankEntry(
                case_id=case.case_id,
                modality=modality,
                summarized_report=report,
                cot=cot,
                label=case.label,
                embedding=backend.embed_text(report.text),
            )
        )
    return entries[0], entries[1]


def write_fold_banks(
    fold_dir: str | Path,
    entries: Mapping[str, tuple[BankEntry, BankEntry]],
    train_ids: Sequence[str],
) -> tuple[CaseBank, CaseBank]:
    """Materialize one fold's banks from precomputed entries."""
    fold_dir = Path(fold_dir)
    missing = [cid for cid in train_ids if cid not in entries]
    if missing:
        raise AnalysisError(f"no bank entries for training cases: {', '.join(missing)}")
    bank_wsi = create_bank(fold_dir / BANK_WSI_FILENAME, Modality.WSI)
    bank_gene = create_bank(fold_dir / BANK_GENE_FILENAME, Modality.GENE)
    for cid in train_ids:
        wsi_entry, gene_entry = entries[cid]
        append_entry(bank_wsi, wsi_entry)
        append_entry(bank_gene, gene_entry)
    return bank_wsi, bank_gene


def load_fold_banks(fold_dir: str | Path) -> tuple[CaseBank, CaseBank]:
    fold_dir = Path(fold_dir)
    return (
        load_bank(fold_dir / BANK_WSI_FILENAME),
        load_bank(fold_dir / BANK_GENE_FILENAME),
    )


# ----------------------------------------------------------------------
# fold scoping and leakage guards
# ----------------------------------------------------------------------


def fold_split(
    case_ids: Sequence[str], folds: int, seed: int, fold: int
) -> tuple[list[str], list[str]]:
    """(train_ids, test_ids) for one fold of the deterministic split."""
    assignment = stats.kfold(case_ids, folds, seed)
    if not 0 <= fold < folds:
        raise AnalysisError(f"fold must be in [0, {folds}), got {fold}")
    test_ids = assignment[fold]
    train_ids = [cid for j in range(folds) if j != fold for cid in assignment[j]]
    return train_ids, test_ids


def assert_fold_isolation(
    index_case_ids: Sequence[str], test_ids: Sequence[str]
) -> None:
    """Raise LeakageError if any test case is visible to retrieval."""
    overlap = sorted(set(index_case_ids) & set(test_ids))
    if overlap:
        raise LeakageError(
            f"test cases present in the retrieval index: {', '.join(overlap)}"
        )


def expert_quartiles_for(
    predictions: Sequence[ExpertPrediction],
    train_ids: Sequence[str],
) -> dict[str, QuartileBoundaries]:
    """Per-model quartiles over training-fold scores only.

    Using the full cohort here would let test scores shape their own
    strata; the guard below keeps the computation honest.
    """
    train = set(train_ids)
    by_model: dict[str, list[float]] = {}
    for pred in predictions:
        if pred.case_id in train:
            by_model.setdefault(pred.model_name, []).append(pred.risk_score)
    return {model: compute_quartiles(scores) for model, scores in sorted(by_model.items())}


# ----------------------------------------------------------------------
# evaluation harness
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class FoldResult:
    fold: int
    test_case_ids: tuple[str, ...]
    c_index: float
    results: tuple[InferenceResult, ...]


@dataclass(frozen=True)
class EvaluationResult:
    fold_results: tuple[FoldResult, ...]
    pooled_c_index: float
    logrank: LogRankResult
    km_high: KmCurve
    km_low: KmCurve
    output_dir: Path

    @property
    def fold_cindices(self) -> tuple[float, ...]:
        return tuple(f.c_index for f in self.fold_results)


def run_fold_inference(
    test_cases: Sequence[CaseRecord],
    analyses: Mapping[str, CaseAnalysis],
    index: RetrievalIndex,
    predictions: Sequence[ExpertPrediction],
    quartiles: Mapping[str, QuartileBoundaries],
    backend: Backend,
    *,
    k: int = 3,
    depth: int = 2,
) -> list[InferenceResult]:
    """Infer every test case against one fold's index, guarded."""
    assert_fold_isolation(index.case_ids, [c.case_id for c in test_cases])
    out = []
    for case in test_cases:
        analysis = analyses[case.case_id]
        out.append(
            run_inference(
                case.case_id,
                analysis.wsi_summary,
                analysis.gene_summary,
                index,
                predictions,
                quartiles,
                backend,
                k=k,
                depth=depth,
            )
        )
    return out


def evaluate_cohort(cfg: RunConfig, backend: Backend) -> EvaluationResult:
    """Five-fold evaluation: banks, inference, C-index, KM, log-rank.

    Writes, under cfg.output_dir: per-fold banks and inference records,
    predictions.csv, cindex.csv, km.csv, and summary.json. Two runs with
    the same config and a deterministic backend produce byte-identical
    files.
    """
    cases = load_cohort(cfg.cohort)
    labeled = [c for c in cases if c.label is not None]
    if len(labeled) < len(cases):
        logger.warning("ignoring %d unlabeled cases", len(cases) - len(labeled))
    if cfg.experts is None:
        raise ConfigError("evaluation requires an experts file (set 'experts')")
    predictions = load_expert_predictions(cfg.experts)

    analyses = analyze_cohort(
        labeled,
        backend,
        jobs=cfg.jobs,
        tau_v=cfg.tau_v,
        tau_t=cfg.tau_t,
        policy=cfg.policy,
        eps=cfg.eps,
        min_pts=cfg.min_pts,
        attention_percentile=cfg.attention_percentile,
        max_key_genes=cfg.max_key_genes,
    )
    entries = {
        case.case_id: bank_entries_for(
            case, analyses[case.case_id], backend, max_rounds=cfg.max_rounds
        )
        for case in labeled
    }
    labels = {c.case_id: c.label for c in labeled}
    by_id = {c.case_id: c for c in labeled}

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    assignment = stats.kfold([c.case_id for c in labeled], cfg.folds, cfg.seed)

    fold_results: list[FoldResult] = []
    pooled: list[InferenceResult] = []
    pooled_folds: list[int] = []
    for fold in range(cfg.folds):
        test_ids = assignment[fold]
        train_ids = [cid for j in range(cfg.folds) if j != fold for cid in assignment[j]]
        fold_dir = out_dir / FOLDS_DIRNAME / f"fold{fold}"
        bank_wsi, bank_gene = write_fold_banks(fold_dir, entries, train_ids)
        index = build_index(bank_wsi, bank_gene, cfg.weights)
        quartiles = expert_quartiles_for(predictions, train_ids)
        results = run_fold_inference(
            [by_id[cid] for cid in test_ids],
            analyses,
            index,
            predictions,
            quartiles,
            backend,
            k=cfg.k,
            depth=cfg.d,
        )
        write_inferences(fold_dir / INFERENCES_FILENAME, results)
        c = stats.c_index(
            [r.risk_score for r in results], [labels[r.case_id] for r in results]
        )
        fold_results.append(
            FoldResult(
                fold=fold,
                test_case_ids=tuple(test_ids),
                c_index=c,
                results=tuple(results),
            )
        )
        pooled.extend(results)
        pooled_folds.extend([fold] * len(results))

    pooled_c = stats.c_index(
        [r.risk_score for r in pooled], [labels[r.case_id] for r in pooled]
    )
    high_idx, low_idx = stats.median_split([r.risk_score for r in pooled])
    labels_high = [labels[pooled[i].case_id] for i in high_idx]
    labels_low = [labels[pooled[i].case_id] for i in low_idx]
    km_high = stats.km_curve(labels_high)
    km_low = stats.km_curve(labels_low)
    logrank = stats.logrank_test(labels_high, labels_low)

    _write_predictions_csv(out_dir / "predictions.csv", pooled, pooled_folds, labels)
    _write_cindex_csv(out_dir / "cindex.csv", fold_results)
    _write_km_csv(out_dir / "km.csv", (("high", km_high), ("low", km_low)))
    _write_summary(
        out_dir / "summary.json",
        cfg,
        len(cases),
        fold_results,
        pooled_c,
        logrank,
        len(labels_high),
        len(labels_low),
    )
    return EvaluationResult(
        fold_results=tuple(fold_results),
        pooled_c_index=pooled_c,
        logrank=logrank,
        km_high=km_high,
        km_low=km_low,
        output_dir=out_dir,
    )


# ----------------------------------------------------------------------
# artifact writers (fixed formatting keeps reruns byte-identical)
# ----------------------------------------------------------------------


def write_inferences(path: Path, results: Sequence[InferenceResult]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def _write_predictions_csv(
    path: Path,
    results: Sequence[InferenceResult],
    folds: Sequence[int],
    labels: Mapping[str, object],
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "fold",
                "case_id",
                "time_months",
                "event",
                "predicted_months",
                "risk_score",
                "stratum",
                "decisions",
                "retrieved",
                "flags",
            ]
        )
        for fold, r in zip(folds, results):
            label = labels[r.case_id]
            writer.writerow(
                [
                    fold,
                    r.case_id,
                    f"{label.time_months:.2f}",
                    int(label.event),
                    f"{r.predicted_months:.4f}",
                    f"{r.risk_score:+.6f}",
                    r.stratum.value,
                    "|".join(r.decisions),
                    "|".join(r.retrieved_case_ids),
                    "|".join(r.flags),
                ]
            )


def _write_cindex_csv(path: Path, fold_results: Sequence[FoldResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "n_test", "c_index"])
        for fr in fold_results:
            writer.writerow([fr.fold, len(fr.test_case_ids), f"{fr.c_index:.6f}"])
        total = sum(len(fr.test_case_ids) for fr in fold_results)
        writer.writerow(
            ["mean", total, stats.format_cindex_cell([fr.c_index for fr in fold_results])]
        )


def _write_km_csv(path: Path, curves: Sequence[tuple[str, KmCurve]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time", "survival", "at_risk", "group"])
        for group, curve in curves:
            for point in curve.points:
                writer.writerow(
                    [f"{point.time:.4f}", f"{point.survival:.6f}", point.at_risk, group]
                )


def _write_summary(
    path: Path,
    cfg: RunConfig,
    n_cases: int,
    fold_results: Sequence[FoldResult],
    pooled_c: float,
    logrank: LogRankResult,
    n_high: int,
    n_low: int,
) -> None:
    payload = {
        "n_cases": n_cases,
        "n_evaluated": sum(len(fr.test_case_ids) for fr in fold_results),
        "folds": [
            {
                "fold": fr.fold,
                "n_test": len(fr.test_case_ids),
                "test_case_ids": list(fr.test_case_ids),
                "c_index": round(fr.c_index, 6),
            }
            for fr in fold_results
        ],
        "c_index_cell": stats.format_cindex_cell([fr.c_index for fr in fold_results]),
        "pooled_c_index": round(pooled_c, 6),
        "logrank_chi2": round(logrank.chi2, 6),
        "logrank_p": f"{logrank.p_value:.3g}",
        "km_groups": {"high": n_high, "low": n_low},
        "seed": cfg.seed,
        "k": cfg.k,
        "depth": cfg.d,
        "config_sha256": cfg.config_sha256,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
