"""Scikit-learn style facade over the bank/retrieval/inference pipeline.

fit() analyzes the labeled training cases, builds both case banks and
the retrieval index, and freezes per-expert quartiles. predict() runs
the full pipeline on new cases and returns risk scores (higher = worse,
monotone in -log predicted months). score() is Harrell's C-index.

The heavy lifting stays in the functional modules; the estimator only
adapts their inputs and outputs to the fit/predict calling convention.
"""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import stats
from .analyze import analyze_case, bank_entries_for, write_fold_banks
from .backend.base import BackendConfig, TraceWriter
from .backend.http import HttpBackend
from .backend.mock import MockBackend
from .backend.templates import TemplateStore
from .cohort import load_cohort, load_expert_predictions
from .inference import compute_quartiles, run_inference
from .retrieval import build_index
from .types import CaseRecord, InferenceResult, SurvivalLabel, ValidationError
from .wsi import SelectionPolicy


class CaseBankSurvivalPredictor(BaseEstimator):
    """Retrieval-augmented survival predictor with a fit/predict API.

    Parameters mirror the run config; values are validated in fit, not
    here, so get_params/set_params/clone behave as sklearn expects.
    """

    def __init__(
        self,
        backend: str = "mock",
        mock_mode: str = "oracle",
        fixtures: Optional[str] = None,
        experts: Optional[str] = None,
        tau_v: float = 0.93,
        tau_t: float = 0.93,
        policy: str = "literal",
        k: int = 3,
        depth: int = 2,
        weight_wsi: float = 0.5,
        weight_gene: float = 0.5,
        seed: int = 7,
        max_rounds: int = 3,
        max_key_genes: int = 10,
        eps: float = 4.0,
        min_pts: int = 10,
        attention_percentile: float = 90.0,
        embed_dim: int = 64,
        workdir: Optional[str] = None,
    ):
        self.backend = backend
        self.mock_mode = mock_mode
        self.fixtures = fixtures
        self.experts = experts
        self.tau_v = tau_v
        self.tau_t = tau_t
        self.policy = policy
        self.k = k
        self.depth = depth
        self.weight_wsi = weight_wsi
        self.weight_gene = weight_gene
        self.seed = seed
        self.max_rounds = max_rounds
        self.max_key_genes = max_key_genes
        self.eps = eps
        self.min_pts = min_pts
        self.attention_percentile = attention_percentile
        self.embed_dim = embed_dim
        self.workdir = workdir

    # -- plumbing ------------------------------------------------------

    @staticmethod
    def _as_cases(X, y=None) -> list[CaseRecord]:
        if isinstance(X, (str, Path)):
            cases = load_cohort(X)
        else:
            cases = list(X)
        if not cases:
            raise ValidationError("X must contain at least one case")
        for c in cases:
            if not isinstance(c, CaseRecord):
                raise ValidationError(
                    f"X items must be CaseRecord, got {type(c).__name__}"
                )
        ids = [c.case_id for c in cases]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate case ids in X")
        if y is not None:
            labels = list(y)
            if len(labels) != len(cases):
                raise ValidationError(
                    f"len(y)={len(labels)} does not match len(X)={len(cases)}"
                )
            for lab in labels:
                if not isinstance(lab, SurvivalLabel):
                    raise ValidationError("y items must be SurvivalLabel")
            cases = [
                CaseRecord(c.case_id, c.slide_manifest, c.gene_profile, lab)
                for c, lab in zip(cases, labels)
            ]
        return cases

    def _build_backend(self, cohort_root: Optional[Path]):
        bc = BackendConfig(kind=self.backend, embed_dim=self.embed_dim)
        templates = TemplateStore()
        trace = TraceWriter(logical_clock=True)
        if self.backend == "http":
            return HttpBackend(bc, templates, trace)
        return MockBackend(
            bc,
            templates,
            trace,
            mode=self.mock_mode,
            fixtures=self.fixtures,
            cohort_root=None if cohort_root is None else str(cohort_root),
        )

    def _analysis_kwargs(self) -> dict:
        return dict(
            tau_v=self.tau_v,
            tau_t=self.tau_t,
            policy=SelectionPolicy(self.policy),
            eps=self.eps,
            min_pts=self.min_pts,
            attention_percentile=self.attention_percentile,
            max_key_genes=self.max_key_genes,
        )

    def _check_fitted(self) -> None:
        if not hasattr(self, "index_"):
            raise NotFittedError(
                "This CaseBankSurvivalPredictor instance is not fitted yet; "
                "call fit before predict/score."
            )

    # -- estimator API ---------------------------------------------------

    def fit(self, X, y=None):
        """Build banks and the retrieval index from labeled cases.

        X is a sequence of CaseRecord or a cohort JSON path; y optionally
        supplies SurvivalLabel objects overriding the records' labels.
        """
        cases = self._as_cases(X, y)
        unlabeled = [c.case_id for c in cases if c.label is None]
        if unlabeled:
            raise ValidationError(
                f"fit requires labels for every case; missing: {', '.join(unlabeled)}"
            )
        backend = self._build_backend(Path(cases[0].slide_manifest).parent.parent)

        analyses = {
            c.case_id: analyze_case(c, backend, **self._analysis_kwargs()) for c in cases
        }
        entries = {
            c.case_id: bank_entries_for(
                c, analyses[c.case_id], backend, max_rounds=self.max_rounds
            )
            for c in cases
        }
        if self.workdir is not None:
            bank_dir = Path(self.workdir)
        else:
            self._tmpdir_ = tempfile.TemporaryDirectory(prefix="survcase_banks_")
            bank_dir = Path(self._tmpdir_.name)
        bank_wsi, bank_gene = write_fold_banks(
            bank_dir, entries, [c.case_id for c in cases]
        )
        self.bank_wsi_ = bank_wsi
        self.bank_gene_ = bank_gene
        self.index_ = build_index(bank_wsi, bank_gene, (self.weight_wsi, self.weight_gene))
        self.backend_ = backend
        self.case_ids_ = tuple(c.case_id for c in cases)

        if self.experts is not None:
            self.expert_predictions_ = tuple(load_expert_predictions(self.experts))
        else:
            self.expert_predictions_ = ()
        train = set(self.case_ids_)
        by_model: dict[str, list[float]] = {}
        for pred in self.expert_predictions_:
            if pred.case_id in train:
                by_model.setdefault(pred.model_name, []).append(pred.risk_score)
        self.expert_quartiles_ = {
            m: compute_quartiles(v) for m, v in sorted(by_model.items())
        }
        return self

    def predict_results(self, X) -> list[InferenceResult]:
        """Full inference records for each case in X."""
        self._check_fitted()
        cases = self._as_cases(X)
        out = []
        for case in cases:
            analysis = analyze_case(case, self.backend_, **self._analysis_kwargs())
            out.append(
                run_inference(
                    case.case_id,
                    analysis.wsi_summary,
                    analysis.gene_summary,
                    self.index_,
                    self.expert_predictions_,
                    self.expert_quartiles_,
                    self.backend_,
                    k=self.k,
                    depth=self.depth,
                )
            )
        return out

    def predict(self, X) -> np.ndarray:
        """Risk scores, higher = shorter predicted survival."""
        return np.asarray([r.risk_score for r in self.predict_results(X)])

    def predict_months(self, X) -> np.ndarray:
        """Predicted survival times in months."""
        return np.asarray([r.predicted_months for r in self.predict_results(X)])

    def score(self, X, y=None) -> float:
        """Harrell's C-index of predicted risks against observed labels."""
        cases = self._as_cases(X, y)
        missing = [c.case_id for c in cases if c.label is None]
        if missing:
            raise ValidationError(
                f"score requires labels; missing: {', '.join(missing)}"
            )
        risks = self.predict(cases)
        return stats.c_index(list(risks), [c.label for c in cases])
