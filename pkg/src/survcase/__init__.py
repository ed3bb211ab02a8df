"""Case-bank reasoning pipeline for multimodal survival prediction.

The package turns a cohort of slide manifests and gene profiles into
survival predictions: hierarchical slide report mining, gene-stratified
profiling, chain-of-thought case banks, retrieval of similar historical
cases, dichotomy inference, and censoring-aware evaluation.
"""

__version__ = "0.1.0"

from .analyze import (
    AnalysisError,
    CaseAnalysis,
    EvaluationResult,
    FoldResult,
    LeakageError,
    analyze_case,
    analyze_cohort,
    assert_fold_isolation,
    bank_entries_for,
    evaluate_cohort,
    expert_quartiles_for,
    fold_split,
    run_fold_inference,
    write_fold_banks,
)
from .cohort import (
    CohortError,
    load_cohort,
    load_expert_predictions,
    write_cohort,
    write_expert_predictions,
)
from .config import ConfigError, RunConfig, load_config, make_backend
from .estimator import CaseBankSurvivalPredictor
from .inference import (
    InferenceError,
    MissingExpertPredictions,
    QuartileBoundaries,
    compute_quartiles,
    map_risk_to_stratum,
    run_inference,
)
from .synthetic import generate_cohort
from .types import (
    CaseRecord,
    ExpertPrediction,
    GeneCategory,
    InferenceResult,
    Interval,
    Modality,
    PipelineError,
    Report,
    RiskStratum,
    SurvivalLabel,
    ValidationError,
)

__all__ = [
    "__version__",
    "AnalysisError",
    "CaseAnalysis",
    "CaseBankSurvivalPredictor",
    "CaseRecord",
    "CohortError",
    "ConfigError",
    "EvaluationResult",
    "ExpertPrediction",
    "FoldResult",
    "GeneCategory",
    "InferenceError",
    "InferenceResult",
    "Interval",
    "LeakageError",
    "MissingExpertPredictions",
    "Modality",
    "PipelineError",
    "QuartileBoundaries",
    "Report",
    "RiskStratum",
    "RunConfig",
    "SurvivalLabel",
    "ValidationError",
    "analyze_case",
    "analyze_cohort",
    "assert_fold_isolation",
    "bank_entries_for",
    "compute_quartiles",
    "evaluate_cohort",
    "expert_quartiles_for",
    "fold_split",
    "generate_cohort",
    "load_cohort",
    "load_config",
    "load_expert_predictions",
    "make_backend",
    "map_risk_to_stratum",
    "run_fold_inference",
    "run_inference",
    "write_cohort",
    "write_expert_predictions",
    "write_fold_banks",
]
