from .loop import (
    OBJECTIVES,
    ConstraintViolation,
    EvalConfig,
    EvaluationRecord,
    SearchConfig,
    SearchSpaceExhausted,
    SearchState,
    archive_rows,
    evaluate,
    fit_archive_surrogates,
    initial_population,
    pareto_front,
    predict_objectives,
    propose,
    run_search,
    scalarized,
    select_candidates,
    write_pareto_csv,
)
from .pareto import dominated_mask, dominates, non_dominated_ranks, pareto_indices
from .space import (
    MAX_SAMPLE_RETRIES,
    InfeasibleBoundsError,
    check_feasible,
    default_bounds,
    in_bounds,
    mutate,
    sample_encoding,
)
from .surrogate import (
    MIN_ARCHIVE,
    ArchiveTooSmallError,
    GradientBoostedTrees,
    RegressionTree,
    fit_surrogates,
    fit_tree,
)

__all__ = [
    "ArchiveTooSmallError",
    "ConstraintViolation",
    "EvalConfig",
    "EvaluationRecord",
    "GradientBoostedTrees",
    "InfeasibleBoundsError",
    "MAX_SAMPLE_RETRIES",
    "MIN_ARCHIVE",
    "OBJECTIVES",
    "RegressionTree",
    "SearchConfig",
    "SearchSpaceExhausted",
    "SearchState",
    "archive_rows",
    "check_feasible",
    "default_bounds",
    "dominated_mask",
    "dominates",
    "evaluate",
    "fit_archive_surrogates",
    "fit_surrogates",
    "fit_tree",
    "in_bounds",
    "initial_population",
    "mutate",
    "non_dominated_ranks",
    "pareto_front",
    "pareto_indices",
    "predict_objectives",
    "propose",
    "run_search",
    "sample_encoding",
    "scalarized",
    "select_candidates",
    "write_pareto_csv",
]
