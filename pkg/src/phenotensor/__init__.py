"""Supervised non-negative CP phenotyping of co-occurrence tensors.

The package turns encounter-level diagnosis/medication records into a
patient x diagnosis x medication count tensor, factorizes it into
computational phenotypes (optionally guided by an outcome through an
omega-weighted logistic term), and evaluates the phenotypes' ability to
predict the outcome with stepwise logistic regression under repeated
stratified cross-validation.
"""

__version__ = "0.1.0"

from .cohort import (
    COVARIATE_NAMES,
    CohortTable,
    CovariateVector,
    EncounterRecord,
    PatientDemographics,
    assign_outcomes,
    filter_by_prevalence,
    load_cohort,
    load_tables,
    normalize_medication_names,
    save_cohort,
)
from .cp import (
    CPModel,
    Phenotype,
    PhenotypeLengthReport,
    export_phenotypes,
    frobenius_fit,
    load_model,
    mttkrp,
    normalize_columns,
    reconstruct_entry,
    save_model,
    sort_by_importance,
)
from .errors import (
    DegenerateEvaluationError,
    InputError,
    NumericalError,
    PhenotensorError,
)
from .logit import (
    CvReport,
    GlmFit,
    StepwiseResult,
    auc,
    bootstrap_ci,
    chi2_sf,
    fit_logistic,
    lr_pvalue,
    predict_proba,
    repeated_cv,
    stepwise_select,
)
from .pipeline import (
    EvalReport,
    ExperimentConfig,
    prepare_experiment,
    report_tensor_stats,
    run_experiment,
    tune_omega,
)
from .simulate import SimulatedCohort, SyntheticSpec, simulate_cohort
from .solver import (
    FitTrace,
    SolverConfig,
    Supervision,
    combined_objective,
    factorize,
    init_factors,
    other_mode_gradient,
    patient_mode_gradient,
    refit_beta,
)
from .tensor import (
    EQUAL_CORRESPONDENCE,
    INDICATION_FILTERED,
    IndicationMap,
    SparseTensor3,
    TensorStats,
    count_cooccurrences,
    drop_empty_patients,
    load_tensor,
    save_tensor,
    tensor_from_entries,
    tensor_stats,
    truncate_counts,
)
