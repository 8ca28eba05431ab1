"""Clone-censor-weight evaluation of dynamic dosing regimens.

Subjects on longitudinal follow-up are replicated once per candidate
dosing regimen, artificially censored at first nonadherence, reweighted
by stabilized inverse probabilities of remaining adherent, and compared
with a weighted paired log-rank test and pooled-logistic marginal
structural hazard models.  A built-in simulator with calibrated rates
checks the whole chain against known hazard ratios.
"""

__version__ = "0.1.0"

from .data import (
    BaselineCovariates,
    Cohort,
    CohortSchema,
    SubjectHistory,
    Visit,
    dose_change_profile,
    emit_cohort,
    emit_outcomes,
    event_indicator,
    ingest_cohort,
    summarize_cohort,
)
from .glm import FittedGlm, cluster_sandwich_covariance, fit_logistic, spline_basis
from .regimen import (
    CloneTable,
    RegimenGrid,
    RegimenSpec,
    adherence_trace,
    allowable_dose_interval,
    clone_cohort,
    is_adherent,
    usrds_family,
)

__all__ = [name for name in dir() if not name.startswith("_")]
