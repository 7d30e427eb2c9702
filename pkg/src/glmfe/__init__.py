"""Binary-choice panel models with high-dimensional fixed effects.

Probit and logit with exporter-time, importer-time and pair effects: estimation
by Newton steps on alternating-projection residuals, analytical and jackknife
bias corrections, average partial effects with covariances, Monte Carlo
tooling and a trade-data command line.
"""

from .ape import (ApeSet, LongRunDenominatorError, ape_abc_correct, ape_covariance, ape_direct,
                  ape_longrun, ape_spj_correct, compute_apes)
from .bias import (AbcTerms, SplitScheme, WaldResult, abc_correct_beta, abc_terms, abc_terms_auto,
                   abc_terms_twoway, spj_combine, spj_correct, split_halves, split_scheme,
                   wald_homogeneity)
from .demean import ConvergenceError, GroupSums, map_project, map_project_columns, within_transform
from .links import LinkFamily, get_link
from .mle import (CollinearityError, FitResult, NewtonControl, SeparationReport, beta_covariance,
                  fit_mle, refit_fixed_effects_offset, screen_separation)
from .panel import (ONE_WAY_EACH, THREE_WAY, TWO_WAY, FeLayout, PanelDataset, PanelError,
                    add_lag_column, build_dataset, from_arrays)

__version__ = "0.1.0"

__all__ = [
    "AbcTerms", "ApeSet", "CollinearityError", "ConvergenceError", "FeLayout", "FitResult",
    "GroupSums", "LinkFamily", "LongRunDenominatorError", "NewtonControl", "ONE_WAY_EACH",
    "PanelDataset", "PanelError", "SeparationReport", "SplitScheme", "THREE_WAY", "TWO_WAY",
    "WaldResult", "abc_correct_beta", "abc_terms", "abc_terms_auto", "abc_terms_twoway",
    "add_lag_column", "ape_abc_correct", "ape_covariance", "ape_direct", "ape_longrun",
    "ape_spj_correct", "beta_covariance", "build_dataset", "compute_apes", "fit_mle",
    "from_arrays", "get_link", "map_project", "map_project_columns", "refit_fixed_effects_offset",
    "screen_separation", "spj_combine", "spj_correct", "split_halves", "split_scheme",
    "wald_homogeneity", "within_transform",
]
