"""Reference-based Bayesian causal model for partially observed post-ICE outcomes.

The package covers trial data handling, the single-parameter causal model
for post-discontinuation outcomes, its Bayesian fit (MAP and NUTS), the
imputation-based comparators, a trial simulator and a benchmark harness.
"""

from .analysis import EstimateReport, ancova, covered, interval
from .causal import (CausalParams, marginal_post_ice_mean, patient_means, policy_effect,
                     post_ice_conditional)
from .config import MethodSettings, RunConfig, load_config, load_preset
from .estimators import (CausalModelImputer, ReferenceBasedImputer, RetrievedDropoutImputer,
                         TreatmentPolicyEstimator)
from .exceptions import (ConfigError, ConvergenceWarning, NonEstimableError, NumericalError,
                         OptimizationError, RefBCMError, TrialParseError, TrialValidationError)
from .gaussian import ConditionalGaussian, mvn_condition, mvn_logpdf, mvn_sample, spatial_power_cov
from .harness import BenchmarkTable, MethodSpec, run_benchmark, run_method
from .imputation import (CompletedDataset, PooledResult, bcm_cmi, bcm_mi_bootstrap,
                         conditional_mean_impute, draw_imputation, rbi_estimate, rbi_impute,
                         rd_estimate, rd_impute, rubins_rules)
from .inference import (PosteriorDraws, PriorSpec, estimate_effect_bcm, fit_bcm, fit_map,
                        log_posterior, sample_pi, sample_posterior, summarize_chains)
from .simulation import SimScenario, simulate_trial, true_policy_effect
from .trial import PatientRecord, TrialDataset, VisitSchedule, read_csv, summarize, write_csv

__version__ = "0.1.0"
