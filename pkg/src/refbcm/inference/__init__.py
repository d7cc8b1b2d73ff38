"""Posterior computation for the causal model: log density, MAP, NUTS, diagnostics."""

from .density import (ParamLayout, PosteriorModel, from_unconstrained, log_posterior,
                      to_unconstrained)
from .diagnostics import ess_bulk, split_rhat, summarize_chains
from .optimize import MapResult, fit_map
from .posterior import (PosteriorDraws, estimate_effect_bcm, fit_bcm, sample_pi,
                        sample_posterior)
from .priors import PriorSpec
