"""Control-variate score identity (CVSI) for diffusion-based sampling."""

from .estimators import (
    Estimator,
    MomentStats,
    ScoreEstimate,
    accumulate_moments,
    boltzmann_c,
    cvsi_integrand,
    dsi_integrand,
    mc_score,
    optimal_c,
    tsi_integrand,
    tsm_weight,
    tweedie_score,
)
from .gmm_analytic import DiffusedGmm, PosteriorGmm, diffuse_gmm, exact_marginal_score, posterior_gmm
from .schedule import NoiseSchedule, drift_diffusion, eval_kernel
from .targets import DoubleWellSystem, GaussianMixture, TargetDensity, generate_random_gmm, isotropic_gaussian

__version__ = "0.1.0"
