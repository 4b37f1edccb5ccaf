"""Self-normalised importance sampling of the posterior (iDEM-style).

The proposal ``N(x_t / a, (b / a)^2 I)`` equals the kernel likelihood viewed
as a density in ``x0``, so the importance weights reduce to
``softmax(log p(x0^k))``: the marginal ``q_t(x_t)`` and the Jacobian ``a^d``
are common to every sample and cancel on normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .estimators import (
    InsufficientSamplesError,
    ScoreEstimate,
    _weighted_mean_var,
    accumulate_moments,
    dsi_integrand,
    optimal_c,
)
from .schedule import NoiseSchedule


class InvalidInputError(ValueError):
    """Raised on non-finite log-densities."""


@dataclass(frozen=True)
class IsBatch:
    """Proposal draws around ``x_t`` with their self-normalised weights.

    Each sample costs one paired evaluation of the log-density and its
    gradient (one NFE); both are cached here.
    """

    x_t: np.ndarray
    proposal_samples: np.ndarray
    log_unnorm_values: np.ndarray
    target_scores: np.ndarray
    weights: np.ndarray
    effective_sample_size: np.ndarray | float

    @property
    def n_samples(self) -> int:
        return self.proposal_samples.shape[-2]


def idem_proposal(x_t, schedule: NoiseSchedule, t, K: int, rng: np.random.Generator) -> np.ndarray:
    """``K`` draws from ``N(x_t / a, (b / a)^2 I)``, shape ``batch + (K, d)``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    a, b = schedule.kernel(t)
    x_t = np.asarray(x_t, dtype=float)
    z = rng.standard_normal(x_t.shape[:-1] + (K, x_t.shape[-1]))
    return x_t[..., None, :] / a + (b / a) * z


def softmax_weights(log_unnorm_values) -> np.ndarray:
    """Normalised weights ``exp(l_k - max) / sum_j exp(l_j - max)`` over the last axis."""
    values = np.asarray(log_unnorm_values, dtype=float)
    if values.shape[-1] < 1:
        raise ValueError("need at least one log-density value")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("log-density values must be finite")
    return np.exp(values - logsumexp(values, axis=-1, keepdims=True))


def effective_sample_size(weights) -> np.ndarray | float:
    ess = 1.0 / np.sum(np.asarray(weights) ** 2, axis=-1)
    return float(ess) if np.ndim(ess) == 0 else ess


def make_is_batch(x_t, target, schedule: NoiseSchedule, t, K: int, rng: np.random.Generator) -> IsBatch:
    x_t = np.asarray(x_t, dtype=float)
    samples = idem_proposal(x_t, schedule, t, K, rng)
    log_values = np.asarray(target.log_unnorm(samples), dtype=float)
    scores = target.score(samples)
    weights = softmax_weights(log_values)
    return IsBatch(x_t, samples, log_values, scores, weights, effective_sample_size(weights))


def _estimate(u, batch: IsBatch, **extra) -> ScoreEstimate:
    value, var = _weighted_mean_var(u, batch.weights)
    return ScoreEstimate(
        value=value,
        per_sample_trace_variance=float(var) if np.ndim(var) == 0 else var,
        n_samples=batch.n_samples,
        ess=batch.effective_sample_size,
        **extra,
    )


def idem_tsi_score(batch: IsBatch, target, schedule: NoiseSchedule, t) -> ScoreEstimate:
    """Importance-sampled TSI: ``(1/a) sum_k w_k grad log p(x0^k)``."""
    a, _ = schedule.kernel(t)
    return _estimate(batch.target_scores / a, batch, c_star=0.0, c_tilde=0.0)


def cv_idem_score(
    batch: IsBatch,
    target,
    schedule: NoiseSchedule,
    t,
    x_t=None,
    *,
    reweight_moments: bool = False,
    c_tilde=None,
    clip: bool = False,
) -> ScoreEstimate:
    """Importance-sampled control-variate score.

    The coefficient comes from the unweighted proposal moments unless
    ``reweight_moments`` is set; ``c_tilde`` overrides it entirely.
    """
    if batch.n_samples < 2 and c_tilde is None:
        raise InsufficientSamplesError("the control-variate coefficient needs K >= 2")
    a, _ = schedule.kernel(t)
    x_t = batch.x_t if x_t is None else np.asarray(x_t, dtype=float)
    x0 = batch.proposal_samples
    s_p = batch.target_scores
    s_k = dsi_integrand(x0, x_t, schedule, t)
    fallback = False
    if c_tilde is None:
        stats = accumulate_moments(x0, s_p, s_k, weights=batch.weights if reweight_moments else None)
        c_star, c_tilde, fallback = optimal_c(stats, schedule, t, clip=clip)
    else:
        c_star = np.asarray(c_tilde) / a
    c = np.asarray(c_tilde, dtype=float)[..., None, None]
    u = (1.0 - c) / a * s_p + c * s_k
    return _estimate(u, batch, c_star=c_star, c_tilde=c_tilde, fallback=fallback)
