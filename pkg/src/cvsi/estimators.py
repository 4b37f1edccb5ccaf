"""Monte Carlo score estimators over posterior samples x0 ~ q(x0 | x_t).

All estimators considered here are members of one family indexed by the
interpolation weight ``c_tilde``::

    u(x0) = (1 - c_tilde) / a * grad log p(x0) + c_tilde * (a x0 - x_t) / b^2

with ``c_tilde = 0`` the target-score identity (TSI), ``c_tilde = 1`` the
denoising identity (DSI), the TSM weights ``b^2 / (b^2 + a^2 sigma^2)``, and the
variance-minimising coefficient estimated from posterior moments (CVSI).

Arrays follow the layout ``batch + (K, d)`` for samples and ``batch + (d,)``
for ``x_t``, where ``batch`` may be empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .schedule import NoiseSchedule

ESTIMATOR_KINDS = ("dsi", "tweedie", "tsi", "tsm-global", "tsm-mode", "cvsi", "cvsi-fixed")

# relative threshold on the c* denominator below which the fallback kicks in
DEGENERATE_DENOMINATOR = 1e-12


class InsufficientSamplesError(ValueError):
    """Raised when a moment estimate needs more samples than were given."""


class UnsupportedTargetError(ValueError):
    """Raised when an estimator needs information the target cannot provide."""


@dataclass(frozen=True)
class Estimator:
    """An estimator choice.

    ``param`` is the interpolation weight ``c_tilde`` for ``cvsi-fixed`` and
    the variance ``sigma^2`` for the TSM kinds (``None`` lets the caller
    derive it from the target).
    """

    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator {self.kind!r}; expected one of {ESTIMATOR_KINDS}")
        if self.kind == "cvsi-fixed" and self.param is None:
            raise ValueError("cvsi-fixed needs a coefficient, e.g. 'cvsi-fixed:0.5'")
        if self.kind.startswith("tsm") and self.param is not None and self.param <= 0:
            raise ValueError("TSM variance must be positive")

    @classmethod
    def parse(cls, text: str) -> Estimator:
        """Parse ``'kind'`` or ``'kind:value'``."""
        kind, _, value = text.partition(":")
        return cls(kind, float(value) if value else None)

    def __str__(self):
        return self.kind if self.param is None else f"{self.kind}:{self.param:g}"


# ---------------------------------------------------------------------------
# integrands
# ---------------------------------------------------------------------------


def _expand_xt(x_t, x0):
    x_t = np.asarray(x_t, dtype=float)
    return x_t[..., None, :] if x_t.ndim == np.ndim(x0) - 1 else x_t


def dsi_integrand(x0, x_t, schedule: NoiseSchedule, t) -> np.ndarray:
    """Perturbation-kernel score ``(a x0 - x_t) / b^2``."""
    a, b = schedule.kernel(t)
    x0 = np.asarray(x0, dtype=float)
    return (a * x0 - _expand_xt(x_t, x0)) / b**2


def tsi_integrand(x0, target, schedule: NoiseSchedule, t) -> np.ndarray:
    a, _ = schedule.kernel(t)
    return target.score(x0) / a


def tweedie_score(posterior_mean, x_t, schedule: NoiseSchedule, t) -> np.ndarray:
    """Score from the posterior mean, ``(a E[x0|x_t] - x_t) / b^2``."""
    a, b = schedule.kernel(t)
    return (a * np.asarray(posterior_mean) - np.asarray(x_t)) / b**2


def interpolated_integrand(s_p, s_k, c_tilde, a) -> np.ndarray:
    c = np.asarray(c_tilde, dtype=float)[..., None, None]
    return (1.0 - c) / a * s_p + c * s_k


def cvsi_integrand(x0, x_t, c_tilde, target, schedule: NoiseSchedule, t) -> np.ndarray:
    a, _ = schedule.kernel(t)
    x0 = np.asarray(x0, dtype=float)
    s_p = target.score(x0)
    s_k = dsi_integrand(x0, x_t, schedule, t)
    c = np.asarray(c_tilde, dtype=float)
    return (1.0 - c) / a * s_p + c * s_k if c.ndim == 0 else interpolated_integrand(s_p, s_k, c, a)


def tsm_weight(sigma2, schedule: NoiseSchedule, t):
    """TSM mixing weight ``b^2 / (b^2 + a^2 sigma^2)``."""
    a, b = schedule.kernel(t)
    return b**2 / (b**2 + a**2 * np.asarray(sigma2, dtype=float))


def tsm_variance(kind: str, target) -> float:
    """Data variance (``tsm-global``) or mean intra-mode variance (``tsm-mode``)."""
    if kind == "tsm-global":
        if hasattr(target, "total_variance"):
            return target.total_variance()
        raise UnsupportedTargetError("tsm-global needs sigma_data^2 for this target")
    if kind == "tsm-mode":
        if hasattr(target, "mode_variance"):
            return target.mode_variance()
        raise UnsupportedTargetError("tsm-mode requires the ground-truth mixture parameters")
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------

_PAIRS = (("sp", "sp"), ("k", "k"), ("sp", "k"), ("x0", "x0"), ("sp", "x0"))
_ENERGY_PAIRS = (("ge", "ge"), ("ge", "x0"))


def _inner(u, v):
    return np.sum(u * v, axis=-1)


@dataclass(frozen=True)
class MomentStats:
    """Trace moments of the posterior streams, mergeable across batches.

    Streams are ``sp`` (target score), ``k`` (kernel score), ``x0`` and,
    optionally, ``ge`` (energy gradient). Variances and covariances are
    self-normalised (plug-in) trace statistics ``E|u - Eu|^2``.
    """

    n: int
    weight_sum: np.ndarray
    means: dict = field(repr=False)
    comoments: dict = field(repr=False)

    def _ratio(self, key):
        return self.comoments[key] / self.weight_sum

    @property
    def dim(self) -> int:
        return self.means["x0"].shape[-1]

    @property
    def mean_sp(self):
        return self.means["sp"]

    @property
    def mean_k(self):
        return self.means["k"]

    @property
    def mean_x0(self):
        return self.means["x0"]

    @property
    def var_sp(self):
        return self._ratio(("sp", "sp"))

    @property
    def var_k(self):
        return self._ratio(("k", "k"))

    @property
    def cov_sp_k(self):
        return self._ratio(("sp", "k"))

    @property
    def var_x0(self):
        return self._ratio(("x0", "x0"))

    @property
    def cov_sp_x0(self):
        return self._ratio(("sp", "x0"))

    @property
    def has_energy(self) -> bool:
        return "ge" in self.means

    @property
    def var_grad_energy(self):
        return self._ratio(("ge", "ge"))

    @property
    def cov_grad_energy_x0(self):
        return self._ratio(("ge", "x0"))

    def merge(self, other: MomentStats) -> MomentStats:
        """Combine two disjoint batches (pairwise update of Chan et al.)."""
        if self.means.keys() != other.means.keys():
            raise ValueError("cannot merge moment stats over different streams")
        total = self.weight_sum + other.weight_sum
        frac = other.weight_sum / total
        deltas = {k: other.means[k] - self.means[k] for k in self.means}
        means = {k: self.means[k] + frac[..., None] * deltas[k] for k in self.means}
        cross = self.weight_sum * other.weight_sum / total
        comoments = {
            (u, v): self.comoments[(u, v)] + other.comoments[(u, v)] + cross * _inner(deltas[u], deltas[v])
            for (u, v) in self.comoments
        }
        return MomentStats(self.n + other.n, total, means, comoments)


def _chunk_stats(streams: dict, weights) -> MomentStats:
    k = next(iter(streams.values())).shape[-2]
    if weights is None:
        w = np.ones(next(iter(streams.values())).shape[:-1])
    else:
        w = weights
    wsum = w.sum(-1)
    wn = w / wsum[..., None]
    means = {name: np.einsum("...k,...kd->...d", wn, s) for name, s in streams.items()}
    centred = {name: s - means[name][..., None, :] for name, s in streams.items()}
    pairs = _PAIRS + (_ENERGY_PAIRS if "ge" in streams else ())
    comoments = {(u, v): np.einsum("...k,...k->...", w, _inner(centred[u], centred[v])) for u, v in pairs}
    return MomentStats(k, wsum, means, comoments)


def accumulate_moments(
    x0,
    s_p,
    s_k,
    weights=None,
    grad_energy=None,
    chunk_size: int = 8192,
) -> MomentStats:
    """Streaming trace moments over the sample axis (``-2``).

    Samples are consumed in chunks of ``chunk_size``; each chunk is centred on
    its own mean and folded in with :meth:`MomentStats.merge`, so the result
    is stable without a second pass over the data. Optional ``weights`` give
    self-normalised weighted moments.
    """
    streams = {"sp": np.asarray(s_p, float), "k": np.asarray(s_k, float), "x0": np.asarray(x0, float)}
    if grad_energy is not None:
        streams["ge"] = np.asarray(grad_energy, float)
    n = streams["x0"].shape[-2]
    if n < 2:
        raise InsufficientSamplesError(f"moment estimates need at least 2 samples, got {n}")
    w = None if weights is None else np.asarray(weights, float)
    stats = None
    for start in range(0, n, chunk_size):
        sl = slice(start, start + chunk_size)
        part = _chunk_stats(
            {name: s[..., sl, :] for name, s in streams.items()},
            None if w is None else w[..., sl],
        )
        stats = part if stats is None else stats.merge(part)
    return stats


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------


class Coefficient(NamedTuple):
    c_star: np.ndarray | float
    c_tilde: np.ndarray | float
    fallback: np.ndarray | bool


def _finish_coefficient(numerator, denominator, var_scale, stats, schedule, t, clip=False):
    a, _ = schedule.kernel(t)
    degenerate = denominator < DEGENERATE_DENOMINATOR * (var_scale + 1.0)
    safe = np.where(degenerate, 1.0, denominator)
    c_star = np.where(degenerate, 0.0, numerator / safe)
    if np.any(degenerate):
        fallback_tilde = tsm_weight(stats.var_x0 / stats.dim, schedule, t)
        c_star = np.where(degenerate, fallback_tilde / a, c_star)
    c_tilde = c_star * a
    if clip:
        c_tilde = np.clip(c_tilde, 0.0, 1.0)
        c_star = c_tilde / a
    if np.ndim(c_star) == 0:
        return Coefficient(float(c_star), float(c_tilde), bool(degenerate))
    return Coefficient(c_star, c_tilde, degenerate)


def optimal_c(stats: MomentStats, schedule: NoiseSchedule, t, clip: bool = False) -> Coefficient:
    """Variance-minimising coefficient from target/kernel score moments.

    ``c* = (V_p - a C) / (a V_p + a^3 V_k - 2 a^2 C)`` and ``c_tilde = a c*``.
    A vanishing denominator (posterior collapsed to a point) falls back to the
    TSM weight with the posterior per-coordinate variance and sets ``fallback``.
    """
    a, _ = schedule.kernel(t)
    v_p, v_k, cov = stats.var_sp, stats.var_k, stats.cov_sp_k
    numerator = v_p - a * cov
    denominator = a * v_p + a**3 * v_k - 2.0 * a**2 * cov
    return _finish_coefficient(numerator, denominator, v_p, stats, schedule, t, clip)


def boltzmann_c(stats: MomentStats, tau: float, schedule: NoiseSchedule, t, clip: bool = False) -> Coefficient:
    """The same coefficient written with energy-gradient and x0 moments."""
    if not stats.has_energy:
        raise ValueError("boltzmann_c needs moments accumulated with grad_energy")
    a, b = schedule.kernel(t)
    v_e, v_x, cov = stats.var_grad_energy, stats.var_x0, stats.cov_grad_energy_x0
    numerator = v_e / tau**2 + a**2 / (tau * b**2) * cov
    denominator = a / tau**2 * v_e + a**5 / b**4 * v_x + 2.0 * a**3 / (tau * b**2) * cov
    return _finish_coefficient(numerator, denominator, v_e / tau**2, stats, schedule, t, clip)


# ---------------------------------------------------------------------------
# Monte Carlo aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreEstimate:
    """A Monte Carlo score estimate.

    ``per_sample_trace_variance`` is the plug-in ``E|u - Eu|^2`` of the
    averaged integrand (divide by ``n_samples`` for the estimator variance).
    """

    value: np.ndarray
    per_sample_trace_variance: np.ndarray | float
    n_samples: int
    c_star: np.ndarray | float | None = None
    c_tilde: np.ndarray | float | None = None
    fallback: np.ndarray | bool = False
    ess: np.ndarray | float | None = None


def _weighted_mean_var(u, weights=None):
    if weights is None:
        mean = u.mean(axis=-2)
        var = np.sum((u - mean[..., None, :]) ** 2, axis=-1).mean(-1)
    else:
        mean = np.einsum("...k,...kd->...d", weights, u)
        var = np.einsum("...k,...k->...", weights, np.sum((u - mean[..., None, :]) ** 2, axis=-1))
    return mean, var


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def mc_score(
    estimator: Estimator | str,
    x0,
    x_t,
    target,
    schedule: NoiseSchedule,
    t,
    *,
    s_p=None,
    sigma2: float | None = None,
    coefficient_batch=None,
    clip: bool = False,
) -> ScoreEstimate:
    """Average an estimator's integrand over posterior samples ``x0``.

    Args:
        estimator: Estimator or its string form (``"cvsi"``, ``"cvsi-fixed:0.3"``).
        x0: Posterior samples, ``batch + (K, d)``.
        x_t: Conditioning points, ``batch + (d,)``.
        target: Target density providing ``score``.
        schedule: Noise schedule.
        t: Diffusion time.
        s_p: Precomputed target scores at ``x0`` (saves evaluations when
            several estimators share a sample set).
        sigma2: TSM variance override; otherwise taken from the estimator
            parameter or derived from ``target``.
        coefficient_batch: Optional independent ``(x0, s_p)`` batch for
            estimating ``c*``; by default the same samples are reused, which
            carries an O(1/K) bias.
        clip: Clip the CVSI ``c_tilde`` to ``[0, 1]`` (ablation only).
    """
    est = Estimator.parse(estimator) if isinstance(estimator, str) else estimator
    x0 = np.asarray(x0, dtype=float)
    k = x0.shape[-2]
    if k < 1:
        raise InsufficientSamplesError("need at least one posterior sample")
    a, _ = schedule.kernel(t)
    s_p = target.score(x0) if s_p is None else np.asarray(s_p, dtype=float)
    s_k = dsi_integrand(x0, x_t, schedule, t)

    c_star = c_tilde = None
    fallback = False
    if est.kind in ("dsi", "tweedie"):
        u = s_k
        c_tilde = 1.0
    elif est.kind == "tsi":
        u = s_p / a
        c_tilde = 0.0
    else:
        if est.kind == "cvsi":
            if coefficient_batch is None:
                stats = accumulate_moments(x0, s_p, s_k)
            else:
                cx0, csp = coefficient_batch
                stats = accumulate_moments(cx0, csp, dsi_integrand(cx0, x_t, schedule, t))
            c_star, c_tilde, fallback = optimal_c(stats, schedule, t, clip=clip)
        elif est.kind == "cvsi-fixed":
            c_tilde = est.param
        else:
            var = sigma2 if sigma2 is not None else est.param
            if var is None:
                var = tsm_variance(est.kind, target)
            c_tilde = tsm_weight(var, schedule, t)
        c_arr = np.asarray(c_tilde, dtype=float)
        u = interpolated_integrand(s_p, s_k, c_arr, a) if c_arr.ndim else (1.0 - c_arr) / a * s_p + c_arr * s_k
    if c_star is None and c_tilde is not None:
        c_star = c_tilde / a

    value, var = _weighted_mean_var(u)
    if est.kind == "tweedie":
        value = tweedie_score(x0.mean(axis=-2), x_t, schedule, t)
    return ScoreEstimate(
        value=value,
        per_sample_trace_variance=_scalar(var),
        n_samples=k,
        c_star=_scalar(c_star),
        c_tilde=_scalar(c_tilde),
        fallback=fallback,
    )
