"""Euler-Maruyama integration of the reverse-time SDE with Monte Carlo scores.

The reverse dynamics for any ``lam >= 0`` share the forward marginals::

    dx = [f x - (1 + lam^2) / 2 * g^2 * score] dt + lam * g dW   (t decreasing)

``lam = 1`` is the time reversal of the forward SDE and ``lam = 0`` the
probability-flow ODE. The score at every step comes from one of:

* ``exact``: the analytic marginal score of a Gaussian-mixture target;
* any posterior-sample estimator (``dsi``, ``tsi``, ``tsm-global``, ``cvsi`` ...),
  fed with fresh exact posterior draws (Gaussian-mixture targets only);
* ``is-tsi`` / ``is-cvsi``: self-normalised importance sampling, which needs
  nothing but the unnormalised target.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .estimators import Estimator, mc_score, tsm_variance
from .gmm_analytic import diffuse_gmm, posterior_gmm
from .importance import InvalidInputError, cv_idem_score, idem_tsi_score, make_is_batch
from .schedule import NoiseSchedule
from .targets import GaussianMixture

IS_ESTIMATORS = ("is-tsi", "is-cvsi")


class DivergedTrajectoryError(RuntimeError):
    """A chain produced a non-finite state or score."""

    def __init__(self, t: float, chain: int, what: str = "state"):
        super().__init__(f"non-finite {what} in chain {chain} at t={t:.6g}")
        self.t = t
        self.chain = chain


class UnsupportedEstimatorError(ValueError):
    """The estimator cannot be used with the given target."""


@dataclass(frozen=True)
class ReverseRunConfig:
    """Settings for one reverse-SDE run.

    Attributes:
        schedule: Noise schedule; integration runs from ``t_max`` to ``t_min``.
        estimator: ``"exact"``, ``"is-tsi"``, ``"is-cvsi"`` or an
            :class:`~cvsi.estimators.Estimator` string.
        lam: Noise scale of the reverse SDE (0 gives the probability-flow ODE).
        n_steps: Number of uniform Euler-Maruyama steps.
        k_mc: Posterior or proposal samples per chain and step.
        n_chains: Number of independent chains.
        seed: Root seed; the initial state and the Brownian increments use
            streams that do not depend on the estimator, so runs differing
            only in the estimator share common random numbers.
        clip_c: Clip CVSI coefficients to [0, 1].
        independent_c_batch: Estimate ``c*`` from a second, independent batch.
        reweight_moments: Use importance-weighted moments for ``is-cvsi``.
        score_clip: If set, per-sample target scores in the IS estimators
            are rescaled to at most this Euclidean norm. Stiff targets such
            as DW-4 otherwise throw chains out of range at high noise.
    """

    schedule: NoiseSchedule
    estimator: str = "cvsi"
    lam: float = 1.0
    n_steps: int = 500
    k_mc: int = 10
    n_chains: int = 1000
    seed: int = 0
    clip_c: bool = False
    independent_c_batch: bool = False
    reweight_moments: bool = False
    score_clip: float | None = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.score_clip is not None and self.score_clip <= 0:
            raise ValueError("score_clip must be positive")
        if self.k_mc < 1 or self.n_chains < 1:
            raise ValueError("k_mc and n_chains must be >= 1")
        if self.estimator not in ("exact",) + IS_ESTIMATORS:
            Estimator.parse(self.estimator)


@dataclass
class SamplerResult:
    samples: np.ndarray
    n_steps: int
    step_times: np.ndarray
    step_trace_variance: np.ndarray
    step_mean_ess: np.ndarray | None = None
    step_mean_c_tilde: np.ndarray | None = None
    n_fallback: int = 0
    nfe_per_chain: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def mean_trace_variance(self) -> float:
        return float(np.mean(self.step_trace_variance))

    def diagnostics_dict(self) -> dict:
        out = {
            "n_steps": self.n_steps,
            "n_chains": int(self.samples.shape[0]),
            "mean_trace_variance": self.mean_trace_variance,
            "n_fallback": self.n_fallback,
            "nfe_per_chain": self.nfe_per_chain,
            "step_t": self.step_times.tolist(),
            "step_mean_trace_variance": self.step_trace_variance.tolist(),
        }
        if self.step_mean_ess is not None:
            out["step_mean_ess"] = self.step_mean_ess.tolist()
        if self.step_mean_c_tilde is not None:
            out["step_mean_c_tilde"] = self.step_mean_c_tilde.tolist()
        out.update(self.diagnostics)
        return out


def prior_sample(schedule: NoiseSchedule, dim: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Approximate draw from q_1: N(0, I) for VP kinds, N(0, b(t_max)^2 I) otherwise."""
    shape = (dim,) if n is None else (n, dim)
    if schedule.is_vp:
        return rng.standard_normal(shape)
    _, b = schedule.kernel(schedule.t_max)
    return b * rng.standard_normal(shape)


def reverse_step(x, t: float, dt: float, score, schedule: NoiseSchedule, lam: float, rng) -> np.ndarray:
    """One Euler-Maruyama step from ``t`` to ``t - dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t - dt < schedule.t_min - 1e-12:
        raise ValueError(f"step would leave the schedule domain: t - dt = {t - dt}")
    x = np.asarray(x, dtype=float)
    score = np.asarray(score, dtype=float)
    _check_finite(score, t, "score")
    f, g = schedule.drift_diffusion(t)
    drift = f * x - 0.5 * (1.0 + lam**2) * g**2 * score
    x_new = x - drift * dt
    if lam > 0:
        x_new = x_new + lam * g * np.sqrt(dt) * rng.standard_normal(x.shape)
    _check_finite(x_new, t - dt, "state")
    return x_new


def _check_finite(arr, t, what):
    bad = ~np.isfinite(arr)
    if bad.any():
        chain = int(np.argwhere(bad.reshape(arr.shape[0], -1))[0][0]) if arr.ndim > 1 else 0
        raise DivergedTrajectoryError(t, chain, what)


def clip_norm(v, max_norm: float) -> np.ndarray:
    """Rescale vectors along the last axis to Euclidean norm at most ``max_norm``."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v * np.minimum(1.0, max_norm / np.maximum(norm, np.finfo(float).tiny))


def _farthest_chain(x) -> int:
    """Best-effort culprit when a batched density evaluation fails: the outermost chain."""
    return int(np.argmax(np.linalg.norm(np.atleast_2d(x), axis=-1)))


class _ScoreOracle:
    """Per-step score evaluation for the configured estimator."""

    def __init__(self, config: ReverseRunConfig, target, oracle):
        self.config = config
        self.target = target
        self.oracle = oracle
        name = config.estimator
        self.is_based = name in IS_ESTIMATORS
        self.exact = name == "exact"
        if not (self.is_based or self.exact):
            self.estimator = Estimator.parse(name)
            self.sigma2 = None
            if self.estimator.kind.startswith("tsm") and self.estimator.param is None:
                self.sigma2 = tsm_variance(self.estimator.kind, oracle)
        if (self.exact or not self.is_based) and not isinstance(oracle, GaussianMixture):
            raise UnsupportedEstimatorError(
                f"estimator {name!r} needs an analytic Gaussian-mixture oracle; use is-tsi or is-cvsi"
            )

    def __call__(self, x, t, rng):
        cfg = self.config
        if self.exact:
            score = diffuse_gmm(self.oracle, cfg.schedule, t).score(x)
            return score, np.zeros(x.shape[0]), None, None, False
        if self.is_based:
            try:
                batch = make_is_batch(x, self.target, cfg.schedule, t, cfg.k_mc, rng)
            except InvalidInputError:
                raise DivergedTrajectoryError(t, _farthest_chain(x), "log-density") from None
            if cfg.score_clip is not None:
                batch = replace(batch, target_scores=clip_norm(batch.target_scores, cfg.score_clip))
            if cfg.estimator == "is-tsi":
                est = idem_tsi_score(batch, self.target, cfg.schedule, t)
            else:
                est = cv_idem_score(
                    batch, self.target, cfg.schedule, t, x,
                    reweight_moments=cfg.reweight_moments, clip=cfg.clip_c,
                )
            return est.value, est.per_sample_trace_variance, est.ess, est.c_tilde, est.fallback
        post = posterior_gmm(self.oracle, cfg.schedule, t, x)
        x0 = post.sample(cfg.k_mc, rng)
        coefficient_batch = None
        if cfg.independent_c_batch and self.estimator.kind == "cvsi":
            cx0 = post.sample(cfg.k_mc, rng)
            coefficient_batch = (cx0, self.target.score(cx0))
        est = mc_score(
            self.estimator, x0, x, self.target, cfg.schedule, t,
            sigma2=self.sigma2, coefficient_batch=coefficient_batch, clip=cfg.clip_c,
        )
        return est.value, est.per_sample_trace_variance, None, est.c_tilde, est.fallback


def run_sampler(config: ReverseRunConfig, target, oracle: GaussianMixture | None = None) -> SamplerResult:
    """Integrate ``n_chains`` reverse trajectories from ``t_max`` to ``t_min``.

    ``oracle`` is the analytic mixture used for exact posterior draws and
    exact scores; it defaults to ``target`` when that is a mixture.
    """
    schedule = config.schedule
    if oracle is None and isinstance(target, GaussianMixture):
        oracle = target
    score_fn = _ScoreOracle(config, target, oracle)

    root = np.random.SeedSequence(config.seed)
    init_seq, noise_seq, est_seq = root.spawn(3)
    noise_seqs = noise_seq.spawn(config.n_steps)
    est_seqs = est_seq.spawn(config.n_steps)

    x = prior_sample(schedule, target.dim, np.random.default_rng(init_seq), config.n_chains)
    times = np.linspace(schedule.t_max, schedule.t_min, config.n_steps + 1)
    step_var = np.empty(config.n_steps)
    step_ess = np.empty(config.n_steps) if score_fn.is_based else None
    step_c = None if score_fn.exact else np.empty(config.n_steps)
    n_fallback = 0
    for i in range(config.n_steps):
        t, dt = times[i], times[i] - times[i + 1]
        score, var, ess, c_tilde, fallback = score_fn(x, t, np.random.default_rng(est_seqs[i]))
        step_var[i] = np.mean(var)
        if step_ess is not None:
            step_ess[i] = np.mean(ess)
        if step_c is not None:
            step_c[i] = np.mean(c_tilde)
        n_fallback += int(np.sum(fallback))
        x = reverse_step(x, t, dt, score, schedule, config.lam, np.random.default_rng(noise_seqs[i]))

    nfe = 0 if score_fn.exact else config.k_mc * config.n_steps
    if config.independent_c_batch and not score_fn.is_based and not score_fn.exact:
        nfe *= 2
    return SamplerResult(
        samples=x,
        n_steps=config.n_steps,
        step_times=times[:-1],
        step_trace_variance=step_var,
        step_mean_ess=step_ess,
        step_mean_c_tilde=step_c,
        n_fallback=n_fallback,
        nfe_per_chain=nfe,
    )
