"""Evaluation: NLL, estimator variance profiles, empirical W2, DW-4 distances,
and a MALA reference sampler for targets without an analytic oracle."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .estimators import mc_score, tsm_variance
from .gmm_analytic import diffuse_gmm, posterior_gmm
from .schedule import NoiseSchedule
from .targets import DoubleWellSystem, GaussianMixture

W2_MAX_SAMPLES = 2048


def nll(gmm: GaussianMixture, samples) -> float:
    """Mean negative log-likelihood of ``samples`` under the normalised mixture."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 1:
        raise ValueError("nll needs at least one sample")
    return float(-np.mean(gmm.log_prob(samples)))


def nll_with_se(gmm: GaussianMixture, samples) -> tuple[float, float]:
    lp = gmm.log_prob(np.atleast_2d(samples))
    return float(-lp.mean()), float(lp.std(ddof=1) / np.sqrt(lp.size))


# ---------------------------------------------------------------------------
# variance / coefficient profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProfileRow:
    """Per-time estimator statistics averaged over ``n_xt`` draws of x_t ~ q_t."""

    t: float
    var_dsi: float
    var_tsi: float
    var_tsm_global: float
    var_tsm_mode: float | None
    var_cvsi: float
    c_star: float
    c_tilde: float
    n_xt: int
    K: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


PROFILE_ESTIMATORS = {
    "var_dsi": "dsi",
    "var_tsi": "tsi",
    "var_tsm_global": "tsm-global",
    "var_tsm_mode": "tsm-mode",
    "var_cvsi": "cvsi",
}


def profile_point(gmm: GaussianMixture, schedule: NoiseSchedule, t: float, n_xt: int, K: int,
                  rng: np.random.Generator, include_mode: bool = True, batch_xt: int = 8) -> dict:
    """Per-x_t variances and coefficients at a single time ``t``.

    Returns arrays of length ``n_xt`` keyed like :class:`ProfileRow`, plus
    ``"a"`` and the raw ``c_tilde`` draws for quantile summaries.
    """
    if K < 2:
        raise ValueError("variance profiles need K >= 2")
    diffused = diffuse_gmm(gmm, schedule, t)
    x_t = diffused.sample(n_xt, rng)
    sigma2 = {"tsm-global": tsm_variance("tsm-global", gmm), "tsm-mode": tsm_variance("tsm-mode", gmm)}
    names = {k: v for k, v in PROFILE_ESTIMATORS.items() if include_mode or v != "tsm-mode"}
    out = {key: np.empty(n_xt) for key in names}
    out["c_star"] = np.empty(n_xt)
    out["c_tilde"] = np.empty(n_xt)
    for start in range(0, n_xt, batch_xt):
        sl = slice(start, start + batch_xt)
        post = posterior_gmm(gmm, schedule, t, x_t[sl], diffused=diffused)
        x0 = post.sample(K, rng)
        s_p = gmm.score(x0)
        for key, kind in names.items():
            est = mc_score(kind, x0, x_t[sl], gmm, schedule, t, s_p=s_p, sigma2=sigma2.get(kind))
            out[key][sl] = est.per_sample_trace_variance
            if kind == "cvsi":
                out["c_star"][sl] = est.c_star
                out["c_tilde"][sl] = est.c_tilde
    out["a"] = schedule.kernel(t)[0]
    return out


def variance_profile(
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    t_grid,
    n_xt: int,
    K: int,
    rng: np.random.Generator | np.random.SeedSequence | int,
    include_mode: bool = True,
) -> list[ProfileRow]:
    """Estimator trace-variances and CVSI coefficients over a time grid.

    Each grid point gets its own child stream of ``rng`` so points can be
    evaluated in any order (or in parallel) with identical results.
    """
    seeds = _child_seeds(rng, len(t_grid))
    rows = []
    for t, seed in zip(t_grid, seeds):
        point = profile_point(gmm, schedule, float(t), n_xt, K, np.random.default_rng(seed), include_mode)
        rows.append(summarise_profile_point(float(t), point, n_xt, K))
    return rows


def summarise_profile_point(t: float, point: dict, n_xt: int, K: int) -> ProfileRow:
    mean = {key: float(np.mean(point[key])) for key in PROFILE_ESTIMATORS if key in point}
    c_star = float(np.mean(point["c_star"]))
    return ProfileRow(
        t=t,
        var_dsi=mean["var_dsi"],
        var_tsi=mean["var_tsi"],
        var_tsm_global=mean["var_tsm_global"],
        var_tsm_mode=mean.get("var_tsm_mode"),
        var_cvsi=mean["var_cvsi"],
        c_star=c_star,
        c_tilde=c_star * point["a"],
        n_xt=n_xt,
        K=K,
    )


def _child_seeds(rng, n):
    if isinstance(rng, np.random.SeedSequence):
        return rng.spawn(n)
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(rng.integers(2**63)).spawn(n)
    return np.random.SeedSequence(rng).spawn(n)


# ---------------------------------------------------------------------------
# Wasserstein-2 and DW-4 geometry
# ---------------------------------------------------------------------------


def w2_distance(samples_a, samples_b, rng: np.random.Generator | None = None,
                max_samples: int = W2_MAX_SAMPLES) -> float:
    """Exact empirical W2 between equally weighted point sets.

    Uses a minimum-cost perfect matching on squared Euclidean costs. Sets
    larger than ``max_samples`` (or of unequal size) are subsampled without
    replacement to a common size using ``rng`` (seed 0 if omitted).
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    n = min(a.shape[0], b.shape[0], max_samples)
    if a.shape[0] != n or b.shape[0] != n:
        rng = np.random.default_rng(0) if rng is None else rng
        if a.shape[0] != n:
            a = a[np.sort(rng.choice(a.shape[0], n, replace=False))]
        if b.shape[0] != n:
            b = b[np.sort(rng.choice(b.shape[0], n, replace=False))]
    cost = cdist(a, b, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def interatomic_distances(system: DoubleWellSystem, samples) -> np.ndarray:
    """All unordered pair distances of every configuration, flattened."""
    return system.pair_distances(np.atleast_2d(samples)).ravel()


def histogram(values, bins=100, range=None) -> list[tuple[float, float, int]]:
    counts, edges = np.histogram(values, bins=bins, range=range)
    return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


# ---------------------------------------------------------------------------
# reference MCMC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MalaConfig:
    """Metropolis-adjusted Langevin settings.

    The step size adapts during burn-in (Robbins-Monro on its logarithm toward
    ``target_accept``) and is frozen afterwards. ``drift_clip`` caps the
    Langevin drift at ``drift_clip * sqrt(h * d)`` (truncated MALA). The same
    cap enters both proposal densities, so the chain stays exact; without it,
    chains that start in a steep tail overshoot on every proposal and never
    move. ``None`` disables the cap.
    """

    step_size: float = 0.1
    n_chains: int = 64
    burn_in: int = 100_000
    thin: int = 1
    adapt: bool = True
    target_accept: float = 0.574
    init_scale: float = 1.0
    drift_clip: float | None = 2.0


@dataclass
class McmcResult:
    samples: np.ndarray
    acceptance_rate: float
    step_size: float
    acceptance_ok: bool


def reference_mcmc(target, n: int, config: MalaConfig, rng: np.random.Generator, x_init=None) -> McmcResult:
    """Draw ``n`` approximately exact samples with vectorised MALA chains."""
    m = config.n_chains
    x = config.init_scale * rng.standard_normal((m, target.dim)) if x_init is None else np.array(x_init, float)
    logp = target.log_unnorm(x)
    grad = target.score(x)
    log_h = np.log(config.step_size)

    def drift(grad, h):
        d = 0.5 * h * grad
        if config.drift_clip is None:
            return d
        cap = config.drift_clip * np.sqrt(h * target.dim)
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        return d * np.minimum(1.0, cap / np.maximum(norm, np.finfo(float).tiny))

    def step(x, logp, grad, h):
        mean_fwd = x + drift(grad, h)
        y = mean_fwd + np.sqrt(h) * rng.standard_normal(x.shape)
        logp_y = target.log_unnorm(y)
        grad_y = target.score(y)
        mean_bwd = y + drift(grad_y, h)
        log_q_fwd = -np.sum((y - mean_fwd) ** 2, axis=-1) / (2 * h)
        log_q_bwd = -np.sum((x - mean_bwd) ** 2, axis=-1) / (2 * h)
        log_alpha = logp_y + log_q_bwd - logp - log_q_fwd
        accept = np.log(rng.uniform(size=m)) < log_alpha
        x = np.where(accept[:, None], y, x)
        logp = np.where(accept, logp_y, logp)
        grad = np.where(accept[:, None], grad_y, grad)
        return x, logp, grad, np.minimum(1.0, np.exp(np.minimum(log_alpha, 0.0)))

    for i in range(config.burn_in):
        x, logp, grad, alpha = step(x, logp, grad, np.exp(log_h))
        if config.adapt:
            log_h += (np.mean(alpha) - config.target_accept) / (i + 1) ** 0.6

    per_chain = -(-n // m)
    out = np.empty((per_chain, m, target.dim))
    accepted = 0.0
    for i in range(per_chain):
        for _ in range(config.thin):
            x, logp, grad, alpha = step(x, logp, grad, np.exp(log_h))
            accepted += alpha.mean()
        out[i] = x
    rate = accepted / (per_chain * config.thin)
    ok = 0.2 <= rate <= 0.9
    if not ok:
        warnings.warn(f"MALA acceptance rate {rate:.3f} outside [0.2, 0.9]", RuntimeWarning, stacklevel=2)
    samples = out.transpose(1, 0, 2).reshape(-1, target.dim)[:n]
    return McmcResult(samples, float(rate), float(np.exp(log_h)), ok)


def profile_rows_as_dicts(rows) -> list[dict]:
    return [asdict(r) for r in rows]
