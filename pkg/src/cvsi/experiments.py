"""Experiment drivers behind ``cvsi run``.

Each driver takes a validated :class:`~cvsi.config.RunConfig` and returns an
:class:`ExperimentOutput` of named tables plus a JSON-able summary. File IO
lives in :mod:`cvsi.cli`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .config import RunConfig
from .estimators import tsm_variance
from .gmm_analytic import diffuse_gmm, exact_marginal_score, posterior_gmm
from .importance import cv_idem_score, idem_tsi_score, make_is_batch
from .metrics import (
    MalaConfig,
    ProfileRow,
    histogram,
    interatomic_distances,
    nll,
    nll_with_se,
    profile_point,
    reference_mcmc,
    summarise_profile_point,
    w2_distance,
)
from .sampler import IS_ESTIMATORS, ReverseRunConfig, run_sampler
from .schedule import NoiseSchedule, default_sigma_max
from .targets import DoubleWellSystem, GaussianMixture, generate_random_gmm, isotropic_gaussian

log = logging.getLogger(__name__)

ESS_WARN_FRACTION = 0.05


@dataclass
class Table:
    columns: list[str]
    rows: list[list]


@dataclass
class ExperimentOutput:
    tables: dict[str, Table] = field(default_factory=dict)
    json_files: dict[str, dict] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def _seed_ints(root: int, *key: int, n: int = 1) -> list[int]:
    """Deterministic child seeds addressed by an integer key path."""
    ss = np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key))
    return [int(v) for v in ss.generate_state(n, dtype=np.uint64)]


def build_target(config: RunConfig):
    spec = config.target
    if spec.kind == "random-gmm":
        seed = config.seed if spec.seed is None else spec.seed
        return generate_random_gmm(spec.n_components, spec.dim, scale_s=spec.scale,
                                   wishart_dof=spec.wishart_dof, seed=seed)
    if spec.kind == "gmm-file":
        return GaussianMixture.load_json(spec.path)
    if spec.kind == "gaussian":
        return isotropic_gaussian(spec.dim, sigma=spec.sigma)
    return DoubleWellSystem(b=spec.b, c=spec.c, d0=spec.d0, tau=spec.tau)


def build_schedule(config: RunConfig, reference_samples=None) -> NoiseSchedule:
    spec = config.schedule
    sigma_max = spec.sigma_max
    if sigma_max == "auto":
        sigma_max = 10.0 if reference_samples is None else default_sigma_max(reference_samples)
    return NoiseSchedule(
        kind=spec.kind, sigma_min=spec.sigma_min, sigma_max=float(sigma_max),
        beta_min=spec.beta_min, beta_max=spec.beta_max, cosine_offset=spec.cosine_offset,
        t_min=spec.t_min, t_max=spec.t_max,
    )


def _schedule_for_gmm(config: RunConfig, gmm: GaussianMixture) -> NoiseSchedule:
    ref = None
    if config.schedule.sigma_max == "auto":
        ref = gmm.sample(10_000, np.random.default_rng(_seed_ints(config.seed, 7)[0]))
    return build_schedule(config, ref)


def time_grid(config: RunConfig, schedule: NoiseSchedule) -> np.ndarray:
    if config.t_grid is not None:
        grid = np.asarray(config.t_grid, dtype=float)
        schedule.check_domain(grid)
        return grid
    return np.linspace(schedule.t_min, schedule.t_max, config.t_grid_num)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _sampler_config(config: RunConfig, schedule, estimator, k, seed):
    return ReverseRunConfig(
        schedule=schedule, estimator=estimator, lam=config.lam, n_steps=config.n_steps,
        k_mc=k, n_chains=config.n_chains, seed=seed, clip_c=config.clip_c,
        independent_c_batch=config.independent_c_batch, reweight_moments=config.reweight_moments,
        score_clip=config.score_clip,
    )


def _runs(config: RunConfig):
    """(estimator, K) pairs; K is irrelevant for the exact score and collapses to 0."""
    out = []
    for est in config.estimators:
        if est == "exact":
            out.append((est, 0))
        else:
            out.extend((est, k) for k in config.k_values)
    return out


def _warn_low_ess(result, k, label):
    if result.step_mean_ess is None:
        return 0
    low = int(np.sum(result.step_mean_ess < ESS_WARN_FRACTION * k))
    if low:
        log.warning("%s: mean ESS below %.0f%% of K=%d on %d of %d steps",
                    label, 100 * ESS_WARN_FRACTION, k, low, result.n_steps)
    return low


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def run_variance_profile(config: RunConfig, threads: int = 1) -> ExperimentOutput:
    gmm = build_target(config)
    schedule = _schedule_for_gmm(config, gmm)
    grid = time_grid(config, schedule)
    out = ExperimentOutput()
    for k in config.k_values:
        seeds = np.random.SeedSequence(_seed_ints(config.seed, 1, k)[0]).spawn(len(grid))

        def point(args):
            t, seed = args
            p = profile_point(gmm, schedule, float(t), config.n_xt, k, np.random.default_rng(seed))
            return summarise_profile_point(float(t), p, config.n_xt, k)

        rows = _map(point, list(zip(grid, seeds)), threads)
        cols = ProfileRow.columns()
        out.tables[f"variance_profile_K{k}"] = Table(cols, [[getattr(r, c) for c in cols] for r in rows])
        wins = sum(r.var_cvsi <= min(r.var_dsi, r.var_tsi) for r in rows)
        out.summary[f"K{k}"] = {"n_t": len(rows), "cvsi_lowest_fraction": wins / len(rows)}
    out.summary["schedule"] = schedule.kind
    return out


def run_coeff_profile(config: RunConfig, threads: int = 1) -> ExperimentOutput:
    gmm = build_target(config)
    schedule = _schedule_for_gmm(config, gmm)
    grid = time_grid(config, schedule)
    sig_g = tsm_variance("tsm-global", gmm)
    sig_m = tsm_variance("tsm-mode", gmm)
    out = ExperimentOutput()
    cols = ["t", "a", "b", "c_tilde_mean", "c_tilde_median", "c_tilde_q05", "c_tilde_q95",
            "c_star_mean", "tsm_global_c_tilde", "tsm_mode_c_tilde", "n_xt", "K"]
    for k in config.k_values:
        seeds = np.random.SeedSequence(_seed_ints(config.seed, 2, k)[0]).spawn(len(grid))

        def point(args):
            t, seed = args
            p = profile_point(gmm, schedule, float(t), config.n_xt, k, np.random.default_rng(seed),
                              include_mode=False)
            a, b = schedule.kernel(float(t))
            ct = p["c_tilde"]
            return [float(t), float(a), float(b), float(np.mean(ct)), float(np.median(ct)),
                    float(np.quantile(ct, 0.05)), float(np.quantile(ct, 0.95)), float(np.mean(p["c_star"])),
                    float(b**2 / (b**2 + a**2 * sig_g)), float(b**2 / (b**2 + a**2 * sig_m)),
                    config.n_xt, k]

        out.tables[f"coeff_profile_K{k}"] = Table(cols, _map(point, list(zip(grid, seeds)), threads))
    out.summary["tsm_global_sigma2"] = sig_g
    out.summary["tsm_mode_sigma2"] = sig_m
    return out


def run_sample(config: RunConfig, threads: int = 1) -> ExperimentOutput:
    target = build_target(config)
    is_gmm = isinstance(target, GaussianMixture)
    if is_gmm:
        schedule = _schedule_for_gmm(config, target)
    else:
        schedule = build_schedule(config, _dw4_reference(config, target).samples
                                  if config.schedule.sigma_max == "auto" else None)
    out = ExperimentOutput()
    sampler_seed = _seed_ints(config.seed, 3)[0]
    nll_rows = []

    def one(run):
        est, k = run
        result = run_sampler(_sampler_config(config, schedule, est, max(k, 1), sampler_seed), target)
        return est, k, result

    for est, k, result in _map(one, _runs(config), threads):
        tag = f"{est}_K{k}"
        d = result.samples.shape[1]
        out.tables[f"samples_{tag}"] = Table([f"x{i + 1}" for i in range(d)], result.samples.tolist())
        diag = result.diagnostics_dict()
        diag["low_ess_steps"] = _warn_low_ess(result, k, tag)
        out.json_files[f"diagnostics_{tag}"] = diag
        if is_gmm:
            value, se = nll_with_se(target, result.samples)
            nll_rows.append([est, k, value, se, result.nfe_per_chain])
    if is_gmm:
        ref = target.sample(config.n_reference, np.random.default_rng(_seed_ints(config.seed, 4)[0]))
        gt = nll(target, ref)
        out.tables["nll"] = Table(["estimator", "K", "nll", "nll_se", "nfe_per_chain"], nll_rows)
        out.summary["ground_truth_nll"] = gt
        out.summary["nll"] = {f"{r[0]}_K{r[1]}": r[2] for r in nll_rows}
    return out


def run_nll(config: RunConfig, threads: int = 1) -> ExperimentOutput:
    """NLL grid over dimensions, component counts, seeds, estimators and K.

    Every estimator sees the same mixture and sampler seed for a given
    (dim, components, seed index), so comparisons use common random numbers.
    """
    spec = config.target
    tasks = []
    for dim in config.dims:
        for n_comp in config.component_counts:
            for i in range(config.n_seeds):
                gmm_seed, run_seed, ref_seed = _seed_ints(config.seed, 5, dim, n_comp, i, n=3)
                tasks.append((dim, n_comp, i, gmm_seed, run_seed, ref_seed))

    def one(task):
        dim, n_comp, i, gmm_seed, run_seed, ref_seed = task
        gmm = generate_random_gmm(n_comp, dim, scale_s=spec.scale, wishart_dof=spec.wishart_dof, seed=gmm_seed)
        schedule = build_schedule(config, gmm.sample(10_000, np.random.default_rng(ref_seed))
                                  if config.schedule.sigma_max == "auto" else None)
        gt = nll(gmm, gmm.sample(config.n_reference, np.random.default_rng(ref_seed + 1)))
        rows = []
        for est, k in _runs(config):
            result = run_sampler(_sampler_config(config, schedule, est, max(k, 1), run_seed), gmm)
            rows.append([dim, n_comp, i, est, k, nll(gmm, result.samples), gt, result.nfe_per_chain])
        return rows

    rows = [r for chunk in _map(one, tasks, threads) for r in chunk]
    cols = ["dim", "n_components", "seed_index", "estimator", "K", "nll", "ground_truth_nll", "nfe_per_chain"]
    out = ExperimentOutput(tables={"nll": Table(cols, rows)})
    means = {}
    for r in rows:
        means.setdefault(f"d{r[0]}_N{r[1]}_{r[3]}_K{r[4]}", []).append(r[5])
    out.summary["mean_nll"] = {k: float(np.mean(v)) for k, v in means.items()}
    return out


def quadrature_posterior_moments(gmm: GaussianMixture, schedule: NoiseSchedule, t: float, x_t: float,
                                 rtol: float = 1e-12) -> tuple[float, float]:
    """Mean and variance of p(x0 | x_t) for a 1-D mixture by adaptive quadrature.

    Works directly with ``p(x0) N(x_t; a x0, b^2)`` and never touches the
    closed-form posterior, so it serves as an independent check of it.
    """
    if gmm.dim != 1:
        raise ValueError("quadrature check needs a one-dimensional mixture")
    a, b = schedule.kernel(t)
    mu = gmm.means[:, 0]
    sd = np.sqrt(gmm.covariances[:, 0, 0])
    centre, width = x_t / a, b / a
    lo = max(centre - 40 * width, float(np.min(mu - 40 * sd)))
    hi = min(centre + 40 * width, float(np.max(mu + 40 * sd)))
    if lo >= hi:  # likelihood and prior barely overlap; fall back to the prior envelope
        lo, hi = float(np.min(mu - 40 * sd)), float(np.max(mu + 40 * sd))

    log_norm = np.log(gmm.weights) - np.log(sd) - 0.5 * np.log(2 * np.pi)

    def log_f(x):
        x = np.asarray(x, dtype=float)[..., None]
        prior = logsumexp(log_norm - 0.5 * ((x - mu) / sd) ** 2, axis=-1)
        return prior - 0.5 * ((x_t - a * x[..., 0]) / b) ** 2

    grid = np.linspace(lo, hi, 4001)
    values = log_f(grid)
    shift = float(values.max())
    peak = float(grid[np.argmax(values)])
    breaks = sorted({p for p in [*mu, centre, peak] if lo < p < hi})

    def moment(power):
        val, _ = integrate.quad(lambda x: x**power * np.exp(log_f(x) - shift), lo, hi,
                                points=breaks or None, limit=500, epsabs=0.0, epsrel=rtol)
        return val

    z = moment(0)
    m1 = moment(1) / z
    # central second moment integrated directly avoids cancellation in m2 - m1^2
    var, _ = integrate.quad(lambda x: (x - m1) ** 2 * np.exp(log_f(x) - shift), lo, hi,
                            points=breaks or None, limit=500, epsabs=0.0, epsrel=rtol)
    return float(m1), float(var / z)


def run_posterior_check(config: RunConfig, threads: int = 1) -> ExperimentOutput:
    gmm = build_target(config)
    if gmm.dim != 1:
        raise ValueError("posterior-check needs a one-dimensional target (set target.dim = 1)")
    schedule = _schedule_for_gmm(config, gmm)
    grid = np.asarray(config.t_grid, float) if config.t_grid is not None else np.linspace(
        schedule.t_min, schedule.t_max, 5)
    schedule.check_domain(grid)
    sd = float(np.sqrt(gmm.covariance()[0, 0]))
    xs = config.xt_values if config.xt_values is not None else list(np.linspace(-2 * sd, 2 * sd, 5))
    rows = []
    worst = 0.0
    for t in grid:
        a, _ = schedule.kernel(float(t))
        for x_t in xs:
            post = posterior_gmm(gmm, schedule, float(t), np.array([[a * float(x_t)]]))
            mean_cf = float(post.mean()[0, 0])
            var_cf = float(post.covariance()[0, 0, 0])
            mean_q, var_q = quadrature_posterior_moments(gmm, schedule, float(t), a * float(x_t))
            err_m = abs(mean_cf - mean_q) / max(abs(mean_q), np.sqrt(var_q))
            err_v = abs(var_cf - var_q) / var_q
            worst = max(worst, err_m, err_v)
            rows.append([float(t), a * float(x_t), mean_cf, mean_q, err_m, var_cf, var_q, err_v])
    cols = ["t", "x_t", "mean_closed_form", "mean_quadrature", "mean_rel_err",
            "var_closed_form", "var_quadrature", "var_rel_err"]
    return ExperimentOutput(tables={"posterior_check": Table(cols, rows)},
                            summary={"max_rel_err": worst, "passed_1e-6": bool(worst <= 1e-6)})


def idem_errors(gmm, target, schedule, t, x_t, k, n_seeds, rng, reweight_moments=False):
    """Bias, spread and ESS of IS-TSI and IS-CVSI at fixed ``x_t`` over ``n_seeds`` repeats.

    Both estimators reuse the same proposal draws. Returns a dict keyed by
    estimator name with arrays over the ``x_t`` batch.
    """
    x_rep = np.broadcast_to(x_t, (n_seeds,) + x_t.shape)
    batch = make_is_batch(x_rep, target, schedule, t, k, rng)
    exact = exact_marginal_score(gmm, schedule, t, x_t)
    ests = {"is-tsi": idem_tsi_score(batch, target, schedule, t)}
    if k >= 2:
        ests["is-cvsi"] = cv_idem_score(batch, target, schedule, t, x_rep, reweight_moments=reweight_moments)
    out = {}
    for name, est in ests.items():
        v = est.value  # (n_seeds, n_xt, d)
        bias = v.mean(axis=0) - exact
        out[name] = {
            "bias_norm": np.linalg.norm(bias, axis=-1),
            "trace_variance": v.var(axis=0, ddof=1).sum(axis=-1) if n_seeds > 1 else np.zeros(len(x_t)),
            "mse": np.mean(np.sum((v - exact) ** 2, axis=-1), axis=0),
            "ess": np.mean(batch.effective_sample_size, axis=0),
            "c_tilde": np.mean(np.broadcast_to(est.c_tilde, v.shape[:-1]), axis=0),
        }
    return out


def run_idem_compare(config: RunConfig, threads: int = 1) -> ExperimentOutput:
    gmm = build_target(config)
    schedule = _schedule_for_gmm(config, gmm)
    grid = time_grid(config, schedule)
    cols = ["t", "K", "estimator", "bias_norm", "trace_variance", "rmse", "mean_ess", "mean_c_tilde",
            "n_seeds", "n_xt"]
    tasks = [(i, float(t), k) for i, t in enumerate(grid) for k in config.k_values]

    def one(task):
        i, t, k = task
        xt_rng = np.random.default_rng(_seed_ints(config.seed, 6, i)[0])
        x_t = diffuse_gmm(gmm, schedule, t).sample(config.n_xt, xt_rng)
        rng = np.random.default_rng(_seed_ints(config.seed, 6, i, k)[0])
        res = idem_errors(gmm, gmm, schedule, t, x_t, k, config.n_seeds, rng, config.reweight_moments)
        return [[t, k, name, float(r["bias_norm"].mean()), float(r["trace_variance"].mean()),
                 float(np.sqrt(r["mse"].mean())), float(r["ess"].mean()), float(r["c_tilde"].mean()),
                 config.n_seeds, config.n_xt] for name, r in res.items()]

    rows = [r for chunk in _map(one, tasks, threads) for r in chunk]
    low = [r for r in rows if r[6] < ESS_WARN_FRACTION * r[1]]
    if low:
        log.warning("mean ESS below %.0f%% of K in %d of %d cells", 100 * ESS_WARN_FRACTION, len(low), len(rows))
    return ExperimentOutput(tables={"idem_compare": Table(cols, rows)}, summary={"low_ess_cells": len(low)})


def _dw4_reference(config: RunConfig, system: DoubleWellSystem):
    m = config.mcmc
    mala = MalaConfig(step_size=m.step_size, n_chains=m.n_chains, burn_in=m.burn_in, thin=m.thin,
                      init_scale=m.init_scale, drift_clip=m.drift_clip)
    return reference_mcmc(system, config.n_reference, mala, np.random.default_rng(_seed_ints(config.seed, 8)[0]))


def run_dw4_distances(config: RunConfig, threads: int = 1) -> ExperimentOutput:
    system = build_target(config)
    ref = _dw4_reference(config, system)
    schedule = build_schedule(config, ref.samples)
    ref_d = interatomic_distances(system, ref.samples)
    hi = float(np.quantile(ref_d, 0.999) * 1.5)
    out = ExperimentOutput()
    hist_cols = ["bin_lo", "bin_hi", "count"]
    out.tables["distances_reference"] = Table(hist_cols, [list(r) for r in histogram(ref_d, config.histogram_bins, (0.0, hi))])
    sampler_seed, w2_seed = _seed_ints(config.seed, 9, n=2)
    runs = [(e, k) for e, k in _runs(config) if e in IS_ESTIMATORS]
    if len(runs) != len(_runs(config)):
        log.warning("dw4-distances only supports %s; other estimators are skipped", IS_ESTIMATORS)

    def one(run):
        est, k = run
        return est, k, run_sampler(_sampler_config(config, schedule, est, k, sampler_seed), system)

    rows = []
    for est, k, result in _map(one, runs, threads):
        d = interatomic_distances(system, result.samples)
        w2 = w2_distance(d, ref_d, rng=np.random.default_rng(w2_seed))
        tag = f"{est}_K{k}"
        out.tables[f"distances_{tag}"] = Table(hist_cols, [list(r) for r in histogram(d, config.histogram_bins, (0.0, hi))])
        diag = result.diagnostics_dict()
        diag["low_ess_steps"] = _warn_low_ess(result, k, tag)
        out.json_files[f"diagnostics_{tag}"] = diag
        rows.append([est, k, w2, float(np.mean(result.step_mean_ess)), result.nfe_per_chain])
    out.tables["w2"] = Table(["estimator", "K", "w2_distances", "mean_ess", "nfe_per_chain"], rows)
    out.summary.update(mala_acceptance=ref.acceptance_rate, mala_step_size=ref.step_size,
                       mala_acceptance_ok=ref.acceptance_ok, sigma_max=schedule.sigma_max,
                       w2={f"{r[0]}_K{r[1]}": r[2] for r in rows})
    return out


DRIVERS = {
    "variance-profile": run_variance_profile,
    "coeff-profile": run_coeff_profile,
    "sample": run_sample,
    "nll": run_nll,
    "posterior-check": run_posterior_check,
    "idem-compare": run_idem_compare,
    "dw4-distances": run_dw4_distances,
}


def run_experiment(config: RunConfig, threads: int = 1) -> ExperimentOutput:
    return DRIVERS[config.experiment](config, threads)
