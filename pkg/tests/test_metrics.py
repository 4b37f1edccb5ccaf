import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from cvsi import NoiseSchedule, isotropic_gaussian
from cvsi.metrics import (
    MalaConfig,
    ProfileRow,
    histogram,
    interatomic_distances,
    nll,
    nll_with_se,
    profile_point,
    reference_mcmc,
    variance_profile,
    w2_distance,
)
from cvsi.targets import DoubleWellSystem


def test_nll_of_standard_normal(rng):
    g = isotropic_gaussian(1)
    x = g.sample(200_000, rng)
    value, se = nll_with_se(g, x)
    assert value == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=5 * se)
    assert nll(g, np.zeros((1, 1))) == pytest.approx(0.5 * math.log(2 * math.pi))


def test_w2_examples(rng):
    a = rng.normal(size=(200, 2))
    assert w2_distance(a, a) == 0.0
    v = np.array([3.0, -4.0])
    assert w2_distance(a, a + v) == pytest.approx(5.0, abs=1e-10)
    x, y = np.array([0.0, 5.0, 1.0]), np.array([2.0, -1.0, 7.0])
    assert w2_distance(x, y) == pytest.approx(np.sqrt(np.mean((np.sort(x) - np.sort(y)) ** 2)), abs=1e-12)


@given(seed=st.integers(0, 10_000))
def test_w2_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(loc=rng.normal(size=2), size=(30, 2)) for _ in range(3))
    ab = w2_distance(a, b)
    assert ab == pytest.approx(w2_distance(b, a), abs=1e-12)
    assert ab <= w2_distance(a, c) + w2_distance(c, b) + 1e-12


def test_w2_subsamples_and_checks_dimensions(rng):
    a, b = rng.normal(size=(3000, 1)), rng.normal(size=(2500, 1))
    assert w2_distance(a, b, rng=np.random.default_rng(0)) == w2_distance(a, b, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        w2_distance(np.zeros((3, 2)), np.zeros((3, 3)))


def test_interatomic_distances():
    sys = DoubleWellSystem()
    sq = np.array([[0, 0, 4, 0, 4, 4, 0, 4]], dtype=float)
    np.testing.assert_allclose(np.sort(interatomic_distances(sys, sq)), [4, 4, 4, 4, 4 * 2**0.5, 4 * 2**0.5])
    perm = sq.reshape(4, 2)[[2, 0, 3, 1]].reshape(1, 8)
    np.testing.assert_allclose(np.sort(interatomic_distances(sys, perm)), np.sort(interatomic_distances(sys, sq)))
    np.testing.assert_array_equal(interatomic_distances(sys, np.zeros((1, 8))), 0.0)


def test_histogram_rows():
    rows = histogram([0.1, 0.2, 0.9], bins=2, range=(0.0, 1.0))
    assert rows == [(0.0, 0.5, 2), (0.5, 1.0, 1)]


def test_mala_standard_normal(rng):
    res = reference_mcmc(isotropic_gaussian(1), 20_000, MalaConfig(n_chains=50, burn_in=500, thin=10), rng)
    x = res.samples[:, 0]
    se = 1 / np.sqrt(len(x)) * 3  # inflated for residual autocorrelation
    assert abs(x.mean()) < 5 * se
    assert abs(x.var() - 1) < 5 * np.sqrt(2 / len(x)) * 3
    assert res.acceptance_ok


def test_mala_deterministic():
    cfg = MalaConfig(n_chains=4, burn_in=20)
    a = reference_mcmc(isotropic_gaussian(2), 40, cfg, np.random.default_rng(3)).samples
    b = reference_mcmc(isotropic_gaussian(2), 40, cfg, np.random.default_rng(3)).samples
    np.testing.assert_array_equal(a, b)


def test_mala_warns_on_bad_acceptance():
    cfg = MalaConfig(step_size=50.0, n_chains=4, burn_in=0, adapt=False)
    with pytest.warns(RuntimeWarning):
        res = reference_mcmc(isotropic_gaussian(2), 100, cfg, np.random.default_rng(0))
    assert not res.acceptance_ok


class DoubleWell1D:
    dim = 1

    def log_unnorm(self, x):
        return -((x[..., 0] ** 2 - 1) ** 2) * 2.0

    def score(self, x):
        return -8.0 * x * (x**2 - 1)


@pytest.mark.slow
def test_mala_detailed_balance_double_well():
    target = DoubleWell1D()
    cfg = MalaConfig(step_size=0.2, n_chains=200, burn_in=2000, thin=2, init_scale=1.0)
    x = reference_mcmc(target, 1_000_000, cfg, np.random.default_rng(1)).samples[:, 0]
    edges = np.linspace(-2.5, 2.5, 101)
    counts, _ = np.histogram(x, edges)
    z, _ = integrate.quad(lambda u: np.exp(target.log_unnorm(np.array([u]))), -np.inf, np.inf)
    probs = np.array([
        integrate.quad(lambda u: np.exp(target.log_unnorm(np.array([u]))), lo, hi)[0] / z
        for lo, hi in zip(edges[:-1], edges[1:])
    ])
    tv = 0.5 * np.sum(np.abs(counts / len(x) - probs))
    assert tv < 0.02


def test_profile_point_and_rows(gmm2d):
    s = NoiseSchedule("vp-linear")
    p = profile_point(gmm2d, s, 0.5, n_xt=4, K=64, rng=np.random.default_rng(0))
    assert p["var_cvsi"].shape == (4,)
    assert np.all(p["var_cvsi"] <= np.minimum(p["var_dsi"], p["var_tsi"]) * (1 + 1e-9))
    rows = variance_profile(gmm2d, s, [0.2, 0.8], n_xt=4, K=32, rng=1)
    assert [r.t for r in rows] == [0.2, 0.8]
    assert ProfileRow.columns()[0] == "t"
    assert variance_profile(gmm2d, s, [0.2, 0.8], n_xt=4, K=32, rng=1) == rows
