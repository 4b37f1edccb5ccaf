import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cvsi import NoiseSchedule, isotropic_gaussian
from cvsi.estimators import InsufficientSamplesError
from cvsi.gmm_analytic import exact_marginal_score
from cvsi.importance import (
    InvalidInputError,
    cv_idem_score,
    effective_sample_size,
    idem_proposal,
    idem_tsi_score,
    make_is_batch,
    softmax_weights,
)

finite_logs = arrays(np.float64, st.integers(1, 30), elements=st.floats(-700, 700))


@given(logs=finite_logs, shift=st.floats(-1e3, 1e3))
def test_softmax_weights_normalised_and_shift_invariant(logs, shift):
    w = softmax_weights(logs)
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(softmax_weights(logs + shift), w, atol=1e-12)


@given(logs=finite_logs)
def test_ess_bounds(logs):
    ess = effective_sample_size(softmax_weights(logs))
    assert 1.0 - 1e-9 <= ess <= logs.size + 1e-9


def test_ess_examples():
    assert effective_sample_size(np.full(8, 1 / 8)) == pytest.approx(8.0)
    assert effective_sample_size(np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0)


def test_non_finite_log_density_rejected():
    with pytest.raises(InvalidInputError):
        softmax_weights(np.array([0.0, np.nan]))
    with pytest.raises(InvalidInputError):
        softmax_weights(np.array([0.0, np.inf]))


def test_proposal_moments(rng):
    s = NoiseSchedule("vp-linear")
    a, b = s.kernel(0.5)
    x_t = np.array([0.4, -1.0])
    draws = idem_proposal(x_t, s, 0.5, 200_000, rng)
    np.testing.assert_allclose(draws.mean(0), x_t / a, atol=5 * b / a / np.sqrt(200_000) * 2)
    np.testing.assert_allclose(draws.std(0), b / a, rtol=0.01)
    with pytest.raises(ValueError):
        idem_proposal(x_t, s, 0.5, 0, rng)


def test_is_estimates_converge_for_gaussian(rng):
    s = NoiseSchedule("vp-linear")
    g = isotropic_gaussian(2, 1.0)
    x_t = np.array([[0.5, -0.3]])
    batch = make_is_batch(x_t, g, s, 0.5, 200_000, rng)
    exact = exact_marginal_score(g, s, 0.5, x_t)
    np.testing.assert_allclose(idem_tsi_score(batch, g, s, 0.5).value, exact, atol=0.02)
    np.testing.assert_allclose(cv_idem_score(batch, g, s, 0.5).value, exact, atol=0.02)


def test_cv_with_zero_coefficient_equals_plain_is(gmm2d, rng):
    s = NoiseSchedule("vp-linear")
    batch = make_is_batch(np.zeros((3, 2)), gmm2d, s, 0.6, 32, rng)
    plain = idem_tsi_score(batch, gmm2d, s, 0.6)
    cv = cv_idem_score(batch, gmm2d, s, 0.6, c_tilde=0.0)
    np.testing.assert_allclose(cv.value, plain.value, rtol=1e-13)


def test_cv_idem_reports_ess_and_coefficients(gmm2d, rng):
    s = NoiseSchedule("vp-linear")
    batch = make_is_batch(np.zeros((3, 2)), gmm2d, s, 0.6, 32, rng)
    est = cv_idem_score(batch, gmm2d, s, 0.6)
    assert est.ess.shape == (3,)
    assert np.all((est.ess >= 1) & (est.ess <= 32))
    assert np.shape(est.c_tilde) == (3,)
    reweighted = cv_idem_score(batch, gmm2d, s, 0.6, reweight_moments=True)
    assert not np.allclose(reweighted.c_tilde, est.c_tilde)


def test_cv_idem_needs_two_samples(gmm2d, rng):
    s = NoiseSchedule("vp-linear")
    batch = make_is_batch(np.zeros(2), gmm2d, s, 0.6, 1, rng)
    with pytest.raises(InsufficientSamplesError):
        cv_idem_score(batch, gmm2d, s, 0.6)
    idem_tsi_score(batch, gmm2d, s, 0.6)
