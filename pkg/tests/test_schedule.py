import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cvsi.schedule import (
    SCHEDULE_KINDS,
    NoiseSchedule,
    ScheduleDomainError,
    default_sigma_max,
    drift_diffusion,
    eval_kernel,
)

kinds = st.sampled_from(SCHEDULE_KINDS)
unit = st.floats(0.02, 0.97)


def test_vp_linear_closed_form():
    s = NoiseSchedule("vp-linear", beta_min=0.1, beta_max=20.0)
    t = 0.37
    integral = 0.1 * t + 0.5 * 19.9 * t**2
    a, b = eval_kernel(s, t)
    assert a == pytest.approx(math.exp(-0.5 * integral), rel=1e-14)
    assert b == pytest.approx(math.sqrt(1 - math.exp(-integral)), rel=1e-14)


def test_vp_linear_drift_and_diffusion_are_beta():
    s = NoiseSchedule("vp-linear")
    for t in (0.01, 0.5, 1.0):
        beta = 0.1 + 19.9 * t
        f, g = drift_diffusion(s, t)
        assert f == pytest.approx(-0.5 * beta, rel=1e-12)
        assert g**2 == pytest.approx(beta, rel=1e-10)


def test_ve_geometric_endpoints_and_zero_drift():
    s = NoiseSchedule("ve-geometric", sigma_min=0.01, sigma_max=10.0)
    assert s.kernel(s.t_min) == pytest.approx((1.0, 0.01))
    assert s.kernel(s.t_max) == pytest.approx((1.0, 10.0))
    f, g = s.drift_diffusion(0.4)
    b, db = s.kernel_with_derivatives(0.4)[1::2]
    assert f == 0.0
    assert g**2 == pytest.approx(2 * b * db)


def test_kve_matches_ve_geometric_kernel():
    ve, kve = NoiseSchedule("ve-geometric"), NoiseSchedule("kve")
    t = np.linspace(ve.t_min, ve.t_max, 9)
    np.testing.assert_allclose(kve.kernel(t), ve.kernel(t))


def test_default_t_max():
    assert NoiseSchedule("vp-linear").t_max == 1.0
    assert NoiseSchedule("vp-cosine").t_max == 0.999
    assert NoiseSchedule("ve-geometric").t_max == 0.999


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind="nope"),
        dict(kind="vp-cosine", t_max=1.0),
        dict(kind="ve-geometric", sigma_min=1.0, sigma_max=0.5),
        dict(kind="vp-linear", t_min=0.0),
        dict(kind="vp-linear", beta_min=5.0, beta_max=1.0),
    ],
)
def test_invalid_schedules_rejected(kwargs):
    with pytest.raises(ValueError):
        NoiseSchedule(**kwargs)


def test_out_of_domain_names_bound():
    s = NoiseSchedule("vp-linear")
    with pytest.raises(ScheduleDomainError, match="t_min"):
        s.kernel(0.0)
    with pytest.raises(ScheduleDomainError, match="t_max"):
        s.kernel(1.5)


@given(kind=kinds, t=unit)
def test_derivatives_match_finite_differences(kind, t):
    s = NoiseSchedule(kind)
    t = s.t_min + t * (s.t_max - s.t_min)
    h = 1e-6
    a, b, da, db = s.kernel_with_derivatives(t)
    (a_p, b_p), (a_m, b_m) = s.kernel(t + h), s.kernel(t - h)
    assert da == pytest.approx((a_p - a_m) / (2 * h), rel=1e-5, abs=1e-7)
    assert db == pytest.approx((b_p - b_m) / (2 * h), rel=1e-5, abs=1e-7)


@given(kind=kinds, t=unit, sigma0=st.floats(0.1, 5.0))
def test_forward_variance_ode(kind, t, sigma0):
    # Var(x_t) = a^2 s0^2 + b^2 must satisfy dV/dt = 2 f V + g^2
    s = NoiseSchedule(kind)
    t = s.t_min + t * (s.t_max - s.t_min)
    a, b, da, db = s.kernel_with_derivatives(t)
    f, g = s.drift_diffusion(t)
    v = a**2 * sigma0**2 + b**2
    dv = 2 * a * da * sigma0**2 + 2 * b * db
    assert dv == pytest.approx(2 * f * v + g**2, rel=1e-9, abs=1e-9)


@given(kind=kinds)
def test_noise_increases_and_signal_decreases(kind):
    s = NoiseSchedule(kind)
    t = np.linspace(s.t_min, s.t_max, 50)
    a, b = s.kernel(t)
    assert np.all(np.diff(b) > 0)
    assert np.all(np.diff(a) <= 0)
    assert np.all(s.snr(t)[:-1] > s.snr(t)[1:])


@pytest.mark.parametrize("kind", ["vp-linear", "vp-cosine"])
def test_vp_kinds_preserve_unit_variance(kind):
    a, b = NoiseSchedule(kind).kernel(np.linspace(0.01, 0.99, 20))
    np.testing.assert_allclose(a**2 + b**2, 1.0, rtol=1e-12)


def test_default_sigma_max_is_scaled_max_std(rng):
    x = rng.normal(size=(1000, 3)) * np.array([1.0, 4.0, 2.0])
    assert default_sigma_max(x) == pytest.approx(1.5 * x.std(axis=0).max())
