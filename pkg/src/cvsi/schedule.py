"""Noise schedules parameterised by the perturbation kernel N(a(t) x0, b(t)^2 I).

Every schedule exposes the mean scale ``a(t)`` and the noise standard deviation
``b(t)`` together with their closed-form time derivatives, from which the
forward SDE drift ``f(t) = a'/a`` and diffusion ``g(t)^2 = 2 (b/a)(a b' - a' b)``
follow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("ve-geometric", "vp-linear", "vp-cosine", "kve")
VP_KINDS = ("vp-linear", "vp-cosine")

# absorbs round-off from linspace endpoints
_DOMAIN_SLACK = 1e-12


class ScheduleDomainError(ValueError):
    """Raised when a schedule is evaluated outside [t_min, t_max]."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Perturbation-kernel schedule on ``[t_min, t_max]``.

    Attributes:
        kind: One of ``SCHEDULE_KINDS``.
        sigma_min: Noise level at ``t_min`` for the VE/KVE kinds.
        sigma_max: Noise level at ``t_max`` for the VE/KVE kinds.
        beta_min: Initial rate of the linear VP schedule.
        beta_max: Final rate of the linear VP schedule.
        cosine_offset: Offset ``s`` of the cosine VP schedule.
        t_min: Lower clipping bound; ``b(t_min) > 0`` keeps DSI finite.
        t_max: Upper clipping bound. ``None`` selects 1 for ``vp-linear``
            and 0.999 otherwise.
    """

    kind: str = "vp-linear"
    sigma_min: float = 1e-2
    sigma_max: float = 10.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    cosine_offset: float = 0.008
    t_min: float = 1e-3
    t_max: float | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.t_max is None:
            object.__setattr__(self, "t_max", 1.0 if self.kind == "vp-linear" else 0.999)
        if not 0.0 < self.t_min < 0.5:
            raise ValueError(f"t_min must lie in (0, 0.5), got {self.t_min}")
        if not 0.5 < self.t_max <= 1.0:
            raise ValueError(f"t_max must lie in (0.5, 1], got {self.t_max}")
        if self.kind in VP_KINDS:
            if not 0.0 < self.beta_min < self.beta_max:
                raise ValueError("vp-linear requires 0 < beta_min < beta_max")
            if self.kind == "vp-cosine" and self.t_max >= 1.0:
                raise ValueError("vp-cosine has a(1) = 0; use t_max < 1")
        elif not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("VE/KVE schedules require 0 < sigma_min < sigma_max")

    @property
    def is_vp(self) -> bool:
        return self.kind in VP_KINDS

    def check_domain(self, t):
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < self.t_min - _DOMAIN_SLACK):
            raise ScheduleDomainError(f"t={np.min(t_arr)!r} is below t_min={self.t_min}")
        if np.any(t_arr > self.t_max + _DOMAIN_SLACK):
            raise ScheduleDomainError(f"t={np.max(t_arr)!r} is above t_max={self.t_max}")
        return t_arr

    def kernel_with_derivatives(self, t):
        """Return ``(a, b, da/dt, db/dt)`` at ``t`` (scalar or array)."""
        t = self.check_domain(t)
        if self.kind in ("ve-geometric", "kve"):
            span = self.t_max - self.t_min
            log_ratio = math.log(self.sigma_max / self.sigma_min)
            u = (t - self.t_min) / span
            b = self.sigma_min * np.exp(u * log_ratio)
            db = b * log_ratio / span
            a = np.ones_like(b)
            da = np.zeros_like(b)
        elif self.kind == "vp-linear":
            integral = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2
            beta = self.beta_min + (self.beta_max - self.beta_min) * t
            a = np.exp(-0.5 * integral)
            da = -0.5 * beta * a
            b = np.sqrt(-np.expm1(-integral))
            db = -a * da / b
        else:
            s = self.cosine_offset
            scale = 0.5 * math.pi / (1.0 + s)
            phase = scale * (t + s)
            norm = math.cos(scale * s)
            a = np.cos(phase) / norm
            da = -scale * np.sin(phase) / norm
            b = np.sqrt(1.0 - a**2)
            db = -a * da / b
        return _maybe_scalar(a), _maybe_scalar(b), _maybe_scalar(da), _maybe_scalar(db)

    def kernel(self, t):
        a, b, _, _ = self.kernel_with_derivatives(t)
        return a, b

    def drift_diffusion(self, t):
        a, b, da, db = self.kernel_with_derivatives(t)
        f = da / a
        g2 = 2.0 * (b / a) * (a * db - da * b)
        return f, np.sqrt(np.maximum(g2, 0.0))

    def snr(self, t):
        a, b = self.kernel(t)
        return a / b


def _maybe_scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def eval_kernel(schedule: NoiseSchedule, t):
    """Mean scale ``a(t)`` and noise std ``b(t)`` of q(x_t | x_0)."""
    return schedule.kernel(t)


def drift_diffusion(schedule: NoiseSchedule, t):
    """Forward-SDE coefficients ``(f(t), g(t))`` with ``g >= 0``."""
    return schedule.drift_diffusion(t)


def default_sigma_max(samples: np.ndarray, factor: float = 1.5) -> float:
    """VE/KVE ``sigma_max`` heuristic: ``factor`` times the largest per-coordinate std."""
    samples = np.asarray(samples, dtype=float)
    return float(factor * np.max(np.std(samples, axis=0)))
