"""Closed-form diffused marginals and posteriors for Gaussian-mixture targets.

Under the kernel N(a x0, b^2 I) each component (mu, Sigma) diffuses to
(a mu, a^2 Sigma + b^2 I), and conditioning on x_t gives a Gaussian mixture
posterior whose components follow the linear-Gaussian (Kalman) update in
information form: precision Sigma^-1 + (a/b)^2 I.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, softmax

from .schedule import NoiseSchedule
from .targets import GaussianMixture

_LOG_2PI = math.log(2.0 * math.pi)


class DiffusedGmm(GaussianMixture):
    """The time-t marginal q_t of a Gaussian-mixture target."""

    def __init__(self, gmm: GaussianMixture, t: float, a: float, b: float):
        eye = np.eye(gmm.dim)
        super().__init__(gmm.weights, a * gmm.means, a**2 * gmm.covariances + b**2 * eye)
        self.t, self.a, self.b = t, a, b


def diffuse_gmm(gmm: GaussianMixture, schedule: NoiseSchedule, t: float) -> DiffusedGmm:
    a, b = schedule.kernel(t)
    return DiffusedGmm(gmm, t, a, b)


class PosteriorGmm:
    """Gaussian-mixture posterior q(x0 | x_t), possibly for a batch of x_t.

    Attributes:
        weights: Posterior component weights, shape ``(..., N)``.
        log_weights: Their logarithms.
        means: Component means ``nu^i(t)``, shape ``(..., N, d)``.
        precision_cholesky: Lower Cholesky factors of the component
            precisions ``Sigma^-1 + (a/b)^2 I``, shape ``(N, d, d)``; shared
            across the batch because they do not depend on x_t.
    """

    def __init__(self, log_weights, means, precision_cholesky, t=None):
        self.log_weights = np.asarray(log_weights, dtype=float)
        self.weights = np.exp(self.log_weights)
        self.means = np.asarray(means, dtype=float)
        self.precision_cholesky = np.asarray(precision_cholesky, dtype=float)
        self.t = t

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    @property
    def n_components(self) -> int:
        return self.means.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return self.means.shape[:-2]

    @property
    def covariances(self) -> np.ndarray:
        """Component covariances ``Gamma^i(t)``, shape ``(N, d, d)``."""
        eye = np.eye(self.dim)
        covs = np.stack([linalg.cho_solve((L, True), eye) for L in self.precision_cholesky])
        return 0.5 * (covs + np.swapaxes(covs, -1, -2))

    def log_dets(self) -> np.ndarray:
        """``log det Gamma^i``."""
        return -2.0 * np.log(np.diagonal(self.precision_cholesky, axis1=-2, axis2=-1)).sum(-1)

    def mean(self) -> np.ndarray:
        return np.einsum("...n,...ni->...i", self.weights, self.means)

    def covariance(self) -> np.ndarray:
        """Mixture covariance of the posterior, shape ``(..., d, d)``."""
        m = self.mean()
        centred = self.means - m[..., None, :]
        within = np.einsum("...n,nij->...ij", self.weights, self.covariances)
        between = np.einsum("...n,...ni,...nj->...ij", self.weights, centred, centred)
        return within + between

    def _projections(self, x0: np.ndarray):
        """``x0 - nu_i`` and ``L_i^T (x0 - nu_i)`` laid out as ``(N, M, d)``.

        ``M`` runs over ``batch + (K,)`` in C order.
        """
        x0 = np.asarray(x0, dtype=float)
        means = np.moveaxis(self.means, -2, 0)  # (N,) + batch + (d,)
        diff = x0[None] - means[..., None, :]
        diff = diff.reshape(self.n_components, -1, self.dim)
        # row-vector form: (L^T v)^T = v^T L
        return diff, np.matmul(diff, self.precision_cholesky)

    def component_log_prob(self, x0: np.ndarray) -> np.ndarray:
        """Per-component log-densities at ``x0`` of shape ``batch + (K, d)``."""
        x0 = np.asarray(x0, dtype=float)
        _, proj = self._projections(x0)
        quad = np.sum(proj * proj, axis=-1).T
        out = -0.5 * (quad + self.log_dets() + self.dim * _LOG_2PI)
        return out.reshape(x0.shape[:-1] + (self.n_components,))

    def log_prob(self, x0: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_prob(x0) + self.log_weights[..., None, :], axis=-1)

    def score(self, x0: np.ndarray) -> np.ndarray:
        """``grad_{x0} log q(x0 | x_t)`` for ``x0`` of shape ``batch + (K, d)``."""
        x0 = np.asarray(x0, dtype=float)
        _, proj = self._projections(x0)
        quad = np.sum(proj * proj, axis=-1).T
        log_comp = -0.5 * (quad + self.log_dets() + self.dim * _LOG_2PI)
        log_comp = log_comp.reshape(x0.shape[:-1] + (self.n_components,))
        resp = softmax(log_comp + self.log_weights[..., None, :], axis=-1)
        resp = resp.reshape(-1, self.n_components)
        # P (x0 - nu) = L L^T (x0 - nu); as rows: proj @ L^T
        prec_diff = np.matmul(proj, np.swapaxes(self.precision_cholesky, -1, -2))
        out = -np.einsum("mn,nmi->mi", resp, prec_diff, optimize=True)
        return out.reshape(x0.shape)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Ancestral samples, shape ``batch + (n, d)``."""
        if n < 1:
            raise ValueError("need at least one posterior sample")
        batch = self.batch_shape
        weights = self.weights.reshape(-1, self.n_components)
        means = self.means.reshape(-1, self.n_components, self.dim)
        m = weights.shape[0]
        cdf = np.cumsum(weights, axis=-1)
        cdf[:, -1] = 1.0
        u = rng.uniform(size=(m, n))
        comps = (u[..., None] > cdf[:, None, :]).sum(-1)
        z = rng.standard_normal((m, n, self.dim))
        out = np.take_along_axis(means, comps[..., None], axis=1).copy()
        for i in range(self.n_components):
            mask = comps == i
            if not mask.any():
                continue
            # x = nu + L^-T z has covariance (L L^T)^-1 = Gamma
            out[mask] += linalg.solve_triangular(
                self.precision_cholesky[i], z[mask].T, lower=True, trans="T", check_finite=False
            ).T
        return out.reshape(batch + (n, self.dim))


def posterior_gmm(
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    t: float,
    x_t: np.ndarray,
    diffused: DiffusedGmm | None = None,
) -> PosteriorGmm:
    """Exact posterior q(x0 | x_t) for ``x_t`` of shape ``(d,)`` or ``(..., d)``."""
    a, b = schedule.kernel(t)
    x_t = np.asarray(x_t, dtype=float)
    diffused = diffuse_gmm(gmm, schedule, t) if diffused is None else diffused
    gamma2 = (a / b) ** 2
    eye = np.eye(gmm.dim)
    prec_chol = np.stack([linalg.cholesky(P + gamma2 * eye, lower=True) for P in gmm.precisions])

    flat = x_t.reshape(-1, gmm.dim)
    means = np.empty((flat.shape[0], gmm.n_components, gmm.dim))
    for i, L in enumerate(prec_chol):
        rhs = (a / b**2) * flat + gmm.precision_means[i]
        means[:, i] = linalg.cho_solve((L, True), rhs.T, check_finite=False).T
    log_w = diffused.component_log_prob(flat) + gmm.log_weights
    log_w = log_w - logsumexp(log_w, axis=-1, keepdims=True)
    batch = x_t.shape[:-1]
    return PosteriorGmm(
        log_w.reshape(batch + (gmm.n_components,)),
        means.reshape(batch + (gmm.n_components, gmm.dim)),
        prec_chol,
        t=t,
    )


def exact_marginal_score(gmm: GaussianMixture, schedule: NoiseSchedule, t: float, x_t) -> np.ndarray:
    """Ground-truth ``grad log q_t(x_t)``."""
    return diffuse_gmm(gmm, schedule, t).score(x_t)


def sample_posterior(post: PosteriorGmm, n: int, rng: np.random.Generator) -> np.ndarray:
    return post.sample(n, rng)


def sample_marginal(gmm: GaussianMixture, schedule: NoiseSchedule, t: float, n: int, rng) -> np.ndarray:
    """Draw ``x_t ~ q_t`` by ancestral sampling of the diffused mixture."""
    return diffuse_gmm(gmm, schedule, t).sample(n, rng)
