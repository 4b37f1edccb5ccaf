"""Unnormalised target densities: Gaussian mixtures and the DW-4 double well.

Points are arrays of shape ``(..., dim)``; log-densities come back with shape
``(...)`` and scores with shape ``(..., dim)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, softmax

_LOG_2PI = math.log(2.0 * math.pi)


@runtime_checkable
class TargetDensity(Protocol):
    """Anything exposing ``dim``, ``log_unnorm`` and ``score``."""

    dim: int

    def log_unnorm(self, x: np.ndarray) -> np.ndarray: ...

    def score(self, x: np.ndarray) -> np.ndarray: ...


class GaussianMixture:
    """Full-covariance Gaussian mixture with cached Cholesky factors.

    Attributes:
        weights: Mixture weights, shape ``(N,)``.
        means: Component means, shape ``(N, d)``.
        covariances: Component covariances, shape ``(N, d, d)``.
        cholesky_factors: Lower Cholesky factors of the covariances.
        log_dets: ``log det`` of each covariance.
        precisions: Inverse covariances, obtained by Cholesky solves.
    """

    def __init__(self, weights, means, covariances):
        weights = np.asarray(weights, dtype=float)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covariances = np.asarray(covariances, dtype=float)
        if covariances.ndim == 2:
            covariances = covariances[None]
        n, d = means.shape
        if weights.shape != (n,) or covariances.shape != (n, d, d):
            raise ValueError(
                f"inconsistent shapes: weights {weights.shape}, means {means.shape}, "
                f"covariances {covariances.shape}"
            )
        if np.any(weights <= 0):
            raise ValueError("mixture weights must be strictly positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {weights.sum()!r}, not 1")
        if not np.allclose(covariances, np.swapaxes(covariances, -1, -2), rtol=1e-10, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        covariances = 0.5 * (covariances + np.swapaxes(covariances, -1, -2))

        chol = np.empty_like(covariances)
        for i, cov in enumerate(covariances):
            try:
                chol[i] = linalg.cholesky(cov, lower=True)
            except linalg.LinAlgError as err:
                raise ValueError(f"covariance {i} is not positive definite") from err
        eye = np.eye(d)
        precisions = np.stack([linalg.cho_solve((L, True), eye) for L in chol])

        self.weights = weights
        self.log_weights = np.log(weights)
        self.means = means
        self.covariances = covariances
        self.cholesky_factors = chol
        self.log_dets = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
        self.precisions = 0.5 * (precisions + np.swapaxes(precisions, -1, -2))
        self.precision_means = np.einsum("nij,nj->ni", self.precisions, means)
        for arr in (self.weights, self.log_weights, self.means, self.covariances,
                    self.cholesky_factors, self.log_dets, self.precisions, self.precision_means):
            arr.setflags(write=False)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _centred(self, x: np.ndarray):
        """``x - mu_i`` and ``Sigma_i^-1 (x - mu_i)``, each of shape ``(N, M, d)``."""
        flat = np.asarray(x, dtype=float).reshape(-1, self.dim)
        diff = flat[None, :, :] - self.means[:, None, :]
        return diff, np.matmul(diff, self.precisions)

    def _component_log_prob(self, diff, prec_diff):
        quad = np.sum(diff * prec_diff, axis=-1).T  # (M, N)
        return -0.5 * (quad + self.log_dets + self.dim * _LOG_2PI)

    def component_log_prob(self, x: np.ndarray) -> np.ndarray:
        """Per-component Gaussian log-densities, shape ``(..., N)``."""
        x = np.asarray(x, dtype=float)
        out = self._component_log_prob(*self._centred(x))
        return out.reshape(x.shape[:-1] + (self.n_components,))

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_prob(x) + self.log_weights, axis=-1)

    # the mixture is normalised, so the unnormalised log-density is the log-density
    log_unnorm = log_prob

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.component_log_prob(x) + self.log_weights, axis=-1)

    def score(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        diff, prec_diff = self._centred(x)
        resp = softmax(self._component_log_prob(diff, prec_diff) + self.log_weights, axis=-1)
        # sum_i r_i Sigma_i^-1 (mu_i - x)
        out = -np.einsum("mn,nmi->mi", resp, prec_diff, optimize=True)
        return out.reshape(x.shape)

    def sample(self, n: int, rng: np.random.Generator, return_components: bool = False):
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[comps] + np.einsum("nij,nj->ni", self.cholesky_factors[comps], z)
        return (x, comps) if return_components else x

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        centred = self.means - m
        return np.einsum("n,nij->ij", self.weights, self.covariances) + np.einsum(
            "n,ni,nj->ij", self.weights, centred, centred
        )

    def total_variance(self) -> float:
        """Per-coordinate data variance ``tr(Cov[x]) / d``."""
        return float(np.trace(self.covariance()) / self.dim)

    def mode_variance(self) -> float:
        """Weight-averaged intra-component variance ``sum_i pi_i tr(Sigma_i) / d``."""
        traces = np.trace(self.covariances, axis1=-2, axis2=-1)
        return float(self.weights @ traces / self.dim)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": [cov.ravel().tolist() for cov in self.covariances],
        }

    @classmethod
    def from_dict(cls, data: dict) -> GaussianMixture:
        """Inverse of :meth:`to_dict`; covariances are row-major flattened ``d*d`` lists."""
        means = np.atleast_2d(np.asarray(data["means"], dtype=float))
        d = means.shape[1]
        covs = np.asarray(data["covariances"], dtype=float).reshape(-1, d, d)
        return cls(data["weights"], means, covs)

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_json(cls, path) -> GaussianMixture:
        return cls.from_dict(json.loads(Path(path).read_text()))


def gmm_log_density(gmm: GaussianMixture, x) -> np.ndarray:
    return gmm.log_prob(x)


def gmm_score(gmm: GaussianMixture, x) -> np.ndarray:
    return gmm.score(x)


def isotropic_gaussian(dim: int, sigma: float = 1.0, mean=None) -> GaussianMixture:
    """N(mean, sigma^2 I) as a one-component mixture."""
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float)
    return GaussianMixture([1.0], mean[None], (sigma**2 * np.eye(dim))[None])


def sample_wishart_bartlett(dof: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One draw from Wishart(dof, I) via the Bartlett decomposition."""
    if dof < dim:
        raise ValueError(f"Wishart degrees of freedom {dof} must be >= dimension {dim}")
    A = np.zeros((dim, dim))
    A[np.diag_indices(dim)] = np.sqrt(rng.chisquare(dof - np.arange(dim)))
    rows, cols = np.tril_indices(dim, k=-1)
    A[rows, cols] = rng.standard_normal(rows.size)
    return A @ A.T


def generate_random_gmm(
    n_components: int,
    dim: int,
    scale_s: float = 10.0,
    wishart_dof: int | None = None,
    seed=None,
) -> GaussianMixture:
    """Random mixture: uniform-then-normalised weights, N(0, s^2 d I) means,
    Wishart(nu, I) covariances with ``nu = 2 d`` unless given."""
    if n_components < 1 or dim < 1:
        raise ValueError("n_components and dim must be positive")
    dof = 2 * dim if wishart_dof is None else int(wishart_dof)
    if dof < dim:
        raise ValueError(f"wishart_dof={dof} < dim={dim}: Wishart density is degenerate")
    rng = np.random.default_rng(seed)
    weights = rng.uniform(size=n_components)
    weights = weights / weights.sum()
    means = rng.normal(0.0, scale_s * math.sqrt(dim), size=(n_components, dim))
    covs = np.stack([sample_wishart_bartlett(dof, dim, rng) for _ in range(n_components)])
    return GaussianMixture(weights, means, covs)


@dataclass(frozen=True)
class DoubleWellSystem:
    """DW-4: four particles in 2D with a pairwise double-well potential.

    Coordinates are laid out as row-major particle blocks:
    ``x = (x1, y1, x2, y2, x3, y3, x4, y4)``. The pair sum runs over unordered
    pairs ``i < j``; summing ordered pairs doubles the energy.
    """

    n_particles: int = 4
    space_dim: int = 2
    b: float = -4.0
    c: float = 0.9
    d0: float = 4.0
    tau: float = 1.0

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be positive for the energy to be bounded below")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def dim(self) -> int:
        return self.n_particles * self.space_dim

    def _pairs(self):
        return np.triu_indices(self.n_particles, k=1)

    def _particles(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-1] + (self.n_particles, self.space_dim))

    def pair_distances(self, x) -> np.ndarray:
        """Unordered pairwise distances, shape ``(..., n_pairs)``."""
        p = self._particles(x)
        i, j = self._pairs()
        return np.linalg.norm(p[..., i, :] - p[..., j, :], axis=-1)

    def energy(self, x) -> np.ndarray:
        r = self.pair_distances(x) - self.d0
        return (self.b * r**2 + self.c * r**4).sum(-1) / (2.0 * self.tau)

    def energy_grad(self, x) -> np.ndarray:
        p = self._particles(x)
        i, j = self._pairs()
        diff = p[..., i, :] - p[..., j, :]
        dist = np.linalg.norm(diff, axis=-1)
        r = dist - self.d0
        dphi = (2.0 * self.b * r + 4.0 * self.c * r**3) / (2.0 * self.tau)
        # a coincident pair has no radial direction; its force is set to zero
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(dist > 0, dphi / safe, 0.0)
        pair_force = coef[..., None] * diff
        grad = np.zeros_like(p)
        for k, (ii, jj) in enumerate(zip(i, j)):
            grad[..., ii, :] += pair_force[..., k, :]
            grad[..., jj, :] -= pair_force[..., k, :]
        return grad.reshape(np.shape(x))

    def log_unnorm(self, x) -> np.ndarray:
        return -self.energy(x) / self.tau

    def score(self, x) -> np.ndarray:
        return -self.energy_grad(x) / self.tau


def dw4_energy(system: DoubleWellSystem, x) -> np.ndarray:
    return system.energy(x)


def dw4_score(system: DoubleWellSystem, x) -> np.ndarray:
    return system.score(x)
