"""Two-component labeled Gaussian mixture fitted by per-class MAP estimates.

Component 0 models bona-fide embeddings, component 1 attacks. Since labels
are known, the components decouple and no EM iterations are needed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

MODES = ("density_ratio", "posterior")
_MAX_JITTER = 1e-2


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray      # (2,)
    means: np.ndarray        # (2, k)
    covariances: np.ndarray  # (2, k, k), biased
    cholesky: np.ndarray     # (2, k, k), lower factor of cov + jitter * I
    jitter: np.ndarray       # (2,), jitter actually applied per component

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _check(self, j, z):
        if j not in (0, 1):
            raise ValueError(f"component must be 0 or 1, got {j}")
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise ValueError(f"expected embedding dimension {self.dim}, got {z.shape[-1]}")
        return z


def _cholesky_with_jitter(cov, jitter, component):
    k = cov.shape[0]
    eye = np.eye(k)
    current = jitter
    while True:
        try:
            return linalg.cholesky(cov + current * eye, lower=True), current
        except linalg.LinAlgError:
            current = max(current * 10.0, 1e-10)
            if current > _MAX_JITTER:
                raise linalg.LinAlgError(
                    f"component {component}: covariance not positive definite "
                    f"even with jitter {_MAX_JITTER}") from None


def fit_map(embeddings, labels, jitter: float = 1e-6) -> GmmModel:
    """Weights = class frequency, means = class mean, covariance divided by |S_j|."""
    Z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if jitter < 0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise ValueError(f"embeddings {Z.shape} do not match {y.shape[0]} labels")
    n, k = Z.shape
    weights, means, covs, chols, used = [], [], [], [], []
    for j in (0, 1):
        members = Z[y == j]
        if members.shape[0] == 0:
            name = "bona-fide" if j == 0 else "attack"
            raise ValueError(f"class {j} ({name}) is absent; cannot fit component {j}")
        mu = members.mean(axis=0)
        centered = members - mu
        cov = centered.T @ centered / members.shape[0]
        cov = 0.5 * (cov + cov.T)
        chol, applied = _cholesky_with_jitter(cov, jitter, j)
        weights.append(members.shape[0] / n)
        means.append(mu)
        covs.append(cov)
        chols.append(chol)
        used.append(applied)
    return GmmModel(np.array(weights), np.array(means), np.array(covs),
                    np.array(chols), np.array(used))


def mahalanobis_sq(gmm: GmmModel, j: int, z) -> np.ndarray:
    """Squared Mahalanobis distance under the jittered covariance."""
    z = gmm._check(j, z)
    diff = np.atleast_2d(z) - gmm.means[j]
    sol = linalg.solve_triangular(gmm.cholesky[j], diff.T, lower=True, check_finite=False)
    out = np.sum(sol * sol, axis=0)
    return out[0] if z.ndim == 1 else out


def log_component_density(gmm: GmmModel, j: int, z) -> np.ndarray:
    k = gmm.dim
    log_det = 2.0 * np.sum(np.log(np.diag(gmm.cholesky[j])))
    return -0.5 * (k * math.log(2.0 * math.pi) + log_det + mahalanobis_sq(gmm, j, z))


def component_density(gmm: GmmModel, j: int, z) -> np.ndarray:
    return np.exp(log_component_density(gmm, j, z))


def membership(gmm: GmmModel, j: int, z, mode: str = "density_ratio") -> np.ndarray:
    """How strongly ``z`` belongs to component ``j``, in [0, 1].

    ``density_ratio`` is N_j(z) / N_j(mu_j) = exp(-m^2 / 2) for Mahalanobis
    distance m. ``posterior`` is the mixture responsibility of component j;
    when both log-densities are -inf it falls back to the prior weight.
    """
    if mode == "density_ratio":
        return np.exp(-0.5 * mahalanobis_sq(gmm, j, z))
    if mode != "posterior":
        raise ValueError(f"unknown membership mode {mode!r}; expected one of {MODES}")
    logs = np.stack([np.log(gmm.weights[c]) + np.atleast_1d(log_component_density(gmm, c, z))
                     for c in (0, 1)])
    top = logs.max(axis=0)
    dead = ~np.isfinite(top)
    with np.errstate(invalid="ignore"):
        post = np.exp(logs[j] - top) / np.exp(logs - top).sum(axis=0)
    if dead.any():
        logger.warning("posterior membership: both densities vanish for %d point(s); "
                       "using the prior weight", int(dead.sum()))
        post = np.where(dead, gmm.weights[j], post)
    return post[0] if np.ndim(z) == 1 else post


def to_arrays(gmm: GmmModel) -> dict[str, np.ndarray]:
    return {"weights": gmm.weights, "means": gmm.means, "covariances": gmm.covariances,
            "cholesky": gmm.cholesky, "jitter": gmm.jitter}


def from_arrays(arrays) -> GmmModel:
    return GmmModel(*(np.asarray(arrays[k]) for k in
                      ("weights", "means", "covariances", "cholesky", "jitter")))
