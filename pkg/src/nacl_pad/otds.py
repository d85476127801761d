"""Negatives from the overconfident region of the embedding space.

Shell samples ``mu_j + 2 L_j u`` (covariance 4 Sigma_j) are drawn around each
component and kept only when their membership in the source component is at
most ``tau``. Kept samples become the third class of the ternary head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nacl_pad.gmm import GmmModel, membership

NEGATIVE_CLASS = 2


class EmptyNegativesError(RuntimeError):
    """No shell sample survived the membership filter for a component."""


@dataclass(frozen=True, eq=False)
class PseudoDataset:
    negatives: np.ndarray         # (n_neg, k)
    negative_source: np.ndarray   # component each negative was drawn from
    real_embeddings: np.ndarray   # (n_real, k)
    real_labels: np.ndarray       # binary
    drawn: tuple[int, int]
    kept: tuple[int, int]

    @property
    def X(self) -> np.ndarray:
        return np.vstack([self.real_embeddings, self.negatives])

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.real_labels,
                               np.full(len(self.negatives), NEGATIVE_CLASS, dtype=np.int64)])


def sample_shell(gmm: GmmModel, j: int, count: int, rng_seed=None, u=None) -> np.ndarray:
    """``count`` draws of ``mu_j + 2 L_j u``; ``u`` may be supplied directly."""
    if j not in (0, 1):
        raise ValueError(f"component must be 0 or 1, got {j}")
    if u is None:
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        u = np.random.default_rng(rng_seed).standard_normal((count, gmm.dim))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    return gmm.means[j] + 2.0 * u @ gmm.cholesky[j].T


def build_pseudo_dataset(gmm: GmmModel, embeddings, labels, m_per_component=None,
                         tau: float = 0.05, mode: str = "density_ratio",
                         rng_seed: int = 0) -> PseudoDataset:
    """Filtered shell negatives packaged with the real labeled embeddings.

    ``m_per_component`` defaults to the number of real samples of each
    component (an int applies to both, a pair sets each separately).
    """
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    Z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if m_per_component is None:
        counts = [int(np.sum(y == j)) for j in (0, 1)]
    elif np.ndim(m_per_component) == 0:
        counts = [int(m_per_component)] * 2
    else:
        counts = [int(c) for c in m_per_component]
    seeds = np.random.SeedSequence(rng_seed).spawn(2)
    kept_parts, sources, kept = [], [], []
    for j in (0, 1):
        draws = sample_shell(gmm, j, counts[j], np.random.default_rng(seeds[j]))
        keep = np.atleast_1d(membership(gmm, j, draws, mode)) <= tau
        if not keep.any():
            raise EmptyNegativesError(
                f"component {j}: 0 of {counts[j]} shell samples survived "
                f"membership <= {tau} (survival rate 0.0); tau too small or covariance degenerate")
        kept_parts.append(draws[keep])
        sources.append(np.full(int(keep.sum()), j, dtype=np.int64))
        kept.append(int(keep.sum()))
    return PseudoDataset(np.vstack(kept_parts), np.concatenate(sources), Z, y,
                         tuple(counts), tuple(kept))
