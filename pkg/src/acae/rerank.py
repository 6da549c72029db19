"""k-reciprocal re-ranking baseline.

Operates on squared Euclidean distances of unit-norm features (d2 = 2 - 2s
for cosine similarity s). Rank lists include the point itself at position
zero; the reciprocal set of p at depth k is every point q among p's k
nearest neighbours that also lists p among its own k nearest. The set is
expanded with half-depth reciprocal sets of its members when two thirds of
such a candidate set is already present. Sets are encoded as sparse weight
vectors (exponential in the negative distance, normalised to sum one),
smoothed by averaging over each point's top-k2 neighbours, and compared by
Jaccard distance. The final distance blends the original and Jaccard terms:

    final = blend * original + (1 - blend) * jaccard

so blend = 1 returns the original distances unchanged.
"""
from __future__ import annotations

import warnings

import numpy as np

from .linalg import as_matrix


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    a2 = np.sum(a * a, axis=1)[:, None]
    b2 = np.sum(b * b, axis=1)[None, :]
    return np.maximum(a2 + b2 - 2.0 * (a @ b.T), 0.0)


def k_reciprocal_rerank(query_feats, gallery_feats, k1: int = 20, k2: int = 6,
                        blend: float = 0.3) -> np.ndarray:
    """Re-ranked (n_query, n_gallery) distance matrix.

    ``k1`` bounds the reciprocal neighbourhood depth, ``k2`` the local
    smoothing depth (k1 > k2 >= 1), ``blend`` the weight on the original
    distance. Depths exceeding the point count are clamped with a warning.
    """
    query_feats = as_matrix(query_feats)
    gallery_feats = as_matrix(gallery_feats)
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend weight must lie in [0, 1]")
    if k2 < 1 or k1 <= k2:
        raise ValueError("need k1 > k2 >= 1")

    n_q = query_feats.shape[0]
    feats = np.vstack([query_feats, gallery_feats])
    total = feats.shape[0]
    if k1 + 1 > total:
        warnings.warn(f"k1={k1} exceeds the {total}-point set; clamping")
        k1 = max(total - 1, 1)
    if k2 > k1:
        warnings.warn(f"k2={k2} exceeds k1={k1}; clamping")
        k2 = k1

    dist = squared_distances(feats, feats)
    original = dist[:n_q, n_q:].copy()
    if blend == 1.0:
        return original

    initial_rank = np.argsort(dist, axis=1, kind="stable")

    half = int(np.around(k1 / 2.0))
    rows = np.arange(total)[:, None]
    nbr_k1 = np.zeros((total, total), dtype=bool)
    nbr_k1[rows, initial_rank[:, : k1 + 1]] = True
    recip_k1 = nbr_k1 & nbr_k1.T
    nbr_half = np.zeros((total, total), dtype=bool)
    nbr_half[rows, initial_rank[:, : half + 1]] = True
    recip_half = nbr_half & nbr_half.T
    half_sizes = recip_half.sum(axis=1)

    encodings = np.zeros((total, total))
    for i in range(total):
        mask = recip_k1[i].copy()
        for cand in np.flatnonzero(recip_k1[i]):
            if (recip_half[cand] & recip_k1[i]).sum() > (2.0 / 3.0) * half_sizes[cand]:
                mask |= recip_half[cand]
        idx = np.flatnonzero(mask)
        weights = np.exp(-dist[i, idx])
        encodings[i, idx] = weights / weights.sum()

    if k2 > 1:
        encodings = encodings[initial_rank[:, :k2]].mean(axis=1)

    # rows of `encodings` each sum to one, so sum(max) = 2 - sum(min)
    jaccard = np.zeros((n_q, total))
    for i in range(n_q):
        min_sum = np.minimum(encodings[i], encodings).sum(axis=1)
        jaccard[i] = 1.0 - min_sum / (2.0 - min_sum)

    return blend * original + (1.0 - blend) * jaccard[:, n_q:]
