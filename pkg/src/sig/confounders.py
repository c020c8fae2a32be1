"""Confounder dictionary construction and the attention expectation.

Link embeddings from the training split are clustered and each cluster's
mean becomes one dictionary row, standing in for one confounder type.
The clustering backend is pluggable; the shipped one is k-means++ with
Lloyd iterations, which satisfies the only contract consumers rely on:
every dictionary row is the mean of its cluster's members.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ClusterError(ValueError):
    pass


@dataclass
class ConfounderDictionary:
    """k x l centroid matrix plus the member count behind each row."""

    centroids: np.ndarray
    sizes: np.ndarray

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(x: np.ndarray, centroids: np.ndarray,
              x_sq: np.ndarray) -> np.ndarray:
    """Squared distances (n, k) via the expanded form; floored at 0."""
    d = x_sq[:, None] - 2.0 * (x @ centroids.T) + (centroids**2).sum(axis=1)
    np.maximum(d, 0.0, out=d)
    return d


def kmeans(x: np.ndarray, k: int, max_iters: int = 100,
           rng: np.random.Generator | None = None,
           objective_history: list | None = None
           ) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding followed by Lloyd iterations.

    Runs until the assignment reaches a fixpoint or ``max_iters`` passes.
    Empty clusters are repaired by stealing the farthest point from the
    largest cluster. Deterministic for a fixed generator state. When
    ``objective_history`` is given, the post-assignment objective of each
    Lloyd iteration is appended to it.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ClusterError(f"k must be in [1, {n}], got {k}")
    if rng is None:
        rng = np.random.default_rng(0)
    x_sq = (x**2).sum(axis=1)

    # k-means++: first centroid uniform, then D^2-weighted draws
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = x[int(rng.integers(n))]
        else:
            r = rng.uniform(0.0, total)
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
            centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    assign = np.full(n, -1, dtype=np.intp)
    for _ in range(max_iters):
        dist = _sq_dists(x, centroids, x_sq)
        new_assign = dist.argmin(axis=1)

        for j in range(k):  # repair empties before accepting the assignment
            if not np.any(new_assign == j):
                sizes = np.bincount(new_assign, minlength=k)
                big = int(sizes.argmax())
                members = np.flatnonzero(new_assign == big)
                far = members[dist[members, big].argmax()]
                new_assign[far] = j
                centroids[j] = x[far]

        if objective_history is not None:
            objective_history.append(
                float(((x - centroids[new_assign]) ** 2).sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            centroids[j] = x[assign == j].mean(axis=0)
    return assign, centroids


def build_dictionary(assignments: np.ndarray, x: np.ndarray) -> ConfounderDictionary:
    """Row i = mean of cluster i's member rows."""
    assignments = np.asarray(assignments)
    k = int(assignments.max()) + 1
    rows = np.empty((k, x.shape[1]))
    sizes = np.empty(k, dtype=np.int64)
    for j in range(k):
        members = x[assignments == j]
        if len(members) == 0:
            raise ClusterError(f"cluster {j} is empty")
        rows[j] = members.mean(axis=0)
        sizes[j] = len(members)
    return ConfounderDictionary(centroids=rows, sizes=sizes)


def confounder_expectation(q: Tensor, dictionary: ConfounderDictionary,
                           dict_w: Tensor, query_w: Tensor) -> Tensor:
    """Attention-weighted expectation over dictionary rows.

    ``alpha = softmax((W1 D)^T W2 q / sqrt(|q|))`` and the expectation is
    ``sum_i alpha_i D[i]``, a convex combination of the centroids.
    """
    two_d = q.ndim == 2
    q2 = q if two_d else ad.reshape(q, (1, q.shape[0]))
    qdim = q2.shape[1]
    if query_w.shape[0] != qdim:
        raise ad.ShapeError(
            f"query width {qdim} does not match projection {query_w.shape}")
    d_const = Tensor(dictionary.centroids)
    proj_d = ad.matmul(d_const, dict_w)            # (k, m)
    proj_q = ad.matmul(q2, query_w)                # (B, m)
    logits = ad.scale(ad.matmul(proj_q, ad.transpose(proj_d)), 1.0 / np.sqrt(qdim))
    alpha = ad.softmax(logits, axis=-1)            # (B, k)
    e = ad.matmul(alpha, d_const)                  # (B, l)
    return e if two_d else ad.reshape(e, (e.shape[1],))


def lloyd_objective(x: np.ndarray, assignments: np.ndarray,
                    centroids: np.ndarray) -> float:
    return float(((x - centroids[assignments]) ** 2).sum())
