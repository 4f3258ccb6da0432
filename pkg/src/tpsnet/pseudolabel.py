"""K-means pseudo-labels and momentum-updated class prototypes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True, eq=False)
class PseudoLabelAssignment:
    labels: np.ndarray
    domain_id: int = 0
    epoch: int = 0

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def check(self, num_categories: int) -> None:
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= num_categories):
            raise ValueError(f"pseudo-labels outside [0, {num_categories})")


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # Fewer distinct points than clusters: pick any point not yet used.
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(len(free))])
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return x[chosen].copy()


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float):
    k = len(centroids)
    for _ in range(max_iter):
        d = _sq_dists(x, centroids)
        labels = np.argmin(d, axis=1)
        new = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for c in range(k):
            if counts[c]:
                new[c] = x[labels == c].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # Re-seed each empty cluster from the point farthest from its centroid.
            own = d[np.arange(len(x)), labels].copy()
            for c in empty:
                far = int(np.argmax(own))
                new[c] = x[far]
                own[far] = -1.0
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift < tol and not len(empty):
            break
    d = _sq_dists(x, centroids)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(x)), labels].sum())
    return labels, centroids, inertia


def kmeans_cluster(features: np.ndarray, K: int, seed: int, n_init: int = 10, max_iter: int = 300,
                   tol: float = 1e-6, domain_id: int = 0) -> tuple[PseudoLabelAssignment, np.ndarray]:
    """Seeded k-means++ / Lloyd clustering, best of ``n_init`` restarts by inertia.

    Lloyd iterations stop once no centroid moves more than ``tol``.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if K < 1:
        raise ValueError("K must be positive")
    if n < K:
        raise ValueError(f"cannot form {K} clusters from {n} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, cents, inertia = _lloyd(x, _kmeans_pp(x, K, rng), max_iter, tol)
        if best is None or inertia < best[2]:
            best = (labels, cents, inertia)
    labels, cents, _ = best
    return PseudoLabelAssignment(labels, domain_id), cents


def inertia(features: np.ndarray, labels: np.ndarray) -> float:
    x = np.asarray(features, dtype=np.float64)
    total = 0.0
    for c in np.unique(labels):
        pts = x[labels == c]
        total += float(((pts - pts.mean(0)) ** 2).sum())
    return total


@dataclass(eq=False)
class PrototypeBank:
    """C x d unit-norm prototypes of one domain."""

    prototypes: np.ndarray
    momentum: float = 0.9
    domain_id: int = 0

    def __post_init__(self):
        self.prototypes = np.array(self.prototypes, dtype=np.float64)
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")

    @property
    def num_categories(self) -> int:
        return self.prototypes.shape[0]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.momentum, self.domain_id)

    def update(self, category: int, feature: np.ndarray, m: float | None = None) -> None:
        """In-place momentum step on one row followed by re-normalization."""
        m = self.momentum if m is None else m
        raw = momentum_mix(self.prototypes[category], feature, m)
        norm = np.linalg.norm(raw)
        if norm == 0.0 or not np.isfinite(norm):
            warnings.warn(f"zero-norm prototype update for category {category}; keeping previous value",
                          stacklevel=2)
            return
        self.prototypes[category] = raw / norm


def momentum_mix(prototype: np.ndarray, feature: np.ndarray, m: float) -> np.ndarray:
    """Un-normalized ``m * prototype + (1 - m) * feature``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    return m * np.asarray(prototype, dtype=np.float64) + (1.0 - m) * np.asarray(feature, dtype=np.float64)


def init_prototypes(features: np.ndarray, assignment: PseudoLabelAssignment, num_categories: int | None = None,
                    momentum: float = 0.9) -> PrototypeBank:
    x = np.asarray(features, dtype=np.float64)
    labels = assignment.labels
    C = int(labels.max()) + 1 if num_categories is None else num_categories
    assignment.check(C)
    protos = np.zeros((C, x.shape[1]))
    for c in range(C):
        members = x[labels == c]
        if not len(members):
            raise ValueError(f"pseudo-label {c} has no members; cannot initialize its prototype")
        mean = members.mean(axis=0)
        protos[c] = mean / np.linalg.norm(mean)
    return PrototypeBank(protos, momentum, assignment.domain_id)


def align_to_prompts(cluster_labels: np.ndarray, prompt_labels: np.ndarray, C: int) -> np.ndarray:
    """Rename cluster ids so they agree as often as possible with prompt re-pairing ids.

    Uses a maximum-overlap one-to-one matching, so the result is a
    relabelling of ``cluster_labels`` and the partition itself is unchanged.
    """
    overlap = np.zeros((C, C), dtype=np.int64)
    np.add.at(overlap, (np.asarray(cluster_labels), np.asarray(prompt_labels)), 1)
    rows, cols = linear_sum_assignment(-overlap)
    mapping = np.empty(C, dtype=np.int64)
    mapping[rows] = cols
    return mapping[np.asarray(cluster_labels)]


def momentum_update(bank: PrototypeBank, category: int, feature: np.ndarray, m: float) -> PrototypeBank:
    out = bank.copy()
    out.update(category, feature, m)
    return out


def reassign_by_prototype(features: np.ndarray, bank: PrototypeBank, epoch: int = 0) -> PseudoLabelAssignment:
    """Nearest prototype by dot product; ``argmax`` keeps the lowest index on ties."""
    sims = np.asarray(features, dtype=np.float64) @ bank.prototypes.T
    return PseudoLabelAssignment(np.argmax(sims, axis=1), bank.domain_id, epoch)
