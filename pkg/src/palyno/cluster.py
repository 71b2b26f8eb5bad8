"""k-means (Euclidean), k-medoids (geodesic distances) and the elbow-ratio rule for k.

Objectives are always within-cluster sums of *squared* distances.  Cluster
labels of returned results are canonical: clusters are numbered in order of
their first member.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidDistances, InvalidK, NonMonotoneObjective, ValidationError

log = logging.getLogger(__name__)

LLOYD_MAX_ITER = 300
PAM_MAX_ROUNDS = 100
DEFAULT_RESTARTS = 8
WEAK_ELBOW_RATIO = 1.5
_RATIO_FLOOR = 1e-12


@dataclass
class Clustering:
    assignments: np.ndarray
    representatives: np.ndarray
    metric: str
    objective: float
    seed: int = None
    n_iter: int = 0
    history: list = field(default_factory=list, repr=False)

    @property
    def k(self):
        return len(self.representatives)

    @property
    def medoids(self):
        return self.representatives if self.metric == "geodesic" else None

    def representative_coords(self, coords):
        """Representative points in latent space (medoids are looked up in ``coords``)."""
        if self.metric == "geodesic":
            return np.asarray(coords)[self.representatives]
        return self.representatives

    def members(self):
        return [np.flatnonzero(self.assignments == c) for c in range(self.k)]


def _coords(points):
    return np.asarray(points.coords if hasattr(points, "coords") else points, dtype=float)


def _canonical(labels, reps):
    order = []
    for lab in labels:
        if lab not in order:
            order.append(int(lab))
    remap = np.empty(len(reps), dtype=int)
    remap[order] = np.arange(len(order))
    return remap[labels], np.asarray(reps)[order]


def _plus_plus(d2_to, n, k, rng):
    """k-means++ seeding; ``d2_to(i)`` returns squared distances from point i to all points."""
    chosen = [int(rng.integers(n))]
    closest = d2_to(chosen[0]).copy()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = next(i for i in range(n) if i not in chosen)
        chosen.append(nxt)
        closest = np.minimum(closest, d2_to(nxt))
    return chosen


def _lloyd(X, k, seed):
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    init = _plus_plus(lambda i: ((X - X[i]) ** 2).sum(axis=1), n, k, rng)
    centroids = X[init].copy()
    labels = None
    history = []
    it = 0
    for it in range(1, LLOYD_MAX_ITER + 1):
        d2 = cdist(X, centroids, "sqeuclidean")
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            cost = d2[np.arange(n), new]
            cost[counts[new] <= 1] = -1.0
            far = int(np.argmax(cost))
            counts[new[far]] -= 1
            new[far] = empty
            counts[empty] = 1
            centroids[empty] = X[far]
        obj = float(cdist(X, centroids, "sqeuclidean")[np.arange(n), new].sum())
        if history and obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"Lloyd objective increased: {history[-1]} -> {obj}")
        history.append(obj)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centroids = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
    labels, centroids = _canonical(labels, centroids)
    obj = float(((X - centroids[labels]) ** 2).sum())
    history.append(obj)
    return Clustering(labels, centroids, "euclidean", obj, seed, it, history)


def _best(runs):
    best = runs[0]
    for r in runs[1:]:
        if r.objective < best.objective:
            best = r
    return best


def _restarts(fn, seed, restarts, n_jobs):
    seeds = [seed + r for r in range(max(1, restarts))]
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            runs = list(pool.map(fn, seeds))
    else:
        runs = [fn(s) for s in seeds]
    return _best(runs)


def kmeans_euclidean(points, k: int, seed: int = 42, restarts: int = DEFAULT_RESTARTS, n_jobs: int = 1) -> Clustering:
    """Lloyd's k-means with k-means++ seeding; best of ``restarts`` seeds ``seed, seed+1, ...``.

    Empty clusters are refilled with the point farthest from its centroid.
    """
    X = _coords(points)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} outside 1..{n}")
    return _restarts(lambda s: _lloyd(X, k, s), seed, restarts, n_jobs)


def _check_distances(dist):
    dist = np.asarray(dist, dtype=float)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise InvalidDistances(f"distance matrix must be square, got {dist.shape}")
    if not np.all(np.isfinite(dist)):
        raise InvalidDistances("distance matrix has non-finite entries")
    if not np.allclose(dist, dist.T, rtol=0, atol=1e-9):
        raise InvalidDistances("distance matrix is not symmetric")
    if np.any(np.abs(np.diag(dist)) > 1e-9) or np.any(dist < 0):
        raise InvalidDistances("distances must be non-negative with a zero diagonal")
    return dist


def _assign(D2, medoids):
    # medoids kept sorted, so argmin ties go to the smaller medoid index
    sub = D2[:, medoids]
    labels = np.argmin(sub, axis=1)
    return labels, float(sub[np.arange(D2.shape[0]), labels].sum())


def _pam(D2, k, seed):
    n = D2.shape[0]
    rng = np.random.default_rng(seed)
    medoids = sorted(_plus_plus(lambda i: D2[i], n, k, rng))
    labels, obj = _assign(D2, medoids)
    history = [obj]
    rounds = 0
    for rounds in range(1, PAM_MAX_ROUNDS + 1):
        sub = D2[:, medoids]
        nearest = sub[np.arange(n), labels]
        second = np.partition(sub, 1, axis=1)[:, 1] if k > 1 else np.full(n, np.inf)
        is_med = np.zeros(n, dtype=bool)
        is_med[medoids] = True
        best_obj, best_swap = obj, None
        for c in range(k):
            base = np.where(labels == c, second, nearest)
            cand = np.minimum(base[:, None], D2).sum(axis=0)
            cand[is_med] = np.inf
            h = int(np.argmin(cand))
            if cand[h] < best_obj - 1e-12 * max(1.0, abs(best_obj)):
                best_obj, best_swap = float(cand[h]), (c, h)
        if best_swap is None:
            break
        c, h = best_swap
        medoids = sorted(medoids[:c] + medoids[c + 1 :] + [h])
        labels, obj = _assign(D2, medoids)
        if obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"PAM objective increased: {history[-1]} -> {obj}")
        history.append(obj)
    # among equally good medoids of a cluster, prefer the smallest index
    for c in range(k):
        mem = np.flatnonzero(labels == c)
        if mem.size == 0:
            continue
        costs = D2[np.ix_(mem, mem)].sum(axis=0)
        target = costs.min()
        slack = 1e-12 * max(1.0, target)
        medoids[c] = int(mem[np.flatnonzero(costs <= target + slack)[0]])
    medoids = sorted(medoids)
    labels, obj = _assign(D2, medoids)
    labels, reps = _canonical(labels, np.asarray(medoids))
    history.append(obj)
    return Clustering(labels, reps.astype(int), "geodesic", obj, seed, rounds, history)


def kmeans_geodesic(dist, k: int, seed: int = 42, restarts: int = DEFAULT_RESTARTS, n_jobs: int = 1) -> Clustering:
    """k-medoids (PAM swap search) on a precomputed distance matrix.

    Seeding is k-means++ on the distances; each round applies the single
    best improving medoid/non-medoid swap.  The objective is the sum of
    squared distances to the assigned medoid.
    """
    dist = _check_distances(dist)
    n = dist.shape[0]
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} outside 1..{n}")
    D2 = dist**2
    return _restarts(lambda s: _pam(D2, k, s), seed, restarts, n_jobs)


def within_cluster_variance(data, clustering: Clustering) -> float:
    """Sum of squared distances to representatives.

    ``data`` is the point matrix for Euclidean clusterings and the distance
    matrix for geodesic ones.
    """
    labels = np.asarray(clustering.assignments)
    if labels.size and (labels.min() < 0 or labels.max() >= clustering.k):
        raise ValidationError("cluster index out of range")
    if clustering.metric == "geodesic":
        dist = np.asarray(data, dtype=float)
        if dist.shape != (labels.size, labels.size):
            raise ValidationError("distance matrix does not match the clustering")
        total = 0.0
        for i, lab in enumerate(labels):
            total += dist[i, clustering.representatives[lab]] ** 2
        return float(total)
    X = _coords(data)
    if X.shape[0] != labels.size:
        raise ValidationError("point count does not match the clustering")
    total = 0.0
    for c in range(clustering.k):
        diff = X[labels == c] - clustering.representatives[c]
        total += float((diff * diff).sum())
    return total


@dataclass
class KSelectionReport:
    k_values: list
    W: list
    decreases: dict
    ratios: dict
    chosen_k: int
    weak_elbow: bool
    max_ratio: float

    def to_dict(self):
        return {
            "k_values": self.k_values,
            "W": self.W,
            "decreases": {str(k): v for k, v in self.decreases.items()},
            "ratios": {str(k): v for k, v in self.ratios.items()},
            "chosen_k": self.chosen_k,
            "weak_elbow": self.weak_elbow,
            "max_ratio": self.max_ratio,
        }


def select_k_elbow(
    data,
    k_min: int = 2,
    k_max: int = 12,
    metric: str = "euclidean",
    seed: int = 42,
    restarts: int = DEFAULT_RESTARTS,
    n_jobs: int = 1,
) -> KSelectionReport:
    """Choose k maximizing ``D(k) / D(k+1)`` with ``D(k) = W(k-1) - W(k)``.

    Clusters for every k in ``k_min-1 .. k_max+1``; ties go to the smaller
    k.  ``weak_elbow`` is set when the best ratio is below 1.5.
    """
    if metric == "euclidean":
        n = _coords(data).shape[0]
        run = lambda k, r: kmeans_euclidean(data, k, seed, r, n_jobs)  # noqa: E731
    elif metric == "geodesic":
        n = _check_distances(data).shape[0]
        run = lambda k, r: kmeans_geodesic(data, k, seed, r, n_jobs)  # noqa: E731
    else:
        raise ValidationError(f"unknown metric {metric!r}")
    if k_min < 2 or k_max > n - 1 or k_max < k_min + 1:
        raise InvalidK(f"need 2 <= k_min < k_max <= n-1, got {k_min}..{k_max} with n={n}")
    ks = list(range(k_min - 1, k_max + 2))
    W = []
    for k in ks:
        w = run(k, restarts).objective
        if W and w > W[-1] + 1e-9 * max(1.0, W[-1]):
            log.info("W(%d) > W(%d); rerunning with %d restarts", k, k - 1, 4 * restarts)
            w = min(w, run(k, 4 * restarts).objective)
            if w > W[-1] + 1e-9 * max(1.0, W[-1]):
                raise NonMonotoneObjective(f"W({k})={w} exceeds W({k - 1})={W[-1]}")
        W.append(w)
    dec = {k: W[i - 1] - W[i] for i, k in enumerate(ks) if i > 0}
    ratios = {k: dec[k] / max(dec[k + 1], _RATIO_FLOOR) for k in range(k_min, k_max + 1)}
    chosen = max(ratios, key=lambda k: (ratios[k], -k))
    best = ratios[chosen]
    return KSelectionReport(ks, W, dec, ratios, chosen, best < WEAK_ELBOW_RATIO, best)


def save_assignments(path, ids, clustering):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "cluster"])
        for id_, lab in zip(ids, clustering.assignments):
            w.writerow([id_, int(lab)])
