"""Dimensionality reduction: PCA and Isomap (k-NN graph, shortest paths, classical MDS).

Both reductions use the same sign convention for eigenvectors: each
component is flipped so its largest-magnitude entry is positive, which makes
outputs reproducible across linear-algebra backends.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial.distance import cdist

from .errors import DisconnectedGraph, DisconnectedInput, InvalidDistances, ValidationError
from .ingest import EmbeddingSet, read_matrix_csv, write_matrix_csv

log = logging.getLogger(__name__)

DUPLICATE_EDGE_WEIGHT = 1e-12


@dataclass
class ReductionModel:
    method: str
    d_final: int
    eigenvalues: np.ndarray
    mean: np.ndarray = None
    components: np.ndarray = None
    train_ids: list = field(default_factory=list)
    k_nn: int = None
    dropped_ids: list = field(default_factory=list)
    negative_eigenmass: float = 0.0

    def describe(self):
        """JSON-ready summary (no large arrays)."""
        out = {
            "method": self.method,
            "d_final": self.d_final,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "n_train": len(self.train_ids),
        }
        if self.method == "isomap":
            out.update(
                k_nn=self.k_nn,
                dropped_ids=list(self.dropped_ids),
                negative_eigenmass=float(self.negative_eigenmass),
            )
        return out


@dataclass
class LatentCoords:
    ids: list
    coords: np.ndarray
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim != 2 or self.coords.shape[0] != len(self.ids):
            raise ValidationError(f"{len(self.ids)} ids for coords of shape {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValidationError("latent coordinates must be finite")

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]

    def subset(self, index):
        index = list(index)
        return LatentCoords([self.ids[i] for i in index], self.coords[index], dict(self.model))


def save_latent(path, latent):
    write_matrix_csv(path, latent.ids, latent.coords, prefix="c")


def load_latent(path):
    ids, coords, _ = read_matrix_csv(path)
    return LatentCoords(ids, coords, {"source": str(path)})


def _fix_signs(vectors):
    """Flip columns so each column's largest-magnitude entry is positive (first wins ties)."""
    vectors = np.array(vectors, dtype=float)
    if vectors.size == 0:
        return vectors
    pivot = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivot, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


# PCA ---------------------------------------------------------------------


def pca_fit(X: EmbeddingSet, d_final: int = 3) -> ReductionModel:
    """Principal components of the centered data.

    Eigenvalues are covariance eigenvalues (divisor ``n - 1``); rank-deficient
    data simply yields trailing zeros.
    """
    data = X.vectors
    n, D = data.shape
    if n < 2:
        raise ValidationError("PCA needs at least 2 points")
    if not 1 <= d_final <= min(n - 1, D):
        raise ValidationError(f"d_final={d_final} outside 1..{min(n - 1, D)}")
    mean = data.mean(axis=0)
    _, s, vt = np.linalg.svd(data - mean, full_matrices=False)
    components = _fix_signs(vt[:d_final].T).T
    eig = s[:d_final] ** 2 / (n - 1)
    return ReductionModel(
        method="pca",
        d_final=d_final,
        eigenvalues=eig,
        mean=mean,
        components=components,
        train_ids=list(X.ids),
    )


def pca_transform(model: ReductionModel, X: EmbeddingSet) -> LatentCoords:
    if model.method != "pca":
        raise ValidationError(f"pca_transform needs a PCA model, got {model.method}")
    if X.dim != model.mean.shape[0]:
        raise ValidationError(f"dimension mismatch: model D={model.mean.shape[0]}, data D={X.dim}")
    coords = (X.vectors - model.mean) @ model.components.T
    return LatentCoords(list(X.ids), coords, model.describe())


# Isomap ------------------------------------------------------------------


@dataclass
class NeighborGraph:
    """Undirected weighted graph; ``edges[i]`` is a sorted list of (j, weight)."""

    n: int
    edges: list
    k_nn: int

    def to_sparse(self):
        rows, cols, vals = [], [], []
        for i, nbrs in enumerate(self.edges):
            for j, w in nbrs:
                rows.append(i)
                cols.append(j)
                vals.append(w)
        return csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    def edge_set(self):
        return {(i, j): w for i, nbrs in enumerate(self.edges) for j, w in nbrs if i < j}


def build_knn_graph(X, k_nn: int = 10) -> NeighborGraph:
    """Directed k-NN (Euclidean, ties to the smaller index), symmetrized by union.

    Exact duplicate points get edge weight 1e-12 instead of 0 and a warning.
    """
    data = X.vectors if isinstance(X, EmbeddingSet) else np.asarray(X, dtype=float)
    n = data.shape[0]
    if not 1 <= k_nn < n:
        raise ValidationError(f"k_nn={k_nn} outside 1..{n - 1}")
    dist = cdist(data, data)
    np.fill_diagonal(dist, np.inf)
    adj = [dict() for _ in range(n)]
    n_dup = 0
    for i in range(n):
        for j in np.argsort(dist[i], kind="stable")[:k_nn]:
            j = int(j)
            w = float(dist[i, j])
            if w == 0.0:
                w = DUPLICATE_EDGE_WEIGHT
                n_dup += 1
            adj[i][j] = w
            adj[j][i] = w
    if n_dup:
        warnings.warn(
            f"{n_dup} zero-distance neighbor edges (duplicate points); "
            f"weight {DUPLICATE_EDGE_WEIGHT} substituted",
            stacklevel=2,
        )
    edges = [sorted(a.items()) for a in adj]
    return NeighborGraph(n=n, edges=edges, k_nn=k_nn)


def graph_shortest_paths(g: NeighborGraph) -> np.ndarray:
    """All-pairs shortest path lengths; ``inf`` between components."""
    dist = dijkstra(g.to_sparse(), directed=False)
    dist = np.minimum(dist, dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def _mds(dist, d_final):
    dist = np.asarray(dist, dtype=float)
    n = dist.shape[0]
    if dist.ndim != 2 or dist.shape[1] != n:
        raise InvalidDistances(f"distance matrix must be square, got {dist.shape}")
    if not np.all(np.isfinite(dist)):
        raise DisconnectedInput("distance matrix has non-finite entries (disconnected graph?)")
    if not np.allclose(dist, dist.T, rtol=0, atol=1e-9):
        raise InvalidDistances("distance matrix is not symmetric")
    if np.any(np.abs(np.diag(dist)) > 1e-9):
        raise InvalidDistances("distance matrix has a non-zero diagonal")
    if not 1 <= d_final <= n:
        raise ValidationError(f"d_final={d_final} outside 1..{n}")
    sq = dist**2
    row = sq.mean(axis=1)
    b = -0.5 * (sq - row[:, None] - row[None, :] + sq.mean())
    b = 0.5 * (b + b.T)
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    total = np.abs(evals).sum()
    neg = float(-evals[evals < 0].sum() / total) if total > 0 else 0.0
    top = np.maximum(evals[:d_final], 0.0)
    vecs = _fix_signs(evecs[:, :d_final])
    return vecs * np.sqrt(top), top, neg


def classical_mds(dist, d_final: int) -> np.ndarray:
    """Embed a distance matrix via the top eigenpairs of ``-1/2 J D^2 J``.

    Negative eigenvalues are clamped to zero.
    """
    return _mds(dist, d_final)[0]


def isomap_fit_transform(
    X: EmbeddingSet, d_final: int = 3, k_nn: int = 10, disconnect_policy: str = "error"
) -> LatentCoords:
    """Isomap embedding of ``X``.

    ``disconnect_policy`` is ``"error"`` (raise :class:`DisconnectedGraph`) or
    ``"largest"`` (keep the largest connected component; ties go to the
    component holding the smallest index, and dropped ids are recorded).
    """
    if disconnect_policy not in ("error", "largest"):
        raise ValidationError(f"unknown disconnect policy {disconnect_policy!r}")
    graph = build_knn_graph(X, k_nn)
    n_comp, comp = connected_components(graph.to_sparse(), directed=False)
    dropped = []
    keep = np.arange(X.n)
    if n_comp > 1:
        sizes = np.bincount(comp)
        if disconnect_policy == "error":
            raise DisconnectedGraph(sorted(sizes.tolist(), reverse=True))
        # component labels follow first-visit order, so argmax picks the one with the smallest index on ties
        biggest = int(np.argmax(sizes))
        keep = np.flatnonzero(comp == biggest)
        dropped = [X.ids[i] for i in np.flatnonzero(comp != biggest)]
        log.info("isomap: dropped %d points outside the largest component", len(dropped))
        X = X.subset([X.ids[i] for i in keep])
    # every k-NN edge stays inside its component, so the subgraph distances are exact
    dist = graph_shortest_paths(graph)[np.ix_(keep, keep)]
    coords, eig, neg = _mds(dist, d_final)
    log.info("isomap: discarded negative eigenmass %.3g", neg)
    model = ReductionModel(
        method="isomap",
        d_final=d_final,
        eigenvalues=eig,
        train_ids=list(X.ids),
        k_nn=k_nn,
        dropped_ids=dropped,
        negative_eigenmass=neg,
    )
    return LatentCoords(list(X.ids), coords, model.describe())


def reduce(X: EmbeddingSet, method="pca", d_final=3, k_nn=10, disconnect_policy="error"):
    """Fit and apply a reduction; returns ``LatentCoords``."""
    if method == "pca":
        return pca_transform(pca_fit(X, d_final), X)
    if method == "isomap":
        return isomap_fit_transform(X, d_final, k_nn, disconnect_policy)
    raise ValidationError(f"unknown reduction method {method!r}")
