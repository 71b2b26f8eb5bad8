"""Pullback metrics on the latent space and discrete geodesics.

A smooth map ``f: R^d -> R^D`` (a decoder back into embedding space, or an
analytic chart) induces the metric ``G(z) = J(z)^T J(z) + eps * I`` on its
domain.  Curves are discretized into ``N`` segments; the discrete energy is

    E = N * sum_i dz_i^T G(mid_i) dz_i,   dz_i = z_{i+1} - z_i

and geodesics are found by a fixed-point iteration on its stationarity
condition (see :func:`solve_geodesic`).
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lstsq, solveh_banded
from scipy.spatial.distance import pdist

from .errors import Diverged, SingularFit, ValidationError

log = logging.getLogger(__name__)

DEFAULT_SEGMENTS = 64
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 500
DEFAULT_EPS_G = 1e-9
DEFAULT_RIDGE = 1e-6
DEFAULT_MAX_CENTERS = 200


def _batch(z):
    z = np.asarray(z, dtype=float)
    return z[None, :] if z.ndim == 1 else z, z.ndim == 1


class DifferentiableMap:
    """Base class for maps ``R^d -> R^D`` with a Jacobian.

    Subclasses implement the batched ``_evaluate(Z)`` (P x D) and
    ``_jacobian(Z)`` (P x D x d).  ``pullback`` and ``pullback_gradient`` have
    generic implementations that subclasses may override with closed forms.
    """

    dim_in: int
    dim_out: int

    def evaluate(self, z):
        Z, single = _batch(z)
        out = self._evaluate(Z)
        return out[0] if single else out

    def jacobian(self, z):
        Z, single = _batch(z)
        out = self._jacobian(Z)
        return out[0] if single else out

    def pullback(self, Z):
        """``J^T J`` at each row of ``Z``; shape (P, d, d)."""
        J = self._jacobian(np.asarray(Z, dtype=float))
        return np.einsum("pDi,pDj->pij", J, J)

    def pullback_gradient(self, Z, U, step=1e-5):
        """Row p, entry k: ``U[p]^T (d/dz_k J^T J)(Z[p]) U[p]``, by central differences."""
        Z = np.asarray(Z, dtype=float)
        U = np.asarray(U, dtype=float)
        P, d = Z.shape
        h = step * np.maximum(1.0, np.abs(Z))
        out = np.empty((P, d))
        for k in range(d):
            e = np.zeros(d)
            e[k] = 1.0
            hk = h[:, k : k + 1]
            Gp = self.pullback(Z + hk * e)
            Gm = self.pullback(Z - hk * e)
            qp = np.einsum("pi,pij,pj->p", U, Gp, U)
            qm = np.einsum("pi,pij,pj->p", U, Gm, U)
            out[:, k] = (qp - qm) / (2 * hk[:, 0])
        return out


class IdentityMap(DifferentiableMap):
    def __init__(self, dim):
        self.dim_in = self.dim_out = dim

    def _evaluate(self, Z):
        return Z.copy()

    def _jacobian(self, Z):
        return np.broadcast_to(np.eye(self.dim_in), (Z.shape[0], self.dim_in, self.dim_in)).copy()

    def pullback_gradient(self, Z, U, step=None):
        return np.zeros_like(np.asarray(Z, dtype=float))


class LinearMap(DifferentiableMap):
    """``z -> A z + offset`` with ``A`` of shape (D, d)."""

    def __init__(self, A, offset=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.dim_out, self.dim_in = self.A.shape
        self.offset = np.zeros(self.dim_out) if offset is None else np.asarray(offset, dtype=float)

    def _evaluate(self, Z):
        return Z @ self.A.T + self.offset

    def _jacobian(self, Z):
        return np.broadcast_to(self.A, (Z.shape[0],) + self.A.shape).copy()

    def pullback_gradient(self, Z, U, step=None):
        return np.zeros_like(np.asarray(Z, dtype=float))


class SphereChart(DifferentiableMap):
    """Polar/azimuth chart ``(theta, phi) -> (sin t cos p, sin t sin p, cos t)`` of the unit sphere."""

    dim_in = 2
    dim_out = 3

    def _evaluate(self, Z):
        t, p = Z[:, 0], Z[:, 1]
        return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=1)

    def _jacobian(self, Z):
        t, p = Z[:, 0], Z[:, 1]
        st, ct, sp, cp = np.sin(t), np.cos(t), np.sin(p), np.cos(p)
        J = np.empty((Z.shape[0], 3, 2))
        J[:, :, 0] = np.stack([ct * cp, ct * sp, -st], axis=1)
        J[:, :, 1] = np.stack([-st * sp, st * cp, np.zeros_like(t)], axis=1)
        return J

    def pullback_gradient(self, Z, U, step=None):
        # G = diag(1, sin^2 t): only d/dtheta is non-zero
        Z = np.asarray(Z, dtype=float)
        U = np.asarray(U, dtype=float)
        out = np.zeros_like(Z)
        out[:, 0] = np.sin(2 * Z[:, 0]) * U[:, 1] ** 2
        return out


@dataclass
class RBFDecoder(DifferentiableMap):
    """Gaussian RBF regression ``f(z) = sum_j w_j phi_j(z) + bias``.

    ``phi_j(z) = exp(-|z - c_j|^2 / (2 sigma^2))``.
    """

    centers: np.ndarray
    weights: np.ndarray
    sigma: float
    ridge: float
    bias: np.ndarray
    train_rmse: float = float("nan")
    _gram: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError("RBF bandwidth must be positive")
        self.dim_in = self.centers.shape[1]
        self.dim_out = self.weights.shape[1]
        self._gram = self.weights @ self.weights.T
        # per-thread memo of the last basis evaluation; a solver sweep queries
        # the same midpoints for the metric, its gradient and the energy
        self._memo = threading.local()

    def _phi(self, Z):
        r = Z[:, None, :] - self.centers[None, :, :]
        phi = np.exp(-np.einsum("pmi,pmi->pm", r, r) / (2 * self.sigma**2))
        return r, phi

    def _basis_grad(self, Z):
        key = (Z.shape, Z.tobytes())
        last = getattr(self._memo, "last", None)
        if last is not None and last[0] == key:
            return last[1]
        r, phi = self._phi(Z)
        out = (r, phi, -phi[:, :, None] * r / self.sigma**2)
        self._memo.last = (key, out)
        return out

    def _evaluate(self, Z):
        return self._phi(Z)[1] @ self.weights + self.bias

    def _jacobian(self, Z):
        A = self._basis_grad(Z)[2]
        return np.einsum("mD,pmi->pDi", self.weights, A)

    def pullback(self, Z):
        # J^T J = A^T (W W^T) A, independent of the ambient dimension
        A = self._basis_grad(np.asarray(Z, dtype=float))[2]
        KA = np.matmul(self._gram, A)
        return np.matmul(A.transpose(0, 2, 1), KA)

    def pullback_gradient(self, Z, U, step=None):
        Z = np.asarray(Z, dtype=float)
        U = np.asarray(U, dtype=float)
        r, phi, A = self._basis_grad(Z)
        s2 = self.sigma**2
        Au = np.einsum("pmi,pi->pm", A, U)
        v = Au @ self._gram
        ru = np.einsum("pmi,pi->pm", r, U)
        H = phi[:, :, None] * (r * ru[:, :, None] / s2**2 - U[:, None, :] / s2)
        return 2.0 * np.einsum("pm,pmk->pk", v, H)

    def describe(self):
        return {
            "kind": "rbf",
            "n_centers": int(self.centers.shape[0]),
            "sigma": float(self.sigma),
            "ridge": float(self.ridge),
            "train_rmse": float(self.train_rmse),
            "dim_in": int(self.dim_in),
            "dim_out": int(self.dim_out),
        }


def rbf_design(Z, centers, sigma):
    d2 = ((np.asarray(Z)[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2 * sigma**2))


def fit_rbf_decoder(latent, ambient, m=None, sigma=None, ridge=DEFAULT_RIDGE, seed=0):
    """Fit an RBF decoder from latent coordinates back to the ambient embeddings.

    Centers are k-means centers of the latent points (the points themselves
    when ``m == n``).  ``sigma`` defaults to the median pairwise latent
    distance.  The bias is fixed to the ambient column mean and the weights
    solve ``min |Phi w - (Y - bias)|^2 + ridge |w|^2``.
    """
    from .cluster import kmeans_euclidean

    missing = set(latent.ids) - set(ambient.ids)
    if missing:
        raise ValidationError(f"{len(missing)} latent ids missing from the embeddings")
    Z = latent.coords
    Y = ambient.subset(latent.ids).vectors
    n = Z.shape[0]
    m = min(n, DEFAULT_MAX_CENTERS) if m is None else int(m)
    if not 1 <= m <= n:
        raise ValidationError(f"number of centers m={m} outside 1..{n}")
    if ridge < 0:
        raise ValidationError("ridge must be >= 0")
    if sigma is None:
        sigma = float(np.median(pdist(Z))) if n > 1 else 1.0
        if sigma <= 0:
            sigma = 1.0
    if m == n:
        centers = Z.copy()
    else:
        centers = kmeans_euclidean(latent, m, seed=seed, restarts=1).representatives
    phi = rbf_design(Z, centers, sigma)
    bias = Y.mean(axis=0)
    target = Y - bias
    if ridge > 0:
        design = np.vstack([phi, np.sqrt(ridge) * np.eye(m)])
        target = np.vstack([target, np.zeros((m, Y.shape[1]))])
    else:
        design = phi
    weights, _, rank, _ = lstsq(design, target)
    if rank < m:
        raise SingularFit(f"RBF system is rank {rank} < {m} with ridge={ridge}; use ridge > 0")
    resid = phi @ weights + bias - Y
    rmse = float(np.sqrt(np.mean(resid**2)))
    log.info("rbf decoder: m=%d sigma=%.4g ridge=%.3g rmse=%.4g", m, sigma, ridge, rmse)
    return RBFDecoder(centers, weights, float(sigma), float(ridge), bias, rmse)


def jacobian_check(fmap, probes, step=1e-6):
    """Max relative error of ``fmap.jacobian`` against central differences, and min Jacobian rank."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    worst, min_rank = 0.0, fmap.dim_in
    for z in probes:
        J = fmap.jacobian(z)
        fd = np.empty_like(J)
        for k in range(z.shape[0]):
            h = step * max(1.0, abs(z[k]))
            e = np.zeros_like(z)
            e[k] = h
            fd[:, k] = (fmap.evaluate(z + e) - fmap.evaluate(z - e)) / (2 * h)
        scale = max(np.abs(fd).max(), 1e-12)
        worst = max(worst, float(np.abs(J - fd).max() / scale))
        min_rank = min(min_rank, int(np.linalg.matrix_rank(J)))
    return worst, min_rank


@dataclass
class MetricField:
    map: DifferentiableMap
    eps: float = DEFAULT_EPS_G

    @property
    def dim(self):
        return self.map.dim_in

    def tensor(self, Z):
        Z, single = _batch(Z)
        G = self.map.pullback(Z)
        G = 0.5 * (G + G.transpose(0, 2, 1))
        if self.eps:
            G = G + self.eps * np.eye(Z.shape[1])
        return G[0] if single else G

    def quad_gradient(self, Z, U):
        """Gradient in ``z`` of ``u^T G(z) u`` with ``u`` held fixed, row-wise."""
        return self.map.pullback_gradient(np.asarray(Z, dtype=float), np.asarray(U, dtype=float))


def metric_tensor(M: MetricField, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValidationError("metric query point must be finite")
    return M.tensor(z)


def _segment_norms2(M, curve):
    seg = np.diff(curve, axis=0)
    mid = 0.5 * (curve[:-1] + curve[1:])
    G = M.tensor(mid)
    return np.maximum(np.einsum("pi,pij,pj->p", seg, G, seg), 0.0)


def curve_energy(M: MetricField, curve) -> float:
    curve = np.asarray(curve, dtype=float)
    if curve.shape[0] < 2:
        raise ValidationError("a curve needs at least 2 points")
    n_seg = curve.shape[0] - 1
    return float(n_seg * _segment_norms2(M, curve).sum())


def curve_length(M: MetricField, curve) -> float:
    curve = np.asarray(curve, dtype=float)
    if curve.shape[0] < 2:
        raise ValidationError("a curve needs at least 2 points")
    return float(np.sqrt(_segment_norms2(M, curve)).sum())


@dataclass
class GeodesicCurve:
    points: np.ndarray
    energy: float
    length: float
    converged: bool
    iterations: int
    initial_energy: float = float("nan")
    energy_trace: list = field(default_factory=list, repr=False)

    def summary(self):
        return {
            "energy": self.energy,
            "length": self.length,
            "iterations": self.iterations,
            "converged": self.converged,
            "initial_energy": self.initial_energy,
            "n_segments": int(self.points.shape[0] - 1),
        }


def _banded_system(G, d):
    """Upper banded storage of the block-tridiagonal stiffness matrix.

    Block row i (interior point i+1) has diagonal ``G[i] + G[i+1]`` and
    off-diagonal ``-G[i+1]`` coupling it to the next interior point.
    """
    n_int = G.shape[0] - 1
    size = n_int * d
    u = 2 * d - 1
    ab = np.zeros((u + 1, size))
    diag = G[:-1] + G[1:]
    off = -G[1:-1]
    for r in range(d):
        for c in range(d):
            # diagonal blocks
            if c >= r:
                cols = np.arange(n_int) * d + c
                ab[u + r - c, cols] = diag[:, r, c]
            # upper off-diagonal blocks: row block i, col block i+1
            if n_int > 1:
                cols = np.arange(1, n_int) * d + c
                ab[u + r - (d + c), cols] = off[:, r, c]
    return ab


def _fixed_point_proposal(M, curve, include_metric_gradient):
    """Fixed-point update of the interior points and the energy gradient there.

    With ``K`` the frozen-metric stiffness matrix the update is ``K^{-1} rhs``
    and the gradient is ``2 N (K z - rhs)``, so the undamped fixed-point step
    equals ``-(2 N K)^{-1} grad``.
    """
    n_seg, d = curve.shape[0] - 1, curve.shape[1]
    seg = np.diff(curve, axis=0)
    mid = 0.5 * (curve[:-1] + curve[1:])
    G = M.tensor(mid)
    Gd = np.einsum("pij,pj->pi", G, seg)
    grad = 2.0 * (Gd[:-1] - Gd[1:])
    rhs = np.zeros((n_seg - 1, d))
    rhs[0] += G[0] @ curve[0]
    rhs[-1] += G[-1] @ curve[-1]
    if include_metric_gradient:
        g = M.quad_gradient(mid, seg)
        rhs -= 0.25 * (g[:-1] + g[1:])
        grad += 0.5 * (g[:-1] + g[1:])
    ab = _banded_system(G, d)
    sol = solveh_banded(ab, rhs.ravel(), check_finite=False)
    return sol.reshape(n_seg - 1, d), n_seg * grad, ab


def _lbfgs_direction(grad, fp_step, ab, memory, n_seg):
    """Quasi-Newton direction preconditioned by the fixed-point map."""
    q = grad.ravel().copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * (s @ q)
        q -= a * y
        alphas.append(a)
    r = solveh_banded(ab, q, check_finite=False) / (2.0 * n_seg)
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        r += s * (a - rho * (y @ r))
    direction = -r.reshape(fp_step.shape)
    if not np.all(np.isfinite(direction)) or float((direction * grad).sum()) >= 0.0:
        return fp_step
    return direction


def solve_geodesic(
    M: MetricField,
    a,
    b,
    n_segments: int = DEFAULT_SEGMENTS,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    alpha: float = 1.0,
    include_metric_gradient: bool = True,
    memory: int = 8,
) -> GeodesicCurve:
    """Discrete geodesic from ``a`` to ``b`` by damped fixed-point iteration.

    Each sweep freezes the metric at the current segment midpoints and moves
    every interior point to the metric-weighted average of its neighbours,

        z_i = (G_- + G_+)^{-1} (G_- z_{i-1} + G_+ z_{i+1} - r_i),

    solving all interior points jointly (block-tridiagonal system).  ``r_i``
    is the metric-gradient force ``(g_{i-1} + g_i) / 4`` with
    ``g_j = grad_z (dz_j^T G(z) dz_j)`` at the midpoint of segment ``j``;
    without it the fixed point is not a geodesic of a curved metric.  Steps
    are damped, ``z <- (1 - alpha) z + alpha z_new``, halving ``alpha`` until
    the discrete energy does not increase.  Stops when the undamped step
    moves no interior point by more than ``tol``.

    The fixed-point step is a preconditioned gradient step, so with
    ``memory > 0`` the last few steps are combined L-BFGS style (the
    fixed-point map acting as the preconditioner).  This keeps the energy
    monotone and the same stopping rule but avoids the slow, oscillating
    convergence of the plain sweep on strongly curved metrics.
    ``memory=0`` gives the plain scheme.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if n_segments < 2:
        raise ValidationError("n_segments must be >= 2")
    if tol <= 0:
        raise ValidationError("tol must be positive")
    if not 0 < alpha <= 1:
        raise ValidationError("alpha must lie in (0, 1]")
    t = np.linspace(0.0, 1.0, n_segments + 1)[:, None]
    straight = a + t * (b - a)
    straight[0], straight[-1] = a, b
    curve = straight.copy()
    e0 = curve_energy(M, curve)
    energy = e0
    trace = [e0]
    history = []
    prev = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        proposal, grad, ab = _fixed_point_proposal(M, curve, include_metric_gradient)
        if not np.all(np.isfinite(proposal)):
            raise Diverged(it)
        fp_step = proposal - curve[1:-1]
        disp = float(np.sqrt((fp_step**2).sum(axis=1)).max())
        if disp < tol:
            converged = True
            break
        if prev is not None:
            s_vec = (curve[1:-1] - prev[0]).ravel()
            y_vec = (grad - prev[1]).ravel()
            sy = float(s_vec @ y_vec)
            if sy > 1e-14 * np.sqrt((s_vec @ s_vec) * (y_vec @ y_vec)):
                history.append((s_vec, y_vec, 1.0 / sy))
                del history[:-memory]
        step = _lbfgs_direction(grad, fp_step, ab, history, n_segments) if memory > 0 and history else fp_step
        step_size = alpha
        accepted = False
        while step_size > 1e-12:
            cand = curve.copy()
            cand[1:-1] += step_size * step
            e_cand = curve_energy(M, cand)
            if not np.isfinite(e_cand):
                raise Diverged(it)
            if e_cand <= energy * (1 + 1e-13):
                accepted = True
                break
            step_size *= 0.5
        if not accepted and step is not fp_step:
            # quasi-Newton direction failed: drop the memory, retry the plain step
            history.clear()
            step, step_size = fp_step, alpha
            while step_size > 1e-12:
                cand = curve.copy()
                cand[1:-1] += step_size * step
                e_cand = curve_energy(M, cand)
                if e_cand <= energy * (1 + 1e-13):
                    accepted = True
                    break
                step_size *= 0.5
        if not accepted:
            # no descent along the fixed-point direction: numerically stationary
            converged = disp < 1e3 * tol
            break
        prev = (curve[1:-1].copy(), grad)
        curve = cand
        energy = e_cand
        trace.append(energy)
    if energy > e0 + 1e-12:
        curve, energy, converged = straight, e0, False
    return GeodesicCurve(
        points=curve,
        energy=energy,
        length=curve_length(M, curve),
        converged=converged,
        iterations=it,
        initial_energy=e0,
        energy_trace=trace,
    )


def geodesic_distance_matrix(
    M: MetricField,
    points,
    n_segments: int = DEFAULT_SEGMENTS,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    n_jobs: int = 1,
):
    """Symmetric matrix of geodesic lengths between all pairs of ``points``.

    Both orientations of every pair are solved and averaged.  A pair whose
    solve diverges falls back to the straight-line length under the metric
    and is listed in the report.  Returns ``(matrix, report)``.
    """
    Z = points.coords if hasattr(points, "coords") else np.asarray(points, dtype=float)
    n = Z.shape[0]

    def solve_row(i):
        row = []
        for j in range(n):
            if i == j:
                row.append((0.0, True, None))
                continue
            try:
                c = solve_geodesic(M, Z[i], Z[j], n_segments, tol, max_iter)
                row.append((c.length, c.converged, None))
            except Diverged as exc:
                t = np.linspace(0.0, 1.0, n_segments + 1)[:, None]
                row.append((curve_length(M, Z[i] + t * (Z[j] - Z[i])), False, exc.iteration))
        return row

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(solve_row, range(n)))
    else:
        rows = [solve_row(i) for i in range(n)]

    directed = np.array([[r[0] for r in row] for row in rows])
    dist = 0.5 * (directed + directed.T)
    np.fill_diagonal(dist, 0.0)
    diverged = [[i, j, rows[i][j][2]] for i in range(n) for j in range(n) if rows[i][j][2] is not None]
    unconverged = [[i, j] for i in range(n) for j in range(n) if not rows[i][j][1] and rows[i][j][2] is None]
    asym = float(np.abs(directed - directed.T).max()) if n else 0.0
    report = {
        "n_points": n,
        "n_segments": n_segments,
        "tol": tol,
        "max_iter": max_iter,
        "n_diverged": len(diverged),
        "diverged_pairs": diverged,
        "n_unconverged": len(unconverged),
        "unconverged_pairs": unconverged,
        "max_orientation_gap": asym,
    }
    return dist, report
