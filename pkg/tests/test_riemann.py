import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist, squareform

from palyno.datasets import as_embeddings
from palyno.errors import Diverged, SingularFit, ValidationError
from palyno.manifold import LatentCoords
from palyno.riemann import (
    DifferentiableMap,
    IdentityMap,
    LinearMap,
    MetricField,
    SphereChart,
    curve_energy,
    curve_length,
    fit_rbf_decoder,
    geodesic_distance_matrix,
    jacobian_check,
    metric_tensor,
    rbf_design,
    solve_geodesic,
)


def great_circle(a, b):
    (t1, p1), (t2, p2) = a, b
    c = np.sin(t1) * np.sin(t2) * np.cos(p1 - p2) + np.cos(t1) * np.cos(t2)
    return float(np.arccos(np.clip(c, -1, 1)))


def latent(Z):
    Z = np.asarray(Z, dtype=float)
    return LatentCoords([f"p{i:04d}" for i in range(Z.shape[0])], Z)


@pytest.fixture(scope="module")
def rbf_metric():
    rng = np.random.default_rng(0)
    Z = rng.uniform(-2, 2, size=(40, 2))
    Y = np.stack([np.sin(Z[:, 0]), np.cos(Z[:, 1]), Z[:, 0] * Z[:, 1], Z[:, 0] ** 2, Z[:, 1]], axis=1)
    dec = fit_rbf_decoder(latent(Z), as_embeddings(Y), sigma=1.0, ridge=1e-4)
    return MetricField(dec, 1e-6), Z


# decoder fitting ---------------------------------------------------------------


def test_rbf_reproduces_linear_image():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(15, 2))
    A = rng.normal(size=(5, 2))
    dec = fit_rbf_decoder(latent(Z), as_embeddings(Z @ A.T), m=15, sigma=10.0, ridge=0.0)
    assert dec.train_rmse < 1e-6


def test_rbf_huge_ridge_collapses_to_mean():
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(12, 2))
    Y = rng.normal(size=(12, 4))
    dec = fit_rbf_decoder(latent(Z), as_embeddings(Y), ridge=1e12)
    np.testing.assert_allclose(dec.evaluate(rng.normal(size=(3, 2))), np.tile(Y.mean(axis=0), (3, 1)), atol=1e-9)


def test_rbf_three_point_hand_solve():
    Z = np.array([[0.0], [1.0], [2.0]])
    dec = fit_rbf_decoder(latent(Z), as_embeddings(Z), m=3, sigma=1.0, ridge=1e-9)
    # independent dense solve of the ridge normal equations with the bias at the mean
    phi = np.exp(-((Z - Z.T) ** 2) / 2)
    w = np.linalg.solve(phi.T @ phi + 1e-9 * np.eye(3), phi.T @ (Z - Z.mean()))
    expect = np.exp(-((1.0 - Z[:, 0]) ** 2) / 2) @ w[:, 0] + Z.mean()
    assert abs(dec.evaluate(np.array([1.0]))[0] - expect) < 1e-9
    assert abs(dec.evaluate(np.array([1.0]))[0] - 1.0) < 1e-3


def test_rbf_singular_without_ridge():
    Z = np.array([[0.0], [0.0], [1.0]])
    with pytest.raises(SingularFit):
        fit_rbf_decoder(latent(Z), as_embeddings(Z), m=3, sigma=1.0, ridge=0.0)


def test_rbf_centers_from_kmeans_when_m_below_n():
    Z = np.random.default_rng(3).normal(size=(30, 2))
    dec = fit_rbf_decoder(latent(Z), as_embeddings(Z), m=5, ridge=1e-6)
    assert dec.centers.shape == (5, 2)
    assert dec.describe()["n_centers"] == 5


def test_rbf_default_sigma_is_median_distance():
    Z = np.random.default_rng(4).normal(size=(20, 3))
    dec = fit_rbf_decoder(latent(Z), as_embeddings(Z))
    assert dec.sigma == pytest.approx(np.median(pdist(Z)))


def test_rbf_needs_ambient_rows():
    Z = np.zeros((2, 1))
    lat = LatentCoords(["a", "b"], Z)
    with pytest.raises(ValidationError):
        fit_rbf_decoder(lat, as_embeddings(np.zeros((2, 1))))


def test_rbf_design_shape():
    assert rbf_design(np.zeros((4, 2)), np.ones((3, 2)), 1.0).shape == (4, 3)


# Jacobians and metrics ------------------------------------------------------------


def test_rbf_jacobian_matches_finite_differences(rbf_metric):
    M, _ = rbf_metric
    probes = np.random.default_rng(5).uniform(-2, 2, size=(100, 2))
    err, rank = jacobian_check(M.map, probes)
    assert err < 1e-4
    assert rank == 2


def test_sphere_chart_jacobian():
    probes = np.random.default_rng(6).uniform([0.3, -3], [2.8, 3], size=(50, 2))
    err, rank = jacobian_check(SphereChart(), probes)
    assert err < 1e-6 and rank == 2


def test_rbf_closed_form_pullback_matches_generic(rbf_metric):
    M, _ = rbf_metric
    Z = np.random.default_rng(7).uniform(-2, 2, size=(25, 2))
    np.testing.assert_allclose(M.map.pullback(Z), DifferentiableMap.pullback(M.map, Z), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("fmap", [SphereChart(), None])
def test_analytic_pullback_gradient_matches_differences(fmap, rbf_metric):
    fmap = fmap or rbf_metric[0].map
    rng = np.random.default_rng(8)
    Z = rng.uniform([0.4, -1], [2.7, 1], size=(30, 2))
    U = rng.normal(size=(30, 2))
    analytic = fmap.pullback_gradient(Z, U)
    numeric = DifferentiableMap.pullback_gradient(fmap, Z, U, step=1e-6)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


def test_identity_metric():
    np.testing.assert_array_equal(metric_tensor(MetricField(IdentityMap(3), 0.0), np.ones(3)), np.eye(3))


def test_linear_metric():
    A = np.random.default_rng(9).normal(size=(5, 3))
    G = metric_tensor(MetricField(LinearMap(A), 0.0), np.array([0.3, -1, 2]))
    np.testing.assert_allclose(G, A.T @ A, atol=1e-12)


def test_sphere_chart_metric():
    M = MetricField(SphereChart(), 0.0)
    for theta in np.linspace(0.1, 3.0, 7):
        G = metric_tensor(M, np.array([theta, 0.7]))
        np.testing.assert_allclose(G, np.diag([1.0, np.sin(theta) ** 2]), atol=1e-8)


def test_metric_rejects_non_finite():
    with pytest.raises(ValidationError):
        metric_tensor(MetricField(IdentityMap(2)), np.array([np.nan, 0.0]))


def test_metric_is_spd_at_many_probes(rbf_metric):
    M, _ = rbf_metric
    Z = np.random.default_rng(10).uniform(-6, 6, size=(1000, 2))
    G = M.tensor(Z)
    np.testing.assert_allclose(G, G.transpose(0, 2, 1), atol=1e-12)
    assert np.linalg.eigvalsh(G).min() >= M.eps - 1e-12


# energy and length --------------------------------------------------------------------


def test_straight_two_point_curve():
    M = MetricField(IdentityMap(2), 0.0)
    a, b = np.array([0.0, 1.0]), np.array([3.0, 5.0])
    curve = np.stack([a, b])
    assert curve_energy(M, curve) == pytest.approx(25.0)
    assert curve_length(M, curve) == pytest.approx(5.0)


@pytest.mark.parametrize("N", [2, 7, 50])
def test_refining_straight_line_keeps_energy(N):
    M = MetricField(IdentityMap(2), 0.0)
    t = np.linspace(0, 1, N + 1)[:, None]
    curve = np.array([1.0, -1.0]) + t * np.array([3.0, 4.0])
    assert curve_energy(M, curve) == pytest.approx(25.0)
    assert curve_length(M, curve) == pytest.approx(5.0)


def test_meridian_length():
    M = MetricField(SphereChart(), 0.0)
    theta = np.linspace(0.3, 1.3, 201)
    curve = np.stack([theta, np.full_like(theta, 0.4)], axis=1)
    assert abs(curve_length(M, curve) - 1.0) < 1e-4


# solver -------------------------------------------------------------------------------


def test_identity_metric_straight_line_in_one_sweep():
    M = MetricField(IdentityMap(3), 0.0)
    a, b = np.zeros(3), np.array([1.0, 2.0, 2.0])
    c = solve_geodesic(M, a, b, 16)
    assert c.converged and c.iterations == 1
    assert c.length == pytest.approx(3.0)


def test_linear_metric_straight_line_is_fixed_point():
    A = np.random.default_rng(11).normal(size=(4, 2))
    M = MetricField(LinearMap(A), 1e-9)
    a, b = np.array([-1.0, 0.5]), np.array([2.0, 1.5])
    c = solve_geodesic(M, a, b, 32, tol=1e-8)
    assert c.converged and c.iterations == 1
    t = np.linspace(0, 1, 33)[:, None]
    assert np.abs(c.points - (a + t * (b - a))).max() < 10 * 1e-8


def test_equator_geodesic():
    M = MetricField(SphereChart(), 1e-9)
    a, b = np.array([np.pi / 2, 0.0]), np.array([np.pi / 2, 1.0])
    c = solve_geodesic(M, a, b, 100)
    assert abs(c.length - 1.0) < 1e-3
    chart_line = np.linspace(a, b, 101)
    assert c.length <= curve_length(M, chart_line) + 1e-12


def test_sphere_random_pairs_match_great_circle():
    M = MetricField(SphereChart(), 1e-9)
    rng = np.random.default_rng(12)
    for _ in range(20):
        a = np.array([rng.uniform(0.5, np.pi - 0.5), rng.uniform(-1, 1)])
        b = np.array([rng.uniform(0.5, np.pi - 0.5), rng.uniform(-1, 1)])
        c = solve_geodesic(M, a, b, 100)
        assert c.converged
        assert abs(c.length - great_circle(a, b)) <= 0.005 * great_circle(a, b)


def test_off_equator_geodesic_bends_toward_pole():
    M = MetricField(SphereChart(), 1e-9)
    a, b = np.array([0.8, -1.0]), np.array([0.8, 1.0])
    c = solve_geodesic(M, a, b, 64)
    # the great circle between two points on the same northern latitude passes closer to the pole
    assert c.points[:, 0].min() < 0.8 - 0.1
    assert c.length < curve_length(M, np.linspace(a, b, 65))


def test_endpoints_exact_and_energy_monotone(rbf_metric):
    M, Z = rbf_metric
    c = solve_geodesic(M, Z[0], Z[7], 48)
    assert np.array_equal(c.points[0], Z[0]) and np.array_equal(c.points[-1], Z[7])
    assert np.all(np.diff(c.energy_trace) <= 1e-13 * c.energy_trace[0])
    assert c.energy <= c.initial_energy + 1e-12
    assert c.length**2 <= c.energy * (1 + 1e-12)


def test_refinement_changes_length_under_one_percent():
    M = MetricField(SphereChart(), 1e-9)
    a, b = np.array([0.7, -0.9]), np.array([2.2, 0.8])
    l1 = solve_geodesic(M, a, b, 50).length
    l2 = solve_geodesic(M, a, b, 100).length
    assert abs(l1 - l2) / l2 < 0.01


def test_plain_and_accelerated_schemes_agree(rbf_metric):
    M, Z = rbf_metric
    for i, j in [(0, 5), (3, 11), (8, 20)]:
        fast = solve_geodesic(M, Z[i], Z[j], 32, max_iter=2000)
        plain = solve_geodesic(M, Z[i], Z[j], 32, max_iter=2000, memory=0)
        assert fast.iterations <= plain.iterations
        assert fast.length == pytest.approx(plain.length, rel=1e-5)


def test_without_gradient_force_sphere_is_less_accurate():
    M = MetricField(SphereChart(), 1e-9)
    a, b = np.array([0.8, -1.0]), np.array([0.8, 1.0])
    full = solve_geodesic(M, a, b, 100).length
    frozen = solve_geodesic(M, a, b, 100, include_metric_gradient=False).length
    exact = great_circle(a, b)
    assert abs(full - exact) < abs(frozen - exact)


class _NanGradient(IdentityMap):
    def pullback_gradient(self, Z, U, step=None):
        return np.full_like(np.asarray(Z, dtype=float), np.nan)


def test_non_finite_iterate_raises_diverged():
    M = MetricField(_NanGradient(2), 0.0)
    with pytest.raises(Diverged) as err:
        solve_geodesic(M, np.zeros(2), np.ones(2), 8)
    assert err.value.iteration == 1


@pytest.mark.parametrize("kwargs", [{"n_segments": 1}, {"tol": 0.0}, {"alpha": 1.5}])
def test_solver_argument_checks(kwargs):
    with pytest.raises(ValidationError):
        solve_geodesic(MetricField(IdentityMap(2)), np.zeros(2), np.ones(2), **kwargs)


# distance matrices -----------------------------------------------------------------------------


def test_identity_distance_matrix_is_euclidean():
    Z = np.random.default_rng(13).normal(size=(8, 3))
    D, report = geodesic_distance_matrix(MetricField(IdentityMap(3), 0.0), latent(Z), 8)
    np.testing.assert_allclose(D, squareform(pdist(Z)), atol=1e-9)
    assert report["n_diverged"] == 0


def test_linear_decoder_distance_matrix_is_flat():
    rng = np.random.default_rng(14)
    Z = rng.normal(size=(8, 2))
    A = rng.normal(size=(6, 2))
    D, _ = geodesic_distance_matrix(MetricField(LinearMap(A), 0.0), latent(Z), 16)
    np.testing.assert_allclose(D, squareform(pdist(Z @ A.T)), atol=1e-6)


def test_distance_matrix_properties(rbf_metric):
    M, Z = rbf_metric
    N, tol = 24, 1e-6
    D, report = geodesic_distance_matrix(M, Z[:12], N, tol)
    assert np.array_equal(D, D.T)
    assert np.all(np.diag(D) == 0)
    assert np.all(D >= squareform(pdist(Z[:12])) * np.sqrt(M.eps))
    rng = np.random.default_rng(15)
    for _ in range(20):
        i, j, k = rng.choice(12, 3, replace=False)
        assert D[i, k] <= D[i, j] + D[j, k] + 2 * tol * N
    assert report["max_orientation_gap"] < 1e-4


def test_distance_matrix_independent_of_threads(rbf_metric):
    M, Z = rbf_metric
    D1, _ = geodesic_distance_matrix(M, Z[:9], 16, n_jobs=1)
    D4, _ = geodesic_distance_matrix(M, Z[:9], 16, n_jobs=4)
    assert D1.tobytes() == D4.tobytes()


def test_diverged_pair_falls_back_to_straight_length():
    M = MetricField(_NanGradient(2), 0.0)
    Z = np.array([[0.0, 0.0], [3.0, 4.0]])
    D, report = geodesic_distance_matrix(M, Z, 8)
    assert D[0, 1] == pytest.approx(5.0)
    assert report["n_diverged"] == 2
    assert [p[:2] for p in report["diverged_pairs"]] == [[0, 1], [1, 0]]


@settings(max_examples=25, deadline=None)
@given(st.floats(0.4, 2.7), st.floats(-1.5, 1.5), st.floats(0.4, 2.7), st.floats(-1.5, 1.5))
def test_sphere_geodesic_never_longer_than_chart_line(t1, p1, t2, p2):
    M = MetricField(SphereChart(), 1e-9)
    a, b = np.array([t1, p1]), np.array([t2, p2])
    c = solve_geodesic(M, a, b, 40)
    assert c.length <= curve_length(M, np.linspace(a, b, 41)) * (1 + 1e-9)
