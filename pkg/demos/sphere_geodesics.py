"""
Geodesics under a pullback metric
=================================

A map ``f`` from a latent space into a bigger space measures latent curves
by the length of their images.  On the polar chart of the unit sphere the
shortest curves are great circles, which gives an exact check; then the
same solver runs on an RBF decoder fitted to a Swiss roll.
"""

import sys
from pathlib import Path

import numpy as np

from palyno.datasets import as_embeddings, swiss_roll
from palyno.manifold import isomap_fit_transform
from palyno.render import render_geodesics_svg
from palyno.riemann import MetricField, SphereChart, fit_rbf_decoder, geodesic_distance_matrix, solve_geodesic

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# two points at the same latitude: the straight chart line is not shortest
M = MetricField(SphereChart(), eps=1e-9)
a, b = np.array([0.8, -1.0]), np.array([0.8, 1.0])
curve = solve_geodesic(M, a, b, n_segments=100)

pa = np.array([np.sin(a[0]) * np.cos(a[1]), np.sin(a[0]) * np.sin(a[1]), np.cos(a[0])])
pb = np.array([np.sin(b[0]) * np.cos(b[1]), np.sin(b[0]) * np.sin(b[1]), np.cos(b[0])])
print(f"solved length {curve.length:.6f}, great circle {np.arccos(pa @ pb):.6f}")
print(f"energy {curve.initial_energy:.4f} -> {curve.energy:.4f} in {curve.iterations} sweeps")
# the curve bends toward the pole (smaller theta)
print("min theta along the curve:", curve.points[:, 0].min())

# a learned metric: Isomap coordinates of a roll, decoded back to 3-D
X, _ = swiss_roll(60, seed=0, height=8)
emb = as_embeddings(X)
lat = isomap_fit_transform(emb, d_final=2, k_nn=8)
dec = fit_rbf_decoder(lat, emb)
print("decoder:", dec.describe())
R = MetricField(dec, eps=1e-9)

D, report = geodesic_distance_matrix(R, lat.coords[:12], n_segments=24)
print("12x12 geodesic distances, diverged pairs:", report["n_diverged"])

curves = [solve_geodesic(R, lat.coords[i], lat.coords[j], 24).points for i, j in [(0, 1), (2, 3), (4, 5)]]
path = out / "geodesics.svg"
path.write_text(render_geodesics_svg(lat, curves))
print("wrote", path)
