"""
Unrolling a Swiss roll with Isomap
==================================

PCA sees the roll as a flat blob: points on neighbouring layers end up
close together.  Isomap measures distance along a k-nearest-neighbour
graph first, so its 2-D coordinates follow the sheet.
"""

import sys
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from palyno.cluster import kmeans_euclidean
from palyno.datasets import as_embeddings, swiss_roll
from palyno.manifold import isomap_fit_transform, reduce
from palyno.render import render_latent_svg

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# 400 points on a roll 8 units high; `truth` holds (arc length, height)
X, truth = swiss_roll(400, seed=0, height=8)
emb = as_embeddings(X)

pca = reduce(emb, "pca", 2)
iso = isomap_fit_transform(emb, d_final=2, k_nn=10)

# how well does each embedding preserve the unrolled distances?
for name, lat in [("pca", pca), ("isomap", iso)]:
    r = np.corrcoef(pdist(truth), pdist(lat.coords))[0, 1]
    print(f"{name:7s} correlation with unrolled distances: {r:.4f}")

# MDS drops the negative part of the spectrum; report how much there was
print("negative eigenvalue mass:", iso.model["negative_eigenmass"])

# colour by 4 clusters along the sheet and write both scatters
for name, lat in [("pca", pca), ("isomap", iso)]:
    path = out / f"swiss_roll_{name}.svg"
    path.write_text(render_latent_svg(lat, kmeans_euclidean(lat, 4)))
    print("wrote", path)
