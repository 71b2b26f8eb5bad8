"""Unsupervised grouping of microscopy-image embeddings.

Reduce CNN embedding vectors with PCA or Isomap, measure the latent space
with a decoder-induced Riemannian metric, cluster under Euclidean or
geodesic distances, and score agreement against human labels.
"""

__version__ = "0.1.0"

from .cluster import Clustering, KSelectionReport, kmeans_euclidean, kmeans_geodesic, select_k_elbow, within_cluster_variance
from .geometry import BoundingBox, CropRect, SlideGeometry, centered_crop, max_pool_channels, scale_box
from .ingest import EmbeddingSet, LabelVector, parse_embedding_table, parse_labels, save_embedding_table, save_labels
from .manifold import (
    LatentCoords,
    NeighborGraph,
    ReductionModel,
    build_knn_graph,
    classical_mds,
    graph_shortest_paths,
    isomap_fit_transform,
    pca_fit,
    pca_transform,
)
from .riemann import (
    DifferentiableMap,
    GeodesicCurve,
    IdentityMap,
    LinearMap,
    MetricField,
    RBFDecoder,
    SphereChart,
    curve_energy,
    curve_length,
    fit_rbf_decoder,
    geodesic_distance_matrix,
    metric_tensor,
    solve_geodesic,
)
from .stats import (
    ContingencyTable,
    KappaResult,
    agreement_rate,
    best_match_agreement,
    cohen_kappa,
    contingency,
    kappa_confidence_interval,
)
