"""Seeded synthetic data sets for tests, demos and acceptance runs."""

import numpy as np

from .ingest import EmbeddingSet, LabelVector


def swiss_roll(n=400, seed=0, noise=0.0, height=21.0):
    """Points on a Swiss roll in R^3 and their unrolled coordinates (arc length, height)."""
    rng = np.random.default_rng(seed)
    t = 1.5 * np.pi * (1 + 2 * rng.random(n))
    h = height * rng.random(n)
    X = np.stack([t * np.cos(t), h, t * np.sin(t)], axis=1)
    if noise:
        X = X + noise * rng.standard_normal(X.shape)
    arc = 0.5 * (t * np.sqrt(1 + t**2) + np.arcsinh(t))
    return X, np.stack([arc, h], axis=1)


def blobs(n_per=4, centers=((0.0, 0.0), (100.0, 0.0), (0.0, 100.0)), spread=1.0, seed=0):
    """Isotropic Gaussian blobs; returns (points, labels)."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    pts = [c + spread * rng.standard_normal((n_per, centers.shape[1])) for c in centers]
    labels = np.repeat(np.arange(len(centers)), n_per)
    return np.vstack(pts), labels


def planted_embeddings(n=650, dim=512, k=10, seed=0, center_scale=1.0, noise=0.25):
    """Embedding set with ``k`` planted Gaussian clusters; returns (EmbeddingSet, LabelVector).

    Values are passed through ``abs`` so they look like pooled ReLU activations.
    """
    rng = np.random.default_rng(seed)
    centers = center_scale * rng.standard_normal((k, dim)) + 2.0
    labels = np.arange(n) % k
    rng.shuffle(labels)
    X = np.abs(centers[labels] + noise * rng.standard_normal((n, dim)))
    ids = [f"img{i:04d}" for i in range(n)]
    return EmbeddingSet(ids, X, "synthetic:planted"), LabelVector(ids, labels.tolist())


def as_embeddings(X, prefix="p", tag="synthetic"):
    X = np.asarray(X, dtype=float)
    return EmbeddingSet([f"{prefix}{i:04d}" for i in range(X.shape[0])], X, tag)
