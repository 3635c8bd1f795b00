"""Small synthetic binary tasks for demos, benchmarks and trend checks."""

from __future__ import annotations

import numpy as np

from .data import from_dense, make_rng


def two_spirals(n: int, seed: int = 0, noise: float = 0.3, turns: float = 1.5):
    """Two interleaved 2-D spirals, labels +1/-1 alternating by arm.

    Returns ``(X, y)`` as dense arrays.
    """
    rng = make_rng(seed)
    t = np.sqrt(rng.uniform(0.0, 1.0, n)) * turns * 2 * np.pi
    arm = rng.integers(0, 2, n)
    r = t / (turns * 2 * np.pi) * 4.0 + 0.3
    ang = t + np.pi * arm
    X = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    X += noise * rng.normal(size=X.shape) * 0.25
    y = np.where(arm == 0, 1, -1)
    return X, y


def gaussian_blobs(n: int, centers, labels, scale: float = 1.0, seed: int = 0):
    """Isotropic Gaussian clusters with equal sampling probability; returns ``(X, y)``."""
    centers = np.asarray(centers, dtype=np.float64)
    labels = np.asarray(labels)
    rng = make_rng(seed)
    which = rng.integers(0, len(centers), n)
    X = centers[which] + scale * rng.normal(size=(n, centers.shape[1]))
    return X, labels[which]


def ten_blobs(n: int, seed: int = 0, d: int = 2, spread: float = 10.0, scale: float = 1.0):
    """Ten blobs with alternating labels, centers fixed by ``seed``.

    A handful of basis points placed at the blob centers separates them
    well, which is where K-means selection helps over a random draw.
    """
    rng = make_rng(10_000 + seed)
    centers = rng.uniform(-spread, spread, size=(10, d))
    labels = np.where(np.arange(10) % 2 == 0, 1, -1)
    return gaussian_blobs(n, centers, labels, scale, seed)


def two_blobs(n: int, seed: int = 0, distance: float = 10.0, d: int = 2):
    """Two far-apart blobs, one per class: linearly and kernel separable."""
    c = np.zeros((2, d))
    c[0, 0], c[1, 0] = -distance / 2, distance / 2
    return gaussian_blobs(n, c, [1, -1], 1.0, seed)


def split(X, y, n_train: int):
    """First ``n_train`` rows for training, the rest for testing, as example lists."""
    return from_dense(X[:n_train], y[:n_train]), from_dense(X[n_train:], y[n_train:])


def dense_features(n: int, d: int, seed: int = 0):
    """Standard normal features with labels from a nonlinear rule; for timing runs."""
    rng = make_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.where(np.sin(X[:, 0]) + X[:, 1] * X[:, 2 % d] > 0, 1, -1)
    return X, y
