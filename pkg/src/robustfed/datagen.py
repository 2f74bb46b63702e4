"""Synthetic data generators for the experiment harness.

All generators take an explicit seed and are reproducible bit-for-bit.
Outlier labels are diagnostic only: the engine never sees them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ClutterData",
    "LabelledData",
    "gen_clutter",
    "gen_huber",
    "gen_student_t",
    "gen_logreg_2d",
    "partition_homogeneous",
]


@dataclass(frozen=True)
class ClutterData:
    """Contaminated location data: x ~ (1-eps) N(th-2, 1) + eps N(th+3, 0.25)."""

    x: np.ndarray
    is_outlier: np.ndarray
    theta: float

    @property
    def inlier_location(self) -> float:
        return self.theta - 2.0

    @property
    def outlier_location(self) -> float:
        return self.theta + 3.0


@dataclass(frozen=True)
class LabelledData:
    x: np.ndarray
    y: np.ndarray
    is_outlier: np.ndarray


def gen_clutter(n: int, eps: float, seed: int) -> ClutterData:
    """Draw the contaminated location data set.

    The latent location is th ~ N(0, 0.5^2); inliers come from N(th-2, 1)
    and an eps fraction of clutter from N(th+3, 0.5^2).  The estimand is the
    inlier location th-2.
    """
    if not (0.0 <= eps < 0.5):
        raise ValueError("contamination fraction must lie in [0, 1/2)")
    rng = np.random.default_rng(seed)
    theta = float(rng.normal(0.0, 0.5))
    is_outlier = rng.random(n) < eps
    x = np.where(
        is_outlier,
        rng.normal(theta + 3.0, 0.5, size=n),
        rng.normal(theta - 2.0, 1.0, size=n),
    )
    return ClutterData(x=x, is_outlier=is_outlier, theta=theta)


def gen_huber(base_sampler, contaminant_sampler, eps: float, seed: int, n: int) -> LabelledData:
    """n draws from (1-eps) base + eps contaminant, each picked per point.

    Samplers are callables (rng, size) -> array.  y is unused (zeros); the
    outlier mask records which mixture component produced each point.
    """
    if not (0.0 < eps < 0.5):
        raise ValueError("contamination fraction must lie in (0, 1/2)")
    rng = np.random.default_rng(seed)
    is_outlier = rng.random(n) < eps
    base = np.asarray(base_sampler(rng, n), dtype=np.float64)
    cont = np.asarray(contaminant_sampler(rng, n), dtype=np.float64)
    x = np.where(is_outlier, cont, base)
    return LabelledData(x=x, y=np.zeros(n, dtype=np.int64), is_outlier=is_outlier)


def gen_student_t(n: int, seed: int, df: float = 4.0, loc: float = 0.0,
                  scale: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return loc + scale * rng.standard_t(df, size=n)


def gen_logreg_2d(n: int, outliers: int, seed: int) -> LabelledData:
    """Two separable Gaussian blobs plus a mislabelled third-Gaussian cluster.

    n/2 points per class from N((-+2, 0), 0.6^2 I); the outlier cluster sits
    deep inside class 1 territory at (5, 0) but is labelled class 0, which
    destroys linear separability.
    """
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    x0 = rng.normal(0.0, 0.6, size=(n0, 2)) + np.array([-2.0, 0.0])
    x1 = rng.normal(0.0, 0.6, size=(n1, 2)) + np.array([2.0, 0.0])
    x = np.vstack([x0, x1])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    flag = np.zeros(n, dtype=bool)
    if outliers > 0:
        xo = rng.normal(0.0, 0.4, size=(outliers, 2)) + np.array([5.0, 0.0])
        x = np.vstack([x, xo])
        y = np.concatenate([y, np.zeros(outliers, dtype=np.int64)])
        flag = np.concatenate([flag, np.ones(outliers, dtype=bool)])
    perm = rng.permutation(x.shape[0])
    return LabelledData(x=x[perm], y=y[perm], is_outlier=flag[perm])


def partition_homogeneous(n: int, clients: int, seed: int) -> list[np.ndarray]:
    """Shuffle indices with the seed, then split into near-equal chunks."""
    if clients < 1:
        raise ValueError("need at least one client")
    rng = np.random.default_rng(seed)
    return [np.sort(part) for part in np.array_split(rng.permutation(n), clients)]
