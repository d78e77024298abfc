"""k-means++ clustering of IATE vectors and cluster profiles."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .dataset import ARM_LABELS, Dataset
from .exceptions import DataError

log = logging.getLogger(__name__)


@dataclass
class ClusterModel:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    restart: int

    @property
    def k(self) -> int:
        return len(self.centers)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def partition_inertia(X, labels) -> float:
    """Sum of squared distances to the cluster means, accumulated cluster by cluster."""
    X = np.asarray(X, dtype=float)
    total = 0.0
    for j in np.unique(labels):
        pts = X[labels == j]
        total += float(np.sum((pts - pts.mean(axis=0)) ** 2))
    return total


def _sq_dist(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _seed_centers(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        i = rng.choice(n, p=d2 / total)
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(X, centers, max_iter, tol):
    k = len(centers)
    prev = np.inf
    for it in range(1, max_iter + 1):
        D = _sq_dist(X, centers)
        labels = np.argmin(D, axis=1)
        inertia = float(D[np.arange(len(X)), labels].sum())
        assert inertia <= prev + 1e-9 * max(1.0, abs(prev)), "Lloyd step increased inertia"
        prev = inertia
        new = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its center
                far = int(np.argmax(D[np.arange(len(X)), labels]))
                new[j] = X[far]
                labels[far] = j
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    D = _sq_dist(X, centers)
    labels = np.argmin(D, axis=1)
    return centers, labels, it


def kmeans_pp(X, k: int = 8, seed: int = 0, restarts: int = 10, max_iter: int = 300,
              tol: float = 1e-9) -> ClusterModel:
    """k-means with k-means++ seeding; the restart with the smallest inertia wins."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if k < 1 or n < k:
        raise DataError(f"need at least k = {k} points, got {n}")
    distinct = len(np.unique(X, axis=0))
    if distinct < k:
        log.warning("only %d distinct points; reducing k from %d", distinct, k)
        k = distinct
    best = None
    for r, ss in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        rng = np.random.default_rng(ss)
        centers = _seed_centers(X, k, rng)
        centers, labels, it = _lloyd(X, centers, max_iter, tol)
        # canonical centers and inertia from the final partition
        used = np.unique(labels)
        labels = np.searchsorted(used, labels)
        centers = np.array([X[labels == j].mean(axis=0) for j in range(len(used))])
        inertia = partition_inertia(X, labels)
        if best is None or inertia < best.inertia:
            best = ClusterModel(centers, labels, inertia, it, r)
    return best


def cluster_profile(model: ClusterModel, iates, dataset: Dataset, covariates=None,
                    nop_outcome=None, contrast_names=None) -> pd.DataFrame:
    """Cluster profile: one column per cluster, ordered by the first IATE column.

    Rows are the mean IATEs, then covariate means (category shares for
    categorical features), then the mean predicted outcome without a
    programme if ``nop_outcome`` is given.
    """
    iates = np.asarray(iates, dtype=float)
    if iates.ndim == 1:
        iates = iates[:, None]
    if len(iates) != dataset.n or len(model.labels) != dataset.n:
        raise DataError("IATEs, cluster labels and dataset must have the same units")
    names = contrast_names or [f"{ARM_LABELS[m]} - NOP" for m in range(1, iates.shape[1] + 1)]
    covariates = dataset.feature_names if covariates is None else list(covariates)
    missing = [c for c in covariates if c not in dataset.feature_names]
    if missing:
        raise DataError(f"covariates not in dataset: {missing}")
    means = np.array([iates[model.labels == j, 0].mean() for j in range(model.k)])
    order = np.argsort(means, kind="stable")
    cols = {}
    for rank, j in enumerate(order, start=1):
        m = model.labels == j
        col = {f"IATE {nm}": iates[m, i].mean() for i, nm in enumerate(names)}
        for c in covariates:
            spec = dataset.specs[dataset.feature_index(c)]
            x = dataset.column(c)[m]
            if spec.is_categorical:
                for code, lab in enumerate(spec.categories):
                    col[f"{c}={lab}"] = float(np.mean(x == code))
            else:
                col[c] = float(x.mean())
        if nop_outcome is not None:
            col["Predicted outcome without programme"] = float(np.asarray(nop_outcome)[m].mean())
        col["n"] = int(m.sum())
        col["share"] = float(m.mean())
        cols[f"cluster {rank}"] = col
    return pd.DataFrame(cols)
