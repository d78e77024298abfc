"""Brute-force reference implementations used by the tests."""
from itertools import product

import numpy as np


def policy_partitions(X, idx, levels):
    """Every leaf partition reachable by an axis-aligned tree with ``levels`` levels.

    Splits are ``x <= t`` for every distinct value ``t`` of every feature
    except the largest; an unsplit node is always allowed.
    """
    yield [idx]
    if levels == 1:
        return
    for f in range(X.shape[1]):
        x = X[idx, f]
        for t in np.unique(x)[:-1]:
            left, right = idx[x <= t], idx[x > t]
            for lp in policy_partitions(X, left, levels - 1):
                for rp in policy_partitions(X, right, levels - 1):
                    yield lp + rp


def exhaustive_policy_reward(scores, X, levels):
    """Best total score over all trees, each leaf taking its best arm."""
    scores = np.asarray(scores)
    X = np.asarray(X)
    best = None
    for part in policy_partitions(X, np.arange(len(scores)), levels):
        r = sum(scores[leaf].sum(axis=0).max() for leaf in part)
        if best is None or r > best:
            best = r
    return best


def exhaustive_best_plan(scores, caps):
    """Best allocation over all plans with at most ``caps[d]`` units on arm ``d``."""
    scores = np.asarray(scores)
    n, K = scores.shape
    best, best_arms = None, None
    for arms in product(range(K), repeat=n):
        counts = np.bincount(arms, minlength=K)
        if np.any(counts > caps):
            continue
        r = scores[np.arange(n), arms].sum()
        if best is None or r > best:
            best, best_arms = r, np.array(arms)
    return best, best_arms


def exhaustive_kmeans_inertia(x, k):
    """Smallest within-cluster sum of squares over every partition into ``k`` nonempty sets."""
    x = np.asarray(x, dtype=float)
    best = None
    for labels in product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(np.unique(labels)) != k:
            continue
        total = sum(((x[labels == j] - x[labels == j].mean()) ** 2).sum() for j in range(k))
        if best is None or total < best:
            best = total
    return best
