"""Exhaustive shallow policy trees with capacity restrictions.

``tree_search`` enumerates, at every internal node, all features and all
candidate thresholds (every ``A``-th sorted value, or all distinct values
for features with fewer than ``V`` of them) and recurses into both children.
``L`` counts tree levels including the leaf level: ``L = 1`` is a single
leaf, ``L = 4`` a tree with up to 8 leaves.  The approximation parameter is
halved (integer division, floor 1) every time a level of splits is entered.

Restrictions cap the number of units assigned to each arm, and optionally
the number assigned to any programme, at ``floor(share * N)`` of the full
sample.  Whenever two subtrees are combined into a candidate that beats the
incumbent, the candidate is repaired leaf by leaf (lowest across-arm
variance of the mean scores first) by moving violating leaves to their next
best arm.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .dataset import ARM_LABELS
from .exceptions import ConfigError, DataError


@dataclass
class Restrictions:
    """Per-arm maximum shares (``None`` = unconstrained) and an overall programme share."""

    max_shares: tuple | None = None
    overall: float | None = None

    def __post_init__(self):
        shares = [s for s in (self.max_shares or ()) if s is not None]
        if self.overall is not None:
            shares.append(self.overall)
        if any(not 0 <= s <= 1 for s in shares):
            raise ConfigError("restriction shares must lie in [0, 1]")

    @property
    def active(self) -> bool:
        return self.overall is not None or any(s is not None for s in (self.max_shares or ()))

    def caps(self, n_total: int, n_arms: int):
        caps = np.full(n_arms, np.iinfo(np.int64).max, dtype=np.int64)
        for d, s in enumerate(self.max_shares or ()):
            if s is not None and d < n_arms:
                caps[d] = math.floor(s * n_total)
        overall = math.floor(self.overall * n_total) if self.overall is not None else None
        return caps, overall

    @classmethod
    def from_dict(cls, d: dict | None) -> "Restrictions":
        if not d:
            return cls()
        unknown = set(d) - {"max_shares", "overall"}
        if unknown:
            raise ConfigError(f"unknown restriction keys: {sorted(unknown)}")
        ms = d.get("max_shares")
        return cls(tuple(ms) if ms is not None else None, d.get("overall"))


@dataclass
class PolicyTreeConfig:
    depth: int = 3           # levels of splits; tree_search uses L = depth + 1
    approximation: int = 1   # A
    max_categories: int | None = None   # V, defaults to A
    restrictions: Restrictions = field(default_factory=Restrictions)

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError("policy tree depth must be nonnegative")
        if self.approximation < 1:
            raise ConfigError("approximation parameter A must be >= 1")
        if isinstance(self.restrictions, dict):
            self.restrictions = Restrictions.from_dict(self.restrictions)

    @property
    def levels(self) -> int:
        return self.depth + 1


@dataclass
class PolicyNode:
    arm: int | None = None
    feature: int | None = None
    threshold: float | None = None          # ordered split: x <= threshold goes left
    left_values: tuple | None = None        # categorical split: values going left
    right_values: tuple | None = None
    left: "PolicyNode | None" = None
    right: "PolicyNode | None" = None
    n: int = 0
    sums: np.ndarray | None = field(default=None, repr=False)   # leaf score sums per arm
    idx: np.ndarray | None = field(default=None, repr=False)    # leaf members (search only)

    @property
    def is_leaf(self) -> bool:
        return self.arm is not None

    def leaves(self) -> list["PolicyNode"]:
        if self.is_leaf:
            return [self]
        return self.left.leaves() + self.right.leaves()

    @property
    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth, self.right.depth)

    def copy(self) -> "PolicyNode":
        if self.is_leaf:
            return PolicyNode(arm=self.arm, n=self.n, sums=self.sums, idx=self.idx)
        return PolicyNode(feature=self.feature, threshold=self.threshold,
                          left_values=self.left_values, right_values=self.right_values,
                          left=self.left.copy(), right=self.right.copy(), n=self.n)

    def to_dict(self, names=None) -> dict:
        if self.is_leaf:
            return {"arm": int(self.arm), "n": int(self.n)}
        d = {"feature": names[self.feature] if names else int(self.feature), "n": int(self.n)}
        if self.left_values is not None:
            d["left_values"] = [_plain(v) for v in self.left_values]
            d["right_values"] = [_plain(v) for v in self.right_values]
        else:
            d["threshold"] = _plain(self.threshold)
        d["left"] = self.left.to_dict(names)
        d["right"] = self.right.to_dict(names)
        return d

    @classmethod
    def from_dict(cls, d: dict, names=None) -> "PolicyNode":
        if "arm" in d:
            return cls(arm=int(d["arm"]), n=int(d.get("n", 0)))
        f = names.index(d["feature"]) if names and isinstance(d["feature"], str) else int(d["feature"])
        node = cls(feature=f, n=int(d.get("n", 0)), left=cls.from_dict(d["left"], names),
                   right=cls.from_dict(d["right"], names))
        if "left_values" in d:
            node.left_values = tuple(d["left_values"])
            node.right_values = tuple(d["right_values"])
        else:
            node.threshold = float(d["threshold"])
        return node


def _plain(v):
    v = float(v)
    return int(v) if v.is_integer() else v


@dataclass
class PolicyTree:
    root: PolicyNode
    reward: float
    infeasible: bool = False
    feature_names: list | None = None
    categorical: np.ndarray | None = None
    n_categories: dict | None = None        # feature index -> number of valid codes

    def to_json(self, path=None) -> str:
        payload = {"reward": self.reward, "infeasible": self.infeasible,
                   "feature_names": self.feature_names,
                   "categorical": None if self.categorical is None else
                   [bool(c) for c in self.categorical],
                   "n_categories": None if self.n_categories is None else
                   {str(k): v for k, v in self.n_categories.items()},
                   "tree": self.root.to_dict(self.feature_names)}
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text_or_path) -> "PolicyTree":
        text = text_or_path
        if not str(text_or_path).lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        d = json.loads(text)
        names = d.get("feature_names")
        ncat = d.get("n_categories")
        return cls(PolicyNode.from_dict(d["tree"], names), d["reward"], d["infeasible"], names,
                   None if d.get("categorical") is None else np.array(d["categorical"]),
                   None if ncat is None else {int(k): v for k, v in ncat.items()})


# ----------------------------------------------------------------------------
# search

def order_categorical(x, scores) -> np.ndarray:
    """Category values sorted by the mean within-unit variance of the arm scores.

    Ties keep the order in which values first appear in ``x``.
    """
    x = np.asarray(x)
    var = np.var(np.asarray(scores, dtype=float), axis=1)
    values, first, inverse = np.unique(x, return_index=True, return_inverse=True)
    means = np.bincount(inverse, weights=var) / np.bincount(inverse)
    order = np.lexsort((first, means))
    return values[order]


def _leaf(scores, idx) -> PolicyNode:
    sums = scores[idx].sum(axis=0)
    return PolicyNode(arm=int(np.argmax(sums)), n=len(idx), sums=sums, idx=idx)


def _reward(node: PolicyNode) -> float:
    return float(sum(leaf.sums[leaf.arm] for leaf in node.leaves()))


class SearchContext:
    def __init__(self, scores, X, A, V, restrictions, categorical):
        self.scores = scores
        self.X = X
        self.A = A
        self.V = A if V is None else V
        self.K = scores.shape[1]
        self.categorical = categorical
        self.restrictions = restrictions
        if restrictions is not None and restrictions.active:
            self.caps, self.overall = restrictions.caps(len(scores), self.K)
        else:
            self.caps, self.overall = None, None

    # candidate splits on one feature: (order of idx, left sizes, split descriptors)
    def candidates(self, idx, m, A):
        x = self.X[idx, m]
        if self.categorical[m]:
            k = order_categorical(x, self.scores[idx])
            rank = np.searchsorted(np.sort(k), x)
            pos_of_value = np.empty(len(k), dtype=np.int64)
            pos_of_value[np.argsort(k)] = np.arange(len(k))
            r = pos_of_value[rank]
            order = np.argsort(r, kind="stable")
            cuts = np.searchsorted(r[order], np.arange(len(k) - 1), side="right")
            descr = [(None, tuple(k[:ii + 1]), tuple(k[ii + 1:])) for ii in range(len(k) - 1)]
            return order, cuts, descr
        order = np.argsort(x, kind="stable")
        xs = x[order]
        distinct = np.unique(xs)
        if len(distinct) < self.V:
            k = distinct
        else:
            k = np.unique(np.append(xs[::A], xs[-1]))
        k = k[:-1]
        cuts = np.searchsorted(xs, k, side="right")
        return order, cuts, [(float(t), None, None) for t in k]

    def violates(self, node) -> bool:
        if self.caps is None:
            return False
        counts = self.counts(node)
        return bool(np.any(counts > self.caps) or
                    (self.overall is not None and counts[1:].sum() > self.overall))

    def counts(self, node):
        counts = np.zeros(self.K, dtype=np.int64)
        for leaf in node.leaves():
            counts[leaf.arm] += leaf.n
        return counts

    def search(self, idx, L, A):
        if L == 1:
            leaf = _leaf(self.scores, idx)
            return float(leaf.sums[leaf.arm]), leaf
        A = max(A // 2, 1)
        reward, tree, flag = -np.inf, None, False
        for m in range(self.X.shape[1]):
            order, cuts, descr = self.candidates(idx, m, A)
            if len(cuts) == 0:
                continue
            if L == 2:
                # both children are leaves: evaluate all cuts at once
                s = np.cumsum(self.scores[idx[order]], axis=0)
                left = s[cuts - 1]
                right = s[-1] - left
                cand = left.max(axis=1) + right.max(axis=1)
                j = 0
                while True:
                    better = np.flatnonzero(cand[j:] > reward)
                    if better.size == 0:
                        break
                    j += int(better[0])
                    tl = _leaf(self.scores, idx[order[:cuts[j]]])
                    tr = _leaf(self.scores, idx[order[cuts[j]:]])
                    reward, tree, flag = self.combine(m, descr[j], tl, tr, reward, tree, flag)
                    j += 1
                continue
            for c, d in zip(cuts, descr):
                rl, tl = self.search(idx[order[:c]], L - 1, A)
                rr, tr = self.search(idx[order[c:]], L - 1, A)
                if rl + rr > reward:
                    reward, tree, flag = self.combine(m, d, tl, tr, reward, tree, flag)
        if tree is None:
            leaf = _leaf(self.scores, idx)
            return float(leaf.sums[leaf.arm]), leaf
        return reward, tree

    def combine(self, m, descr, tl, tr, reward_old, tree_old, flag_old):
        thr, lv, rv = descr
        node = PolicyNode(feature=m, threshold=thr, left_values=lv, right_values=rv,
                          left=tl, right=tr, n=tl.n + tr.n)
        r, t, infeasible = impose_restrictions(node, reward_old, tree_old, self)
        return r, t, infeasible


def impose_restrictions(candidate: PolicyNode, reward_old: float, tree_old, ctx) -> tuple:
    """Repair ``candidate`` to satisfy the caps; keep the better of repaired and incumbent.

    Returns ``(reward, tree, infeasible)``.  ``infeasible`` is True when the
    candidate could not be repaired, in which case the incumbent is returned.
    """
    if not ctx.violates(candidate):
        r = _reward(candidate)
        if r > reward_old:
            return r, candidate, False
        return reward_old, tree_old, False
    tree = candidate.copy()
    leaves = tree.leaves()
    var = [np.var(leaf.sums / leaf.n) for leaf in leaves]
    order = sorted(range(len(leaves)), key=lambda i: var[i])   # stable on ties
    for i in order:
        leaf = leaves[i]
        counts = ctx.counts(tree)
        if not _arm_over(ctx, counts, leaf.arm):
            continue
        means = leaf.sums / leaf.n
        options = [d for d in np.argsort(-means, kind="stable") if d != leaf.arm]
        for d in options:
            new = counts.copy()
            new[leaf.arm] -= leaf.n
            new[d] += leaf.n
            if not _arm_over(ctx, new, d):
                leaf.arm = int(d)
                break
        if not ctx.violates(tree):
            break
    if ctx.violates(tree):
        return reward_old, tree_old, True
    r = _reward(tree)
    if r > reward_old:
        return r, tree, False
    return reward_old, tree_old, False


def _arm_over(ctx, counts, d) -> bool:
    if counts[d] > ctx.caps[d]:
        return True
    return d > 0 and ctx.overall is not None and counts[1:].sum() > ctx.overall


def tree_search(scores, X, L: int, A: int = 1, V: int | None = None,
                restrictions: Restrictions | None = None, categorical=None,
                feature_names=None, n_categories=None) -> PolicyTree:
    """Best policy tree with ``L`` levels (``L = 1``: a single leaf).

    Parameters
    ----------
    scores : (n, K) array
        Policy value of assigning each arm to each unit.
    X : (n, p) array
        Features; categorical columns hold integer codes.
    L, A, V : int
        Levels, approximation parameter and max distinct values for exact
        enumeration (default ``A``).
    """
    scores = np.asarray(scores, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if L < 1:
        raise ConfigError("L must be at least 1")
    if A < 1:
        raise ConfigError("A must be at least 1")
    if len(scores) == 0 or len(scores) != len(X):
        raise DataError("scores and features must have the same nonzero number of rows")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    categorical = np.zeros(X.shape[1], dtype=bool) if categorical is None \
        else np.asarray(categorical, dtype=bool)
    ctx = SearchContext(scores, X, A, V, restrictions, categorical)
    _, root = ctx.search(np.arange(len(scores)), L, A)
    tree = PolicyTree(root, 0.0, bool(ctx.violates(root)), feature_names, categorical,
                      n_categories)
    tree.reward = tree_reward(tree, scores, X)
    return tree


# ----------------------------------------------------------------------------
# prediction and reporting

def predict_allocation(tree: PolicyTree, X) -> np.ndarray:
    """Arm of every row of ``X`` under ``tree``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    out = np.empty(len(X), dtype=np.int64)

    def route(node, rows):
        if node.is_leaf:
            out[rows] = node.arm
            return
        x = X[rows, node.feature]
        if node.left_values is not None:
            ncat = (tree.n_categories or {}).get(node.feature)
            if ncat is not None and np.any((x < 0) | (x >= ncat) | (x != np.round(x))):
                raise DataError(f"unseen category in feature {_name(tree, node.feature)}")
            go = np.isin(x, node.left_values)
        else:
            go = x <= node.threshold
        route(node.left, rows[go])
        route(node.right, rows[~go])

    route(tree.root, np.arange(len(X)))
    return out


def tree_reward(tree: PolicyTree, scores, X) -> float:
    """Total score of the allocation, summed leaf by leaf in ascending unit order."""
    scores = np.asarray(scores, dtype=float)
    arms = predict_allocation(tree, X)
    leaf_id = _leaf_ids(tree, X)
    total = 0.0
    for lid in np.unique(leaf_id):
        rows = np.flatnonzero(leaf_id == lid)
        total += float(np.sum(scores[rows, arms[rows[0]]]))
    return total


def _leaf_ids(tree: PolicyTree, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    out = np.empty(len(X), dtype=np.int64)
    counter = [0]

    def route(node, rows):
        if node.is_leaf:
            out[rows] = counter[0]
            counter[0] += 1
            return
        x = X[rows, node.feature]
        go = np.isin(x, node.left_values) if node.left_values is not None \
            else x <= node.threshold
        route(node.left, rows[go])
        route(node.right, rows[~go])

    route(tree.root, np.arange(len(X)))
    return out


def _name(tree, f):
    return tree.feature_names[f] if tree.feature_names else f"x{f}"


def merged(node: PolicyNode) -> PolicyNode:
    """Collapse sibling leaves (recursively) that carry the same arm."""
    if node.is_leaf:
        return node
    left, right = merged(node.left), merged(node.right)
    if left.is_leaf and right.is_leaf and left.arm == right.arm:
        return PolicyNode(arm=left.arm, n=left.n + right.n)
    out = node.copy()
    out.left, out.right = left, right
    return out


def rule_table(tree: PolicyTree, labels=ARM_LABELS, decimals: int = 1,
               category_labels=None) -> pd.DataFrame:
    """One row per (merged) stratum: conditions, allocated arm and stratum size."""
    rows = []

    def fmt_values(f, values):
        labs = (category_labels or {}).get(f)
        return ",".join(labs[int(v)] if labs else str(_plain(v)) for v in values)

    def describe(conds):
        parts = []
        for f, c in conds.items():
            name = _name(tree, f)
            if isinstance(c, set):
                parts.append(f"{name} in {{{fmt_values(f, sorted(c))}}}")
                continue
            lo, hi = c
            if lo is not None and hi is not None:
                parts.append(f"{lo:.{decimals}f} < {name} <= {hi:.{decimals}f}")
            elif hi is not None:
                parts.append(f"{name} <= {hi:.{decimals}f}")
            else:
                parts.append(f"{name} > {lo:.{decimals}f}")
        return " & ".join(parts) if parts else "all"

    def walk(node, conds):
        if node.is_leaf:
            rows.append({"rule": describe(conds), "arm": labels[node.arm], "n": node.n})
            return
        f = node.feature
        lc, rc = dict(conds), dict(conds)
        if node.left_values is not None:
            old = conds.get(f)
            lv, rv = {_plain(v) for v in node.left_values}, {_plain(v) for v in node.right_values}
            lc[f] = lv if old is None else old & lv
            rc[f] = rv if old is None else old & rv
        else:
            lo, hi = conds.get(f, (None, None))
            t = node.threshold
            lc[f] = (lo, t if hi is None else min(hi, t))
            rc[f] = (t if lo is None else max(lo, t), hi)
        walk(node.left, lc)
        walk(node.right, rc)

    walk(merged(tree.root), {})
    df = pd.DataFrame(rows)
    total = df["n"].sum()
    df["share"] = df["n"] / total if total else np.nan
    return df


def fit_policy_tree(scores, X, config: PolicyTreeConfig, categorical=None, feature_names=None,
                    n_categories=None) -> PolicyTree:
    return tree_search(scores, X, config.levels, config.approximation, config.max_categories,
                       config.restrictions, categorical, feature_names, n_categories)
