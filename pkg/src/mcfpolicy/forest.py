"""Honest multi-arm causal forest with a selection-bias aware splitting rule.

Each tree is grown on a random subsample (drawn without replacement and
stratified by arm).  The subsample is halved, again stratified by arm: the
*building* half decides the splits, the *honest* half supplies the units
whose outcomes enter the leaf estimates.  A target unit's weight for arm
``d`` is uniform over the honest arm-``d`` units in the leaf it falls into;
forest weights average the tree weights.

Splits minimize

    score = -(outcome MSE reduction + effect_weight * contrast shift) - lam * imbalance

The MSE reduction is summed over arms, so splits follow the features that
predict the potential outcomes.  The contrast shift measures how far the
children's pairwise arm contrasts move away from the parent's; it is off by
default because on small nodes it mostly rewards chance imbalance between
arms.  ``imbalance`` measures how far the children's arm shares move away
from the parent's: splits that leave the arm composition unchanged get no
bonus, splits that separate units with different assignment probabilities
do.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed
from numba import njit

from .dataset import N_ARMS, Dataset
from .exceptions import ConfigError, DataError

log = logging.getLogger(__name__)

FOREST_FORMAT_VERSION = 1
WEIGHT_THRESHOLDS = (0.01, 0.03, 0.04, 0.10, 0.25)
CONCERN_THRESHOLD = 0.04

PAIRS = tuple((d, e) for d, e in combinations(range(N_ARMS), 2))
# contrast matrix: column k is arm e minus arm d for pair (d, e)
_PAIR_MATRIX = np.zeros((N_ARMS, len(PAIRS)))
for _k, (_d, _e) in enumerate(PAIRS):
    _PAIR_MATRIX[_e, _k] = 1.0
    _PAIR_MATRIX[_d, _k] = -1.0


@dataclass
class ForestConfig:
    n_trees: int = 1000
    subsample_share: float = 0.67
    min_leaf: int = 5
    m_try: int = 6
    penalty_mult: float = 1.0
    honesty_share: float = 0.5
    outcome_mse: bool = True
    effect_weight: float = 0.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.subsample_share <= 1:
            raise ConfigError("subsample share must lie in (0, 1]")
        if self.min_leaf < 2:
            raise ConfigError("minimum leaf size must be at least 2")
        if self.m_try < 1:
            raise ConfigError("m_try must be positive")
        if self.n_trees < 1:
            raise ConfigError("need at least one tree")
        if not 0 < self.honesty_share < 1:
            raise ConfigError("honesty share must lie in (0, 1)")
        if self.penalty_mult < 0:
            raise ConfigError("penalty multiplier must be nonnegative")
        if self.effect_weight < 0:
            raise ConfigError("effect weight must be nonnegative")
        if not self.outcome_mse and self.effect_weight == 0:
            raise ConfigError("split criterion needs the outcome MSE or the effect term")

    @classmethod
    def from_dict(cls, d: dict) -> "ForestConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown forest config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Tree:
    feature: np.ndarray        # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    cat_left: np.ndarray       # (nodes, max categories) bool; categories routed left
    subsample: np.ndarray      # training indices in the subsample
    honest: np.ndarray         # training indices of the honest half
    honest_leaf: np.ndarray    # leaf of each honest unit

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X: np.ndarray, categorical: np.ndarray) -> np.ndarray:
        """Leaf index for every row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        ncat = self.cat_left.shape[1]
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r, nd, ff = rows[inner], node[inner], f[inner]
            x = X[r, ff]
            is_cat = categorical[ff]
            codes = np.clip(x, 0, max(ncat - 1, 0)).astype(np.int64)
            go_left = np.where(
                is_cat,
                self.cat_left[nd, codes] & (x < ncat) if ncat else False,
                x <= self.threshold[nd],
            )
            node[r] = np.where(go_left, self.left[nd], self.right[nd])

    def to_dict(self) -> dict:
        cats = [np.flatnonzero(row).tolist() for row in self.cat_left]
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "cat_left": cats,
                "subsample": self.subsample.tolist(), "honest": self.honest.tolist(),
                "honest_leaf": self.honest_leaf.tolist()}

    @classmethod
    def from_dict(cls, d: dict, n_categories: int) -> "Tree":
        cat_left = np.zeros((len(d["feature"]), n_categories), dtype=bool)
        for i, cats in enumerate(d["cat_left"]):
            cat_left[i, cats] = True
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=float),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   cat_left, np.array(d["subsample"], dtype=np.int64),
                   np.array(d["honest"], dtype=np.int64),
                   np.array(d["honest_leaf"], dtype=np.int64))


@dataclass
class ForestModel:
    config: ForestConfig
    trees: list[Tree]
    X: np.ndarray
    treatment: np.ndarray
    y_tree: np.ndarray
    feature_names: list[str]
    categorical: np.ndarray
    n_categories: int
    penalty: float
    ids: np.ndarray = field(default_factory=lambda: np.array([]))

    @property
    def n_train(self) -> int:
        return len(self.treatment)

    def to_json(self, path) -> None:
        payload = {
            "format_version": FOREST_FORMAT_VERSION,
            # the worker count never changes the trees, so it is not stored
            "config": {k: v for k, v in asdict(self.config).items() if k != "workers"},
            "feature_names": self.feature_names,
            "categorical": self.categorical.tolist(),
            "n_categories": self.n_categories,
            "penalty": self.penalty,
            "ids": [str(i) for i in self.ids],
            "treatment": self.treatment.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path, dataset: Dataset, y_tree=None) -> "ForestModel":
        """Reattach a stored forest to the training data it was grown on."""
        with open(path) as fh:
            d = json.load(fh)
        if d.get("format_version") != FOREST_FORMAT_VERSION:
            raise DataError(f"unsupported forest format {d.get('format_version')!r}")
        if d["feature_names"] != dataset.feature_names or len(d["ids"]) != dataset.n \
                or any(a != str(b) for a, b in zip(d["ids"], dataset.ids)):
            raise DataError("forest file does not match the training dataset")
        trees = [Tree.from_dict(t, d["n_categories"]) for t in d["trees"]]
        return cls(ForestConfig(**d["config"]), trees, dataset.X, dataset.treatment,
                   np.zeros(dataset.n) if y_tree is None else np.asarray(y_tree, dtype=float),
                   d["feature_names"], np.array(d["categorical"], dtype=bool),
                   d["n_categories"], d["penalty"], dataset.ids)


# ----------------------------------------------------------------------------
# split scoring

def split_score(counts_l, sums_l, counts_p, sums_p, lam, sq_l=None, sq_p=None,
                effect_weight=1.0):
    """Score of candidate splits given per-arm building-sample statistics.

    ``counts_*`` and ``sums_*`` hold per-arm counts and outcome sums of the
    left child and of the parent (shape ``(..., 4)``; the right child is the
    difference).  Every arm must be present in both children.

    score = -(effect_weight * H + G) - lam * P

    H = sum_c n_c/n sum_{d<e} (tau_c(d, e) - tau_parent(d, e))**2 with tau the
    difference of arm means, G the reduction of the within-arm outcome sum of
    squares per parent unit (only when squared sums ``sq_*`` are given) and
    P = sum_c n_c/n sum_d (share_c(d) - share_parent(d))**2.  Lower is better.
    """
    counts_l = np.asarray(counts_l, dtype=float)
    sums_l = np.asarray(sums_l, dtype=float)
    counts_p = np.asarray(counts_p, dtype=float)
    sums_p = np.asarray(sums_p, dtype=float)
    counts_r = counts_p - counts_l
    sums_r = sums_p - sums_l
    n_p = counts_p.sum(axis=-1)
    n_l = counts_l.sum(axis=-1)
    n_r = counts_r.sum(axis=-1)
    w_l, w_r = n_l / n_p, n_r / n_p

    tau_p = (sums_p / counts_p) @ _PAIR_MATRIX
    tau_l = (sums_l / counts_l) @ _PAIR_MATRIX
    tau_r = (sums_r / counts_r) @ _PAIR_MATRIX
    hetero = w_l * ((tau_l - tau_p) ** 2).sum(axis=-1) + w_r * ((tau_r - tau_p) ** 2).sum(axis=-1)

    share_p = counts_p / n_p[..., None]
    share_l = counts_l / n_l[..., None]
    share_r = counts_r / n_r[..., None]
    imbalance = w_l * ((share_l - share_p) ** 2).sum(axis=-1) \
        + w_r * ((share_r - share_p) ** 2).sum(axis=-1)

    gain = effect_weight * hetero
    if sq_l is not None:
        sq_l = np.asarray(sq_l, dtype=float)
        sq_p = np.asarray(sq_p, dtype=float)
        sq_r = sq_p - sq_l
        sse_p = (sq_p - sums_p ** 2 / counts_p).sum(axis=-1)
        sse_l = (sq_l - sums_l ** 2 / counts_l).sum(axis=-1)
        sse_r = (sq_r - sums_r ** 2 / counts_r).sum(axis=-1)
        gain = gain + (sse_p - sse_l - sse_r) / n_p
    return -gain - lam * imbalance


def _best_split(xb, ab, yb, xh, ah, min_leaf, lam, use_mse, effect_weight, categorical, n_cat):
    """Best threshold on one feature; returns (score, threshold, left categories) or None."""
    K = N_ARMS
    if categorical:
        # order categories by building-sample outcome mean, then split as ordered
        present = np.unique(xb).astype(np.int64)
        means = np.array([yb[xb == c].mean() for c in present])
        order = present[np.argsort(means, kind="stable")]
        rank = np.full(n_cat, len(order), dtype=float)  # unseen categories go right
        rank[order] = np.arange(len(order))
        xb = rank[xb.astype(np.int64)]
        xh = rank[np.clip(xh, 0, n_cat - 1).astype(np.int64)]

    score, thr = _scan_feature(np.ascontiguousarray(xb, dtype=np.float64), ab, yb,
                               np.ascontiguousarray(xh, dtype=np.float64), ah,
                               min_leaf, lam, use_mse, effect_weight)
    if not np.isfinite(score):
        return None
    left_cats = np.flatnonzero(rank <= thr) if categorical else None
    return score, thr, left_cats


@njit(cache=True)
def _scan_feature(xb, ab, yb, xh, ah, min_leaf, lam, use_mse, effect_weight):
    """Sweep all thresholds of one feature; same formula as :func:`split_score`."""
    K = 4
    nb, nh = len(xb), len(xh)
    ob = np.argsort(xb, kind="mergesort")
    oh = np.argsort(xh, kind="mergesort")
    Cp = np.zeros(K)
    Sp = np.zeros(K)
    Qp = np.zeros(K)
    Hp = np.zeros(K)
    for i in range(nb):
        a = ab[i]
        Cp[a] += 1.0
        Sp[a] += yb[i]
        Qp[a] += yb[i] * yb[i]
    for i in range(nh):
        Hp[ah[i]] += 1.0
    for d in range(K):
        if Cp[d] < 2 or Hp[d] < 2:
            return np.inf, np.nan
    mp = Sp / Cp
    sse_p = 0.0
    for d in range(K):
        sse_p += Qp[d] - Sp[d] * Sp[d] / Cp[d]
    CL = np.zeros(K)
    SL = np.zeros(K)
    QL = np.zeros(K)
    HL = np.zeros(K)
    mL = np.zeros(K)
    mR = np.zeros(K)
    hptr = 0
    hl_tot = 0
    best = np.inf
    best_thr = np.nan
    for i in range(nb - 1):
        j = ob[i]
        a = ab[j]
        CL[a] += 1.0
        SL[a] += yb[j]
        QL[a] += yb[j] * yb[j]
        v = xb[j]
        vn = xb[ob[i + 1]]
        if not v < vn:
            continue
        nl = i + 1
        nr = nb - nl
        if nl < min_leaf:
            continue
        if nr < min_leaf:
            break
        thr = (v + vn) / 2
        while hptr < nh and xh[oh[hptr]] <= thr:
            HL[ah[oh[hptr]]] += 1.0
            hl_tot += 1
            hptr += 1
        if hl_tot < min_leaf or nh - hl_tot < min_leaf:
            continue
        ok = True
        for d in range(K):
            if CL[d] < 1 or Cp[d] - CL[d] < 1 or HL[d] < 1 or Hp[d] - HL[d] < 1:
                ok = False
                break
        if not ok:
            continue
        wl = nl / nb
        wr = nr / nb
        for d in range(K):
            mL[d] = SL[d] / CL[d]
            mR[d] = (Sp[d] - SL[d]) / (Cp[d] - CL[d])
        hetero_l = 0.0
        hetero_r = 0.0
        for e in range(K):
            for d in range(e):
                tp = mp[e] - mp[d]
                hetero_l += (mL[e] - mL[d] - tp) ** 2
                hetero_r += (mR[e] - mR[d] - tp) ** 2
        imb_l = 0.0
        imb_r = 0.0
        for d in range(K):
            sp_ = Cp[d] / nb
            imb_l += (CL[d] / nl - sp_) ** 2
            imb_r += ((Cp[d] - CL[d]) / nr - sp_) ** 2
        gain = effect_weight * (wl * hetero_l + wr * hetero_r)
        if use_mse:
            sse = 0.0
            for d in range(K):
                sse += QL[d] - SL[d] * SL[d] / CL[d]
                sr = Sp[d] - SL[d]
                sse += (Qp[d] - QL[d]) - sr * sr / (Cp[d] - CL[d])
            gain += (sse_p - sse) / nb
        score = -gain - lam * (wl * imb_l + wr * imb_r)
        if score < best:
            best = score
            best_thr = thr
    return best, best_thr


def _stratified_split(idx, arms, share, rng):
    """Split ``idx`` into (first, second) with ``share`` of each arm in ``first``."""
    first = []
    for d in range(N_ARMS):
        members = idx[arms[idx] == d]
        members = members[rng.permutation(len(members))]
        k = int(round(share * len(members)))
        if len(members) >= 2:
            k = min(max(k, 1), len(members) - 1)
        first.append(members[:k])
    first = np.sort(np.concatenate(first))
    second = np.setdiff1d(idx, first, assume_unique=True)
    return first, second


def _grow_tree(X, arms, y, categorical, n_cat, config: ForestConfig, lam, seed) -> Tree:
    rng = np.random.default_rng(seed)
    n, p = X.shape
    everyone = np.arange(n)
    if config.subsample_share < 1:
        sub, _ = _stratified_split(everyone, arms, config.subsample_share, rng)
    else:
        sub = everyone
    build, honest = _stratified_split(sub, arms, 1 - config.honesty_share, rng)
    m_try = min(config.m_try, p)

    feature, threshold, left, right, cat_rows = [], [], [], [], []
    members = []  # (building idx, honest idx) per node

    def new_node(b, h):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        cat_rows.append(None)
        members.append((b, h))
        return len(feature) - 1

    stack = [new_node(build, honest)]
    while stack:
        node = stack.pop()
        b, h = members[node]
        if len(b) < 2 * config.min_leaf or len(h) < 2 * config.min_leaf:
            continue
        best = None
        for f in rng.choice(p, size=m_try, replace=False):
            res = _best_split(X[b, f], arms[b], y[b], X[h, f], arms[h], config.min_leaf, lam,
                              config.outcome_mse, config.effect_weight,
                              bool(categorical[f]), n_cat)
            if res is not None and (best is None or res[0] < best[0]):
                best = (res[0], f, res[1], res[2])
        if best is None:
            continue
        _, f, thr, cats = best
        if categorical[f]:
            mask = np.zeros(n_cat, dtype=bool)
            mask[cats] = True
            go_b, go_h = mask[X[b, f].astype(np.int64)], mask[X[h, f].astype(np.int64)]
            cat_rows[node] = mask
        else:
            go_b, go_h = X[b, f] <= thr, X[h, f] <= thr
        feature[node], threshold[node] = int(f), thr
        left[node] = new_node(b[go_b], h[go_h])
        right[node] = new_node(b[~go_b], h[~go_h])
        stack.extend([right[node], left[node]])

    n_nodes = len(feature)
    cat_left = np.zeros((n_nodes, n_cat), dtype=bool)
    for i, row in enumerate(cat_rows):
        if row is not None:
            cat_left[i] = row
    honest_leaf = np.empty(n, dtype=np.int64)
    for i, (_, h) in enumerate(members):
        if feature[i] < 0:
            honest_leaf[h] = i
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), cat_left, sub, honest, honest_leaf[honest])


def tree_seeds(seed: int, n_trees: int) -> list[int]:
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n_trees)]


def build_forest(dataset: Dataset, config: ForestConfig | None = None, y=None,
                 outcome="emp_0_30") -> ForestModel:
    """Grow ``config.n_trees`` honest trees on ``dataset``.

    ``y`` (or the named ``outcome``) is the outcome that guides splitting; the
    resulting weights apply to any outcome of the same units.  Trees are
    built from independent seeds, so the forest does not depend on
    ``config.workers``.
    """
    config = config or ForestConfig()
    counts = np.bincount(dataset.treatment, minlength=N_ARMS)
    if np.any(counts == 0):
        raise DataError(f"arm(s) absent from training data: {np.flatnonzero(counts == 0).tolist()}")
    if dataset.n < 4 * config.min_leaf:
        log.warning("only %d units for minimum leaf size %d", dataset.n, config.min_leaf)
    y = dataset.outcome(outcome) if y is None else np.asarray(y, dtype=float)
    categorical = dataset.categorical_mask
    n_cat = max([len(s.categories) for s in dataset.specs if s.is_categorical], default=0)
    lam = config.penalty_mult * float(np.var(y))
    seeds = tree_seeds(config.seed, config.n_trees)
    X = dataset.X
    if config.workers > 1:
        trees = Parallel(n_jobs=config.workers)(
            delayed(_grow_tree)(X, dataset.treatment, y, categorical, n_cat, config, lam, s)
            for s in seeds)
    else:
        trees = [_grow_tree(X, dataset.treatment, y, categorical, n_cat, config, lam, s)
                 for s in seeds]
    return ForestModel(config, list(trees), X, dataset.treatment, y, dataset.feature_names,
                       categorical, n_cat, lam, dataset.ids)


# ----------------------------------------------------------------------------
# weights

@dataclass
class WeightMatrix:
    """Per-arm sparse weights, rows = targets, columns = training units."""

    weights: list[sp.csr_matrix]
    supported: np.ndarray      # (targets, arms) bool
    treatment: np.ndarray      # arms of the training units

    @property
    def n_targets(self) -> int:
        return self.supported.shape[0]

    def arm(self, d: int) -> sp.csr_matrix:
        return self.weights[d]

    def potential(self, y) -> np.ndarray:
        """Weighted outcome means, shape (targets, arms); NaN where unsupported."""
        y = np.asarray(y, dtype=float)
        out = np.column_stack([w @ y for w in self.weights])
        out[~self.supported] = np.nan
        return out

    def row_sums(self) -> np.ndarray:
        return np.column_stack([np.asarray(w.sum(axis=1)).ravel() for w in self.weights])


def _ragged_arange(starts, counts):
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    return np.repeat(starts, counts) + np.arange(total) - offsets


def _tree_triplets(tree: Tree, leaves_t, rows, arms, d):
    """COO triplets of one tree's arm-``d`` weights for targets in leaves ``leaves_t``."""
    h = tree.honest[arms[tree.honest] == d]
    hl = tree.honest_leaf[arms[tree.honest] == d]
    order = np.argsort(hl, kind="stable")
    h, hl = h[order], hl[order]
    count = np.bincount(hl, minlength=tree.n_nodes)
    start = np.cumsum(count) - count
    c = count[leaves_t]
    cols = h[_ragged_arange(start[leaves_t], c)]
    r = np.repeat(rows, c)
    with np.errstate(divide="ignore"):
        vals = np.repeat(1.0 / c, c)
    return r, cols, vals, c > 0


def compute_weights(forest: ForestModel, X=None, oob: bool = False,
                    chunk: int = 50) -> WeightMatrix:
    """Forest weights of every target row of ``X`` (default: the training units).

    With ``oob=True`` the targets are the training units and each tree only
    contributes to units outside its subsample.
    """
    if oob:
        X = forest.X
    X = forest.X if X is None else np.asarray(X, dtype=float)
    nt, n = len(X), forest.n_train
    arms = forest.treatment
    totals = [sp.csr_matrix((nt, n)) for _ in range(N_ARMS)]
    support = np.zeros((nt, N_ARMS))
    everyone = np.arange(nt)
    buf = [[[], [], []] for _ in range(N_ARMS)]

    def flush():
        for d in range(N_ARMS):
            r, c, v = buf[d]
            if r:
                m = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                                  shape=(nt, n))
                totals[d] = totals[d] + m
            buf[d] = [[], [], []]

    for t, tree in enumerate(forest.trees):
        if oob:
            inside = np.zeros(n, dtype=bool)
            inside[tree.subsample] = True
            rows = everyone[~inside]
        else:
            rows = everyone
        leaves = tree.apply(X[rows], forest.categorical)
        for d in range(N_ARMS):
            r, c, v, ok = _tree_triplets(tree, leaves, rows, arms, d)
            buf[d][0].append(r)
            buf[d][1].append(c)
            buf[d][2].append(v)
            support[rows[ok], d] += 1
        if (t + 1) % chunk == 0:
            flush()
    flush()
    supported = support > 0
    out = []
    for d in range(N_ARMS):
        scale = np.where(supported[:, d], 1.0 / np.maximum(support[:, d], 1), 0.0)
        w = sp.diags(scale) @ totals[d]
        w = w.tocsr()
        w.sum_duplicates()
        w.sort_indices()
        out.append(w)
    unsupported = int((~supported).sum())
    if unsupported:
        log.info("%d (target, arm) cells without support", unsupported)
    return WeightMatrix(out, supported, arms)


def predict_potential(forest: ForestModel, y, X=None, oob: bool = False) -> np.ndarray:
    """Forest estimates of E[y | x, D = d] for every target and arm (NaN if unsupported).

    Equivalent to ``compute_weights(...).potential(y)`` but computed from
    per-tree leaf means without materializing the weights.
    """
    y = np.asarray(y, dtype=float)
    if oob:
        X = forest.X
    X = forest.X if X is None else np.asarray(X, dtype=float)
    nt, n = len(X), forest.n_train
    arms = forest.treatment
    total = np.zeros((nt, N_ARMS))
    support = np.zeros((nt, N_ARMS))
    for tree in forest.trees:
        if oob:
            rows = np.setdiff1d(np.arange(nt), tree.subsample, assume_unique=True)
        else:
            rows = slice(None)
        leaves = tree.apply(X[rows], forest.categorical)
        ha = arms[tree.honest]
        for d in range(N_ARMS):
            sel = ha == d
            cnt = np.bincount(tree.honest_leaf[sel], minlength=tree.n_nodes)
            s = np.bincount(tree.honest_leaf[sel], weights=y[tree.honest[sel]],
                            minlength=tree.n_nodes)
            c = cnt[leaves]
            with np.errstate(invalid="ignore", divide="ignore"):
                mean = np.where(c > 0, s[leaves] / np.maximum(c, 1), 0.0)
            total[rows, d] += mean
            support[rows, d] += c > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / support
    out[support == 0] = np.nan
    return out


def weight_diagnostics(weights: WeightMatrix, groups: dict | None = None,
                       thresholds=WEIGHT_THRESHOLDS) -> dict:
    """Share of nonzero weights above each threshold (relative to the row's absolute mass).

    Rows are reported for the ATE (average weight row over supported
    targets), for each GATE cell in ``groups`` (name -> boolean target mask)
    and for the IATE rows pooled.  The top threshold is inclusive (``>=``),
    the others strict.  ``concern`` is raised iff some ATE-level weight
    exceeds 4%.
    """
    top = max(thresholds)

    def shares(vals):
        vals = np.asarray(vals, dtype=float)
        if vals.size == 0:
            return {f"{t:.0%}": 0.0 for t in thresholds}
        # the tolerance keeps exact thresholds (uniform 1/100 weights) out of the bins
        return {f"{t:.0%}": float(np.mean(vals >= t - 1e-12 if t == top else vals > t + 1e-12))
                for t in thresholds}

    def level_rows(level, mask):
        rows = []
        for d in range(N_ARMS):
            sel = weights.supported[:, d] & mask
            if not sel.any():
                continue
            w = weights.arm(d)[np.flatnonzero(sel)]
            if level == "IATE":
                w = abs(w)
                mass = np.asarray(w.sum(axis=1)).ravel()
                rel = (sp.diags(1 / mass) @ w).tocsr().data
            else:
                avg = np.asarray(abs(w).mean(axis=0)).ravel()
                rel = avg[avg > 0] / avg.sum()
            rows.append({"level": level, "arm": d, "n_weights": int(rel.size),
                         "max": float(rel.max()) if rel.size else 0.0, **shares(rel)})
        return rows

    everyone = np.ones(weights.n_targets, dtype=bool)
    table = level_rows("ATE", everyone)
    for name, mask in (groups or {}).items():
        table += level_rows(f"GATE:{name}", np.asarray(mask, dtype=bool))
    table += level_rows("IATE", everyone)
    concern = any(r["max"] > CONCERN_THRESHOLD for r in table if r["level"] == "ATE")
    return {"rows": table, "concern": bool(concern)}


# ----------------------------------------------------------------------------
# tuning and feature deselection

def oob_mse(forest: ForestModel, y=None, X=None) -> float:
    """Out-of-bag MSE of predicting each unit's outcome under its own arm."""
    y = forest.y_tree if y is None else np.asarray(y, dtype=float)
    pred = _oob_own_arm(forest, y, X)
    ok = ~np.isnan(pred)
    return float(np.mean((y[ok] - pred[ok]) ** 2))


def _oob_own_arm(forest, y, X=None):
    X = forest.X if X is None else X
    nt = len(X)
    arms = forest.treatment
    total = np.zeros(nt)
    support = np.zeros(nt)
    for tree in forest.trees:
        rows = np.setdiff1d(np.arange(nt), tree.subsample, assume_unique=True)
        leaves = tree.apply(X[rows], forest.categorical)
        ha = arms[tree.honest]
        key_h = tree.honest_leaf * N_ARMS + ha
        size = tree.n_nodes * N_ARMS
        cnt = np.bincount(key_h, minlength=size)
        s = np.bincount(key_h, weights=y[tree.honest], minlength=size)
        key_t = leaves * N_ARMS + arms[rows]
        c = cnt[key_t]
        total[rows] += np.where(c > 0, s[key_t] / np.maximum(c, 1), 0.0)
        support[rows] += c > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / support
    out[support == 0] = np.nan
    return out


def tune_m_try(dataset: Dataset, config: ForestConfig, candidates=(6, 15, 40), y=None,
               outcome="emp_0_30") -> tuple[int, dict]:
    """Pick the candidate number of split variables with the smallest OOB MSE."""
    y = dataset.outcome(outcome) if y is None else np.asarray(y, dtype=float)
    results = {}
    for m in sorted({min(c, dataset.p) for c in candidates}):
        cfg = ForestConfig(**{**asdict(config), "m_try": m})
        results[m] = oob_mse(build_forest(dataset, cfg, y=y), y)
    best = min(results, key=lambda m: (results[m], m))
    return best, results


@dataclass
class Deselection:
    retained: list[str]
    deleted: list[str]
    vim: dict
    groups: list[list[str]]
    group_vim: list[float]
    cumulative_vim: list[float]
    selection_idx: np.ndarray
    estimation_idx: np.ndarray


def permutation_vim(forest: ForestModel, columns, rng, y=None, base=None) -> float:
    """Increase in OOB MSE when ``columns`` are permuted jointly (one permutation)."""
    y = forest.y_tree if y is None else y
    base = oob_mse(forest, y) if base is None else base
    Xp = forest.X.copy()
    perm = rng.permutation(len(Xp))
    cols = list(columns)
    Xp[:, cols] = forest.X[perm][:, cols]
    return oob_mse(forest, y, X=Xp) - base


def feature_deselect(dataset: Dataset, config: ForestConfig | None = None, share: float = 0.2,
                     n_groups: int = 10, y=None, outcome="emp_0_30", seed: int = 0) -> Deselection:
    """Grouped permutation-importance deletion of irrelevant features.

    A random ``share`` of the units (stratified by arm) is used exclusively
    for this step.  Features are sorted by their single-feature VIM and cut
    into ``n_groups`` groups (size one when there are fewer features).  The
    worst group is deleted if its VIM is non-positive; then the worst and
    next-worst are permuted jointly, and so on, stopping at the first
    positive joint VIM.  Only groups whose own VIM is non-positive take part.
    """
    config = config or ForestConfig()
    y_all = dataset.outcome(outcome) if y is None else np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    sel_idx, est_idx = _stratified_split(np.arange(dataset.n), dataset.treatment, share, rng)
    sub = dataset.subset(sel_idx)
    y = y_all[sel_idx]
    forest = build_forest(sub, config, y=y)
    base = oob_mse(forest, y)
    names = dataset.feature_names
    vim = {names[j]: permutation_vim(forest, [j], rng, y, base) for j in range(dataset.p)}
    order = sorted(range(dataset.p), key=lambda j: (vim[names[j]], j))
    groups = [list(g) for g in np.array_split(order, min(n_groups, dataset.p))]
    group_vim = [permutation_vim(forest, g, rng, y, base) for g in groups]

    deleted: list[int] = []
    cumulative = []
    for g, gv in zip(groups, group_vim):
        if gv > 0:
            continue
        joint = permutation_vim(forest, deleted + g, rng, y, base)
        cumulative.append(joint)
        if joint > 0:
            break
        deleted += g
    if len(deleted) == dataset.p:
        raise DataError("feature deselection removed every feature")
    retained = [names[j] for j in range(dataset.p) if j not in deleted]
    return Deselection(retained, [names[j] for j in sorted(deleted)], vim,
                       [[names[j] for j in g] for g in groups], group_vim, cumulative,
                       sel_idx, est_idx)
