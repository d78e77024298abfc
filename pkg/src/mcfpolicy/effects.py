"""Weight-based effect estimation: IATE, GATE, ATE and ATET with standard errors.

Every estimator is linear in the outcomes, ``theta_d = sum_j w_j y_j`` with
weights over training units of arm ``d``.  Its variance is estimated as

    Var(theta_d) = sum_j w_j**2 (y_j - y_hat_{-j})**2

where ``y_hat_{-j}`` is the weighted mean of the same weight vector with unit
``j`` left out.  Contrasts add the variances of the two arms.  Aggregated
parameters average the IATE weight rows over the conditioning population,
so their points are exact averages of the corresponding IATEs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy import stats
from sklearn.linear_model import LogisticRegression

from .dataset import ARM_LABELS, DEFAULT_OUTCOMES, HORIZON, N_ARMS, Dataset, Outcome
from .exceptions import DataError, NumericError
from .forest import ForestConfig, WeightMatrix, build_forest, compute_weights
from .reporting import format_estimate, stars, two_sided_p

log = logging.getLogger(__name__)

Z_90 = stats.norm.ppf(0.95)
CONTRASTS = tuple((m, l) for m in range(N_ARMS) for l in range(m))


@dataclass(frozen=True)
class EffectEstimate:
    outcome: str
    m: int
    l: int
    level: str          # ATE, ATET, GATE, IATE or LEVEL (potential outcome mean)
    population: str     # "all", an arm label, "<feature>=<value>" or a unit id
    point: float
    se: float
    n: int

    @property
    def p_value(self) -> float:
        return two_sided_p(self.point, self.se)

    @property
    def stars(self) -> str:
        return stars(self.p_value)

    def text(self, decimals: int = 1, adaptive: bool = False) -> str:
        return format_estimate(self.point, self.se, decimals, adaptive)

    def as_row(self) -> dict:
        return {"outcome": self.outcome, "level": self.level, "population": self.population,
                "m": ARM_LABELS[self.m], "l": ARM_LABELS[self.l] if self.l >= 0 else "",
                "point": self.point, "se": self.se, "p_value": self.p_value,
                "stars": self.stars, "n": self.n}


# ----------------------------------------------------------------------------
# variance of weighted means

def weighted_mean_variance(w, y, fallback_mean: float) -> float:
    """Leave-self-out variance of ``sum_j w_j y_j`` for a dense weight vector."""
    w = np.asarray(w, dtype=float)
    nz = np.flatnonzero(w)
    if nz.size == 0:
        return 0.0
    wj, yj = w[nz], np.asarray(y, dtype=float)[nz]
    rest = wj.sum() - wj
    with np.errstate(invalid="ignore", divide="ignore"):
        loo = (wj @ yj - wj * yj) / rest
    loo = np.where(rest > 1e-12, loo, fallback_mean)
    return float(np.sum(wj ** 2 * (yj - loo) ** 2))


def _rowwise_variance(W: sp.csr_matrix, y, fallback_mean: float):
    """Leave-self-out variance for every row of a sparse weight matrix."""
    W = W.tocsr()
    rows = np.repeat(np.arange(W.shape[0]), np.diff(W.indptr))
    w = W.data
    yj = y[W.indices]
    total = np.bincount(rows, weights=w * yj, minlength=W.shape[0])
    mass = np.bincount(rows, weights=w, minlength=W.shape[0])
    rest = mass[rows] - w
    with np.errstate(invalid="ignore", divide="ignore"):
        loo = (total[rows] - w * yj) / rest
    loo = np.where(rest > 1e-12, loo, fallback_mean)
    return np.bincount(rows, weights=w ** 2 * (yj - loo) ** 2, minlength=W.shape[0])


def _arm_means(y, treatment):
    return np.array([y[treatment == d].mean() if np.any(treatment == d) else 0.0
                     for d in range(N_ARMS)])


# ----------------------------------------------------------------------------
# IATEs

@dataclass
class IateSet:
    outcome: str
    m: int
    l: int
    point: np.ndarray
    se: np.ndarray
    supported: np.ndarray

    @property
    def z(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.point / self.se


def estimate_iates(weights: WeightMatrix, y, m: int, l: int, outcome: str = "y") -> IateSet:
    """IATE(m, l) for every target row; unsupported rows are NaN."""
    y = np.asarray(y, dtype=float)
    ok = weights.supported[:, m] & weights.supported[:, l]
    if (~ok).any():
        log.info("%d targets excluded from IATE(%d,%d): arm not supported", int((~ok).sum()), m, l)
    point = np.full(len(ok), np.nan)
    se = np.full(len(ok), np.nan)
    if m == l:
        point[ok], se[ok] = 0.0, 0.0
        return IateSet(outcome, m, l, point, se, ok)
    means = _arm_means(y, weights.treatment)
    Wm, Wl = weights.arm(m), weights.arm(l)
    point[ok] = (Wm @ y - Wl @ y)[ok]
    var = _rowwise_variance(Wm, y, means[m]) + _rowwise_variance(Wl, y, means[l])
    se[ok] = np.sqrt(var[ok])
    return IateSet(outcome, m, l, point, se, ok)


# ----------------------------------------------------------------------------
# aggregated parameters

class EffectEstimator:
    """Aggregate IATE weights over populations for one weight matrix.

    Parameters
    ----------
    weights : WeightMatrix
        Forest weights with the training units as targets.
    outcomes : dict
        Outcome name -> outcome vector of the training units.
    """

    def __init__(self, weights: WeightMatrix, outcomes: dict):
        self.weights = weights
        self.outcomes = {k: np.asarray(v, dtype=float) for k, v in outcomes.items()}
        self.treatment = weights.treatment
        self._pot = {k: weights.potential(y) for k, y in self.outcomes.items()}

    @classmethod
    def from_dataset(cls, weights: WeightMatrix, dataset: Dataset, outcomes=DEFAULT_OUTCOMES):
        return cls(weights, {Outcome.parse(o).name if isinstance(o, str) else o.name:
                             dataset.outcome(o) for o in outcomes})

    def potential(self, outcome: str) -> np.ndarray:
        return self._pot[outcome]

    def _rows(self, mask, arms):
        mask = np.ones(self.weights.n_targets, dtype=bool) if mask is None \
            else np.asarray(mask, dtype=bool)
        ok = mask.copy()
        for d in arms:
            ok &= self.weights.supported[:, d]
        dropped = int(mask.sum() - ok.sum())
        if dropped:
            log.info("%d units without support excluded from aggregation", dropped)
        if not ok.any():
            raise DataError("empty conditioning population")
        return np.flatnonzero(ok)

    def mean_weights(self, d: int, rows) -> np.ndarray:
        return np.asarray(self.weights.arm(d)[rows].mean(axis=0)).ravel()

    def estimate(self, outcome: str, m: int, l: int, mask=None, level="ATE",
                 population="all") -> EffectEstimate:
        """Effect of arm ``m`` vs ``l`` averaged over the units in ``mask``."""
        y = self.outcomes[outcome]
        rows = self._rows(mask, (m, l))
        pot = self._pot[outcome]
        if m == l:
            return EffectEstimate(outcome, m, l, level, population, 0.0, 0.0, len(rows))
        point = float(np.mean(pot[rows, m] - pot[rows, l]))
        means = _arm_means(y, self.treatment)
        var = weighted_mean_variance(self.mean_weights(m, rows), y, means[m]) \
            + weighted_mean_variance(self.mean_weights(l, rows), y, means[l])
        return EffectEstimate(outcome, m, l, level, population, point, math.sqrt(var), len(rows))

    def level(self, outcome: str, d: int, mask=None, population="all") -> EffectEstimate:
        """Mean potential outcome under arm ``d`` over ``mask``."""
        y = self.outcomes[outcome]
        rows = self._rows(mask, (d,))
        point = float(np.mean(self._pot[outcome][rows, d]))
        means = _arm_means(y, self.treatment)
        var = weighted_mean_variance(self.mean_weights(d, rows), y, means[d])
        return EffectEstimate(outcome, d, -1, "LEVEL", population, point, math.sqrt(var), len(rows))

    def ate(self, outcome, m, l):
        return self.estimate(outcome, m, l)

    def atet(self, outcome, m, l, population_arm: int):
        return self.estimate(outcome, m, l, self.treatment == population_arm, "ATET",
                             ARM_LABELS[population_arm])

    def gates(self, outcome, m, l, z, name="z", cells=None) -> list[EffectEstimate]:
        """GATEs over the cells of the discrete variable ``z``."""
        z = np.asarray(z)
        cells = np.unique(z) if cells is None else cells
        out = []
        for c in cells:
            mask = z == c
            if not mask.any():
                raise DataError(f"empty GATE cell {name}={c}")
            out.append(self.estimate(outcome, m, l, mask, "GATE", f"{name}={_fmt_cell(c)}"))
        return out

    def gate_minus_ate(self, outcome, m, l, z, name="z") -> pd.DataFrame:
        """GATE - ATE per cell with a z-test; SE from the difference of weight vectors."""
        y = self.outcomes[outcome]
        means = _arm_means(y, self.treatment)
        rows_all = self._rows(None, (m, l))
        ate = self.estimate(outcome, m, l)
        resid = {d: self._residual_sq(y, self.mean_weights(d, rows_all), means[d]) for d in (m, l)}
        w_all = {d: self.mean_weights(d, rows_all) for d in (m, l)}
        z = np.asarray(z)
        rows = []
        for c in np.unique(z):
            g = self.estimate(outcome, m, l, z == c, "GATE", f"{name}={_fmt_cell(c)}")
            r = self._rows(z == c, (m, l))
            var = sum(float(np.sum((self.mean_weights(d, r) - w_all[d]) ** 2 * resid[d]))
                      for d in (m, l))
            diff = g.point - ate.point
            se = math.sqrt(var)
            p = two_sided_p(diff, se)
            rows.append({"outcome": outcome, "m": ARM_LABELS[m], "l": ARM_LABELS[l],
                         "cell": g.population, "share": g.n / ate.n, "gate": g.point,
                         "gate_se": g.se, "gate_minus_ate": diff, "se": se,
                         "lower": diff - Z_90 * se, "upper": diff + Z_90 * se,
                         "p_value": p, "stars": stars(p)})
        return pd.DataFrame(rows)

    @staticmethod
    def _residual_sq(y, w, fallback):
        """Squared leave-self-out residuals of one weight vector (0 where w = 0)."""
        out = np.zeros(len(y))
        nz = np.flatnonzero(w)
        wj, yj = w[nz], y[nz]
        rest = wj.sum() - wj
        with np.errstate(invalid="ignore", divide="ignore"):
            loo = (wj @ yj - wj * yj) / rest
        loo = np.where(rest > 1e-12, loo, fallback)
        out[nz] = (yj - loo) ** 2
        return out

    def population_covariance(self, outcome, m, l, populations) -> tuple[np.ndarray, np.ndarray]:
        """Points and covariance of the effect across several populations (masks).

        Covariances use the squared residuals of the all-unit weight vector of
        each training unit's own arm, so estimates sharing units correlate.
        """
        y = self.outcomes[outcome]
        means = _arm_means(y, self.treatment)
        rows_all = self._rows(None, (m, l))
        sig2 = np.zeros(len(y))
        for d in (m, l):
            r = self._residual_sq(y, self.mean_weights(d, rows_all), means[d])
            sig2[self.treatment == d] = r[self.treatment == d]
        points, vecs = [], []
        for mask in populations:
            rows = self._rows(mask, (m, l))
            points.append(float(np.mean(self._pot[outcome][rows, m] - self._pot[outcome][rows, l])))
            vecs.append(self.mean_weights(m, rows) - self.mean_weights(l, rows))
        A = np.array(vecs)
        return np.array(points), (A * sig2) @ A.T

    # -- tables -----------------------------------------------------------------

    def effect_table(self, outcomes=None) -> pd.DataFrame:
        """Long table: arm levels plus all six pairwise ATEs for every outcome."""
        rows = []
        for o in outcomes or self.outcomes:
            rows += [self.level(o, d).as_row() for d in range(N_ARMS)]
            rows += [self.ate(o, m, l).as_row() for m, l in CONTRASTS]
        return pd.DataFrame(rows)

    def effect_matrix(self, outcome: str, decimals: int = 1) -> pd.DataFrame:
        """Effect matrix: levels on the diagonal, effect row arm vs column arm below it."""
        M = pd.DataFrame("", index=list(ARM_LABELS), columns=list(ARM_LABELS))
        for d in range(N_ARMS):
            M.iloc[d, d] = self.level(outcome, d).text(decimals)
        for m, l in CONTRASTS:
            M.iloc[m, l] = self.ate(outcome, m, l).text(decimals)
        return M

    def population_table(self, outcome: str) -> pd.DataFrame:
        """Each contrast for all units and per participation population."""
        rows = []
        for m, l in CONTRASTS:
            ests = [self.ate(outcome, m, l)] + [self.atet(outcome, m, l, d) for d in range(N_ARMS)]
            rows += [e.as_row() for e in ests]
        return pd.DataFrame(rows)

    def wald_table(self, outcome: str) -> pd.DataFrame:
        """Equality of each contrast across the four participation populations."""
        rows = []
        for m, l in CONTRASTS:
            pts, cov = self.population_covariance(
                outcome, m, l, [self.treatment == d for d in range(N_ARMS)])
            res = wald_equality(pts, cov)
            rows.append({"outcome": outcome, "m": ARM_LABELS[m], "l": ARM_LABELS[l], **res,
                         "stars": stars(res["p_value"])})
        return pd.DataFrame(rows)


def _fmt_cell(c):
    if isinstance(c, (float, np.floating)) and float(c).is_integer():
        return str(int(c))
    return str(c)


def aggregation_identity_gap(estimator: EffectEstimator, outcome, m, l, z) -> float:
    """|sum_z share(z) GATE(z) - ATE|; zero up to rounding by construction."""
    ate = estimator.ate(outcome, m, l)
    gates = estimator.gates(outcome, m, l, z)
    total = sum(g.n for g in gates)
    return abs(sum(g.n / total * g.point for g in gates) - ate.point)


# ----------------------------------------------------------------------------
# tests and curves

def wald_equality(points, cov) -> dict:
    """Chi-square test that all estimates are equal (differences vs the first one)."""
    points = np.asarray(points, dtype=float)
    cov = np.asarray(cov, dtype=float)
    k = len(points)
    A = np.hstack([-np.ones((k - 1, 1)), np.eye(k - 1)])
    d = A @ points
    V = A @ cov @ A.T
    try:
        c = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise NumericError("covariance of the differences is not positive definite") from None
    u = np.linalg.solve(c, d)
    stat = float(u @ u)
    df = k - 1
    return {"statistic": stat, "df": df, "p_value": float(stats.chi2.sf(stat, df))}


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(np.std(x, ddof=1), (q75 - q25) / 1.34)
    if spread <= 0:
        spread = np.std(x, ddof=1)
    return float(0.9 * spread * len(x) ** -0.2)


def epanechnikov_smooth(x, y, h: float) -> np.ndarray:
    """Nadaraya-Watson fit at every ``x`` (sorted ascending) with an Epanechnikov kernel.

    The kernel is a quadratic polynomial on its support, so the windowed sums
    reduce to prefix sums of y, xy and x^2 y.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xs = (x - x[0]) / h  # shift for numerical stability
    lo = np.searchsorted(xs, xs - 1, side="right")
    hi = np.searchsorted(xs, xs + 1, side="left")

    def prefix(v):
        return np.concatenate([[0.0], np.cumsum(v)])

    def window(c):
        return c[hi] - c[lo]

    num = window(prefix(y)) - (xs ** 2 * window(prefix(y)) - 2 * xs * window(prefix(xs * y))
                               + window(prefix(xs ** 2 * y)))
    den = window(prefix(np.ones_like(xs))) - (xs ** 2 * window(prefix(np.ones_like(xs)))
                                              - 2 * xs * window(prefix(xs))
                                              + window(prefix(xs ** 2)))
    return num / den


@dataclass
class SortedEffects:
    rank: np.ndarray         # percentile position in (0, 100]
    point: np.ndarray
    se_smoothed: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ate: float
    share_significant: float
    bandwidth: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"rank_pct": self.rank, "iate": self.point, "se": self.se_smoothed,
                             "lower": self.lower, "upper": self.upper, "ate": self.ate})


def sorted_effects(iates, ses, ate: float | None = None) -> SortedEffects:
    """Sorted IATE curve with a pointwise 90% band from kernel-smoothed SEs."""
    iates = np.asarray(iates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    ok = ~(np.isnan(iates) | np.isnan(ses))
    iates, ses = iates[ok], ses[ok]
    n = len(iates)
    if n < 2:
        raise DataError("sorted effects need at least two IATEs")
    order = np.argsort(iates, kind="stable")
    point, se = iates[order], ses[order]
    rank = np.arange(1, n + 1) / n * 100
    h = silverman_bandwidth(rank)
    smooth = epanechnikov_smooth(rank, se, h)
    signif = float(np.mean(np.abs(iates) > Z_90 * ses))
    return SortedEffects(rank, point, smooth, point - Z_90 * smooth, point + Z_90 * smooth,
                         float(np.mean(iates) if ate is None else ate), signif, h)


# ----------------------------------------------------------------------------
# common support

@dataclass
class SupportReport:
    probabilities: np.ndarray   # (n, 4)
    flagged: np.ndarray
    trim: float

    def summary(self) -> pd.DataFrame:
        rows = []
        for d in range(N_ARMS):
            p = self.probabilities[:, d]
            rows.append({"arm": ARM_LABELS[d], "min": p.min(), "max": p.max(),
                         "below_trim": int(np.sum(p < self.trim))})
        rows.append({"arm": "any", "min": np.nan, "max": np.nan,
                     "below_trim": int(self.flagged.sum())})
        return pd.DataFrame(rows)


def check_support(dataset: Dataset, trim: float = 0.01, features=None) -> SupportReport:
    """Multinomial logit propensities on the confounders; flag units with any p_d < trim."""
    if not 0 <= trim < 1:
        raise DataError("trim must lie in [0, 1)")
    names = features or [s.name for s in dataset.specs if s.is_confounder]
    cols = []
    for name in names:
        spec = dataset.specs[dataset.feature_index(name)]
        x = dataset.column(name)
        if spec.is_categorical:
            cols += [(x == c).astype(float) for c in range(1, len(spec.categories))]
        else:
            cols.append(x)
    Z = np.column_stack(cols)
    sd = Z.std(axis=0)
    Z = (Z - Z.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    model = LogisticRegression(C=1e4, max_iter=2000)
    model.fit(Z, dataset.treatment)
    probs = np.zeros((dataset.n, N_ARMS))
    probs[:, model.classes_] = model.predict_proba(Z)
    probs /= probs.sum(axis=1, keepdims=True)
    flagged = np.any(probs < trim, axis=1)
    return SupportReport(probs, flagged, trim)


# ----------------------------------------------------------------------------
# placebo

@dataclass
class PlaceboResult:
    estimates: list[EffectEstimate]
    table: pd.DataFrame
    heterogeneity: pd.DataFrame
    n_dropped: int
    n_used: int

    def significant_share(self, level: float = 0.05) -> float:
        ests = [e for e in self.estimates if e.level == "ATE"]
        return float(np.mean([e.p_value < level for e in ests]))


def placebo_run(dataset: Dataset, config: ForestConfig | None = None, window: int = 9,
                gate_features=(), drop_contaminated: bool = True) -> PlaceboResult:
    """Effects of *future* programme participation on outcomes of the preceding spell.

    ``dataset`` holds the prior-spell outcome streams and the arm the unit
    will later enter.  Units that already joined a programme during the prior
    spell (``extra["prior_almp"]``) are removed first.  Without anticipation
    or omitted confounding every ATE should be insignificant.
    """
    if window > HORIZON or window < 1:
        raise DataError(f"placebo window of {window} months exceeds the {HORIZON} months available")
    n_dropped = 0
    if drop_contaminated and "prior_almp" in dataset.extra:
        keep = ~np.asarray(dataset.extra["prior_almp"], dtype=bool)
        n_dropped = int((~keep).sum())
    else:
        keep = np.ones(dataset.n, dtype=bool)
    counts = np.bincount(dataset.treatment[keep], minlength=N_ARMS)
    if np.any(counts == 0):
        empty = [ARM_LABELS[d] for d in np.flatnonzero(counts == 0)]
        raise DataError(f"empty treated group after the contamination filter: {empty}")
    if n_dropped:
        dataset = dataset.subset(np.flatnonzero(keep))
    outcomes = [Outcome(s, 0, window) for s in ("emp", "ue", "olf")]
    forest = build_forest(dataset, config, y=dataset.outcome(outcomes[0]))
    est = EffectEstimator.from_dataset(compute_weights(forest), dataset, outcomes)
    estimates = [est.ate(o.name, m, 0) for o in outcomes for m in range(1, N_ARMS)]
    table = pd.DataFrame(index=[f"{ARM_LABELS[m]} - NOP" for m in range(1, N_ARMS)])
    for o in outcomes:
        table[o.name] = [est.ate(o.name, m, 0).text(1, adaptive=True) for m in range(1, N_ARMS)]
    scans = [est.gate_minus_ate(outcomes[0].name, m, 0, dataset.column(f), f)
             for f in gate_features for m in range(1, N_ARMS)]
    het = pd.concat(scans, ignore_index=True) if scans else pd.DataFrame()
    return PlaceboResult(estimates, table, het, n_dropped, dataset.n)
