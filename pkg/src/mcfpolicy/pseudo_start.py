"""Pseudo programme starts for nonparticipants.

Log days until programme start are regressed on the features (and their
interactions with gender) among participants.  Variables are selected by a
cross-validated LASSO, refitted by OLS, and the OLS fit plus a normal
residual draw gives each nonparticipant a simulated start day.  Units whose
simulated start lies beyond the 9-month window or after the end of their
unemployment spell are excluded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numba import njit
from scipy import stats

from .dataset import MAX_START_DAY, Dataset
from .exceptions import DataError, NumericError
from .reporting import stars

EXCLUSION_REASONS = ("beyond-9-months", "spell-ended-before-start", "both")


def soft_threshold(z, lam):
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def _standardize(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    usable = scale > 0
    Xs = np.zeros_like(X, dtype=float)
    Xs[:, usable] = (X[:, usable] - mean[usable]) / scale[usable]
    return Xs, mean, np.where(usable, scale, 1.0), usable


@njit(cache=True)
def _cd_sweep(G, diag, grad, beta, idx, lam):
    max_delta = 0.0
    p = G.shape[0]
    for j in idx:
        old = beta[j]
        z = grad[j] + diag[j] * old
        if z > lam:
            new = (z - lam) / diag[j]
        elif z < -lam:
            new = (z + lam) / diag[j]
        else:
            new = 0.0
        if new != old:
            delta = new - old
            for k in range(p):
                grad[k] -= G[k, j] * delta
            beta[j] = new
            if abs(delta) > max_delta:
                max_delta = abs(delta)
    return max_delta


def lasso_cd(Xs, y, lam, beta=None, tol=1e-7, max_iter=100_000, gram=None):
    """Cyclic coordinate descent on standardized columns.

    Minimizes ``||y - Xs b||^2 / (2n) + lam * ||b||_1`` for centered ``y``.
    Stops when the largest coefficient change in a full sweep is below
    ``tol``.  Between full sweeps, only the current active set is cycled.
    ``gram`` may pass a precomputed ``(Xs'Xs / n, Xs'y / n)`` pair.
    """
    n, p = Xs.shape
    G, c = gram if gram is not None else (Xs.T @ Xs / n, Xs.T @ y / n)
    G = np.ascontiguousarray(G, dtype=np.float64)
    beta = np.zeros(p) if beta is None else np.array(beta, dtype=np.float64)
    diag = np.diag(G).copy()
    grad = c - G @ beta  # X'r / n
    coords = np.flatnonzero(diag > 0)
    for _ in range(max_iter):
        if _cd_sweep(G, diag, grad, beta, coords, lam) < tol:
            return beta
        active = coords[beta[coords] != 0]
        for _ in range(max_iter):
            if _cd_sweep(G, diag, grad, beta, active, lam) < tol:
                break
    raise NumericError("coordinate descent did not converge")


def lasso_fit(X, y, lam, tol=1e-7):
    """LASSO on internally standardized features; coefficients on the original scale."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Xs, mean, scale, _ = _standardize(X)
    b = lasso_cd(Xs, y - y.mean(), lam, tol=tol)
    coef = b / scale
    return y.mean() - mean @ coef, coef


def penalty_grid(X, y, size=100, ratio=1e-4):
    """Log-spaced penalties from the smallest one giving an empty model down to ``ratio`` of it."""
    Xs, *_ = _standardize(np.asarray(X, dtype=float))
    yc = np.asarray(y, dtype=float) - np.mean(y)
    lam_max = np.max(np.abs(Xs.T @ yc)) / len(yc)
    if lam_max == 0:
        raise NumericError("no feature is correlated with the response")
    return np.geomspace(lam_max, lam_max * ratio, size)


def _ols(X, y):
    A = np.column_stack([np.ones(len(y)), X])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def _path(Xs, yc, grid, tol):
    gram = (Xs.T @ Xs / len(yc), Xs.T @ yc / len(yc))
    beta = np.zeros(Xs.shape[1])
    out = np.zeros((len(grid), Xs.shape[1]))
    for k, lam in enumerate(grid):
        beta = lasso_cd(Xs, yc, lam, beta=beta, tol=tol, gram=gram)
        out[k] = beta
    return out


def _fold_errors(X, y, train, test, grid, tol):
    Xs, *_ = _standardize(X[train])
    path = _path(Xs, y[train] - y[train].mean(), grid, tol)
    errs = np.zeros(len(grid))
    cache = {}
    for k, beta in enumerate(path):
        active = np.flatnonzero(beta)
        key = tuple(active)
        if key not in cache:
            coef = _ols(X[train][:, active], y[train])
            pred = coef[0] + X[test][:, active] @ coef[1:]
            cache[key] = np.mean((y[test] - pred) ** 2)
        errs[k] = cache[key]
    return errs


@dataclass
class LassoFit:
    penalties: np.ndarray
    cv_errors: np.ndarray          # (folds, grid)
    selected_index: int
    active: np.ndarray             # indices of selected features
    coef: np.ndarray               # LASSO coefficients at the selected penalty
    intercept: float
    names: list[str] = field(default_factory=list)

    @property
    def selected_penalty(self) -> float:
        return float(self.penalties[self.selected_index])

    @property
    def cv_mean(self) -> np.ndarray:
        return self.cv_errors.mean(axis=0)


def fit_lasso(X, y, folds=10, grid_size=100, seed=0, names=None, tol=1e-7) -> LassoFit:
    """Select the LASSO penalty by K-fold cross-validation of the post-LASSO fit.

    The prediction error at each grid point is that of the OLS refit on the
    LASSO-active set.  Ties in the mean CV error go to the larger penalty.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n <= folds:
        raise DataError(f"need more observations ({n}) than folds ({folds})")
    if np.ptp(y) == 0:
        raise DataError("response is constant")
    if not np.any(X.std(axis=0) > 0):
        raise DataError("design has rank 0 (all columns constant)")
    grid = penalty_grid(X, y, grid_size)
    fold_of = np.random.default_rng(seed).permutation(n) % folds
    cv = np.vstack([
        _fold_errors(X, y, fold_of != f, fold_of == f, grid, tol) for f in range(folds)
    ])
    mean = cv.mean(axis=0)
    # grid is descending, so the first minimizer is the largest penalty
    best = int(np.flatnonzero(mean == mean.min())[0])
    intercept, coef = lasso_fit(X, y, grid[best], tol=tol)
    return LassoFit(grid, cv, best, np.flatnonzero(coef), coef, intercept,
                    list(names) if names is not None else [f"x{j}" for j in range(p)])


@dataclass
class PostLassoModel:
    names: list[str]
    active: np.ndarray
    intercept: float
    coef: np.ndarray
    std_errors: np.ndarray         # intercept first
    sigma: float
    dof: int = 1
    response: str = "log(days to programme start)"

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        sub = X[:, self.active]
        if np.isnan(sub).any():
            rows = np.flatnonzero(np.isnan(sub).any(axis=1))
            raise DataError(f"missing values in selected features for rows {rows[:10].tolist()}")
        return self.intercept + sub @ self.coef

    def coefficient_report(self) -> pd.DataFrame:
        est = np.concatenate([[self.intercept], self.coef])
        names = ["Intercept"] + [self.names[j] for j in self.active]
        df = max(self.dof, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = est / self.std_errors
        p = 2 * stats.t.sf(np.abs(t), df)
        return pd.DataFrame({"name": names, "estimate": est, "std_error": self.std_errors,
                             "p_value": p, "stars": [stars(v) for v in p]})


def fit_post_lasso(X, y, active, names=None) -> PostLassoModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    active = np.asarray(active, dtype=int)
    A = np.column_stack([np.ones(len(y)), X[:, active]])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = len(y) - A.shape[1]
    if dof <= 0:
        raise NumericError("post-LASSO OLS has no residual degrees of freedom")
    sigma = float(np.sqrt(resid @ resid / dof))
    if not sigma > 0:
        raise NumericError("post-LASSO residual standard error is zero")
    cov = sigma ** 2 * np.linalg.pinv(A.T @ A)
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    return PostLassoModel(names, active, float(coef[0]), coef[1:], np.sqrt(np.diag(cov)), sigma,
                          dof)


@dataclass
class PseudoStartResult:
    start_day: np.ndarray
    kept: np.ndarray
    reason: np.ndarray

    def counts(self) -> dict:
        out = {"input": int(len(self.kept)), "kept": int(self.kept.sum()),
               "excluded": int((~self.kept).sum())}
        for r in EXCLUSION_REASONS:
            out[r] = int((self.reason == r).sum())
        return out


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5)


def exclusion_reasons(start_day, spell_length_days):
    start_day = np.asarray(start_day)
    beyond = start_day > MAX_START_DAY
    ended = np.asarray(spell_length_days) < start_day
    reason = np.full(len(start_day), "", dtype=object)
    reason[beyond] = "beyond-9-months"
    reason[ended] = "spell-ended-before-start"
    reason[beyond & ended] = "both"
    return reason


def simulate_pseudo_starts(model: PostLassoModel, X, spell_length_days, seed=0,
                           sigma=None) -> PseudoStartResult:
    """Draw start days ``round(exp(x'b + e))``, ``e ~ N(0, sigma^2)``, and apply exclusions.

    ``sigma`` defaults to the OLS residual standard error; pass 0 for
    deterministic predictions.
    """
    pred = model.predict(X)
    sd = model.sigma if sigma is None else sigma
    draw = np.random.default_rng(seed).normal(0.0, 1.0, len(pred)) * sd
    days = np.maximum(round_half_up(np.exp(pred + draw)), 1).astype(np.int64)
    reason = exclusion_reasons(days, spell_length_days)
    return PseudoStartResult(days, reason == "", reason)


def lasso_design(dataset: Dataset, gender: str | None = "woman"):
    """Features plus all interactions with the gender indicator; categoricals as dummies."""
    cols, names = [], []
    for j, s in enumerate(dataset.specs):
        x = dataset.X[:, j]
        if s.is_categorical:
            for k, c in enumerate(s.categories[1:], start=1):
                cols.append((x == k).astype(float))
                names.append(f"{s.name}={c}")
        else:
            cols.append(x)
            names.append(s.name)
    X = np.column_stack(cols)
    if gender is not None and gender in dataset.feature_names:
        g = dataset.column(gender)
        inter = [(X[:, k] * g, f"{nm} x {gender}") for k, nm in enumerate(names) if nm != gender]
        X = np.column_stack([X] + [c for c, _ in inter])
        names += [nm for _, nm in inter]
    return X, names


@dataclass
class PseudoStartStage:
    dataset: Dataset
    lasso: LassoFit
    model: PostLassoModel
    result: PseudoStartResult
    nonparticipants: np.ndarray


def assign_pseudo_starts(dataset: Dataset, seed=0, folds=10, grid_size=100,
                         gender="woman") -> PseudoStartStage:
    """Fit the start-day model on participants and give NOP units pseudo starts.

    Excluded nonparticipants are dropped from the returned dataset.
    """
    part = dataset.treatment > 0
    if np.any(dataset.start_day[part] < 1):
        raise DataError("participants need an observed start day")
    X, names = lasso_design(dataset, gender)
    y = np.log(dataset.start_day[part])
    ss = np.random.SeedSequence(seed)
    cv_seed, draw_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    fit = fit_lasso(X[part], y, folds=folds, grid_size=grid_size, seed=cv_seed, names=names)
    model = fit_post_lasso(X[part], y, fit.active, names)
    nop = np.flatnonzero(~part)
    res = simulate_pseudo_starts(model, X[nop], dataset.spell_length_days[nop], seed=draw_seed)
    keep = np.ones(dataset.n, dtype=bool)
    keep[nop[~res.kept]] = False
    out = dataset.subset(np.flatnonzero(keep))
    start = dataset.start_day.copy()
    start[nop[res.kept]] = res.start_day[res.kept]
    pseudo = dataset.is_pseudo_start.copy()
    pseudo[nop[res.kept]] = True
    out.start_day = start[keep]
    out.is_pseudo_start = pseudo[keep]
    return PseudoStartStage(out, fit, model, res, nop)
