"""Black-box allocation rules and their evaluation.

All rules work on a composite score matrix (units x arms), by default the
predicted months employed minus the predicted months unemployed under each
arm.  Capacities are integer slot counts ``floor(share * n)`` per programme;
no-programme (arm 0) is never rationed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .dataset import ARM_LABELS, N_ARMS, Dataset
from .exceptions import ConfigError, DataError
from .reporting import format_shares

OBSERVED_SHARES = (0.021, 0.020, 0.018)
PRIORITIES = ("largest-gain", "past-UE", "worst-NOP", "low-language", "recent-migrant")


def _floor_slots(share: float, n: int) -> int:
    # the tolerance keeps floor(c / n * n) == c for shares computed from counts
    return math.floor(share * n + 1e-9)


@dataclass
class CapacitySpec:
    mode: str = "per-arm"                 # per-arm, overall or none
    shares: tuple = OBSERVED_SHARES       # per programme (per-arm) or one value (overall)

    def __post_init__(self):
        if self.mode not in ("per-arm", "overall", "none"):
            raise ConfigError(f"unknown capacity mode {self.mode!r}")
        shares = np.atleast_1d(np.asarray(self.shares, dtype=float))
        if np.any((shares < 0) | (shares > 1)):
            raise ConfigError("capacity shares must lie in [0, 1]")
        if self.mode == "per-arm" and shares.sum() >= 1:
            raise ConfigError("per-arm capacity shares must sum to less than 1")

    def slots(self, n: int) -> np.ndarray:
        """Maximum number of units per arm (arm 0 unlimited)."""
        out = np.full(N_ARMS, n, dtype=np.int64)
        if self.mode == "per-arm":
            for d, s in enumerate(self.shares, start=1):
                out[d] = _floor_slots(s, n)
        return out

    def overall_slots(self, n: int) -> int:
        if self.mode == "overall":
            return _floor_slots(float(np.atleast_1d(self.shares)[0]), n)
        return n

    def satisfied(self, arms, n_arms: int = N_ARMS) -> bool:
        arms = np.asarray(arms)
        counts = np.bincount(arms, minlength=n_arms)
        n = len(arms)
        return bool(np.all(counts[1:] <= self.slots(n)[1:n_arms])
                    and counts[1:].sum() <= self.overall_slots(n))


@dataclass
class AllocationPlan:
    arms: np.ndarray
    objective: float
    observed: np.ndarray | None = None
    n_swaps: int = 0
    rule: str = ""

    @property
    def shares(self) -> np.ndarray:
        return np.bincount(self.arms, minlength=N_ARMS) / len(self.arms)

    @property
    def switchers(self) -> np.ndarray:
        if self.observed is None:
            return np.zeros(len(self.arms), dtype=bool)
        return self.arms != self.observed


def composite_score(emp, ue) -> np.ndarray:
    """Equally weighted objective: months employed minus months unemployed."""
    return np.asarray(emp, dtype=float) - np.asarray(ue, dtype=float)


def _objective(scores, arms) -> float:
    return float(scores[np.arange(len(arms)), arms].sum())


def _check(scores):
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or not np.all(np.isfinite(scores)):
        raise DataError("scores must be a finite (units x arms) matrix")
    return scores


def allocate_unconstrained(scores, observed=None) -> AllocationPlan:
    """Every unit gets its best arm (ties to the lowest arm index)."""
    scores = _check(scores)
    arms = np.argmax(scores, axis=1)
    return AllocationPlan(arms, _objective(scores, arms), observed, rule="unconstrained")


def allocate_significant(scores, emp_iate, emp_se, ue_iate=None, ue_se=None,
                         alpha: float = 0.025, observed=None) -> AllocationPlan:
    """Leave NOP only for arms whose effect vs NOP is significant in the right direction.

    ``emp_iate``/``emp_se`` (and optionally ``ue_*``) hold IATEs of the
    programmes vs NOP, shape ``(n, arms - 1)``.  An arm qualifies when the
    employment effect is significantly positive and, if given, the
    unemployment effect significantly negative (one-sided tests at
    ``alpha``).  Among qualifying arms the best composite score wins.
    """
    scores = _check(scores)
    crit = stats.norm.ppf(1 - alpha)
    with np.errstate(invalid="ignore", divide="ignore"):
        ok = np.asarray(emp_iate) / np.asarray(emp_se) > crit
        if ue_iate is not None:
            ok &= np.asarray(ue_iate) / np.asarray(ue_se) < -crit
    ok = np.nan_to_num(ok, nan=False).astype(bool)
    masked = np.where(np.column_stack([np.ones(len(scores), dtype=bool), ok]), scores, -np.inf)
    arms = np.where(ok.any(axis=1), 1 + np.argmax(masked[:, 1:], axis=1), 0)
    return AllocationPlan(arms, _objective(scores, arms), observed, rule="significant")


def priority_values(name: str, scores, dataset: Dataset | None = None) -> np.ndarray:
    """Priority key per unit; larger values are served first."""
    scores = np.asarray(scores, dtype=float)
    srt = np.sort(scores, axis=1)
    gap = srt[:, -1] - srt[:, -2]
    if name == "largest-gain":
        return gap
    if name == "worst-NOP":
        return -scores[:, 0]
    if dataset is None:
        raise DataError(f"priority {name!r} needs the dataset")
    try:
        if name == "past-UE":
            return dataset.column("unem_10jaar")
        if name == "low-language":
            return -dataset.column("ned")
        if name == "recent-migrant":
            return ((dataset.column("country") != 0) & (dataset.column("ned") <= 1)).astype(float)
    except KeyError as e:
        raise DataError(f"priority {name!r} needs feature {e}") from None
    raise ConfigError(f"unknown priority {name!r}; choose from {PRIORITIES}")


def allocate_priority(scores, capacity: CapacitySpec, priority="largest-gain",
                      dataset: Dataset | None = None, observed=None) -> AllocationPlan:
    """Fill programme slots in rounds; rationed units fall back to their next best arm.

    Every unassigned unit applies to its best arm not yet closed to it.  An
    arm whose applications exceed its remaining slots admits the applicants
    with the highest priority (ties: larger best-vs-second gap, then lower
    unit index); the rest try their next best arm in the next round.
    """
    scores = _check(scores)
    if capacity.mode != "per-arm":
        raise ConfigError("priority allocation needs per-arm capacities")
    if priority not in PRIORITIES:
        raise ConfigError(f"unknown priority {priority!r}; choose from {PRIORITIES}")
    n, K = scores.shape
    key = priority_values(priority, scores, dataset)
    srt = np.sort(scores, axis=1)
    gap = srt[:, -1] - srt[:, -2]
    prefs = np.argsort(-scores, axis=1, kind="stable")
    slots = capacity.slots(n)[:K].copy()
    arms = np.full(n, -1, dtype=np.int64)
    choice = np.zeros(n, dtype=np.int64)
    while np.any(arms < 0):
        todo = np.flatnonzero(arms < 0)
        want = prefs[todo, choice[todo]]
        for d in range(K):
            applicants = todo[want == d]
            if applicants.size == 0:
                continue
            if d == 0:
                arms[applicants] = 0
                continue
            rank = np.lexsort((applicants, -gap[applicants], -key[applicants]))
            cap = slots[d]
            arms[applicants[rank[:cap]]] = d
            choice[applicants[rank[cap:]]] += 1
            slots[d] -= min(cap, len(applicants))
    return AllocationPlan(arms, _objective(scores, arms), observed, rule=f"priority:{priority}")


def _swap_gains(scores, arms, r, J):
    a = arms[r]
    return scores[r, arms[J]] + scores[J, a] - scores[r, a] - scores[J, arms[J]]


def first_improving_swap(scores, arms, tol: float = 1e-9):
    """Lexicographically first pair (i, j), i < j, whose swap raises the objective by > tol."""
    scores = np.asarray(scores, dtype=float)
    n = len(arms)
    for r in range(n - 1):
        J = np.arange(r + 1, n)
        g = _swap_gains(scores, arms, r, J)
        hit = np.flatnonzero(g > tol)
        if hit.size:
            return r, int(J[hit[0]])
    return None


def allocate_sequential_swap(initial, scores, capacity: CapacitySpec | None = None,
                             observed=None, tol: float = 1e-9,
                             max_swaps: int | None = None) -> AllocationPlan:
    """Pairwise exchange of arms until no swap improves the objective (2-opt).

    Pairs are scanned in lexicographic order and the scan restarts after
    every accepted swap.  Because only the two swapped units change, the
    restart only has to revisit earlier rows through pairs with those two
    units, which gives the same sequence of swaps as a full rescan.
    """
    scores = _check(scores)
    arms = np.asarray(initial, dtype=np.int64).copy()
    if capacity is not None and not capacity.satisfied(arms, scores.shape[1]):
        raise DataError("initial plan violates the capacity")
    n = len(arms)
    swaps = 0
    r = 0
    while r < n - 1:
        J = np.arange(r + 1, n)
        g = _swap_gains(scores, arms, r, J)
        hit = np.flatnonzero(g > tol)
        if hit.size == 0:
            r += 1
            continue
        j = int(J[hit[0]])
        arms[r], arms[j] = arms[j], arms[r]
        swaps += 1
        if max_swaps is not None and swaps >= max_swaps:
            break
        if r > 0:
            I = np.arange(r)
            back = (_swap_gains(scores, arms, r, I) > tol) | (_swap_gains(scores, arms, j, I) > tol)
            hits = np.flatnonzero(back)
            if hits.size:
                r = int(hits[0])
    return AllocationPlan(arms, _objective(scores, arms), observed, swaps, rule="sequential-swap")


def allocate_random(shares, n: int, seed: int = 0, observed=None, scores=None) -> AllocationPlan:
    """Independent draws with probabilities equal to the given programme shares."""
    shares = np.asarray(shares, dtype=float)
    if shares.shape != (N_ARMS - 1,) or np.any(shares < 0) or shares.sum() > 1:
        raise ConfigError("random allocation needs three programme shares summing to <= 1")
    p = np.concatenate([[1 - shares.sum()], shares])
    arms = np.random.default_rng(seed).choice(N_ARMS, size=n, p=p)
    obj = _objective(_check(scores), arms) if scores is not None else math.nan
    return AllocationPlan(arms, obj, observed, rule="random")


def evaluate_allocation(plan: AllocationPlan, emp, ue, olf, observed=None,
                        name: str | None = None) -> dict:
    """Allocation report row: shares, mean Emp/UE/OLF under the plan and switcher gains in %."""
    observed = plan.observed if observed is None else np.asarray(observed)
    n = len(plan.arms)
    rows = np.arange(n)
    out = {"rule": name or plan.rule}
    shares = plan.shares
    out["shares"] = format_shares(shares[1:])
    for d in range(1, N_ARMS):
        out[f"share_{ARM_LABELS[d]}"] = 100 * shares[d]
    sw = plan.arms != observed if observed is not None else np.zeros(n, dtype=bool)
    for label, s in (("Emp", emp), ("UE", ue), ("OLF", olf)):
        s = np.asarray(s, dtype=float)
        out[label] = float(s[rows, plan.arms].mean())
    for label, s in (("Emp", emp), ("UE", ue), ("OLF", olf)):
        s = np.asarray(s, dtype=float)
        if sw.any():
            new = s[rows[sw], plan.arms[sw]].mean()
            old = s[rows[sw], observed[sw]].mean()
            out[f"gain_{label}"] = float((new - old) / old * 100) if old != 0 else math.nan
        else:
            out[f"gain_{label}"] = math.nan
    out["switchers"] = int(sw.sum())
    return out


def allocation_table(rows: list[dict], decimals: int = 1) -> pd.DataFrame:
    """Allocation report with fixed decimals (blank switcher gains when none)."""
    df = pd.DataFrame(rows)
    num = [c for c in df.columns if c not in ("rule", "shares", "switchers")]
    df[num] = df[num].round(decimals)
    return df
