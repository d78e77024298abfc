"""Unit-level data model, CSV ingestion, covariate balance and a synthetic DGP.

A dataset holds one row per unemployment spell.  Features are stored as a
float matrix; categorical columns hold integer codes into the category
labels of their :class:`FeatureSpec`.  Monthly labour-market states after
the (pseudo) programme start are stored as small integers
(0 = employed, 1 = unemployed, 2 = out of the labour force).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import pandas as pd

from .exceptions import ConfigError, DataError

ARM_LABELS = ("NOP", "SVT", "LVT", "OT")
N_ARMS = 4
HORIZON = 30
MAX_START_DAY = 274
STATES = ("emp", "ue", "olf")
STATE_CODES = ("E", "U", "O")

ARM_COLUMN = "Daction"
ID_COLUMN = "id"
STREAM_COLUMNS = tuple(f"state_{m:02d}" for m in range(1, HORIZON + 1))
TIMING_COLUMNS = ("spell_length_days", "start_day", "is_pseudo_start")

ROLES = ("confounder", "heterogeneity", "both")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = "ordered"
    categories: tuple[str, ...] = ()
    role: str = "both"

    def __post_init__(self):
        if self.kind not in ("ordered", "categorical"):
            raise ConfigError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise ConfigError(f"feature {self.name!r}: unknown role {self.role!r}")
        if self.kind == "categorical":
            if len(self.categories) < 2:
                raise ConfigError(f"feature {self.name!r}: categorical needs >= 2 categories")
            if len(set(self.categories)) != len(self.categories):
                raise ConfigError(f"feature {self.name!r}: duplicate category labels")
        object.__setattr__(self, "categories", tuple(str(c) for c in self.categories))

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @property
    def is_confounder(self) -> bool:
        return self.role in ("confounder", "both")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.is_categorical:
            d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(d["name"], d.get("kind", "ordered"), tuple(d.get("categories", ())),
                   d.get("role", "both"))


def validate_specs(specs: Sequence[FeatureSpec]) -> None:
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("feature names must be unique")
    if not any(s.is_confounder for s in specs):
        raise ConfigError("at least one confounder feature is required")
    reserved = {ARM_COLUMN, ID_COLUMN, *STREAM_COLUMNS, *TIMING_COLUMNS}
    clash = reserved.intersection(names)
    if clash:
        raise ConfigError(f"feature names clash with reserved columns: {sorted(clash)}")


def load_feature_specs(path) -> list[FeatureSpec]:
    with open(path) as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = raw["features"]
    specs = [FeatureSpec.from_dict(d) for d in raw]
    validate_specs(specs)
    return specs


def save_feature_specs(specs: Sequence[FeatureSpec], path) -> None:
    with open(path, "w") as fh:
        json.dump({"version": 1, "features": [s.to_dict() for s in specs]}, fh, indent=2)


@dataclass(frozen=True)
class Outcome:
    """Months spent in ``state`` during months ``start + 1 .. end`` after programme start."""

    state: str
    start: int
    end: int

    def __post_init__(self):
        if self.state not in STATES:
            raise ConfigError(f"unknown state {self.state!r}")
        if not 0 <= self.start < self.end <= HORIZON:
            raise ConfigError(f"invalid outcome window ({self.start}, {self.end}]")

    @property
    def name(self) -> str:
        return f"{self.state}_{self.start}_{self.end}"

    @property
    def months(self) -> int:
        return self.end - self.start

    @classmethod
    def parse(cls, name: str) -> "Outcome":
        try:
            state, start, end = name.split("_")
            return cls(state, int(start), int(end))
        except ValueError as exc:
            raise ConfigError(f"cannot parse outcome {name!r}") from exc

    def of_streams(self, streams: np.ndarray) -> np.ndarray:
        code = STATES.index(self.state)
        return (streams[..., self.start:self.end] == code).sum(axis=-1).astype(float)


DEFAULT_OUTCOMES = tuple(
    Outcome(s, a, b) for (a, b) in ((0, 9), (21, 30), (0, 30)) for s in STATES
)


@dataclass(frozen=True)
class UnitRecord:
    id: str
    features: dict
    treatment: int
    outcome_streams: tuple[str, ...]
    spell_length_days: int
    start_day: int
    is_pseudo_start: bool


@dataclass
class SyntheticTruth:
    """Potential monthly states under every arm, shape ``(n, 4, 30)``."""

    potential_streams: np.ndarray
    tau: np.ndarray

    def potential(self, outcome: Outcome) -> np.ndarray:
        return outcome.of_streams(self.potential_streams)

    def iate(self, outcome: Outcome, m: int, l: int) -> np.ndarray:
        y = self.potential(outcome)
        return y[:, m] - y[:, l]

    def ate(self, outcome: Outcome, m: int, l: int, mask=None) -> float:
        effects = self.iate(outcome, m, l)
        if mask is not None:
            effects = effects[mask]
        return float(effects.mean())

    def subset(self, idx) -> "SyntheticTruth":
        return SyntheticTruth(self.potential_streams[idx], self.tau[idx])


@dataclass
class Dataset:
    specs: list[FeatureSpec]
    X: np.ndarray
    treatment: np.ndarray
    streams: np.ndarray
    spell_length_days: np.ndarray
    start_day: np.ndarray
    is_pseudo_start: np.ndarray
    ids: np.ndarray
    arm_labels: tuple[str, ...] = ARM_LABELS
    truth: SyntheticTruth | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_specs(self.specs)
        n = len(self.treatment)
        self.X = np.asarray(self.X, dtype=float).reshape(n, len(self.specs))
        self.treatment = np.asarray(self.treatment, dtype=int)
        self.streams = np.asarray(self.streams, dtype=np.int8)
        if self.streams.shape != (n, HORIZON):
            raise DataError(f"outcome streams must have shape (n, {HORIZON})")
        if np.any((self.streams < 0) | (self.streams > 2)):
            raise DataError("outcome stream codes must be 0, 1 or 2")
        if np.any((self.treatment < 0) | (self.treatment >= N_ARMS)):
            raise DataError("arm index out of {0..3}")
        missing = [a for a in range(N_ARMS) if not np.any(self.treatment == a)]
        if missing:
            raise DataError(f"arms without any unit: {[self.arm_labels[a] for a in missing]}")
        for j, s in enumerate(self.specs):
            if s.is_categorical:
                col = self.X[:, j]
                if np.any((col < 0) | (col >= len(s.categories)) | (col != np.round(col))):
                    raise DataError(f"feature {s.name!r}: invalid category codes")
        self.start_day = np.asarray(self.start_day, dtype=int)
        if np.any(self.start_day > MAX_START_DAY) or np.any(self.start_day < 0):
            raise DataError(f"start_day must lie in 0..{MAX_START_DAY} (0 = not yet assigned)")
        self.spell_length_days = np.asarray(self.spell_length_days, dtype=int)
        self.is_pseudo_start = np.asarray(self.is_pseudo_start, dtype=bool)
        self.ids = np.asarray(self.ids).astype(str)

    @property
    def n(self) -> int:
        return len(self.treatment)

    @property
    def p(self) -> int:
        return len(self.specs)

    @property
    def feature_names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([s.is_categorical for s in self.specs])

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise DataError(f"unknown feature {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_index(name)]

    def outcome(self, outcome: Outcome | str) -> np.ndarray:
        if isinstance(outcome, str):
            outcome = Outcome.parse(outcome)
        return outcome.of_streams(self.streams)

    def arm_shares(self) -> np.ndarray:
        return np.bincount(self.treatment, minlength=N_ARMS) / self.n

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            specs=list(self.specs), X=self.X[idx], treatment=self.treatment[idx],
            streams=self.streams[idx], spell_length_days=self.spell_length_days[idx],
            start_day=self.start_day[idx], is_pseudo_start=self.is_pseudo_start[idx],
            ids=self.ids[idx], arm_labels=self.arm_labels,
            truth=None if self.truth is None else self.truth.subset(idx),
            extra={k: np.asarray(v)[idx] for k, v in self.extra.items()},
        )

    def select_features(self, names: Sequence[str]) -> "Dataset":
        cols = [self.feature_index(nm) for nm in names]
        out = self.subset(np.arange(self.n))
        out.specs = [self.specs[c] for c in cols]
        out.X = self.X[:, cols].copy()
        validate_specs(out.specs)
        return out

    def units(self) -> Iterator[UnitRecord]:
        for i in range(self.n):
            feats = {}
            for j, s in enumerate(self.specs):
                v = self.X[i, j]
                feats[s.name] = s.categories[int(v)] if s.is_categorical else v
            yield UnitRecord(
                id=self.ids[i], features=feats, treatment=int(self.treatment[i]),
                outcome_streams=tuple(STATE_CODES[c] for c in self.streams[i]),
                spell_length_days=int(self.spell_length_days[i]),
                start_day=int(self.start_day[i]), is_pseudo_start=bool(self.is_pseudo_start[i]),
            )

    def to_frame(self) -> pd.DataFrame:
        cols: dict = {ID_COLUMN: self.ids}
        for j, s in enumerate(self.specs):
            if s.is_categorical:
                cols[s.name] = np.asarray(s.categories, dtype=object)[self.X[:, j].astype(int)]
            else:
                cols[s.name] = self.X[:, j]
        cols[ARM_COLUMN] = self.treatment
        cols["spell_length_days"] = self.spell_length_days
        cols["start_day"] = self.start_day
        cols["is_pseudo_start"] = self.is_pseudo_start.astype(int)
        codes = np.asarray(STATE_CODES, dtype=object)
        for m, c in enumerate(STREAM_COLUMNS):
            cols[c] = codes[self.streams[:, m]]
        for k, v in self.extra.items():
            cols[k] = v
        return pd.DataFrame(cols)


def write_dataset(dataset: Dataset, path) -> None:
    dataset.to_frame().to_csv(path, index=False, float_format="%.17g")


def load_dataset(path, specs: Sequence[FeatureSpec]) -> Dataset:
    """Read a dataset CSV written by :func:`write_dataset` (or shaped like it).

    All rows are checked before raising, so a :class:`DataError` lists every
    malformed row and column found.
    """
    specs = list(specs)
    validate_specs(specs)
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"empty file: {path}") from None
    if len(df) == 0:
        raise DataError(f"empty file: {path}")

    required = [ID_COLUMN, *(s.name for s in specs), ARM_COLUMN, *TIMING_COLUMNS, *STREAM_COLUMNS]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s): {missing}")

    problems: list[str] = []
    n = len(df)
    X = np.zeros((n, len(specs)))

    def bad(row, col, msg):
        # +2: header line plus 1-based numbering
        problems.append(f"row {row + 2}, column {col!r}: {msg}")

    for j, s in enumerate(specs):
        raw = df[s.name].to_numpy()
        if s.is_categorical:
            lookup = {c: k for k, c in enumerate(s.categories)}
            for i, v in enumerate(raw):
                if v == "":
                    bad(i, s.name, "missing value")
                elif v not in lookup:
                    bad(i, s.name, f"unknown category label {v!r}")
                else:
                    X[i, j] = lookup[v]
        else:
            for i, v in enumerate(raw):
                try:
                    X[i, j] = float(v)
                    if not math.isfinite(X[i, j]):
                        raise ValueError
                except ValueError:
                    bad(i, s.name, f"non-parsable value {v!r}" if v else "missing value")

    def parse_int(col, lo=None, hi=None, msg=None):
        out = np.zeros(n, dtype=int)
        for i, v in enumerate(df[col].to_numpy()):
            try:
                out[i] = int(v)
            except ValueError:
                bad(i, col, f"non-parsable value {v!r}" if v else "missing value")
                continue
            if (lo is not None and out[i] < lo) or (hi is not None and out[i] > hi):
                bad(i, col, msg or f"value {out[i]} out of range")
        return out

    arms = parse_int(ARM_COLUMN, 0, N_ARMS - 1, "arm index out of {0..3}")
    spell = parse_int("spell_length_days", 0)
    start = parse_int("start_day", 0, MAX_START_DAY)
    pseudo = parse_int("is_pseudo_start", 0, 1)

    streams = np.zeros((n, HORIZON), dtype=np.int8)
    lookup = {c: k for k, c in enumerate(STATE_CODES)}
    for m, col in enumerate(STREAM_COLUMNS):
        for i, v in enumerate(df[col].to_numpy()):
            if v not in lookup:
                bad(i, col, f"invalid state {v!r}")
            else:
                streams[i, m] = lookup[v]

    if problems:
        head = "\n  ".join(problems[:50])
        more = f"\n  ... {len(problems) - 50} more" if len(problems) > 50 else ""
        raise DataError(f"{len(problems)} malformed value(s) in {path}:\n  {head}{more}")

    extra = {}
    if "prior_almp" in df.columns:
        extra["prior_almp"] = df["prior_almp"].astype(int).to_numpy().astype(bool)
    return Dataset(specs=specs, X=X, treatment=arms, streams=streams, spell_length_days=spell,
                   start_day=start, is_pseudo_start=pseudo.astype(bool),
                   ids=df[ID_COLUMN].to_numpy(), extra=extra)


# ----------------------------------------------------------------------------
# balance diagnostics

def standardized_difference(group_a, group_b) -> float:
    """Absolute standardized mean difference in percent.

    ``|mean_a - mean_b| / sqrt((var_a + var_b) / 2) * 100`` with population
    variances.  Two constant samples give 0 when their means agree and
    ``inf`` otherwise.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise DataError("standardized difference needs two nonempty samples")
    diff = abs(a.mean() - b.mean())
    pooled = (a.var() + b.var()) / 2
    if pooled == 0:
        return 0.0 if diff == 0 else math.inf
    return float(diff / math.sqrt(pooled) * 100)


LARGE_STD_DIFF = 20.0


def _balance_columns(dataset: Dataset):
    for j, s in enumerate(dataset.specs):
        col = dataset.X[:, j]
        if s.is_categorical:
            for k, c in enumerate(s.categories):
                yield f"{s.name}={c}", (col == k).astype(float)
        else:
            yield s.name, col


def balance_report(dataset: Dataset, threshold: float = LARGE_STD_DIFF) -> pd.DataFrame:
    """Means by arm and standardized differences of each arm against NOP.

    Categorical features are expanded into one indicator per category.  The
    ``large_<arm>`` columns flag differences above ``threshold`` percent.
    """
    rows = []
    arms = dataset.treatment
    for name, x in _balance_columns(dataset):
        row = {"variable": name, f"mean_{dataset.arm_labels[0]}": x[arms == 0].mean()}
        for a in range(1, N_ARMS):
            lab = dataset.arm_labels[a]
            sd = standardized_difference(x[arms == a], x[arms == 0])
            row[f"mean_{lab}"] = x[arms == a].mean()
            row[f"sd_{lab}"] = sd
            row[f"large_{lab}"] = bool(sd > threshold)
        rows.append(row)
    return pd.DataFrame(rows)


# ----------------------------------------------------------------------------
# synthetic data

DGP_VERSION = 1

EffectFn = Callable[[dict], np.ndarray]


@dataclass
class SyntheticConfig:
    """Parameters of the synthetic data generating process.

    ``effects`` is ``"heterogeneous"`` (default effect functions that interact
    country of birth and Dutch proficiency), ``"zero"``, a triple of constant
    employment effects in months for SVT/LVT/OT, or a callable mapping the
    feature dict to an ``(n, 3)`` array.
    """

    n: int = 4000
    seed: int = 0
    shares: tuple[float, float, float] = (0.021, 0.020, 0.018)
    selection_strength: float = 1.0
    effects: object = "heterogeneous"
    noise_sd: float = 3.0
    n_noise_features: int = 3
    pseudo_start: bool = False
    blocked_share: float = 0.0
    contamination_share: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "shares" in d:
            d["shares"] = tuple(d["shares"])
        if isinstance(d.get("effects"), list):
            d["effects"] = tuple(d["effects"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        eff = self.effects
        if callable(eff):
            eff = getattr(eff, "__name__", "callable")
        elif isinstance(eff, tuple):
            eff = list(eff)
        return {"n": self.n, "seed": self.seed, "shares": list(self.shares),
                "selection_strength": self.selection_strength, "effects": eff,
                "noise_sd": self.noise_sd, "n_noise_features": self.n_noise_features,
                "pseudo_start": self.pseudo_start, "blocked_share": self.blocked_share,
                "contamination_share": self.contamination_share, "dgp_version": DGP_VERSION}


COUNTRY_LABELS = ("1", "2", "3", "4", "5", "6")  # Belgium, W/N EU, S EU, E EU, TR/MA, rest
EDUC_LABELS = ("1", "2", "3", "4")

# selection coefficients of SVT/LVT/OT on standardized (age, unem_10jaar, werk_2jaar)
_SELECTION = np.array([[-0.5, 0.6, -0.4],
                       [-0.6, -0.5, 0.6],
                       [0.5, 0.4, -0.5]])


def heterogeneous_effects(f: dict) -> np.ndarray:
    """Default employment effects (months over 30 months) for SVT, LVT, OT."""
    foreign = (f["country"] != 0).astype(float)
    low_dutch = (f["ned"] <= 1).astype(float)
    eastern = (f["country"] == 3).astype(float)
    older = (f["age"] > 28).astype(float)
    svt = 2.0 + 2.0 * foreign * low_dutch + 1.5 * eastern * older - 0.05 * f["werk_2jaar"]
    lvt = 0.5 + 1.5 * foreign * low_dutch + 1.0 * eastern - 0.5 * f["city"]
    ot = -1.5 + 3.0 * foreign * (f["ned"] == 0) + 0.5 * f["city"]
    return np.column_stack([svt, lvt, ot])


def _effects(config: SyntheticConfig, f: dict, n: int) -> np.ndarray:
    eff = config.effects
    if callable(eff):
        tau = np.asarray(eff(f), dtype=float)
    elif eff == "heterogeneous":
        tau = heterogeneous_effects(f)
    elif eff == "zero":
        tau = np.zeros((n, 3))
    else:
        try:
            tau = np.broadcast_to(np.asarray(eff, dtype=float), (n, 3)).copy()
        except ValueError:
            raise ConfigError(f"cannot interpret effects {eff!r}") from None
    if tau.shape != (n, 3):
        raise ConfigError("effect functions must return an (n, 3) array")
    return np.column_stack([np.zeros(n), np.clip(tau, -6.0, 8.0)])


def _calibrate_intercepts(lin: np.ndarray, targets: np.ndarray, iters: int = 200) -> np.ndarray:
    alpha = np.log(targets[1:] / targets[0])
    for _ in range(iters):
        logits = np.column_stack([np.zeros(len(lin)), lin + alpha])
        p = _softmax(logits)
        alpha += np.log(targets[1:] / p[:, 1:].mean(axis=0)) - np.log(targets[0] / p[:, 0].mean())
    return alpha


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def synthetic_specs(n_noise: int = 3, blocked: bool = False) -> list[FeatureSpec]:
    specs = [
        FeatureSpec("age", role="confounder"),
        FeatureSpec("unem_10jaar", role="confounder"),
        FeatureSpec("werk_2jaar", role="confounder"),
        FeatureSpec("woman", role="both"),
        FeatureSpec("ned", role="both"),
        FeatureSpec("country", "categorical", COUNTRY_LABELS, role="both"),
        FeatureSpec("city", role="both"),
        FeatureSpec("educ", "categorical", EDUC_LABELS, role="both"),
    ]
    if blocked:
        specs.append(FeatureSpec("blocked", role="confounder"))
    specs += [FeatureSpec(f"noise_{k + 1}", role="heterogeneity") for k in range(n_noise)]
    return specs


def _streams(T: np.ndarray, olf: np.ndarray) -> np.ndarray:
    # unemployed for T months, employed until the trailing OLF block
    months = np.arange(HORIZON)
    s = np.zeros(T.shape + (HORIZON,), dtype=np.int8)
    s[months < T[..., None]] = 1
    s[months >= (HORIZON - olf)[..., None]] = 2
    return s


def generate_synthetic(config: SyntheticConfig | None = None, **overrides) -> Dataset:
    """Draw a synthetic dataset with known potential outcomes under all four arms.

    Assignment follows a multinomial logit in three confounders (age and the
    two labour-market history variables) with intercepts calibrated to
    ``config.shares``.  Each unit has a latent number of months ``T0`` spent
    unemployed before finding a job without a programme; arm ``d`` shortens
    that spell by a stochastically rounded ``tau_d(x)`` months, so the
    employment effect over 30 months equals ``tau_d(x)`` in expectation and
    exactly when ``tau_d`` is integer valued.
    """
    config = config or SyntheticConfig()
    if overrides:
        config = SyntheticConfig(**{**config.__dict__, **overrides})
    n = config.n
    if n < 40:
        raise ConfigError("synthetic data needs n >= 40")
    if config.selection_strength < 0:
        raise ConfigError("selection strength must be nonnegative")
    shares = np.asarray(config.shares, dtype=float)
    if shares.shape != (3,) or np.any(shares < 0) or shares.sum() >= 1:
        raise ConfigError("shares must be three nonnegative values summing to < 1")
    if np.any(shares * n * (1 - config.blocked_share) < 1):
        raise ConfigError("degenerate config: an arm has an expected count below one unit")

    rng = np.random.default_rng(config.seed)
    age = np.round(rng.uniform(21, 55, n), 1)
    woman = (rng.random(n) < 0.45).astype(float)
    country = rng.choice(6, size=n, p=[0.70, 0.05, 0.04, 0.06, 0.07, 0.08])
    foreign = country != 0
    ned = np.where(foreign, rng.choice(4, size=n, p=[0.25, 0.30, 0.25, 0.20]),
                   rng.choice(4, size=n, p=[0.02, 0.05, 0.13, 0.80]))
    unem = np.clip(np.round(rng.gamma(2.0, 8.0, n)), 0, 120)
    werk = np.clip(np.round(24 * rng.beta(2.0, 1.2, n) - 6 * foreign), 0, 24)
    city = (rng.random(n) < 0.3 + 0.2 * foreign).astype(float)
    educ = rng.choice(4, size=n, p=[0.3, 0.35, 0.25, 0.10])
    blocked = (rng.random(n) < config.blocked_share).astype(float)
    noise = rng.standard_normal((n, config.n_noise_features))

    feats = {"age": age, "unem_10jaar": unem, "werk_2jaar": werk, "woman": woman, "ned": ned,
             "country": country, "city": city, "educ": educ}

    conf = np.column_stack([age, unem, werk])
    conf = (conf - conf.mean(axis=0)) / conf.std(axis=0)
    lin = config.selection_strength * conf @ _SELECTION.T
    targets = np.concatenate([[1 - shares.sum()], shares])
    alpha = _calibrate_intercepts(lin, targets)
    p = _softmax(np.column_stack([np.zeros(n), lin + alpha]))
    if config.blocked_share > 0:
        p[blocked == 1] = [1.0, 0.0, 0.0, 0.0]
    u = rng.random(n)
    D = np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1), N_ARMS - 1)

    mu = 15 + 2.5 * conf[:, 1] - 2.5 * conf[:, 2] + 1.5 * conf[:, 0] + 1.0 * (ned <= 1) \
        - 1.0 * city + 0.5 * woman
    T0 = np.clip(np.round(mu + config.noise_sd * rng.standard_normal(n)), 8, 22).astype(int)
    olf = rng.binomial(2, 0.15 + 0.10 * woman)
    tau = _effects(config, feats, n)
    k = np.floor(tau) + (rng.random((n, N_ARMS)) < tau - np.floor(tau))
    T = T0[:, None] - k.astype(int)
    extra = {}
    if config.contamination_share > 0:
        # an earlier programme within the spell shifts every potential outcome
        contaminated = (rng.random(n) < config.contamination_share) & (D > 0)
        T = np.maximum(T - 4 * contaminated[:, None], 0)
        extra["prior_almp"] = contaminated
    potential = _streams(T, np.repeat(olf[:, None], N_ARMS, axis=1))

    log_start = 4.3 + 0.15 * conf[:, 1] - 0.1 * woman + 0.2 * conf[:, 0] \
        + 0.6 * rng.standard_normal(n)
    start = np.clip(np.round(np.exp(log_start)), 1, MAX_START_DAY).astype(int)
    T_obs = T[np.arange(n), D]
    spell = start + np.round(30.4 * T_obs).astype(int)
    if config.pseudo_start:
        start = np.where(D == 0, 0, start)
    streams = potential[np.arange(n), D].copy()

    specs = synthetic_specs(config.n_noise_features, config.blocked_share > 0)
    cols = [age, unem, werk, woman, ned, country, city, educ]
    if config.blocked_share > 0:
        cols.append(blocked)
    X = np.column_stack(cols + [noise]) if config.n_noise_features else np.column_stack(cols)
    return Dataset(specs=specs, X=X, treatment=D, streams=streams, spell_length_days=spell,
                   start_day=start, is_pseudo_start=np.zeros(n, dtype=bool),
                   ids=np.array([f"u{i:06d}" for i in range(n)]),
                   truth=SyntheticTruth(potential, tau), extra=extra)
