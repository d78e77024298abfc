"""Config-driven end-to-end run writing every report into one directory.

Stages run in a fixed order; each writes its own files and the manifest
records the sub-seeds, the config hash and a SHA-256 hash of every output.

Sub-seeds are counter based: stage ``k`` (a fixed number per stage name,
see ``STAGE_IDS``) gets ``SeedSequence(seed, spawn_key=(k,))``, so adding a
stage never changes the randomness of the others.
"""
from __future__ import annotations

import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .allocation import (CapacitySpec, AllocationPlan, allocate_priority, allocate_random,
                         allocate_sequential_swap, allocate_significant, allocate_unconstrained,
                         allocation_table, composite_score, evaluate_allocation)
from .clustering import cluster_profile, kmeans_pp
from .dataset import (ARM_LABELS, DEFAULT_OUTCOMES, HORIZON, N_ARMS, Dataset, Outcome,
                      SyntheticConfig, balance_report, generate_synthetic, load_dataset,
                      load_feature_specs, save_feature_specs, write_dataset)
from .effects import (EffectEstimator, check_support, estimate_iates, placebo_run,
                      sorted_effects)
from .exceptions import ConfigError, DataError, McfPolicyError
from .forest import (ForestConfig, build_forest, compute_weights, feature_deselect,
                     weight_diagnostics)
from .policy_tree import PolicyTreeConfig, fit_policy_tree, rule_table
from .pseudo_start import assign_pseudo_starts

log = logging.getLogger(__name__)

STAGE_IDS = {"data": 0, "pseudostart": 1, "deselection": 2, "forest": 3, "effects": 4,
             "clustering": 5, "scores": 6, "allocations": 7, "policytrees": 8, "placebo": 9}
DEPENDS = {"pseudostart": ["data"], "deselection": ["pseudostart"], "forest": ["deselection"],
           "effects": ["forest"], "clustering": ["effects"], "scores": ["effects"],
           "allocations": ["scores"], "policytrees": ["scores"], "placebo": ["data"]}
MANIFEST_VERSION = 1

DEFAULT_SCENARIOS = (
    {"name": "Observed", "rule": "observed"},
    {"name": "Random", "rule": "random"},
    {"name": "Unconstrained", "rule": "unconstrained"},
    {"name": "Significant", "rule": "significant"},
    {"name": "Largest gain", "rule": "priority", "priority": "largest-gain"},
    {"name": "Sequential swap", "rule": "swap"},
)
RULES = ("observed", "random", "unconstrained", "significant", "priority", "swap")


def stage_seed(seed: int, stage: str) -> int:
    """Counter-based sub-seed of ``stage`` derived from the master seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(STAGE_IDS[stage],))
    return int(ss.generate_state(1)[0])


@dataclass
class PipelineConfig:
    """Everything one run needs; ``from_dict`` accepts the JSON layout.

    ``data`` is ``{"synthetic": {...}}`` or ``{"file": csv, "features": json}``.
    """

    data: dict = field(default_factory=lambda: {"synthetic": {}})
    forest: dict = field(default_factory=dict)
    outcomes: list = field(default_factory=lambda: [o.name for o in DEFAULT_OUTCOMES])
    split_outcome: str = "emp_0_30"
    gate_features: list = field(default_factory=list)
    pseudo_start: dict = field(default_factory=dict)
    deselection: dict = field(default_factory=lambda: {"enabled": True})
    clustering: dict = field(default_factory=lambda: {"k": 8, "restarts": 10})
    allocations: list = field(default_factory=lambda: [dict(s) for s in DEFAULT_SCENARIOS])
    policy_trees: list = field(default_factory=lambda: [{"depth": 2, "approximation": 50}])
    policy_features: list | None = None
    placebo: dict = field(default_factory=lambda: {"enabled": False})
    support_trim: float = 0.01
    seed: int = 0
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("workers")   # worker count must not change results
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        if not isinstance(self.data, dict) or not (("synthetic" in self.data)
                                                   ^ ("file" in self.data)):
            raise ConfigError("data needs exactly one of 'synthetic' or 'file'")
        if "file" in self.data and "features" not in self.data:
            raise ConfigError("a data file needs a 'features' spec file")
        for o in list(self.outcomes) + [self.split_outcome]:
            if Outcome.parse(o).end > HORIZON:
                raise ConfigError(f"outcome {o} exceeds the {HORIZON}-month horizon")
        for s in self.allocations:
            if s.get("rule") not in RULES:
                raise ConfigError(f"unknown allocation rule {s.get('rule')!r}; choose from {RULES}")
        if self.placebo.get("window", 9) > HORIZON:
            raise ConfigError(f"placebo window exceeds the {HORIZON}-month horizon")
        ForestConfig.from_dict(self.forest)
        for t in self.policy_trees:
            PolicyTreeConfig(**t)

    def check_features(self, dataset: Dataset) -> None:
        names = set(dataset.feature_names)
        for label, feats in (("GATE", self.gate_features), ("policy", self.policy_features or [])):
            missing = [f for f in feats if f not in names]
            if missing:
                raise ConfigError(f"{label} features not in data: {missing}")


@dataclass
class PipelineResult:
    out: Path
    manifest: dict
    stages: list


class _Run:
    def __init__(self, config: PipelineConfig, out):
        self.config = config
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.stages: list[str] = []

    @contextmanager
    def stage(self, name):
        log.info("stage %s", name)
        try:
            yield stage_seed(self.config.seed, name)
        except McfPolicyError as e:
            raise type(e)(f"stage {name}: {e}") from e
        except Exception as e:
            raise McfPolicyError(f"stage {name}: {type(e).__name__}: {e}") from e
        self.stages.append(name)

    def write_csv(self, df: pd.DataFrame, name: str, index: bool = False):
        df.to_csv(self.out / name, index=index, float_format="%.10g")
        self.files.append(name)

    def write_text(self, text: str, name: str):
        (self.out / name).write_text(text)
        self.files.append(name)

    def write_json(self, obj, name: str):
        self.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n",
                        name)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o).__name__)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_source(config: PipelineConfig, seed: int) -> Dataset:
    src = config.data
    if "synthetic" in src:
        syn = dict(src["synthetic"])
        syn.setdefault("seed", seed)
        return generate_synthetic(SyntheticConfig.from_dict(syn))
    return load_dataset(src["file"], load_feature_specs(src["features"]))


def _prior_spell(config: PipelineConfig, seed: int) -> Dataset:
    p = config.placebo
    if p.get("file"):
        if "features" not in p and "features" not in config.data:
            raise ConfigError("placebo file needs a features spec")
        return load_dataset(p["file"], load_feature_specs(p.get("features",
                                                                config.data.get("features"))))
    if "synthetic" in config.data:
        # prior spell of the same population: programmes cannot act before they start
        syn = {**config.data["synthetic"], "effects": "zero", "seed": seed}
        return generate_synthetic(SyntheticConfig.from_dict(syn))
    raise DataError("placebo analysis needs prior-spell data (placebo.file)")


def required_stages(targets) -> set:
    """``targets`` plus every stage they depend on."""
    want = set()
    todo = list(targets)
    while todo:
        s = todo.pop()
        if s not in STAGE_IDS:
            raise ConfigError(f"unknown stage {s!r}")
        if s not in want:
            want.add(s)
            todo += DEPENDS.get(s, [])
    return want


def run_pipeline(config: PipelineConfig | dict, out, stages=None) -> PipelineResult:
    """Run the stages and write reports plus ``manifest.json`` into ``out``.

    ``stages`` restricts the run to the named stages and their prerequisites;
    by default every stage runs, the placebo stage only if enabled.
    """
    if isinstance(config, dict):
        config = PipelineConfig.from_dict(config)
    config.validate()
    if stages is None:
        want = set(STAGE_IDS) - ({"placebo"} if not config.placebo.get("enabled", False) else set())
    else:
        want = required_stages(stages)
    run = _Run(config, out)
    seeds = {}
    fcfg = ForestConfig.from_dict({**config.forest, "workers": config.workers})

    with run.stage("data") as seeds["data"]:
        ds = load_source(config, seeds["data"])
        config.check_features(ds)
        write_dataset(ds, run.out / "data.csv")
        run.files.append("data.csv")
        save_feature_specs(ds.specs, run.out / "features.json")
        run.files.append("features.json")
        run.write_csv(balance_report(ds), "balance.csv")
        if ds.truth is not None:
            run.write_csv(pd.DataFrame(
                [{"outcome": o, "m": ARM_LABELS[m], "l": ARM_LABELS[l],
                  "ate": ds.truth.ate(Outcome.parse(o), m, l)}
                 for o in config.outcomes for m in range(1, N_ARMS) for l in range(m)]),
                "truth.csv")

    if "pseudostart" in want and np.any(ds.start_day[ds.treatment == 0] == 0):
        with run.stage("pseudostart") as seeds["pseudostart"]:
            ps = config.pseudo_start
            res = assign_pseudo_starts(ds, seed=seeds["pseudostart"], folds=ps.get("folds", 10),
                                       grid_size=ps.get("grid_size", 100))
            ds = res.dataset
            write_dataset(ds, run.out / "pseudostart_data.csv")
            run.files.append("pseudostart_data.csv")
            run.write_csv(res.model.coefficient_report(), "pseudostart_coefficients.csv")
            run.write_json(res.result.counts(), "pseudostart_counts.json")

    est_ds = ds
    if "deselection" in want:
        with run.stage("deselection") as seeds["deselection"]:
            dcfg = config.deselection
            if dcfg.get("enabled", True):
                sel = feature_deselect(ds, fcfg, share=dcfg.get("share", 0.2),
                                       n_groups=dcfg.get("groups", 10),
                                       outcome=config.split_outcome, seed=seeds["deselection"])
                keep = sorted(set(sel.retained) | set(config.gate_features)
                              | set(config.policy_features or []), key=ds.feature_names.index)
                est_ds = ds.subset(sel.estimation_idx).select_features(keep)
                report = {"retained": keep, "deleted": [f for f in sel.deleted if f not in keep],
                          "vim": sel.vim, "groups": sel.groups, "group_vim": sel.group_vim,
                          "cumulative_vim": sel.cumulative_vim,
                          "n_selection": len(sel.selection_idx), "n_estimation": len(sel.estimation_idx)}
            else:
                report = {"retained": ds.feature_names, "deleted": []}
            run.write_json(report, "deselection.json")

    if "forest" in want:
        with run.stage("forest") as seeds["forest"]:
            fcfg = ForestConfig.from_dict({**asdict(fcfg), "seed": seeds["forest"]})
            forest = build_forest(est_ds, fcfg, outcome=config.split_outcome)
            weights = compute_weights(forest)
            forest.to_json(run.out / "forest.json")
            run.files.append("forest.json")
            groups = {f"{f}={c:g}": est_ds.column(f) == c for f in config.gate_features
                      for c in np.unique(est_ds.column(f))}
            diag = weight_diagnostics(weights, groups)
            run.write_csv(pd.DataFrame(diag["rows"]), "weight_diagnostics.csv")
            run.write_json({"concern": diag["concern"], "penalty": forest.penalty,
                            "n_train": forest.n_train}, "forest_summary.json")

    outcomes = list(dict.fromkeys(list(config.outcomes) + ["emp_0_30", "ue_0_30", "olf_0_30"]))
    if "effects" in want:
        with run.stage("effects") as seeds["effects"]:
            est = EffectEstimator.from_dataset(weights, est_ds, outcomes)
            run.write_csv(est.effect_table(config.outcomes), "effects.csv")
            blocks = []
            for o in config.outcomes:
                M = est.effect_matrix(o)
                M.insert(0, "outcome", o)
                blocks.append(M)
            run.write_csv(pd.concat(blocks), "effects_table.csv", index=True)
            run.write_csv(est.population_table(config.split_outcome), "effects_populations.csv")
            run.write_csv(est.wald_table(config.split_outcome), "wald.csv")
            gates = [est.gate_minus_ate(o, m, 0, est_ds.column(f), f)
                     for o in config.outcomes for f in config.gate_features for m in range(1, N_ARMS)]
            run.write_csv(pd.concat(gates, ignore_index=True) if gates else pd.DataFrame(), "gates.csv")
            y = est.outcomes[config.split_outcome]
            iates = [estimate_iates(weights, y, m, 0, config.split_outcome) for m in range(1, N_ARMS)]
            frame = pd.DataFrame({"id": est_ds.ids})
            curves = []
            for m, s in zip(range(1, N_ARMS), iates):
                frame[f"iate_{ARM_LABELS[m]}"] = s.point
                frame[f"se_{ARM_LABELS[m]}"] = s.se
                c = sorted_effects(s.point, s.se).to_frame()
                c.insert(0, "contrast", f"{ARM_LABELS[m]}-{ARM_LABELS[0]}")
                curves.append(c)
            run.write_csv(frame, "iates.csv")
            run.write_csv(pd.concat(curves, ignore_index=True), "sorted_effects.csv")
            run.write_csv(check_support(est_ds, config.support_trim).summary(), "support.csv")

    if "clustering" in want:
        with run.stage("clustering") as seeds["clustering"]:
            cc = config.clustering
            Z = np.column_stack([s.point for s in iates])
            model = kmeans_pp(Z, k=cc.get("k", 8), seed=seeds["clustering"],
                              restarts=cc.get("restarts", 10))
            prof = cluster_profile(model, Z, est_ds, cc.get("covariates"),
                                   nop_outcome=est.potential(config.split_outcome)[:, 0])
            run.write_csv(prof, "clusters.csv", index=True)

    if "scores" in want:
        with run.stage("scores") as seeds["scores"]:
            emp, ue, olf = (est.potential(o) for o in ("emp_0_30", "ue_0_30", "olf_0_30"))
            scores = composite_score(emp, ue)
            sm = pd.DataFrame(scores, columns=[f"score_{a}" for a in ARM_LABELS])
            sm.insert(0, "id", est_ds.ids)
            run.write_csv(sm, "scores.csv")

    if "allocations" in want:
        with run.stage("allocations") as seeds["allocations"]:
            observed = est_ds.treatment
            sig = []
            for o in ("emp_0_30", "ue_0_30"):
                sets = [estimate_iates(weights, est.outcomes[o], m, 0, o) for m in range(1, N_ARMS)]
                sig += [np.column_stack([s.point for s in sets]), np.column_stack([s.se for s in sets])]
            rows = [evaluate_allocation(p, emp, ue, olf, observed, p.rule)
                    for p in _allocations(config, est_ds, scores, sig, seeds["allocations"])]
            run.write_csv(allocation_table(rows), "allocations.csv")

    if "policytrees" in want:
        with run.stage("policytrees") as seeds["policytrees"]:
            feats = config.policy_features or est_ds.feature_names
            cols = [est_ds.feature_index(f) for f in feats]
            cat = est_ds.categorical_mask[cols]
            n_cat = {k: len(est_ds.specs[j].categories) for k, j in enumerate(cols)
                     if est_ds.specs[j].is_categorical}
            summary = []
            for i, t in enumerate(config.policy_trees):
                tcfg = PolicyTreeConfig(**t)
                tree = fit_policy_tree(scores, est_ds.X[:, cols], tcfg, cat, feats, n_cat)
                run.write_text(tree.to_json() + "\n", f"policy_tree_{i}.json")
                labels = {k: est_ds.specs[j].categories for k, j in enumerate(cols)
                          if est_ds.specs[j].is_categorical}
                run.write_csv(rule_table(tree, category_labels=labels), f"policy_tree_{i}_rules.csv")
                summary.append({"tree": i, "levels": tcfg.levels, "reward": tree.reward,
                                "mean_reward": tree.reward / est_ds.n,
                                "infeasible": tree.infeasible})
            run.write_csv(pd.DataFrame(summary), "policy_trees.csv")

    if "placebo" in want:
        with run.stage("placebo") as seeds["placebo"]:
            prior = _prior_spell(config, seeds["placebo"])
            pcfg = ForestConfig.from_dict({**asdict(fcfg), "seed": seeds["placebo"]})
            res = placebo_run(prior, pcfg, window=config.placebo.get("window", 9),
                              gate_features=config.gate_features)
            run.write_csv(res.table, "placebo.csv", index=True)
            run.write_csv(pd.DataFrame([e.as_row() for e in res.estimates]),
                          "placebo_estimates.csv")
            run.write_csv(res.heterogeneity, "placebo_gates.csv")

    outputs = {f: _sha(run.out / f) for f in sorted(run.files)}
    manifest = {
        "version": MANIFEST_VERSION,
        "config_hash": config.hash(),
        "config": config.to_dict() | {"workers": None},
        "seed": config.seed,
        "seeds": seeds,
        "stages": run.stages,
        "outputs": outputs,
        "output_hash": hashlib.sha256(json.dumps(outputs, sort_keys=True).encode()).hexdigest(),
    }
    (run.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return PipelineResult(run.out, manifest, run.stages)


def _allocations(config, ds: Dataset, scores, significance, seed) -> list[AllocationPlan]:
    observed = ds.treatment
    shares = np.bincount(observed, minlength=N_ARMS)[1:] / ds.n
    plans = []
    for k, s in enumerate(config.allocations):
        rule = s["rule"]
        cap = CapacitySpec(**s["capacity"]) if "capacity" in s else CapacitySpec("per-arm",
                                                                                   tuple(shares))
        if rule == "observed":
            p = AllocationPlan(observed.copy(), float(scores[np.arange(ds.n), observed].sum()),
                               observed, rule="observed")
        elif rule == "random":
            sub = int(np.random.SeedSequence(seed, spawn_key=(k,)).generate_state(1)[0])
            p = allocate_random(cap.shares, ds.n, s.get("seed", sub), observed, scores)
        elif rule == "unconstrained":
            p = allocate_unconstrained(scores, observed)
        elif rule == "significant":
            p = allocate_significant(scores, *significance, alpha=s.get("alpha", 0.025),
                                     observed=observed)
        elif rule == "priority":
            p = allocate_priority(scores, cap, s.get("priority", "largest-gain"), ds, observed)
        else:
            p = allocate_sequential_swap(observed, scores, cap, observed)
        p.rule = s.get("name", rule)
        plans.append(p)
    return plans
