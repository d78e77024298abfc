"""Command line entry point: ``mcfpolicy <subcommand> --config run.json --out dir``.

Every subcommand reads a pipeline config (see ``PipelineConfig``) and runs
the stages it needs.  ``policytree`` can instead work on a score matrix CSV
given as ``scores_file`` in the config.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import ConfigError, DataError, McfPolicyError
from .pipeline import PipelineConfig, run_pipeline
from .policy_tree import PolicyTreeConfig, fit_policy_tree, rule_table

log = logging.getLogger("mcfpolicy")

SUBCOMMANDS = {
    "synth": ["data"],
    "pseudostart": ["pseudostart"],
    "forest": ["forest"],
    "effects": ["effects"],
    "cluster": ["clustering"],
    "allocate": ["allocations"],
    "policytree": ["policytrees"],
    "placebo": ["placebo"],
    "pipeline": None,
}
HELP = {
    "synth": "draw a synthetic dataset with known effects",
    "pseudostart": "simulate pseudo programme start days for nonparticipants",
    "forest": "grow the causal forest and report weight diagnostics",
    "effects": "ATE/ATET/GATE/IATE tables, Wald tests and sorted effects",
    "cluster": "k-means++ clusters of the IATEs and their profiles",
    "allocate": "evaluate allocation rules (one row per scenario)",
    "policytree": "fit shallow policy trees on a score matrix",
    "placebo": "placebo effects of future programme entry on the prior spell",
    "pipeline": "run every stage",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcfpolicy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", type=Path, help="JSON run config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, default=Path("mcf_out"), help="output directory")
        p.add_argument("--workers", type=int, help="parallel workers; results do not depend on it")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> dict:
    if args.config is None:
        d = {}
    else:
        try:
            d = json.loads(args.config.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {args.config}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    if args.seed is not None:
        d["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        d["workers"] = args.workers
    return d


def policytree_from_scores(d: dict, out: Path) -> None:
    """Fit the configured trees on a score matrix CSV (``score_*`` plus feature columns)."""
    path = Path(d["scores_file"])
    if not path.exists():
        raise DataError(f"score file not found: {path}")
    df = pd.read_csv(path)
    score_cols = [c for c in df.columns if c.startswith("score_")]
    if len(score_cols) < 2:
        raise DataError("score matrix needs at least two score_<arm> columns")
    feats = d.get("policy_features") or [c for c in df.columns
                                          if c not in score_cols and c != "id"]
    missing = [f for f in feats if f not in df.columns]
    if missing:
        raise DataError(f"features not in score file: {missing}")
    cats = set(d.get("categorical_features", []))
    X = df[feats].to_numpy(dtype=float)
    scores = df[score_cols].to_numpy(dtype=float)
    if not np.all(np.isfinite(scores)) or not np.all(np.isfinite(X)):
        raise DataError("score file contains missing or non-finite values")
    cat = np.array([f in cats for f in feats])
    n_cat = {k: int(X[:, k].max()) + 1 for k in range(len(feats)) if cat[k]}
    labels = tuple(c[len("score_"):] for c in score_cols)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, t in enumerate(d.get("policy_trees", [{"depth": 2, "approximation": 1}])):
        cfg = PolicyTreeConfig(**t)
        tree = fit_policy_tree(scores, X, cfg, cat, feats, n_cat)
        (out / f"policy_tree_{i}.json").write_text(tree.to_json() + "\n")
        rule_table(tree, labels).to_csv(out / f"policy_tree_{i}_rules.csv", index=False,
                                        float_format="%.10g")
        rows.append({"tree": i, "levels": cfg.levels, "reward": tree.reward,
                     "infeasible": tree.infeasible})
    pd.DataFrame(rows).to_csv(out / "policy_trees.csv", index=False, float_format="%.10g")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    d = load_config(args)
    if args.command == "policytree" and "scores_file" in d:
        policytree_from_scores(d, args.out)
        print(f"policy trees written to {args.out}")
        return 0
    extra = {"scores_file", "categorical_features"} & set(d)
    if extra:
        raise ConfigError(f"{sorted(extra)} only apply to 'policytree' with a score file")
    if args.command == "placebo":
        d["placebo"] = {**d.get("placebo", {}), "enabled": True}
    res = run_pipeline(PipelineConfig.from_dict(d), args.out, SUBCOMMANDS[args.command])
    print(f"{args.command}: stages {', '.join(res.stages)} -> {res.out} "
          f"(output hash {res.manifest['output_hash'][:12]})")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except McfPolicyError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
