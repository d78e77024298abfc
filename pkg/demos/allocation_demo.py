"""From potential outcomes to allocation rules and a shallow policy tree.

Uses the true potential outcomes of a synthetic sample as scores so the
rules can be compared without estimation noise.  SVT helps the young,
OT helps women and LVT is neutral.

Run: python demos/allocation_demo.py
"""
import numpy as np

from mcfpolicy import Outcome, SyntheticConfig, generate_synthetic
from mcfpolicy.allocation import (AllocationPlan, CapacitySpec, allocate_priority,
                                  allocate_random, allocate_sequential_swap,
                                  allocate_unconstrained, allocation_table, composite_score,
                                  evaluate_allocation)
from mcfpolicy.policy_tree import PolicyTreeConfig, fit_policy_tree, rule_table

def effects(f):
    svt = np.where(f["age"] < 35, 3.0, -1.0)
    ot = np.where(f["woman"] == 1, 2.0, -2.0)
    return np.column_stack([svt, np.zeros_like(svt), ot])


ds = generate_synthetic(SyntheticConfig(n=5000, seed=8, effects=effects))
emp, ue, olf = (ds.truth.potential(Outcome.parse(o)) for o in ("emp_0_30", "ue_0_30", "olf_0_30"))
scores = composite_score(emp, ue)
observed = ds.treatment
cap = CapacitySpec(shares=tuple(np.bincount(observed, minlength=4)[1:] / ds.n))

plans = [AllocationPlan(observed.copy(), scores[np.arange(ds.n), observed].sum(), observed,
                        rule="Observed"),
         allocate_random(cap.shares, ds.n, seed=1, observed=observed, scores=scores),
         allocate_unconstrained(scores, observed),
         allocate_priority(scores, cap, "largest-gain", ds, observed),
         allocate_sequential_swap(observed, scores, cap, observed)]
for p, name in zip(plans, ["Observed", "Random", "Unconstrained", "Largest gain", "Swap"]):
    p.rule = name
rows = [evaluate_allocation(p, emp, ue, olf, observed, p.rule) for p in plans]
print(allocation_table(rows).to_string(index=False))

feats = ["age", "unem_10jaar", "woman"]
cols = [ds.feature_index(f) for f in feats]
tree = fit_policy_tree(scores, ds.X[:, cols], PolicyTreeConfig(depth=2, approximation=50),
                       feature_names=feats)
print(f"\npolicy tree reward per unit {tree.reward / ds.n:.3f}")
print(rule_table(tree).to_string(index=False))
