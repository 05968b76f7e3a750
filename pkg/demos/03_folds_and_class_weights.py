"""Stratified group folds and imbalance-correcting class weights.

Reproduces the two bookkeeping tables that anchor the benchmark: the
per-fold class counts for a 242 normal / 675 abnormal corpus, and the
class-weight table for a few multiplier settings.
"""

import numpy as np

from vitbench.data import DatasetManifest, Sample, make_folds
from vitbench.training import class_weights


def singleton_manifest(n_normal, n_abnormal):
    samples = [Sample(path=f"n{i}.png", raw_label="normal", label=0,
                      group_id=f"n{i}") for i in range(n_normal)]
    samples += [Sample(path=f"a{i}.png", raw_label="abnormal", label=1,
                       group_id=f"a{i}") for i in range(n_abnormal)]
    return DatasetManifest(samples=tuple(samples),
                           class_counts={0: n_normal, 1: n_abnormal},
                           class_map={"normal": 0, "abnormal": 1})


man = singleton_manifest(242, 675)
plan = make_folds(man, 5, seed=0)
labels = man.labels()

print("fold  normal  abnormal  total")
for f in range(plan.k):
    idx = plan.val_indices(f)
    n0 = int((labels[idx] == 0).sum())
    n1 = int((labels[idx] == 1).sum())
    print(f"{f:4d}  {n0:6d}  {n1:8d}  {len(idx):5d}")

# groups never straddle folds: all four samples of the patient below
# land in the same validation fold
grouped = DatasetManifest(
    samples=tuple(
        [Sample(path=f"p7_{j}.png", raw_label="abnormal", label=1,
                group_id="patient7") for j in range(4)]
        + [Sample(path=f"x{i}.png", raw_label="normal", label=0,
                  group_id=f"x{i}") for i in range(20)]
        + [Sample(path=f"y{i}.png", raw_label="abnormal", label=1,
                  group_id=f"y{i}") for i in range(20)]),
    class_counts={0: 20, 1: 24},
    class_map={"normal": 0, "abnormal": 1})
gplan = make_folds(grouped, 4, seed=3)
patient_folds = {gplan.assignment[i] for i, s in enumerate(grouped.samples)
                 if s.group_id == "patient7"}
print(f"\npatient7 appears in folds: {sorted(patient_folds)}")

print("\nmultipliers (abn, norm)   abnormal_w  normal_w")
counts = {0: 242, 1: 675}
for mult in [(1.0, 1.0), (0.8, 0.8), (1.2, 1.2), (0.7, 1.3), (1.3, 0.7)]:
    cw = class_weights(counts, mult)
    print(f"{str(mult):24s}  {cw.weights[1]:10.2f}  {cw.weights[0]:8.2f}")
