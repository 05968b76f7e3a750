"""Replication statistics: intervals, Welch tests, pairwise tables.

Everything downstream of training reads (mean, std, n) summaries, so
published numbers can be compared without raw per-run logs.
"""

import numpy as np

from vitbench.stats import (
    mean_ci,
    pairwise_table,
    summary_ci,
    t_cdf,
    t_critical,
    welch_test,
)

# interval from a published summary row
ci = summary_ci(95.15, 0.57, 10)
print(f"95.15 +- 0.57 over 10 runs -> 95% CI ({ci.ci_low:.3f}, {ci.ci_high:.3f})")

# the same interval from raw values
rng = np.random.default_rng(0)
values = rng.normal(80.0, 2.0, size=12)
ci2 = mean_ci(values.tolist())
print(f"raw sample of 12           -> 95% CI ({ci2.ci_low:.3f}, {ci2.ci_high:.3f})")

# two configurations compared from their summaries alone
report = welch_test((93.93, 1.41, 10), (95.15, 0.57, 10))
print(f"\nA vs B: diff {report.diff:+.2f}, t {report.t_stat:.3f}, "
      f"df {report.df:.1f}, p {report.p_value:.4f}, "
      f"significant={report.significant}")

# raw-vector form, paired and unpaired
a = [93.1, 94.0, 93.5, 93.9, 94.2]
b = [94.8, 95.1, 94.6, 95.3, 94.9]
print("unpaired p:", round(welch_test(a, b).p_value, 5))
print("paired p:  ", round(welch_test(a, b, paired=True).p_value, 5))

# distribution plumbing is exposed too
print(f"\nP(T_10 <= 2.0) = {t_cdf(2.0, 10):.6f}")
print(f"t_crit(df=10, alpha=0.05) = {t_critical(10, 0.05):.6f}")

# every unordered pair of configurations, one table per metric
runs = {
    "baseline": rng.normal(93.9, 1.4, size=10),
    "weighted": rng.normal(95.2, 0.6, size=10),
    "augmented": rng.normal(94.3, 0.6, size=10),
}
configs = [(name, {"accuracy": v.tolist()}) for name, v in runs.items()]
tables = pairwise_table(configs)
print("\npair                       diff      p       significant")
for name_a, name_b, rep in tables["accuracy"]:
    print(f"{name_a:>9s} vs {name_b:<9s} {rep.diff:+8.2f}  {rep.p_value:.4f}  "
          f"{rep.significant}")
