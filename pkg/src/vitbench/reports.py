"""Result serialization: full-precision JSON records and the formatted
CSV tables.

Formatting rules are fixed so identical results always produce identical
bytes: metric fractions print as percentages with 2 decimals, p-values
with 3, aggregate cells as "mean ± std". Timestamps appear only in the
run manifest, never in results or tables.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .stats import SummaryCI, TTestReport

CODE_VERSION = "0.1.0"


def fmt_pct(fraction: float) -> str:
    """Fraction -> percent with 2 decimals: 0.8812 -> '88.12'."""
    return f"{fraction * 100.0:.2f}"


def fmt_mean_std_pct(mean: float, std: float) -> str:
    return f"{fmt_pct(mean)} ± {fmt_pct(std)}"


def fmt_p(p: float) -> str:
    return f"{p:.3f}"


def sanitize(value):
    """JSON-safe copy: non-finite floats become None, tuples become lists."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize(v) for v in value]
    return value


def json_bytes(record) -> bytes:
    return (json.dumps(sanitize(record), indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_json(path, record) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(json_bytes(record))
    return path


def csv_bytes(header: list[str], rows: list[list]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def write_csv(path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(csv_bytes(header, rows))
    return path


# ---------------------------------------------------------------------------
# table builders; each returns (header, rows) ready for write_csv

_METRIC_KEYS = ("accuracy", "precision", "recall", "f1")


def weights_table(cases: list[dict]) -> tuple[list[str], list[list]]:
    """One row per multiplier case; weight columns to 2 decimals."""
    header = ["case", "abnormal_multiplier", "normal_multiplier",
              "abnormal_weight", "normal_weight"]
    rows = []
    for case in cases:
        rows.append([
            case["name"],
            f"{case['multipliers'][0]:g}",
            f"{case['multipliers'][1]:g}",
            f"{case['weights']['1']:.2f}",
            f"{case['weights']['0']:.2f}",
        ])
    return header, rows


def grid_table(rows: list[dict]) -> tuple[list[str], list[list]]:
    header = ["batch_size", "learning_rate", "epochs",
              "accuracy_pct", "precision_pct", "recall_pct", "f1_pct",
              "aborted_folds", "failed"]
    out = []
    for row in rows:
        m = row["metrics"]
        out.append([
            row["batch_size"],
            f"{row['learning_rate']:g}",
            row["epochs"],
            fmt_pct(m["accuracy"]) if m else "",
            fmt_pct(m["precision"]) if m else "",
            fmt_pct(m["recall"]) if m else "",
            fmt_pct(m["f1"]) if m else "",
            ";".join(str(f) for f in row["aborted_folds"]),
            str(row["failed"]).lower(),
        ])
    return header, out


def replication_table(case_name: str, report: dict) -> tuple[list[str], list[list]]:
    """Per-replication rows and a final 'mean ± std' aggregate row."""
    header = ["case", "rep", "accuracy_pct", "precision_pct", "recall_pct", "f1_pct"]
    rows = []
    for rep in report["replications"]:
        m = rep["metrics"]
        rows.append([
            case_name, rep["rep"],
            fmt_pct(m["accuracy"]) if m else "",
            fmt_pct(m["precision"]) if m else "",
            fmt_pct(m["recall"]) if m else "",
            fmt_pct(m["f1"]) if m else "",
        ])
    agg = report["aggregate"]
    if agg:
        rows.append([case_name, "aggregate"] + [
            fmt_mean_std_pct(agg[k]["mean"], agg[k]["std"]) for k in _METRIC_KEYS
        ])
    return header, rows


def summary_table(case_rows: list[dict]) -> tuple[list[str], list[list]]:
    """Per-case summary: CV mean ± std (over replications), the CI of the
    mean on both bases (replications vs pooled folds), and the optional
    resubstitution ("App") columns."""
    header = ["case",
              "cv_accuracy_pct", "cv_f1_pct",
              "accuracy_ci95_over_reps", "accuracy_ci95_over_folds",
              "app_accuracy_pct", "app_f1_pct"]
    rows = []
    for case in case_rows:
        agg = case["aggregate"]
        def ci_cell(ci: dict | None) -> str:
            if not ci:
                return ""
            return f"[{fmt_pct(ci['ci_low'])}, {fmt_pct(ci['ci_high'])}]"
        app = case.get("resubstitution_aggregate")
        rows.append([
            case["name"],
            fmt_mean_std_pct(agg["accuracy"]["mean"], agg["accuracy"]["std"]) if agg else "",
            fmt_mean_std_pct(agg["f1"]["mean"], agg["f1"]["std"]) if agg else "",
            ci_cell(case.get("accuracy_ci_over_reps")),
            ci_cell(case.get("accuracy_ci_over_folds")),
            fmt_mean_std_pct(app["accuracy"]["mean"], app["accuracy"]["std"]) if app else "",
            fmt_mean_std_pct(app["f1"]["mean"], app["f1"]["std"]) if app else "",
        ])
    return header, rows


def pairwise_csv(metric: str,
                 rows: list[tuple[str, str, TTestReport]]) -> tuple[list[str], list[list]]:
    header = ["comparison", f"mean_a_{metric}_pct", f"mean_b_{metric}_pct",
              "diff_pct", "ci95_low_pct", "ci95_high_pct",
              "t_stat", "df", "p_value", "significant"]
    out = []
    for name_a, name_b, r in rows:
        out.append([
            f"{name_a} vs {name_b}",
            fmt_pct(r.mean_a), fmt_pct(r.mean_b), fmt_pct(r.diff),
            fmt_pct(r.ci_low), fmt_pct(r.ci_high),
            f"{r.t_stat:.3f}" if math.isfinite(r.t_stat) else "inf",
            f"{r.df:.2f}",
            fmt_p(r.p_value),
            str(r.significant).lower(),
        ])
    return header, out


def augment_table(case_rows: list[dict]) -> tuple[list[str], list[list]]:
    header = ["case", "accuracy_pct", "precision_pct", "recall_pct", "f1_pct",
              "aborted_folds"]
    rows = []
    for case in case_rows:
        m = case["metrics"]
        rows.append([
            case["name"],
            fmt_pct(m["accuracy"]) if m else "",
            fmt_pct(m["precision"]) if m else "",
            fmt_pct(m["recall"]) if m else "",
            fmt_pct(m["f1"]) if m else "",
            ";".join(str(f) for f in case["aborted_folds"]),
        ])
    return header, rows


def cam_table(records: list[dict]) -> tuple[list[str], list[list]]:
    header = ["sample", "target_class", "region", "focus_score"]
    rows = []
    for rec in records:
        for region, score in sorted(rec.get("focus_scores", {}).items()):
            rows.append([rec["sample"], rec["target_class"], region, f"{score:.4f}"])
    return header, rows


def ci_to_dict(ci: SummaryCI) -> dict:
    return {"mean": ci.mean, "std": ci.std, "n": ci.n,
            "ci_low": ci.ci_low, "ci_high": ci.ci_high}


def ttest_to_dict(report: TTestReport) -> dict:
    return {
        "mean_a": report.mean_a, "mean_b": report.mean_b, "diff": report.diff,
        "ci_low": report.ci_low, "ci_high": report.ci_high,
        "t_stat": report.t_stat, "df": report.df, "p_value": report.p_value,
        "significant": report.significant, "degenerate": report.degenerate,
    }


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    """Audit record of one CLI invocation. The only place timestamps
    live, so results and tables stay byte-identical across reruns."""

    command: str
    config_hash: str
    master_seed: int
    started_at: str
    finished_at: str = ""
    code_version: str = CODE_VERSION
    derived_seeds: dict[str, int] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def register(self, out_dir: Path, path: Path) -> None:
        rel = str(path.relative_to(out_dir))
        if rel in self.outputs:
            raise ValueError(f"output {rel} registered twice")
        self.outputs.append(rel)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "master_seed": self.master_seed,
            "derived_seeds": dict(sorted(self.derived_seeds.items())),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outputs": sorted(self.outputs),
        }
