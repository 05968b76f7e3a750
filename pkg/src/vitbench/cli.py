"""Command-line pipeline driver.

Six subcommands cover the pipeline stages: ``prepare`` (manifest + fold
plan), ``augment-eval`` (per-policy CV), ``weight-eval`` (class-weight
cases), ``grid`` (hyperparameter sweep), ``replicate`` (repeated CV +
pairwise tests), and ``cam`` (class-activation overlays). All outputs
except run_manifest.json are byte-deterministic in (config, seed).

Exit codes: 0 success, 2 config/schema violation (reported with the
dotted field path, nothing written), 1 runtime failure (reported with
the run id).
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_json_bytes, load_config
from .data import build_manifest, make_folds, summarize_counts
from .errors import ConfigError, VitbenchError
from .gradcam import (
    FocusScores,
    cam_sidecar,
    focus_score,
    grad_cam_map,
    rect_mask,
    render_overlay,
    upsample,
)
from .reports import (
    RunManifest,
    augment_table,
    cam_table,
    ci_to_dict,
    grid_table,
    pairwise_csv,
    replication_table,
    summary_table,
    ttest_to_dict,
    weights_table,
    write_csv,
    write_json,
)
from .seeding import derive_seed
from .stats import mean_ci, pairwise_table
from .training import (
    class_weights,
    load_images,
    normalize_batch,
    resubstitution_eval,
    run_grid,
    run_replications,
    train_one_run,
)
from .vit import load_params, vit_forward
from .autodiff import Tensor

COMMANDS = ("prepare", "augment-eval", "weight-eval", "grid", "replicate", "cam")


def _resolve_workers(cli_value: int | None) -> int:
    if cli_value is not None:
        value = cli_value
    else:
        env = os.environ.get("VITBENCH_WORKERS", "")
        try:
            value = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"VITBENCH_WORKERS must be an integer, got {env!r}",
                              field_path="VITBENCH_WORKERS")
    if value < 1:
        raise ConfigError(f"workers must be >= 1, got {value}", field_path="workers")
    return value


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class _Stage:
    """Shared context for one subcommand invocation."""

    def __init__(self, config: ExperimentConfig, out_dir: Path, workers: int,
                 command: str):
        self.config = config
        self.out_dir = out_dir
        self.workers = workers
        self.manifest = None
        self.fold_plan = None
        self.run_manifest = RunManifest(
            command=command,
            config_hash=hashlib.sha256(config_json_bytes(config)).hexdigest(),
            master_seed=config.train.config.seed,
            started_at=_now(),
        )

    def write_json(self, rel: str, record) -> None:
        path = write_json(self.out_dir / rel, record)
        self.run_manifest.register(self.out_dir, path)

    def write_csv(self, rel: str, header, rows) -> None:
        path = write_csv(self.out_dir / rel, header, rows)
        self.run_manifest.register(self.out_dir, path)

    def register(self, path: Path) -> None:
        self.run_manifest.register(self.out_dir, path)

    def load_dataset(self) -> None:
        ds = self.config.dataset
        if not ds.root:
            raise ConfigError("required field is missing", field_path="dataset.root")
        if not ds.class_map:
            raise ConfigError("required field is missing", field_path="dataset.class_map")
        self.manifest = build_manifest(ds.root, ds.class_map, ds.group_regex)
        self.fold_plan = make_folds(self.manifest, self.config.folds.k,
                                    self.config.folds.seed)
        self.run_manifest.derived_seeds["folds"] = self.config.folds.seed
        summary = summarize_counts(self.manifest, ds.expected_fractions)
        self.write_json("manifest.json", {**self.manifest.to_dict(), "summary": summary})
        per_fold = []
        labels = self.manifest.labels()
        for fold in range(self.fold_plan.k):
            idx = self.fold_plan.val_indices(fold)
            per_fold.append({
                "fold": fold,
                "size": len(idx),
                "normal": int(np.sum(labels[idx] == 0)),
                "abnormal": int(np.sum(labels[idx] == 1)),
            })
        self.write_json("folds.json", {**self.fold_plan.to_dict(), "per_fold": per_fold})

    def finish(self) -> None:
        self.run_manifest.finished_at = _now()
        write_json(self.out_dir / "run_manifest.json", self.run_manifest.to_dict())


# ---------------------------------------------------------------------------
# stage implementations


def _cmd_prepare(stage: _Stage) -> None:
    stage.load_dataset()


def _cmd_weight_eval(stage: _Stage) -> None:
    stage.load_dataset()
    cases = []
    for case in stage.config.train.weight_cases:
        weights = class_weights(stage.manifest.class_counts, case.multipliers)
        cases.append({
            "name": case.name,
            "multipliers": list(case.multipliers),
            "weights": {str(label): w for label, w in sorted(weights.weights.items())},
        })
    stage.write_json("results/weights.json", {"cases": cases})
    header, rows = weights_table(cases)
    stage.write_csv("tables/weights.csv", header, rows)


def _cmd_augment_eval(stage: _Stage) -> None:
    stage.load_dataset()
    images = load_images(stage.manifest, stage.config.model.image_size)
    master = stage.config.train.config.seed
    case_rows = []
    for ci, case in enumerate(stage.config.augmentation.cases):
        seed = derive_seed(master, [("augment-eval", ci)])
        stage.run_manifest.derived_seeds[f"augment-eval.{case.name}"] = seed
        cfg = replace(stage.config.train.config, seed=seed)
        results = [
            train_one_run(stage.manifest, stage.fold_plan, fold, cfg,
                          stage.config.model, augment_policy=case.policy,
                          images=images)
            for fold in range(stage.fold_plan.k)
        ]
        usable = [r for r in results if not r.aborted]
        means = None
        if usable:
            keys = usable[0].metrics.as_dict().keys()
            means = {k: float(np.mean([r.metrics.as_dict()[k] for r in usable]))
                     for k in keys}
        case_rows.append({
            "name": case.name,
            "seed": seed,
            "metrics": means,
            "aborted_folds": [r.fold_id for r in results if r.aborted],
            "per_fold": [r.to_dict() for r in results],
        })
    stage.write_json("results/augment_eval.json", {"cases": case_rows})
    header, rows = augment_table(case_rows)
    stage.write_csv("tables/augment_eval.csv", header, rows)


def _cmd_grid(stage: _Stage) -> None:
    stage.load_dataset()
    images = load_images(stage.manifest, stage.config.model.image_size)
    rows = run_grid(stage.manifest, stage.fold_plan, stage.config.train.grid,
                    stage.config.train.config, stage.config.model,
                    augment_policy=stage.config.augmentation.policy,
                    images=images, workers=stage.workers)
    for row in rows:
        key = f"grid.b{row['batch_size']}.lr{row['learning_rate']:g}.e{row['epochs']}"
        stage.run_manifest.derived_seeds[key] = row["seed"]
    stage.write_json("results/grid.json", {"rows": rows})
    header, table_rows = grid_table(rows)
    stage.write_csv("tables/grid.csv", header, table_rows)


def _cmd_replicate(stage: _Stage) -> None:
    stage.load_dataset()
    images = load_images(stage.manifest, stage.config.model.image_size)
    train_spec = stage.config.train
    master = train_spec.config.seed
    k = stage.fold_plan.k

    case_reports = []
    for ci, case in enumerate(train_spec.replicate_cases):
        case_master = derive_seed(master, [("replicate", ci)])
        stage.run_manifest.derived_seeds[f"replicate.{case.name}"] = case_master
        report = run_replications(
            stage.manifest, stage.fold_plan, case.train,
            train_spec.n_replications, case_master,
            vit_config=stage.config.model, augment_policy=case.augment,
            images=images, workers=stage.workers)

        usable = [rep for rep in report["replications"] if not rep["failed"]]
        rep_acc = [rep["metrics"]["accuracy"] for rep in usable]
        fold_acc = [
            fold["metrics"]["accuracy"]
            for rep in usable for fold in rep["per_fold"]
            if fold["metrics"] is not None
        ]
        case_report = {
            "name": case.name,
            "master_seed": case_master,
            **report,
            "accuracy_ci_over_reps": ci_to_dict(mean_ci(rep_acc)) if len(rep_acc) > 1 else None,
            "accuracy_ci_over_folds": ci_to_dict(mean_ci(fold_acc)) if len(fold_acc) > 1 else None,
        }

        if train_spec.resubstitution:
            app_results = []
            for r in range(train_spec.n_replications):
                cfg = replace(case.train,
                              seed=derive_seed(case_master, [("rep", r), ("app", 0)]))
                app_results.append(resubstitution_eval(
                    stage.manifest, cfg, stage.config.model,
                    augment_policy=case.augment, images=images))
            usable_app = [r for r in app_results if not r.aborted]
            app_aggregate = {}
            for key in ("accuracy", "precision", "recall", "f1"):
                values = np.array([r.metrics.as_dict()[key] for r in usable_app])
                if values.size:
                    app_aggregate[key] = {
                        "mean": float(values.mean()),
                        "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
                        "n": int(values.size),
                    }
            case_report["resubstitution_aggregate"] = app_aggregate or None
            case_report["resubstitution_runs"] = [r.to_dict() for r in app_results]
        case_reports.append(case_report)

    results_record = {"cases": case_reports}

    if len(case_reports) >= 2:
        vectors = []
        for case in case_reports:
            usable = [rep for rep in case["replications"] if not rep["failed"]]
            vectors.append((case["name"], {
                "accuracy": [rep["metrics"]["accuracy"] for rep in usable],
                "f1": [rep["metrics"]["f1"] for rep in usable],
            }))
        tables = pairwise_table(vectors)
        results_record["pairwise"] = {
            metric: [
                {"a": a, "b": b, **ttest_to_dict(r)} for a, b, r in rows
            ]
            for metric, rows in tables.items()
        }
        for metric, rows in tables.items():
            header, csv_rows = pairwise_csv(metric, rows)
            stage.write_csv(f"tables/pairwise_{metric}.csv", header, csv_rows)

    stage.write_json("results/replicate.json", results_record)

    rep_header = None
    all_rep_rows = []
    for case in case_reports:
        header, rows = replication_table(case["name"], case)
        rep_header = header
        all_rep_rows.extend(rows)
    stage.write_csv("tables/replications.csv", rep_header, all_rep_rows)
    header, rows = summary_table(case_reports)
    stage.write_csv("tables/summary.csv", header, rows)


def _cmd_cam(stage: _Stage) -> None:
    interpret = stage.config.interpret
    if not interpret.enabled:
        raise ConfigError("interpret.enabled is false; nothing to do",
                          field_path="interpret.enabled")
    stage.load_dataset()
    vit_config = stage.config.model
    images = load_images(stage.manifest, vit_config.image_size)

    if interpret.checkpoint:
        params, _ = load_params(interpret.checkpoint, vit_config)
    else:
        seed = derive_seed(stage.config.train.config.seed, [("cam-train", 0)])
        stage.run_manifest.derived_seeds["cam-train"] = seed
        cfg = replace(stage.config.train.config, seed=seed)
        result = train_one_run(stage.manifest, stage.fold_plan, 0, cfg, vit_config,
                               augment_policy=stage.config.augmentation.policy,
                               images=images)
        if result.aborted:
            raise VitbenchError(f"cam training run aborted: {result.abort_reason}")
        params = result.best_params

    size = vit_config.image_size
    regions = interpret.regions or {"full": (0, 0, size, size)}
    masks = [rect_mask(name, rect, size) for name, rect in sorted(regions.items())]

    val_idx = stage.fold_plan.val_indices(0)[:interpret.max_images]
    records = []
    for i in val_idx:
        raw = images[i]
        normalized = normalize_batch(raw[None])[0]
        if interpret.target_class is not None:
            target = interpret.target_class
        else:
            logits = vit_forward(Tensor(normalized[None]), params, vit_config)
            target = int(np.argmax(logits.data[0]))
        heatmap = grad_cam_map(params, vit_config, normalized, target,
                               block_index=interpret.block_index,
                               elementwise=interpret.elementwise,
                               smooth_sigma=interpret.smooth_sigma)
        heatmap.upsampled = upsample(heatmap.grid, size)
        scores = {m.name: focus_score(heatmap.upsampled, m) for m in masks}

        stem = f"{i:04d}_{Path(stage.manifest.samples[i].path).stem}_cam{target}"
        png_path = stage.out_dir / "cams" / f"{stem}.png"
        png_path.parent.mkdir(parents=True, exist_ok=True)
        render_overlay(raw, heatmap.upsampled, interpret.alpha, png_path)
        stage.register(png_path)

        record = cam_sidecar(stage.manifest.samples[i].path, target, heatmap,
                             FocusScores(target, scores))
        record["label"] = int(stage.manifest.samples[i].label)
        stage.write_json(f"cams/{stem}.json", record)
        records.append(record)

    stage.write_json("results/cams.json", {"records": records})
    header, rows = cam_table(records)
    stage.write_csv("tables/cams.csv", header, rows)


_STAGES = {
    "prepare": _cmd_prepare,
    "augment-eval": _cmd_augment_eval,
    "weight-eval": _cmd_weight_eval,
    "grid": _cmd_grid,
    "replicate": _cmd_replicate,
    "cam": _cmd_cam,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitbench",
        description="Deterministic mini-ViT screening experiments: folds, "
                    "grids, replications, statistics, and activation maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, help="master seed (overrides train.seed)")
        p.add_argument("--workers", type=int,
                       help="parallel fold/replication workers (or env VITBENCH_WORKERS)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("seed must be a u64", field_path="seed")
            config = replace(config, train=replace(
                config.train, config=replace(config.train.config, seed=args.seed)))
        if args.out:
            config = replace(config, output=replace(config.output, directory=args.out))
        workers = _resolve_workers(args.workers)
    except ConfigError as exc:
        where = f" at {exc.field_path}" if exc.field_path else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(config.output.directory)
    stage = _Stage(config, out_dir, workers, args.command)
    run_id = f"{args.command}-{stage.run_manifest.config_hash[:12]}"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _STAGES[args.command](stage)
        stage.finish()
    except ConfigError as exc:
        # config-shaped failures discovered mid-run still report the path
        where = f" at {exc.field_path}" if exc.field_path else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return 2
    except (VitbenchError, OSError) as exc:
        print(f"run {run_id} failed: {exc}", file=sys.stderr)
        return 1
    print(f"{run_id}: wrote {len(stage.run_manifest.outputs) + 1} files to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
