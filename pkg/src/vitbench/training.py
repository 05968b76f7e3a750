"""Class-weighted training of the mini ViT: loss, AdamW, schedules,
fold runs, the hyperparameter grid, replications, and resubstitution.

A run is fully determined by its TrainConfig seed: initialization,
shuffling, augmentation, and dropout all draw from seeds derived per
(stage, fold, epoch, sample), so re-running any cell of the grid
reproduces it bitwise without re-running the rest.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import (
    AugmentPolicy,
    DatasetManifest,
    FoldPlan,
    augment_sample,
    decode_and_resize,
    normalize_image,
)
from .errors import (
    ConfigError,
    ContractError,
    InvalidCountsError,
    NumericError,
    StratificationError,
)
from .seeding import derive_seed
from .stats import MetricSet, confusion, metrics
from .vit import VitConfig, VitParams, init_params, save_params, vit_forward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ClassWeights:
    """Loss weights per label: base N/(C*N_c) scaled by the configured
    (abnormal, normal) multipliers."""

    weights: dict[int, float]
    multipliers: tuple[float, float]

    def __getitem__(self, label: int) -> float:
        return self.weights[label]


def class_weights(counts: dict[int, int],
                  multipliers: tuple[float, float] = (1.0, 1.0)) -> ClassWeights:
    """W_c = N/(C*N_c) times the class's multiplier.

    ``multipliers`` is ordered (abnormal, normal), matching the result
    tables. With balanced counts and unit multipliers every weight is 1.
    """
    if not counts:
        raise InvalidCountsError("empty class counts")
    for label, n in counts.items():
        if label not in (0, 1):
            raise InvalidCountsError(f"unexpected label {label!r} in counts")
        if n <= 0:
            raise InvalidCountsError(f"class {label} has non-positive count {n}")
    mult_abnormal, mult_normal = float(multipliers[0]), float(multipliers[1])
    if mult_abnormal <= 0 or mult_normal <= 0:
        raise InvalidCountsError(f"multipliers must be positive, got {multipliers}")
    total = sum(counts.values())
    c = len(counts)
    weights = {}
    for label, n in counts.items():
        base = total / (c * n)
        weights[label] = base * (mult_abnormal if label == 1 else mult_normal)
    return ClassWeights(weights=weights, multipliers=(mult_abnormal, mult_normal))


def weighted_ce_loss(logits: Tensor, labels: Sequence[int],
                     weights: ClassWeights | dict[int, float],
                     smoothing: float = 0.0) -> Tensor:
    """Mean over the batch of w_{y_i} * CE(target_i, softmax(logits_i)),
    with label-smoothed targets (1-eps, eps) on (true, other) class.

    Built on log-softmax so perfectly confident logits cannot produce
    log(0); differentiable through the tape.
    """
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ContractError(f"expected [B, 2] logits, got {logits.shape}")
    if not 0.0 <= smoothing < 0.5:
        raise ContractError(f"smoothing must be in [0, 0.5), got {smoothing}")
    y = np.asarray(labels)
    if y.shape != (logits.shape[0],):
        raise ContractError(f"labels shape {y.shape} does not match batch {logits.shape[0]}")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    b = logits.shape[0]
    target = np.full((b, 2), smoothing)
    target[np.arange(b), y] = 1.0 - smoothing
    w = np.array([weights[int(label)] for label in y])
    log_probs = ad.log_softmax_lastdim(logits)
    # loss = -(1/B) sum_i w_i sum_c target_ic log p_ic, folded into one matrix
    coeff = Tensor(target * w[:, None])
    return ad.scale(ad.tsum(ad.mul(log_probs, coeff)), -1.0 / b)


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamWState:
    """First/second moment buffers keyed by parameter name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: VitParams) -> "AdamWState":
        return cls(m={name: np.zeros_like(t.data) for name, t in params.named_tensors()},
                   v={name: np.zeros_like(t.data) for name, t in params.named_tensors()})


def adamw_step(params: VitParams, grads: dict[str, np.ndarray], state: AdamWState,
               t: int, lr: float, weight_decay: float) -> None:
    """One AdamW update in place: decoupled decay theta *= (1 - lr*wd),
    then the bias-corrected adaptive step with beta1=0.9, beta2=0.999,
    eps=1e-8. Zero gradients leave only the decay, by construction."""
    if t < 1:
        raise ContractError(f"step index starts at 1, got {t}")
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.named_tensors():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for parameter {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
        if weight_decay != 0.0:
            p.data *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``warmup_steps=None`` resolves to 10% of the run's total steps and
    ``min_lr=None`` to learning_rate/100; both defaults are declared
    here, not taken from any reference. ``weight_multipliers`` is
    (abnormal, normal). ``schedule`` is "cosine" or "step".
    """

    batch_size: int = 16
    learning_rate: float = 5e-4
    epochs: int = 10
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    warmup_steps: int | None = None
    min_lr: float | None = None
    early_stop_patience: int = 5
    seed: int = 0
    weight_multipliers: tuple[float, float] = (1.0, 1.0)
    schedule: str = "cosine"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError("label_smoothing must be in [0, 0.5)")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        if self.min_lr is not None and self.min_lr < 0:
            raise ConfigError("min_lr must be non-negative")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a u64")
        if self.schedule not in ("cosine", "step"):
            raise ConfigError(f"schedule must be cosine or step, got {self.schedule!r}")
        if len(self.weight_multipliers) != 2 or min(self.weight_multipliers) <= 0:
            raise ConfigError("weight_multipliers must be two positive floats")


def lr_at_step(t: int, total_steps: int, config: TrainConfig) -> float:
    """Learning rate at global step t (0-based).

    Linear warmup to the peak over the warmup window, then either a
    half-cosine from peak to min_lr ending exactly at the last step, or
    step decay (x0.1 at 50% and 75% of the post-warmup span, floored at
    min_lr).
    """
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if not 0 <= t < total_steps:
        raise ContractError(f"step {t} outside [0, {total_steps})")
    peak = config.learning_rate
    warmup = config.warmup_steps if config.warmup_steps is not None \
        else int(round(0.1 * total_steps))
    if warmup >= total_steps:
        raise ContractError(f"warmup_steps {warmup} must be < total_steps {total_steps}")
    min_lr = config.min_lr if config.min_lr is not None else peak / 100.0
    if t < warmup:
        return peak * (t + 1) / warmup
    span = total_steps - 1 - warmup
    progress = (t - warmup) / span if span > 0 else 1.0
    if config.schedule == "cosine":
        return min_lr + (peak - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
    drops = (progress >= 0.5) + (progress >= 0.75)
    return max(peak * 0.1 ** drops, min_lr)


# ---------------------------------------------------------------------------
# fold training


@dataclass
class RunResult:
    """Outcome of training one fold (or the resubstitution run).

    ``metrics`` comes from the best-validation-loss checkpoint. Aborted
    runs (non-finite loss) carry a reason and no metrics instead of
    raising, so one divergent cell cannot sink a whole grid.
    """

    fold_id: int
    seed: int
    train_loss_history: list[float] = field(default_factory=list)
    val_loss_history: list[float] = field(default_factory=list)
    best_epoch: int = -1
    metrics: MetricSet | None = None
    checkpoint_path: str | None = None
    aborted: bool = False
    abort_reason: str | None = None
    best_params: VitParams | None = None  # in-memory; not serialized

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "seed": self.seed,
            "train_loss_history": self.train_loss_history,
            "val_loss_history": self.val_loss_history,
            "best_epoch": self.best_epoch,
            "metrics": self.metrics.as_dict() if self.metrics else None,
            "degenerate_metrics": list(self.metrics.degenerate) if self.metrics else [],
            "checkpoint_path": self.checkpoint_path,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
        }


def load_images(manifest: DatasetManifest, image_size: int) -> np.ndarray:
    """Decode and resize every manifest sample to one [N,3,S,S] array of
    raw [0,1] pixels (pre-normalization, pre-augmentation)."""
    out = np.empty((len(manifest.samples), 3, image_size, image_size))
    for i, sample in enumerate(manifest.samples):
        out[i] = decode_and_resize(sample.path, image_size)
    return out


def _forward_batches(images: np.ndarray, params: VitParams, config: VitConfig,
                     batch_size: int) -> np.ndarray:
    """Deterministic eval-mode logits for an [N,3,S,S] array."""
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        batch = Tensor(images[start:start + batch_size])
        chunks.append(vit_forward(batch, params, config, training=False).data)
    return np.concatenate(chunks, axis=0)


def _eval_loss_and_metrics(images: np.ndarray, labels: np.ndarray, params: VitParams,
                           vit_config: VitConfig, weights: ClassWeights,
                           config: TrainConfig) -> tuple[float, MetricSet]:
    logits = _forward_batches(images, params, vit_config, config.batch_size)
    loss = weighted_ce_loss(Tensor(logits), labels, weights, config.label_smoothing)
    preds = np.argmax(logits, axis=1)
    return loss.item(), metrics(confusion(labels, preds))


def train_one_run(
    manifest: DatasetManifest,
    fold_plan: FoldPlan | None,
    fold_id: int,
    config: TrainConfig,
    vit_config: VitConfig,
    augment_policy: AugmentPolicy | None = None,
    images: np.ndarray | None = None,
    checkpoint_dir: str | None = None,
) -> RunResult:
    """Train on the fold's training split, early-stopping on its
    validation split, and score the best checkpoint.

    ``fold_plan=None`` trains and evaluates on the full manifest (the
    resubstitution protocol); otherwise ``fold_id`` picks the held-out
    fold. ``images`` may carry pre-decoded [N,3,S,S] raw pixels to skip
    disk I/O; augmentation applies to training batches only, so
    validation inputs are bitwise-stable across epochs.
    """
    if fold_plan is None:
        train_idx = list(range(len(manifest.samples)))
        val_idx = train_idx
    else:
        train_idx = fold_plan.train_indices(fold_id)
        val_idx = fold_plan.val_indices(fold_id)
    if not train_idx or not val_idx:
        raise ContractError(f"fold {fold_id} has an empty split")

    labels_all = manifest.labels()
    train_labels = labels_all[train_idx]
    counts = {0: int(np.sum(train_labels == 0)), 1: int(np.sum(train_labels == 1))}
    if min(counts.values()) == 0:
        raise StratificationError(
            f"training split of fold {fold_id} contains a single class: {counts}"
        )
    weights = class_weights(counts, config.weight_multipliers)
    policy = augment_policy if augment_policy is not None else AugmentPolicy()

    if images is None:
        images = load_images(manifest, vit_config.image_size)
    if images.shape != (len(manifest.samples), 3, vit_config.image_size, vit_config.image_size):
        raise ContractError(f"preloaded image array has shape {images.shape}")
    val_images = normalize_batch(images[val_idx])
    val_labels = labels_all[val_idx]

    params = init_params(vit_config, derive_seed(config.seed, [("fold", fold_id), ("init", 0)]))
    state = AdamWState.for_params(params)
    n_train = len(train_idx)
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    result = RunResult(fold_id=fold_id, seed=config.seed)
    best_loss = math.inf
    bad_epochs = 0
    step = 0
    train_idx = np.asarray(train_idx)

    for epoch in range(config.epochs):
        shuffle_rng = np.random.default_rng(
            derive_seed(config.seed, [("fold", fold_id), ("shuffle", epoch)]))
        order = train_idx[shuffle_rng.permutation(n_train)]
        epoch_losses = []
        for start in range(0, n_train, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            batch = np.stack([
                augment_sample(
                    images[i], policy,
                    np.random.default_rng(derive_seed(
                        config.seed,
                        [("fold", fold_id), ("augment", epoch), ("sample", int(i))])))
                for i in batch_idx
            ])
            batch = normalize_batch(batch)
            drop_rng = np.random.default_rng(
                derive_seed(config.seed, [("fold", fold_id), ("dropout", epoch),
                                          ("step", step)]))
            try:
                with Tape() as tape:
                    logits = vit_forward(Tensor(batch), params, vit_config,
                                         training=True, rng=drop_rng)
                    loss = weighted_ce_loss(logits, labels_all[batch_idx], weights,
                                            config.label_smoothing)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NumericError(f"non-finite training loss {loss_val}")
                params.zero_grads()
                ad.backward(loss, tape)
                grads = {name: t.grad for name, t in params.named_tensors()}
                step += 1
                adamw_step(params, grads, state, step,
                           lr_at_step(step - 1, total_steps, config), config.weight_decay)
            except NumericError as exc:
                result.aborted = True
                result.abort_reason = f"epoch {epoch}, step {step}: {exc}"
                return result
            epoch_losses.append(loss_val)

        result.train_loss_history.append(float(np.mean(epoch_losses)))
        val_loss, _ = _eval_loss_and_metrics(val_images, val_labels, params,
                                             vit_config, weights, config)
        result.val_loss_history.append(val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            result.best_epoch = epoch
            result.best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.early_stop_patience:
                break

    _, result.metrics = _eval_loss_and_metrics(val_images, val_labels, result.best_params,
                                               vit_config, weights, config)
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"fold{fold_id}_seed{config.seed}.vitw"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_params(path, result.best_params, vit_config)
        result.checkpoint_path = str(path)
    return result


def normalize_batch(images: np.ndarray) -> np.ndarray:
    """Vectorized per-channel standardization of [N,3,H,W]."""
    return np.stack([normalize_image(img) for img in images])


def resubstitution_eval(
    manifest: DatasetManifest,
    config: TrainConfig,
    vit_config: VitConfig,
    augment_policy: AugmentPolicy | None = None,
    images: np.ndarray | None = None,
    checkpoint_dir: str | None = None,
) -> RunResult:
    """Train on all samples and evaluate on the same samples (the
    optimistic "App" diagnostic, as opposed to the CV rows). Early
    stopping monitors the un-augmented full-set loss."""
    return train_one_run(manifest, None, 0, config, vit_config,
                         augment_policy=augment_policy, images=images,
                         checkpoint_dir=checkpoint_dir)


# ---------------------------------------------------------------------------
# grid and replications

RunFn = Callable[[TrainConfig, int], RunResult]


def _default_run_fn(manifest, fold_plan, vit_config, augment_policy, images,
                    checkpoint_dir) -> RunFn:
    def run(config: TrainConfig, fold_id: int) -> RunResult:
        return train_one_run(manifest, fold_plan, fold_id, config, vit_config,
                             augment_policy=augment_policy, images=images,
                             checkpoint_dir=checkpoint_dir)
    return run


def _map_ordered(fn, tasks: list[tuple], workers: int) -> list:
    """Run tasks (possibly concurrently) but return results in task order."""
    if workers <= 1:
        return [fn(*t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]


def _fold_average(results: list[RunResult]) -> tuple[dict[str, float] | None, list[int]]:
    """Mean metric over non-aborted folds; aborted fold ids reported."""
    aborted = [r.fold_id for r in results if r.aborted]
    usable = [r for r in results if not r.aborted]
    if not usable:
        return None, aborted
    keys = usable[0].metrics.as_dict().keys()
    means = {k: float(np.mean([r.metrics.as_dict()[k] for r in usable])) for k in keys}
    return means, aborted


def run_grid(
    manifest: DatasetManifest | None,
    fold_plan: FoldPlan,
    grid: dict[str, Sequence],
    base_config: TrainConfig,
    vit_config: VitConfig | None = None,
    augment_policy: AugmentPolicy | None = None,
    images: np.ndarray | None = None,
    checkpoint_dir: str | None = None,
    run_fn: RunFn | None = None,
    workers: int = 1,
) -> list[dict]:
    """Cartesian hyperparameter sweep: every (batch size, learning rate,
    epochs) combination trains all k folds.

    Rows come back sorted lexicographically by (batch, lr, epochs)
    regardless of execution order; divergent folds are flagged per row
    and excluded from its fold-averaged metrics. ``run_fn`` overrides
    the per-(config, fold) executor, which lets structural tests inject
    synthetic results without training.
    """
    k = fold_plan.k
    if run_fn is None:
        run_fn = _default_run_fn(manifest, fold_plan, vit_config, augment_policy,
                                 images, checkpoint_dir)
    for key in ("batch_sizes", "learning_rates", "epoch_counts"):
        if not grid.get(key):
            raise ContractError(f"grid axis {key} must be non-empty")
    combos = [(b, lr, e)
              for b in sorted(grid["batch_sizes"])
              for lr in sorted(grid["learning_rates"])
              for e in sorted(grid["epoch_counts"])]

    tasks = []
    for ci, (b, lr, e) in enumerate(combos):
        seed = derive_seed(base_config.seed, [("grid", ci)])
        cfg = replace(base_config, batch_size=int(b), learning_rate=float(lr),
                      epochs=int(e), seed=seed)
        for fold in range(k):
            tasks.append((cfg, fold))
    results = _map_ordered(run_fn, tasks, workers)

    rows = []
    for ci, (b, lr, e) in enumerate(combos):
        fold_results = results[ci * k:(ci + 1) * k]
        means, aborted = _fold_average(fold_results)
        rows.append({
            "batch_size": int(b),
            "learning_rate": float(lr),
            "epochs": int(e),
            "seed": fold_results[0].seed,
            "metrics": means,
            "aborted_folds": aborted,
            "failed": means is None,
            "per_fold": [r.to_dict() for r in fold_results],
        })
    return rows


def run_replications(
    manifest: DatasetManifest | None,
    fold_plan: FoldPlan,
    config: TrainConfig,
    n_reps: int,
    master_seed: int,
    vit_config: VitConfig | None = None,
    augment_policy: AugmentPolicy | None = None,
    images: np.ndarray | None = None,
    checkpoint_dir: str | None = None,
    run_fn: RunFn | None = None,
    workers: int = 1,
) -> dict:
    """n_reps independent CV runs, each re-seeded from the master seed.

    Returns per-replication fold-averaged metrics plus the aggregate
    mean and sample standard deviation (n-1) per metric; divergent
    replications are flagged and excluded from the aggregate. ``run_fn``
    overrides the executor as in run_grid.
    """
    if n_reps < 2:
        raise ContractError(f"need n_reps >= 2, got {n_reps}")
    k = fold_plan.k
    if run_fn is None:
        run_fn = _default_run_fn(manifest, fold_plan, vit_config, augment_policy,
                                 images, checkpoint_dir)
    tasks = []
    rep_seeds = [derive_seed(master_seed, [("rep", r)]) for r in range(n_reps)]
    for seed in rep_seeds:
        cfg = replace(config, seed=seed)
        for fold in range(k):
            tasks.append((cfg, fold))
    results = _map_ordered(run_fn, tasks, workers)

    replications = []
    for r in range(n_reps):
        fold_results = results[r * k:(r + 1) * k]
        means, aborted = _fold_average(fold_results)
        replications.append({
            "rep": r,
            "seed": rep_seeds[r],
            "metrics": means,
            "aborted_folds": aborted,
            "failed": means is None,
            "per_fold": [res.to_dict() for res in fold_results],
        })
    usable = [rep for rep in replications if not rep["failed"]]
    aggregate = {}
    if usable:
        for key in usable[0]["metrics"]:
            values = np.array([rep["metrics"][key] for rep in usable])
            aggregate[key] = {
                "mean": float(values.mean()),
                "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
                "n": int(values.size),
            }
    return {"replications": replications, "aggregate": aggregate}
