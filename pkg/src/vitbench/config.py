"""Experiment configuration: strict JSON schema in, canonical dict out.

Parsing is hand-rolled so every violation reports the dotted path of the
offending field (``train.grid.batch_sizes[1]``) and unknown keys are
rejected instead of ignored; a config that parses today will mean the
same thing after a round-trip through dump_config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .data import AugmentPolicy
from .errors import ConfigError
from .training import TrainConfig
from .vit import VitConfig

# Table-style defaults: the grid axes, replication count, and multiplier
# cases mirror the experiment design the tables follow.
DEFAULT_GRID = {
    "batch_sizes": [16, 32, 64],
    "learning_rates": [0.0001, 0.0005, 0.001],
    "epoch_counts": [5, 10, 15],
}
DEFAULT_WEIGHT_CASES = [
    ("case1", (1.0, 1.0)),
    ("case2", (0.8, 0.8)),
    ("case3", (1.2, 1.2)),
    ("case4", (0.7, 1.3)),
    ("case5", (1.3, 0.7)),
]


@dataclass(frozen=True)
class DatasetSpec:
    root: str | None
    class_map: dict[str, int]
    group_regex: str | None
    image_size: int
    expected_fractions: dict[str, float] | None


@dataclass(frozen=True)
class FoldSpec:
    k: int
    seed: int


@dataclass(frozen=True)
class AugmentCase:
    name: str
    policy: AugmentPolicy


@dataclass(frozen=True)
class AugmentSpec:
    policy: AugmentPolicy
    cases: tuple[AugmentCase, ...]


@dataclass(frozen=True)
class WeightCase:
    name: str
    multipliers: tuple[float, float]


@dataclass(frozen=True)
class ReplicateCase:
    name: str
    train: TrainConfig
    augment: AugmentPolicy


@dataclass(frozen=True)
class TrainSpec:
    config: TrainConfig
    grid: dict[str, list]
    n_replications: int
    weight_cases: tuple[WeightCase, ...]
    replicate_cases: tuple[ReplicateCase, ...]
    resubstitution: bool


@dataclass(frozen=True)
class InterpretSpec:
    enabled: bool
    block_index: int
    alpha: float
    elementwise: bool
    smooth_sigma: float
    regions: dict[str, tuple[int, int, int, int]]
    max_images: int
    target_class: int | None
    checkpoint: str | None


@dataclass(frozen=True)
class OutputSpec:
    directory: str
    formats: tuple[str, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    folds: FoldSpec
    augmentation: AugmentSpec
    train: TrainSpec
    model: VitConfig
    interpret: InterpretSpec
    output: OutputSpec


# ---------------------------------------------------------------------------
# typed extraction with dotted paths


def _fail(path: str, message: str):
    raise ConfigError(message, field_path=path)


def _as_object(value, path: str) -> dict:
    if not isinstance(value, dict):
        _fail(path, f"expected an object, got {type(value).__name__}")
    return value


class _Section:
    """One config object: typed reads, then a leftover-key check."""

    def __init__(self, raw: dict, path: str):
        self.raw = dict(raw)
        self.path = path

    def _key_path(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def _take(self, key: str, default):
        if key in self.raw:
            return self.raw.pop(key), True
        return default, False

    def obj(self, key: str) -> "_Section":
        value, present = self._take(key, {})
        if not present:
            return _Section({}, self._key_path(key))
        return _Section(_as_object(value, self._key_path(key)), self._key_path(key))

    def str_(self, key: str, default=None, required: bool = False):
        value, present = self._take(key, default)
        if required and not present:
            _fail(self._key_path(key), "required field is missing")
        if value is not None and not isinstance(value, str):
            _fail(self._key_path(key), f"expected a string, got {type(value).__name__}")
        return value

    def int_(self, key: str, default=None, required: bool = False):
        value, present = self._take(key, default)
        if required and not present:
            _fail(self._key_path(key), "required field is missing")
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            _fail(self._key_path(key), f"expected an integer, got {value!r}")
        return value

    def float_(self, key: str, default=None):
        value, _ = self._take(key, default)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(self._key_path(key), f"expected a number, got {value!r}")
        return float(value)

    def bool_(self, key: str, default: bool) -> bool:
        value, _ = self._take(key, default)
        if not isinstance(value, bool):
            _fail(self._key_path(key), f"expected true/false, got {value!r}")
        return value

    def list_(self, key: str, default=None):
        value, present = self._take(key, default)
        if not present:
            return default
        if not isinstance(value, list):
            _fail(self._key_path(key), f"expected a list, got {type(value).__name__}")
        return value

    def dict_(self, key: str, default=None):
        value, present = self._take(key, default)
        if not present:
            return default
        return _as_object(value, self._key_path(key))

    def finish(self) -> None:
        if self.raw:
            key = sorted(self.raw)[0]
            _fail(self._key_path(key), "unknown key")


def _number_list(values, path: str) -> list[float]:
    out = []
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            _fail(f"{path}[{i}]", f"expected a number, got {v!r}")
        out.append(float(v))
    return out


def _int_list(values, path: str) -> list[int]:
    out = []
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, int):
            _fail(f"{path}[{i}]", f"expected an integer, got {v!r}")
        out.append(v)
    return out


# ---------------------------------------------------------------------------
# section parsers


def _parse_dataset(section: _Section) -> DatasetSpec:
    root = section.str_("root")
    raw_map = section.dict_("class_map", {})
    class_map = {}
    for raw_label, label in raw_map.items():
        if isinstance(label, bool) or not isinstance(label, int) or label not in (0, 1):
            _fail(f"{section.path}.class_map.{raw_label}", f"label must be 0 or 1, got {label!r}")
        class_map[raw_label] = label
    group_regex = section.str_("group_regex")
    image_size = section.int_("image_size", 32)
    if image_size < 1:
        _fail(f"{section.path}.image_size", "must be positive")
    expected = section.dict_("expected_fractions")
    if expected is not None:
        parsed = {}
        for name, frac in expected.items():
            if isinstance(frac, bool) or not isinstance(frac, (int, float)):
                _fail(f"{section.path}.expected_fractions.{name}", "expected a number")
            parsed[name] = float(frac)
        expected = parsed
    section.finish()
    return DatasetSpec(root=root, class_map=class_map, group_regex=group_regex,
                       image_size=image_size, expected_fractions=expected)


def _parse_folds(section: _Section) -> FoldSpec:
    k = section.int_("k", 5)
    seed = section.int_("seed", 0)
    if k < 2:
        _fail(f"{section.path}.k", "k must be >= 2")
    if not 0 <= seed < 2 ** 64:
        _fail(f"{section.path}.seed", "seed must be a u64")
    section.finish()
    return FoldSpec(k=k, seed=seed)


_POLICY_FIELDS = tuple(AugmentPolicy.__dataclass_fields__)


def _parse_policy(section: _Section, base: AugmentPolicy) -> AugmentPolicy:
    overrides = {}
    for name in _POLICY_FIELDS:
        if name in section.raw:
            value = section.float_(name)
            overrides[name] = value
    section.finish()
    try:
        return replace(base, **overrides)
    except ConfigError as exc:
        _fail(section.path, str(exc))


def _parse_augmentation(section: _Section) -> AugmentSpec:
    policy = _parse_policy(section.obj("policy"), AugmentPolicy())
    cases = []
    raw_cases = section.list_("cases", [])
    for i, raw_case in enumerate(raw_cases or []):
        case = _Section(_as_object(raw_case, f"{section.path}.cases[{i}]"),
                        f"{section.path}.cases[{i}]")
        name = case.str_("name", required=True)
        case_policy = _parse_policy(case.obj("policy"), policy)
        case.finish()
        cases.append(AugmentCase(name=name, policy=case_policy))
    if not cases:
        cases = [AugmentCase("none", AugmentPolicy.disabled()),
                 AugmentCase("default", policy)]
    section.finish()
    return AugmentSpec(policy=policy, cases=tuple(cases))


def _parse_train_config(section: _Section, base: TrainConfig) -> TrainConfig:
    overrides = {}
    if "batch_size" in section.raw:
        overrides["batch_size"] = section.int_("batch_size")
    if "learning_rate" in section.raw:
        overrides["learning_rate"] = section.float_("learning_rate")
    if "epochs" in section.raw:
        overrides["epochs"] = section.int_("epochs")
    if "weight_decay" in section.raw:
        overrides["weight_decay"] = section.float_("weight_decay")
    if "label_smoothing" in section.raw:
        overrides["label_smoothing"] = section.float_("label_smoothing")
    if "warmup_steps" in section.raw:
        overrides["warmup_steps"] = section.int_("warmup_steps")
    if "min_lr" in section.raw:
        overrides["min_lr"] = section.float_("min_lr")
    if "early_stop_patience" in section.raw:
        overrides["early_stop_patience"] = section.int_("early_stop_patience")
    if "seed" in section.raw:
        overrides["seed"] = section.int_("seed")
    if "schedule" in section.raw:
        overrides["schedule"] = section.str_("schedule")
    if "weight_multipliers" in section.raw:
        pair = _number_list(section.list_("weight_multipliers"),
                            f"{section.path}.weight_multipliers")
        if len(pair) != 2:
            _fail(f"{section.path}.weight_multipliers", "expected [abnormal, normal]")
        overrides["weight_multipliers"] = (pair[0], pair[1])
    try:
        return replace(base, **overrides)
    except ConfigError as exc:
        _fail(section.path, str(exc))


def _parse_train(section: _Section, base_policy: AugmentPolicy) -> TrainSpec:
    base_train = _parse_train_config(section, TrainConfig())

    grid_section = section.obj("grid")
    grid = {
        "batch_sizes": _int_list(
            grid_section.list_("batch_sizes", DEFAULT_GRID["batch_sizes"]),
            f"{grid_section.path}.batch_sizes"),
        "learning_rates": _number_list(
            grid_section.list_("learning_rates", DEFAULT_GRID["learning_rates"]),
            f"{grid_section.path}.learning_rates"),
        "epoch_counts": _int_list(
            grid_section.list_("epoch_counts", DEFAULT_GRID["epoch_counts"]),
            f"{grid_section.path}.epoch_counts"),
    }
    grid_section.finish()

    n_replications = section.int_("n_replications", 10)
    if n_replications < 2:
        _fail(f"{section.path}.n_replications", "need at least 2 replications")
    resubstitution = section.bool_("resubstitution", True)

    weight_cases = []
    raw_weight_cases = section.list_("weight_cases")
    if raw_weight_cases is None:
        weight_cases = [WeightCase(name, mult) for name, mult in DEFAULT_WEIGHT_CASES]
    else:
        for i, raw_case in enumerate(raw_weight_cases):
            case = _Section(_as_object(raw_case, f"{section.path}.weight_cases[{i}]"),
                            f"{section.path}.weight_cases[{i}]")
            name = case.str_("name", required=True)
            raw_pair = case.list_("multipliers")
            if raw_pair is None:
                _fail(f"{case.path}.multipliers", "required field is missing")
            pair = _number_list(raw_pair, f"{case.path}.multipliers")
            if len(pair) != 2:
                _fail(f"{case.path}.multipliers", "expected [abnormal, normal]")
            case.finish()
            weight_cases.append(WeightCase(name=name, multipliers=(pair[0], pair[1])))

    replicate_cases = []
    raw_replicate = section.list_("replicate_cases", [])
    for i, raw_case in enumerate(raw_replicate or []):
        case = _Section(_as_object(raw_case, f"{section.path}.replicate_cases[{i}]"),
                        f"{section.path}.replicate_cases[{i}]")
        name = case.str_("name", required=True)
        train_over = case.obj("train")
        cfg = _parse_train_config(train_over, base_train)
        train_over.finish()
        policy = _parse_policy(case.obj("augmentation"), base_policy)
        case.finish()
        replicate_cases.append(ReplicateCase(name=name, train=cfg, augment=policy))
    if not replicate_cases:
        replicate_cases = [ReplicateCase(name="base", train=base_train, augment=base_policy)]

    section.finish()
    return TrainSpec(config=base_train, grid=grid, n_replications=n_replications,
                     weight_cases=tuple(weight_cases),
                     replicate_cases=tuple(replicate_cases),
                     resubstitution=resubstitution)


def _parse_model(section: _Section, image_size: int) -> VitConfig:
    kwargs = {
        "image_size": section.int_("image_size", image_size),
        "patch_size": section.int_("patch_size", 8),
        "embed_dim": section.int_("embed_dim", 16),
        "depth": section.int_("depth", 2),
        "num_heads": section.int_("num_heads", 2),
        "mlp_ratio": section.float_("mlp_ratio", 2.0),
        "num_classes": section.int_("num_classes", 2),
        "dropout_rate": section.float_("dropout_rate", 0.0),
    }
    section.finish()
    try:
        return VitConfig(**kwargs)
    except ConfigError as exc:
        _fail(section.path or "model", str(exc))


def _parse_interpret(section: _Section, image_size: int) -> InterpretSpec:
    enabled = section.bool_("enabled", True)
    block_index = section.int_("block_index", -1)
    alpha = section.float_("alpha", 0.5)
    if not 0.0 <= alpha <= 1.0:
        _fail(f"{section.path}.alpha", "alpha must be in [0, 1]")
    elementwise = section.bool_("elementwise", False)
    smooth_sigma = section.float_("smooth_sigma", 0.0)
    if smooth_sigma < 0:
        _fail(f"{section.path}.smooth_sigma", "must be non-negative")
    max_images = section.int_("max_images", 4)
    if max_images < 1:
        _fail(f"{section.path}.max_images", "must be >= 1")
    target_class = section.int_("target_class")
    if target_class is not None and target_class not in (0, 1):
        _fail(f"{section.path}.target_class", "must be 0 or 1")
    checkpoint = section.str_("checkpoint")
    regions = {}
    raw_regions = section.dict_("regions", {})
    for name, rect in raw_regions.items():
        path = f"{section.path}.regions.{name}"
        if not isinstance(rect, list) or len(rect) != 4:
            _fail(path, "expected [y0, x0, y1, x1]")
        coords = _int_list(rect, path)
        y0, x0, y1, x1 = coords
        if not (0 <= y0 < y1 <= image_size and 0 <= x0 < x1 <= image_size):
            _fail(path, f"rectangle must fit inside {image_size}x{image_size}")
        regions[name] = (y0, x0, y1, x1)
    section.finish()
    return InterpretSpec(enabled=enabled, block_index=block_index, alpha=alpha,
                         elementwise=elementwise, smooth_sigma=smooth_sigma,
                         regions=regions, max_images=max_images,
                         target_class=target_class, checkpoint=checkpoint)


def _parse_output(section: _Section) -> OutputSpec:
    directory = section.str_("directory", "out")
    formats = section.list_("formats", ["csv", "json"])
    for i, fmt in enumerate(formats):
        if fmt not in ("csv", "json"):
            _fail(f"{section.path}.formats[{i}]", f"unknown format {fmt!r}")
    section.finish()
    return OutputSpec(directory=directory, formats=tuple(formats))


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw config dict into an ExperimentConfig.

    Violations raise ConfigError carrying the dotted field path; unknown
    keys anywhere are violations.
    """
    top = _Section(_as_object(raw, ""), "")
    dataset = _parse_dataset(top.obj("dataset"))
    folds = _parse_folds(top.obj("folds"))
    augmentation = _parse_augmentation(top.obj("augmentation"))
    train = _parse_train(top.obj("train"), augmentation.policy)
    model = _parse_model(top.obj("model"), dataset.image_size)
    interpret = _parse_interpret(top.obj("interpret"), model.image_size)
    output = _parse_output(top.obj("output"))
    top.finish()
    if model.image_size != dataset.image_size:
        _fail("model.image_size",
              f"model expects {model.image_size} but dataset decodes to {dataset.image_size}")
    return ExperimentConfig(dataset=dataset, folds=folds, augmentation=augmentation,
                            train=train, model=model, interpret=interpret, output=output)


def load_config(path) -> ExperimentConfig:
    """Parse a JSON config file; malformed JSON is a schema violation."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", field_path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", field_path=str(path)) from exc
    return parse_config(raw)


# ---------------------------------------------------------------------------
# canonical dump


def _policy_dict(policy: AugmentPolicy) -> dict:
    return {name: getattr(policy, name) for name in _POLICY_FIELDS}


def _train_config_dict(cfg: TrainConfig) -> dict:
    return {
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
        "weight_decay": cfg.weight_decay,
        "label_smoothing": cfg.label_smoothing,
        "warmup_steps": cfg.warmup_steps,
        "min_lr": cfg.min_lr,
        "early_stop_patience": cfg.early_stop_patience,
        "seed": cfg.seed,
        "weight_multipliers": list(cfg.weight_multipliers),
        "schedule": cfg.schedule,
    }


def dump_config(config: ExperimentConfig) -> dict:
    """Canonical dict form: every default materialized, so
    parse(dump(parse(x))) == parse(x)."""
    return {
        "dataset": {
            "root": config.dataset.root,
            "class_map": dict(sorted(config.dataset.class_map.items())),
            "group_regex": config.dataset.group_regex,
            "image_size": config.dataset.image_size,
            "expected_fractions": config.dataset.expected_fractions,
        },
        "folds": {"k": config.folds.k, "seed": config.folds.seed},
        "augmentation": {
            "policy": _policy_dict(config.augmentation.policy),
            "cases": [{"name": c.name, "policy": _policy_dict(c.policy)}
                      for c in config.augmentation.cases],
        },
        "train": {
            **_train_config_dict(config.train.config),
            "grid": {k: list(v) for k, v in config.train.grid.items()},
            "n_replications": config.train.n_replications,
            "resubstitution": config.train.resubstitution,
            "weight_cases": [{"name": c.name, "multipliers": list(c.multipliers)}
                             for c in config.train.weight_cases],
            "replicate_cases": [
                {"name": c.name, "train": _train_config_dict(c.train),
                 "augmentation": _policy_dict(c.augment)}
                for c in config.train.replicate_cases
            ],
        },
        "model": {
            "image_size": config.model.image_size,
            "patch_size": config.model.patch_size,
            "embed_dim": config.model.embed_dim,
            "depth": config.model.depth,
            "num_heads": config.model.num_heads,
            "mlp_ratio": config.model.mlp_ratio,
            "num_classes": config.model.num_classes,
            "dropout_rate": config.model.dropout_rate,
        },
        "interpret": {
            "enabled": config.interpret.enabled,
            "block_index": config.interpret.block_index,
            "alpha": config.interpret.alpha,
            "elementwise": config.interpret.elementwise,
            "smooth_sigma": config.interpret.smooth_sigma,
            "regions": {name: list(rect)
                        for name, rect in sorted(config.interpret.regions.items())},
            "max_images": config.interpret.max_images,
            "target_class": config.interpret.target_class,
            "checkpoint": config.interpret.checkpoint,
        },
        "output": {
            "directory": config.output.directory,
            "formats": list(config.output.formats),
        },
    }


def config_json_bytes(config: ExperimentConfig) -> bytes:
    """Stable serialized form, used both for dumping and hashing."""
    return (json.dumps(dump_config(config), indent=2, sort_keys=True) + "\n").encode("utf-8")
