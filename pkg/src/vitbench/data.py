"""Dataset ingestion, preprocessing, fold planning, and augmentation.

A dataset is a directory tree with one subdirectory per raw class; the
class map collapses raw classes to the binary screening labels
(normal=0, abnormal=1). Decoding uses Pillow, but resizing, geometric
warps, and photometric jitter are implemented here so that every pixel
of a training batch is reproducible from the manifest and a seed.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import (
    ClassMapError,
    ConfigError,
    ContractError,
    DatasetError,
    DecodeError,
    EmptyDatasetError,
    ImageFormatError,
    StratificationError,
)

IMAGE_EXTENSIONS = (".png", ".bmp")
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
LABEL_NAMES = {0: "normal", 1: "abnormal"}


@dataclass(frozen=True)
class Sample:
    path: str
    raw_label: str
    label: int  # 0 normal, 1 abnormal
    group_id: str


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable audit record of what will be trained on.

    ``skipped`` lists every directory entry that was not ingested, with
    the reason; nothing is dropped silently.
    """

    samples: tuple[Sample, ...]
    class_counts: dict[int, int]
    class_map: dict[str, int]
    skipped: tuple[tuple[str, str], ...] = ()

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "samples": [
                {"path": s.path, "raw_label": s.raw_label,
                 "label": s.label, "group_id": s.group_id}
                for s in self.samples
            ],
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
            "class_map": dict(sorted(self.class_map.items())),
            "skipped": [{"path": p, "reason": r} for p, r in self.skipped],
        }


@dataclass(frozen=True)
class FoldPlan:
    """k-fold assignment: ``assignment[i]`` is sample i's validation fold."""

    k: int
    assignment: tuple[int, ...]

    def val_indices(self, fold: int) -> list[int]:
        self._check_fold(fold)
        return [i for i, f in enumerate(self.assignment) if f == fold]

    def train_indices(self, fold: int) -> list[int]:
        self._check_fold(fold)
        return [i for i, f in enumerate(self.assignment) if f != fold]

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ContractError(f"fold {fold} outside [0, {self.k})")

    def to_dict(self) -> dict:
        return {"k": self.k, "assignment": list(self.assignment)}


def build_manifest(root, class_map: dict[str, int], group_pattern: str | None = None) -> DatasetManifest:
    """Walk ``root`` (one subdirectory per raw class) into a manifest.

    Listing order is lexicographic, so the manifest is deterministic for
    a given tree. ``group_pattern``, when given, is a regex applied to
    each filename whose first capture group (or whole match) becomes the
    group id; without it every image is its own group.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    for raw, label in class_map.items():
        if label not in (0, 1):
            raise ClassMapError(f"class map must target labels 0/1, got {raw!r} -> {label!r}")
    pattern = re.compile(group_pattern) if group_pattern else None

    samples: list[Sample] = []
    skipped: list[tuple[str, str]] = []
    for entry in sorted(root.iterdir()):
        if not entry.is_dir():
            skipped.append((str(entry), "not inside a class directory"))
            continue
        raw_label = entry.name
        if raw_label not in class_map:
            raise ClassMapError(f"directory {raw_label!r} has no class-map entry")
        label = class_map[raw_label]
        for f in sorted(entry.iterdir()):
            if not f.is_file():
                skipped.append((str(f), "not a regular file"))
                continue
            if f.suffix.lower() not in IMAGE_EXTENSIONS:
                skipped.append((str(f), f"unsupported extension {f.suffix!r}"))
                continue
            if pattern is not None:
                m = pattern.search(f.name)
                if m is None:
                    raise DatasetError(
                        f"filename {f.name!r} does not match group pattern {group_pattern!r}"
                    )
                group_id = m.group(1) if pattern.groups else m.group(0)
            else:
                group_id = str(f.relative_to(root))
            samples.append(Sample(path=str(f), raw_label=raw_label,
                                  label=label, group_id=group_id))
    if not samples:
        raise EmptyDatasetError(f"no images found under {root}")
    counts = Counter(s.label for s in samples)
    return DatasetManifest(samples=tuple(samples), class_counts=dict(counts),
                           class_map=dict(class_map), skipped=tuple(skipped))


# ---------------------------------------------------------------------------
# decoding and resizing


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [C,H,W] with bilinear interpolation, half-pixel centers,
    clamp-at-edge sampling."""
    if img.ndim != 3:
        raise ContractError(f"bilinear_resize expects [C,H,W], got shape {img.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ContractError("target size must be positive")
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    rows0 = img[:, y0c, :]
    rows1 = img[:, y1c, :]
    top = rows0[:, :, x0c] * (1.0 - fx) + rows0[:, :, x1c] * fx
    bot = rows1[:, :, x0c] * (1.0 - fx) + rows1[:, :, x1c] * fx
    fy3 = fy[None, :, None]
    return top * (1.0 - fy3) + bot * fy3


def decode_image(path) -> np.ndarray:
    """Decode an 8-bit grayscale or RGB image to [3,H,W] floats in [0,1].

    Grayscale is replicated across channels; any other mode (palette,
    alpha, 16-bit) is rejected rather than silently converted.
    """
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
                arr = np.stack([arr, arr, arr], axis=0)
            elif mode == "RGB":
                arr = np.asarray(im, dtype=np.float64) / 255.0
                arr = arr.transpose(2, 0, 1)
            else:
                raise ImageFormatError(
                    f"{path}: unsupported image mode {mode!r}; need 8-bit L or RGB"
                )
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{path}: cannot decode image ({exc})") from exc
    return arr


def decode_and_resize(path, target_size: int) -> np.ndarray:
    """Decode then bilinear-resize to [3, target_size, target_size]."""
    return bilinear_resize(decode_image(path), target_size, target_size)


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Per-channel standardization with the ImageNet statistics
    mean [0.485, 0.456, 0.406], std [0.229, 0.224, 0.225]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"normalize_image expects [3,H,W], got {img.shape}")
    return (img - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]


def denormalize_image(img: np.ndarray) -> np.ndarray:
    """Exact affine inverse of normalize_image."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"denormalize_image expects [3,H,W], got {img.shape}")
    return img * IMAGENET_STD[:, None, None] + IMAGENET_MEAN[:, None, None]


# ---------------------------------------------------------------------------
# fold planning


def make_folds(manifest: DatasetManifest, k: int, seed: int) -> FoldPlan:
    """Greedy stratified assignment of whole groups to k folds.

    Groups are ordered by size descending (seeded shuffle breaking ties)
    and each is placed into the fold where it least increases the total
    squared deviation of per-fold class counts from the proportional
    targets N_c/k; ties go to the lowest fold id. With singleton groups
    this degenerates to per-class round-robin, so per-fold counts stay
    within one of each other.
    """
    if k < 2:
        raise ContractError(f"k must be >= 2, got {k}")
    if not manifest.samples:
        raise EmptyDatasetError("cannot plan folds for an empty manifest")

    labels = [s.label for s in manifest.samples]
    group_indices: dict[str, list[int]] = {}
    for idx, s in enumerate(manifest.samples):
        group_indices.setdefault(s.group_id, []).append(idx)

    classes = sorted(manifest.class_counts)
    for c in classes:
        n_groups = sum(1 for idxs in group_indices.values()
                       if any(labels[i] == c for i in idxs))
        if n_groups < k:
            raise StratificationError(
                f"class {c} spans only {n_groups} groups; cannot stratify into {k} folds"
            )

    rng = np.random.default_rng(seed)
    items = list(group_indices.items())
    shuffle_key = rng.permutation(len(items))
    ranked = sorted(range(len(items)),
                    key=lambda i: (-len(items[i][1]), shuffle_key[i]))

    targets = {c: manifest.class_counts[c] / k for c in classes}
    fold_counts = [{c: 0 for c in classes} for _ in range(k)]
    assignment = [-1] * len(manifest.samples)
    for gi in ranked:
        _, idxs = items[gi]
        add = Counter(labels[i] for i in idxs)
        best_fold = 0
        best_delta = None
        for f in range(k):
            delta = 0.0
            for c in classes:
                before = fold_counts[f][c] - targets[c]
                after = before + add.get(c, 0)
                delta += after * after - before * before
            if best_delta is None or delta < best_delta - 1e-12:
                best_fold, best_delta = f, delta
        for i in idxs:
            assignment[i] = best_fold
        for c in classes:
            fold_counts[best_fold][c] += add.get(c, 0)
    return FoldPlan(k=k, assignment=tuple(assignment))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    """Training-time augmentation knobs, all independently gated.

    Defaults are deliberately conservative for cell imagery: geometry
    stays within what slide preparation plausibly produces, photometric
    jitter within staining variation, and blur/noise are rare and mild.
    Setting every probability to 0 makes augment_sample the identity.
    """

    flip_p: float = 0.5
    rotation_p: float = 1.0
    rotation_deg: float = 15.0
    translate_p: float = 1.0
    translate_frac: float = 0.1
    scale_p: float = 1.0
    scale_low: float = 0.9
    scale_high: float = 1.1
    brightness_p: float = 1.0
    brightness: float = 0.2
    contrast_p: float = 1.0
    contrast: float = 0.2
    color_p: float = 1.0
    color: float = 0.05
    blur_p: float = 0.1
    blur_sigma_max: float = 1.0
    noise_p: float = 0.1
    noise_sigma: float = 0.01

    def __post_init__(self):
        for name in ("flip_p", "rotation_p", "translate_p", "scale_p",
                     "brightness_p", "contrast_p", "color_p", "blur_p", "noise_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("rotation_deg", "translate_frac", "brightness", "contrast",
                     "color", "blur_sigma_max", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 < self.scale_low <= self.scale_high:
            raise ConfigError("need 0 < scale_low <= scale_high")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(flip_p=0.0, rotation_p=0.0, translate_p=0.0, scale_p=0.0,
                   brightness_p=0.0, contrast_p=0.0, color_p=0.0,
                   blur_p=0.0, noise_p=0.0)


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Reflect out-of-range indices into [0, n) without repeating the
    border pixel."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _affine_sample(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Bilinear resampling of [C,H,W] under src = matrix @ dst + offset,
    with mirror padding outside the frame."""
    c, h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sy = matrix[0, 0] * yy + matrix[0, 1] * xx + offset[0]
    sx = matrix[1, 0] * yy + matrix[1, 1] * xx + offset[1]
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    y0m = _mirror_index(y0, h)
    y1m = _mirror_index(y0 + 1, h)
    x0m = _mirror_index(x0, w)
    x1m = _mirror_index(x0 + 1, w)
    v00 = img[:, y0m, x0m]
    v01 = img[:, y0m, x1m]
    v10 = img[:, y1m, x0m]
    v11 = img[:, y1m, x1m]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def augment_sample(img: np.ndarray, policy: AugmentPolicy,
                   rng: np.random.Generator) -> np.ndarray:
    """One stochastic augmentation draw on a raw [3,H,W] image in [0,1].

    Geometric transforms (flip, rotation, translation, scale) compose
    into a single affine resample so the image is interpolated once.
    Draw order is fixed, so a given rng state maps to exactly one output.
    Applied before normalization, to training folds only.
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"augment_sample expects [3,H,W], got {img.shape}")
    _, h, w = img.shape

    flip = rng.random() < policy.flip_p
    theta = np.deg2rad(rng.uniform(-policy.rotation_deg, policy.rotation_deg)) \
        if rng.random() < policy.rotation_p else 0.0
    if rng.random() < policy.translate_p:
        t = np.array([rng.uniform(-policy.translate_frac, policy.translate_frac) * h,
                      rng.uniform(-policy.translate_frac, policy.translate_frac) * w])
    else:
        t = np.zeros(2)
    s = rng.uniform(policy.scale_low, policy.scale_high) \
        if rng.random() < policy.scale_p else 1.0

    out = img
    if flip or theta != 0.0 or s != 1.0 or t.any():
        # inverse map: src = F R(-theta)/s (dst - center - t) + center
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        rot_inv = np.array([[cos_t, -sin_t], [sin_t, cos_t]]) / s
        if flip:
            rot_inv = np.array([[1.0, 0.0], [0.0, -1.0]]) @ rot_inv
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - rot_inv @ (center + t)
        out = _affine_sample(img, rot_inv, offset)

    if rng.random() < policy.brightness_p:
        out = out * (1.0 + rng.uniform(-policy.brightness, policy.brightness))
    if rng.random() < policy.contrast_p:
        factor = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
        mean = out.mean()
        out = (out - mean) * factor + mean
    if rng.random() < policy.color_p:
        out = out * (1.0 + rng.uniform(-policy.color, policy.color, size=3))[:, None, None]
    if rng.random() < policy.blur_p:
        sigma = rng.uniform(0.0, policy.blur_sigma_max)
        if sigma > 0.0:
            out = gaussian_filter(out, sigma=(0.0, sigma, sigma), mode="mirror")
    if rng.random() < policy.noise_p:
        out = out + rng.normal(0.0, policy.noise_sigma, size=out.shape)

    if out is img:
        return img.copy()
    return np.clip(out, 0.0, 1.0)


def summarize_counts(manifest: DatasetManifest,
                     expected_fractions: dict[str, float] | None = None) -> dict:
    """Per-class counts and fractions (4 decimals), with warnings for
    degenerate class balance and any mismatch against expected ratios."""
    if not manifest.samples:
        raise EmptyDatasetError("cannot summarize an empty manifest")
    total = len(manifest.samples)
    counts = {LABEL_NAMES[c]: manifest.class_counts.get(c, 0) for c in sorted(LABEL_NAMES)}
    fractions = {name: round(n / total, 4) for name, n in counts.items()}
    warnings: list[str] = []
    for name, n in counts.items():
        if n == 0:
            warnings.append(f"manifest contains no {name} samples")
    report = {"total": total, "counts": counts, "fractions": fractions,
              "warnings": warnings}
    if expected_fractions:
        mismatches = {}
        for name, expected in expected_fractions.items():
            actual = fractions.get(name)
            if actual is not None and abs(actual - expected) > 0.005:
                mismatches[name] = {"expected": expected, "computed": actual}
        report["expected_fractions"] = dict(expected_fractions)
        report["mismatches"] = mismatches
        if mismatches:
            warnings.append("computed class fractions differ from configured expectation")
    return report
