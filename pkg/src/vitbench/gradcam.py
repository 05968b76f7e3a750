"""Class-activation maps for the mini ViT, focus scoring, and overlays.

The map weights the chosen encoder block's patch-token features by the
token-averaged gradient of a target-class logit, giving one relevance
value per patch; the class token is excluded because it has no spatial
position. Scores and overlays are pure functions of (params, image),
so the rendered PNGs are bitwise-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import decode_image
from .errors import ContractError, NumericError
from .vit import VitConfig, VitParams, vit_forward_features


@dataclass
class Heatmap:
    """Per-patch relevance: ``grid`` is [G,G] in [0,1]; ``upsampled``
    (optional) is the [S,S] bilinear blow-up used for overlays."""

    grid: np.ndarray
    upsampled: np.ndarray | None = None


@dataclass(frozen=True)
class RegionMask:
    name: str
    mask: np.ndarray  # binary [S,S]

    def __post_init__(self):
        if self.mask.ndim != 2:
            raise ContractError(f"mask {self.name!r} must be 2-d, got {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ContractError(f"mask {self.name!r} must be binary")


@dataclass(frozen=True)
class FocusScores:
    target_class: int
    scores: dict[str, float]


def grad_cam_map(
    params: VitParams,
    config: VitConfig,
    image: np.ndarray,
    target_class: int,
    block_index: int = -1,
    elementwise: bool = False,
    smooth_sigma: float = 0.0,
) -> Heatmap:
    """Relevance grid for one preprocessed [3,S,S] image.

    Classic pooling: per-channel weights are the token-mean of
    d(logit)/d(features) and each patch scores ReLU(features . weights).
    ``elementwise`` skips the pooling and scores each patch by its own
    gradient-feature product (useful when relevance is very localized).
    ``block_index`` picks the encoder block whose incoming tokens are
    attributed (default: the last block). The incoming side is the
    deepest point where patch tokens still influence the logit: they
    reach the class token through that block's attention, whereas in
    the final output only the class token feeds the head, leaving the
    other tokens with identically zero gradient.
    """
    if target_class not in (0, 1):
        raise ContractError(f"target_class must be 0 or 1, got {target_class}")
    if not params.all_finite():
        raise NumericError("non-finite parameters; cannot attribute a broken model")
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (3, config.image_size, config.image_size):
        raise ContractError(
            f"expected [3, {config.image_size}, {config.image_size}] image, got {image.shape}"
        )
    if smooth_sigma < 0:
        raise ContractError("smooth_sigma must be non-negative")
    if not -config.depth <= block_index < config.depth:
        raise ContractError(
            f"block_index {block_index} out of range for depth {config.depth}")
    block = block_index % config.depth

    with Tape() as tape:
        logits, states = vit_forward_features(
            Tensor(image[None]), params, config, training=False)
        features = states[block]  # tokens entering the chosen block
        target = logits[0, target_class]
    ad.backward(target, tape)

    feats = features.data[0, 1:, :]  # patch tokens only
    grads = features.grad[0, 1:, :]
    if elementwise:
        raw = np.maximum((grads * feats).sum(axis=-1), 0.0)
    else:
        channel_w = grads.mean(axis=0)
        raw = np.maximum(feats @ channel_w, 0.0)
    g = config.grid_size
    grid = raw.reshape(g, g)
    if smooth_sigma > 0.0:
        grid = gaussian_filter(grid, sigma=smooth_sigma, mode="mirror")
    return Heatmap(grid=normalize_heatmap(grid))


def normalize_heatmap(raw: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0,1]; a constant grid maps to all zeros."""
    if not np.all(np.isfinite(raw)):
        raise NumericError("non-finite values in heatmap")
    lo = raw.min()
    hi = raw.max()
    if hi == lo:
        return np.zeros_like(raw, dtype=np.float64)
    return (raw - lo) / (hi - lo)


def upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of [G,G] up to [size,size].

    Corner alignment maps grid corners onto image corners, so cell
    centers spread evenly and outputs stay within the input's range.
    """
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ContractError(f"expected a square grid, got {grid.shape}")
    g = grid.shape[0]
    if size < g:
        raise ContractError(f"target size {size} smaller than grid {g}")
    if g == 1:
        return np.full((size, size), float(grid[0, 0]))
    positions = np.arange(size) * (g - 1) / (size - 1)
    i0 = np.floor(positions).astype(np.int64)
    i0 = np.minimum(i0, g - 2)
    frac = positions - i0
    rows = grid[i0, :] * (1.0 - frac)[:, None] + grid[i0 + 1, :] * frac[:, None]
    return rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]


def focus_score(heatmap: np.ndarray, mask: RegionMask | np.ndarray) -> float:
    """Fraction of total heatmap mass inside the region; 0 if no mass.

    Over an exact partition of the image the scores sum to 1 whenever
    the heatmap is not identically zero.
    """
    m = mask.mask if isinstance(mask, RegionMask) else np.asarray(mask)
    if heatmap.shape != m.shape:
        raise ContractError(f"heatmap {heatmap.shape} and mask {m.shape} differ")
    total = float(heatmap.sum())
    if total == 0.0:
        return 0.0
    return float((heatmap * m).sum() / total)


def rect_mask(name: str, rect: tuple[int, int, int, int], size: int) -> RegionMask:
    """Mask covering rows [y0, y1) and columns [x0, x1)."""
    y0, x0, y1, x1 = rect
    if not (0 <= y0 < y1 <= size and 0 <= x0 < x1 <= size):
        raise ContractError(f"rectangle {rect} does not fit in {size}x{size}")
    m = np.zeros((size, size), dtype=np.int64)
    m[y0:y1, x0:x1] = 1
    return RegionMask(name=name, mask=m)


def mask_from_png(name: str, path, size: int) -> RegionMask:
    """Binary mask from an image file: any pixel brighter than half
    intensity counts as inside."""
    img = decode_image(path)
    if img.shape[1] != size or img.shape[2] != size:
        raise ContractError(
            f"mask {path} is {img.shape[1]}x{img.shape[2]}, expected {size}x{size}"
        )
    return RegionMask(name=name, mask=(img[0] > 0.5).astype(np.int64))


# ---------------------------------------------------------------------------
# rendering
#
# Colormap: 256-entry lookup table linearly interpolated between five
# anchors, blue -> cyan -> green -> yellow -> red. Heat 0 is pure blue,
# heat 1 pure red.

_LUT_ANCHORS = np.array([
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
], dtype=np.float64)


def _build_lut() -> np.ndarray:
    levels = np.linspace(0.0, 1.0, 256)
    anchor_pos = np.linspace(0.0, 1.0, len(_LUT_ANCHORS))
    lut = np.empty((256, 3))
    for ch in range(3):
        lut[:, ch] = np.interp(levels, anchor_pos, _LUT_ANCHORS[:, ch])
    return lut


BLUE_RED_LUT = _build_lut()


def heat_color(heat: np.ndarray) -> np.ndarray:
    """Map heat values in [0,1] to [3,H,W] RGB floats in [0,255]."""
    idx = np.clip(np.rint(np.asarray(heat) * 255.0), 0, 255).astype(np.int64)
    return BLUE_RED_LUT[idx].transpose(2, 0, 1)


def render_overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float, path) -> None:
    """Alpha-blend the colormapped heatmap over a raw [0,1] RGB image
    and write an 8-bit PNG: pixel = (1-alpha)*image + alpha*color(heat).

    alpha=0 reproduces the input image exactly. Output bytes depend only
    on the inputs.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"expected [3,H,W] image, got {image.shape}")
    if heatmap.shape != image.shape[1:]:
        raise ContractError(
            f"heatmap {heatmap.shape} does not match image plane {image.shape[1:]}"
        )
    blend = (1.0 - alpha) * image * 255.0 + alpha * heat_color(heatmap)
    pixels = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
    Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def cam_sidecar(sample_path: str, target_class: int, heatmap: Heatmap,
                focus: FocusScores | None) -> dict:
    """JSON-ready record pairing an overlay with its quantitative map."""
    record = {
        "sample": sample_path,
        "target_class": target_class,
        "grid": [[float(v) for v in row] for row in heatmap.grid],
    }
    if focus is not None:
        record["focus_scores"] = {k: float(v) for k, v in sorted(focus.scores.items())}
    return record


def to_json_bytes(record: dict) -> bytes:
    """Canonical JSON encoding used for all sidecar files."""
    return (json.dumps(record, indent=2, sort_keys=True) + "\n").encode("utf-8")
