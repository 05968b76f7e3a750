"""Mini Vision Transformer for binary classification.

Structure: non-overlapping patch embedding, learnable class token and
positional embeddings, pre-norm encoder blocks (MHSA + GELU MLP, residual),
final layer norm, two-logit head read off the class token. Everything runs
on the autodiff tape so losses and class-activation gradients come for free.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    CheckpointConfigError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    NumericError,
    ShapeError,
)

CHECKPOINT_MAGIC = b"VITW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VitConfig:
    """Architecture hyperparameters. ``num_classes`` is pinned to 2: the
    screening head is binary."""

    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 16
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 2
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes != 2:
            raise ConfigError("this model is a binary classifier; num_classes must be 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class VitParams:
    patch_weight: Tensor  # [embed_dim, 3*P*P]
    patch_bias: Tensor  # [embed_dim]
    class_token: Tensor  # [embed_dim]
    pos_embed: Tensor  # [num_patches + 1, embed_dim]
    blocks: list[BlockParams] = field(default_factory=list)
    final_gamma: Tensor = None
    final_beta: Tensor = None
    head_weight: Tensor = None  # [2, embed_dim]
    head_bias: Tensor = None  # [2]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Every learnable tensor in the fixed checkpoint order."""
        named = [
            ("patch_weight", self.patch_weight),
            ("patch_bias", self.patch_bias),
            ("class_token", self.class_token),
            ("pos_embed", self.pos_embed),
        ]
        block_fields = (
            "ln1_gamma", "ln1_beta", "wq", "wk", "wv", "wo",
            "ln2_gamma", "ln2_beta", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
        )
        for i, blk in enumerate(self.blocks):
            for name in block_fields:
                named.append((f"blocks.{i}.{name}", getattr(blk, name)))
        named.extend([
            ("final_gamma", self.final_gamma),
            ("final_beta", self.final_beta),
            ("head_weight", self.head_weight),
            ("head_bias", self.head_bias),
        ])
        return named

    def copy(self) -> "VitParams":
        """Deep copy with fresh arrays; gradients are not carried over."""
        def dup(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        return VitParams(
            patch_weight=dup(self.patch_weight),
            patch_bias=dup(self.patch_bias),
            class_token=dup(self.class_token),
            pos_embed=dup(self.pos_embed),
            blocks=[
                BlockParams(**{f: dup(getattr(b, f)) for f in (
                    "ln1_gamma", "ln1_beta", "wq", "wk", "wv", "wo",
                    "ln2_gamma", "ln2_beta", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
                )})
                for b in self.blocks
            ],
            final_gamma=dup(self.final_gamma),
            final_beta=dup(self.final_beta),
            head_weight=dup(self.head_weight),
            head_bias=dup(self.head_bias),
        )

    def zero_grads(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for _, t in self.named_tensors())


def param_count(config: VitConfig) -> int:
    """Closed-form learnable-parameter count for a configuration."""
    d = config.embed_dim
    md = config.mlp_hidden
    n = config.num_patches
    patch = d * config.patch_dim + d
    cls_pos = d + (n + 1) * d
    block = 4 * d * d + 4 * d + (d * md + md) + (md * d + d)
    head = 2 * d + (2 * d + 2)
    return patch + cls_pos + config.depth * block + head


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with resampling outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_params(config: VitConfig, seed: int) -> VitParams:
    """Fresh parameters, deterministic in ``seed``: truncated-normal
    weights and positional embeddings, zero biases/beta, unit gamma."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def w(*shape):
        return Tensor(_trunc_normal(rng, shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    blocks = []
    for _ in range(config.depth):
        blocks.append(BlockParams(
            ln1_gamma=ones(d), ln1_beta=zeros(d),
            wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
            ln2_gamma=ones(d), ln2_beta=zeros(d),
            mlp_w1=w(config.mlp_hidden, d), mlp_b1=zeros(config.mlp_hidden),
            mlp_w2=w(d, config.mlp_hidden), mlp_b2=zeros(d),
        ))
    return VitParams(
        patch_weight=w(d, config.patch_dim),
        patch_bias=zeros(d),
        class_token=w(d),
        pos_embed=w(config.num_patches + 1, d),
        blocks=blocks,
        final_gamma=ones(d),
        final_beta=zeros(d),
        head_weight=w(2, d),
        head_bias=zeros(2),
    )


# ---------------------------------------------------------------------------
# forward pass


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B,3,H,W] -> [B,N,3*P*P]; patches row-major over the grid, each
    flattened channel-major. Pure rearrangement, no gradient needed."""
    b, c, h, w = images.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = images.reshape(b, c, g_h, patch_size, g_w, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x).reshape(b, g_h * g_w, c * patch_size * patch_size)


def patch_embed(image: Tensor, params: VitParams, config: VitConfig) -> Tensor:
    """Project one [3,H,W] image to [N, embed_dim] patch tokens."""
    if image.shape != (3, config.image_size, config.image_size):
        raise ShapeError(
            f"expected image of shape (3, {config.image_size}, {config.image_size}), "
            f"got {image.shape}"
        )
    patches = Tensor(patchify(image.data[None], config.patch_size)[0])
    w_t = ad.transpose(params.patch_weight, (1, 0))
    return ad.add(ad.matmul(patches, w_t), params.patch_bias)


def mhsa(tokens: Tensor, block: BlockParams, num_heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention.

    Accepts [T,d] or [B,T,d]; per head softmax(QK^T / sqrt(d_head)) V,
    heads concatenated, then the output projection.
    """
    squeeze = tokens.data.ndim == 2
    x = ad.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    b, t, d = x.shape
    if d % num_heads != 0:
        raise ConfigError(f"token width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def project(w: Tensor) -> Tensor:
        y = ad.matmul(x, ad.transpose(w, (1, 0)))
        y = ad.reshape(y, (b, t, num_heads, dh))
        return ad.transpose(y, (0, 2, 1, 3))  # [B,H,T,dh]

    q, k, v = project(block.wq), project(block.wk), project(block.wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax_lastdim(scores)
    ctx = ad.matmul(attn, v)  # [B,H,T,dh]
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = ad.matmul(ctx, ad.transpose(block.wo, (1, 0)))
    return ad.reshape(out, (t, d)) if squeeze else out


def encoder_block(
    tokens: Tensor,
    block: BlockParams,
    num_heads: int,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Pre-norm transformer block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    drop = dropout_rate if training else 0.0
    if drop > 0.0 and rng is None:
        raise ContractError("dropout requires an rng in training mode")

    attn = mhsa(ad.layer_norm(tokens, block.ln1_gamma, block.ln1_beta), block, num_heads)
    if drop > 0.0:
        attn = ad.dropout(attn, drop, rng)
    x = ad.add(tokens, attn)

    h = ad.layer_norm(x, block.ln2_gamma, block.ln2_beta)
    h = ad.gelu(ad.add(ad.matmul(h, ad.transpose(block.mlp_w1, (1, 0))), block.mlp_b1))
    if drop > 0.0:
        h = ad.dropout(h, drop, rng)
    h = ad.add(ad.matmul(h, ad.transpose(block.mlp_w2, (1, 0))), block.mlp_b2)
    return ad.add(x, h)


def vit_forward_features(
    batch: Tensor,
    params: VitParams,
    config: VitConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Forward pass returning logits plus the token tensor at every block
    boundary (class token at slot 0): element 0 is the embedded input to
    block 0, element i+1 the output of block i, so the list has depth+1
    entries. Class-activation maps attribute a block's INPUT tokens:
    only the class token of the final output reaches the head, so patch
    tokens there carry identically zero gradient."""
    if batch.data.ndim != 4 or batch.shape[1:] != (3, config.image_size, config.image_size):
        raise ShapeError(
            f"expected batch [B, 3, {config.image_size}, {config.image_size}], got {batch.shape}"
        )
    if not np.all(np.isfinite(batch.data)):
        raise NumericError("non-finite values in input batch")
    b = batch.shape[0]
    d = config.embed_dim

    patches = Tensor(patchify(batch.data, config.patch_size))
    tokens = ad.add(ad.matmul(patches, ad.transpose(params.patch_weight, (1, 0))),
                    params.patch_bias)
    cls = ad.broadcast_to(ad.reshape(params.class_token, (1, 1, d)), (b, 1, d))
    x = ad.add(ad.concat([cls, tokens], axis=1), params.pos_embed)

    states: list[Tensor] = [x]
    for i, blk in enumerate(params.blocks):
        try:
            x = encoder_block(x, blk, config.num_heads,
                              dropout_rate=config.dropout_rate, rng=rng, training=training)
        except NumericError as exc:
            raise NumericError(f"encoder block {i}: {exc}") from exc
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activations in encoder block {i}")
        states.append(x)

    x = ad.layer_norm(x, params.final_gamma, params.final_beta)
    cls_out = x[:, 0, :]
    logits = ad.add(ad.matmul(cls_out, ad.transpose(params.head_weight, (1, 0))),
                    params.head_bias)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits")
    return logits, states


def vit_forward(
    batch: Tensor,
    params: VitParams,
    config: VitConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Classify a [B,3,S,S] batch; returns [B,2] logits."""
    logits, _ = vit_forward_features(batch, params, config, training=training, rng=rng)
    return logits


def predict(images: np.ndarray, params: VitParams, config: VitConfig) -> np.ndarray:
    """Deterministic argmax labels for a [B,3,S,S] array."""
    logits = vit_forward(Tensor(images), params, config, training=False)
    return np.argmax(logits.data, axis=1)


# ---------------------------------------------------------------------------
# checkpoint format
#
# Little-endian layout:
#   magic "VITW" | u32 version
#   config: u32 image_size, patch_size, embed_dim, depth, num_heads,
#           f64 mlp_ratio, u32 num_classes, f64 dropout_rate
#   per tensor, in VitParams.named_tensors() order:
#           u32 rank, u32 dims[rank], f64 values (row-major)
# This is also the import path for externally converted pretrained weights.

_CONFIG_STRUCT = struct.Struct("<5Id I d")


def _config_bytes(config: VitConfig) -> bytes:
    return _CONFIG_STRUCT.pack(
        config.image_size, config.patch_size, config.embed_dim, config.depth,
        config.num_heads, config.mlp_ratio, config.num_classes, config.dropout_rate,
    )


def _config_from_bytes(raw: bytes) -> VitConfig:
    vals = _CONFIG_STRUCT.unpack(raw)
    return VitConfig(image_size=vals[0], patch_size=vals[1], embed_dim=vals[2],
                     depth=vals[3], num_heads=vals[4], mlp_ratio=vals[5],
                     num_classes=vals[6], dropout_rate=vals[7])


def save_params(path, params: VitParams, config: VitConfig) -> None:
    """Write a checkpoint; the roundtrip with load_params is bitwise exact."""
    for name, t in params.named_tensors():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"refusing to save non-finite parameter {name}")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(_config_bytes(config))
    for _, t in params.named_tensors():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointTruncatedError(f"checkpoint ends inside {what}")
    return raw


def load_params(path, expected_config: VitConfig | None = None) -> tuple[VitParams, VitConfig]:
    """Read a checkpoint; verifies magic, version, and (when given) that
    the embedded config matches ``expected_config``. Never returns a
    partially-read parameter set."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a VITW checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        config = _config_from_bytes(_read_exact(fh, _CONFIG_STRUCT.size, "config"))
        if expected_config is not None and config != expected_config:
            raise CheckpointConfigError(
                f"checkpoint config {config} does not match expected {expected_config}"
            )
        params = init_params(config, seed=0)
        loaded: dict[str, np.ndarray] = {}
        for name, t in params.named_tensors():
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} dims"))
            if tuple(dims) != t.shape:
                raise CheckpointConfigError(
                    f"tensor {name}: stored shape {tuple(dims)} != expected {t.shape}"
                )
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 8 * count, f"{name} values")
            loaded[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        if fh.read(1):
            raise CheckpointConfigError("trailing bytes after final parameter")
    for name, t in params.named_tensors():
        t.data = loaded[name]
    return params, config
