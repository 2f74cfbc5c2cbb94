"""Vision Transformer masked autoencoder: patching, masking, encoder, decoder, heads.

All forward passes work on batches (``[B, N, ...]``); the single-image helpers
``encode``, ``decode_reconstruct``, ``mae_loss`` and ``classify`` wrap them.
Patches are plain numpy arrays, model weights are :class:`Tensor` leaves.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PRESETS = {
    "tiny": dict(encoder_dim=64, encoder_depth=4, encoder_heads=4),
    "vitb": dict(encoder_dim=768, encoder_depth=12, encoder_heads=12),
}


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``decoder_dim``, ``decoder_heads`` and ``head_hidden`` default to half the
    encoder width, half the encoder heads and the encoder width respectively.
    """

    image_size: int = 224
    patch_size: int = 16
    in_channels: int = 3
    encoder_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    decoder_dim: Optional[int] = None
    decoder_depth: int = 2
    decoder_heads: Optional[int] = None
    mlp_ratio: int = 4
    mask_ratio: float = 0.25
    num_classes: int = 5
    head_hidden: Optional[int] = None
    pooling: str = "cls"
    layernorm_eps: float = 1e-6

    def __post_init__(self):
        if self.decoder_dim is None:
            self.decoder_dim = max(1, self.encoder_dim // 2)
        if self.decoder_heads is None:
            self.decoder_heads = max(1, self.encoder_heads // 2)
        if self.head_hidden is None:
            self.head_hidden = self.encoder_dim
        problems = self.violations()
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.patch_size < 1 or self.image_size % self.patch_size:
            out.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for name in ("encoder", "decoder"):
            dim, heads = getattr(self, f"{name}_dim"), getattr(self, f"{name}_heads")
            if heads < 1 or dim % heads:
                out.append(f"{name}_dim {dim} not divisible by {name}_heads {heads}")
            if dim % 4:
                out.append(f"{name}_dim {dim} must be a multiple of 4 for 2-D sin-cos positions")
        if not 0.0 < self.mask_ratio < 1.0:
            out.append(f"mask_ratio {self.mask_ratio} outside (0, 1)")
        if self.encoder_depth < 0 or self.decoder_depth < 0:
            out.append("depths must be non-negative")
        if self.num_classes < 1 or self.in_channels < 1:
            out.append("num_classes and in_channels must be positive")
        if self.pooling not in ("cls", "mean"):
            out.append(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")
        return out

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MaskPlan:
    """Partition of patch indices into visible and masked positions."""

    visible_indices: np.ndarray
    masked_indices: np.ndarray

    def __post_init__(self):
        self.visible_indices = np.asarray(self.visible_indices, dtype=np.int64)
        self.masked_indices = np.asarray(self.masked_indices, dtype=np.int64)

    @property
    def num_patches(self) -> int:
        return len(self.visible_indices) + len(self.masked_indices)

    @classmethod
    def full(cls, num_patches: int) -> "MaskPlan":
        return cls(np.arange(num_patches), np.zeros(0, dtype=np.int64))

    def validate(self, num_patches: int) -> None:
        both = np.concatenate([self.visible_indices, self.masked_indices])
        if len(both) != num_patches or not np.array_equal(np.sort(both), np.arange(num_patches)):
            raise ValueError(f"mask plan does not partition {num_patches} patches")


def mask_count(num_patches: int, mask_ratio: float) -> int:
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    return int(math.floor(mask_ratio * num_patches + 1e-9))


def sample_mask(num_patches: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Mask ``floor(mask_ratio * num_patches)`` patches chosen uniformly without replacement."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    n_mask = mask_count(num_patches, mask_ratio)
    order = rng.permutation(num_patches)
    return MaskPlan(np.sort(order[n_mask:]), np.sort(order[:n_mask]))


# --------------------------------------------------------------- patching


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[C, H, W]`` -> ``[N, C*p*p]`` (or batched ``[B, C, H, W]`` -> ``[B, N, C*p*p]``).

    Patches are numbered row by row across the grid; inside a patch the vector
    is laid out channel-major, then row-major pixels.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise ShapeError(f"patchify expects [C, H, W] or [B, C, H, W], got {images.shape}")
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, gh * gw, c * p * p)
    return x[0] if single else x


def unpatchify(patches: np.ndarray, patch_size: int, channels: int, height: int, width: int) -> np.ndarray:
    patches = np.asarray(patches)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    p = patch_size
    gh, gw = height // p, width // p
    b = patches.shape[0]
    if patches.shape[1:] != (gh * gw, channels * p * p):
        raise ShapeError(f"patches {patches.shape[1:]} do not tile a {channels}x{height}x{width} image")
    x = patches.reshape(b, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(b, channels, height, width)
    return x[0] if single else x


# ------------------------------------------------------- positional tables


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = positions.reshape(-1)[:, None] * omega[None]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_position_table(dim: int, grid_size: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table with a zero row 0 reserved for the class token."""
    ys, xs = np.meshgrid(np.arange(grid_size, dtype=np.float64), np.arange(grid_size, dtype=np.float64), indexing="ij")
    table = np.concatenate([_sincos_1d(dim // 2, ys), _sincos_1d(dim // 2, xs)], axis=1)
    return np.concatenate([np.zeros((1, dim)), table], axis=0)


# ------------------------------------------------------------------ model


@dataclass
class VitMae:
    """Parameters of encoder, decoder and classification head.

    ``params`` holds trainable leaves keyed by dotted names (``encoder.*``,
    ``decoder.*``, ``head.*``); ``buffers`` holds the fixed positional tables.
    """

    config: ModelConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def has_decoder(self) -> bool:
        return any(name.startswith("decoder.") for name in self.params)

    def named_parameters(self, prefixes: Iterable[str] = ("encoder.", "decoder.", "head.")):
        prefixes = tuple(prefixes)
        return [(n, p) for n, p in self.params.items() if n.startswith(prefixes)]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def without_decoder(self) -> "VitMae":
        """A model sharing encoder and head weights with the decoder dropped."""
        kept = {n: p for n, p in self.params.items() if not n.startswith("decoder.")}
        bufs = {n: b for n, b in self.buffers.items() if not n.startswith("decoder.")}
        return VitMae(self.config, kept, bufs)

    def copy(self) -> "VitMae":
        return VitMae(
            self.config,
            {n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()},
            {n: b.copy() for n, b in self.buffers.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self.params[n].data = np.array(arr, dtype=self.params[n].data.dtype)


def _block_shapes(prefix: str, dim: int, hidden: int) -> list[tuple[str, tuple, str]]:
    return [
        (f"{prefix}.norm1.gain", (dim,), "ones"),
        (f"{prefix}.norm1.bias", (dim,), "zeros"),
        (f"{prefix}.attn.qkv.weight", (dim, 3 * dim), "normal"),
        (f"{prefix}.attn.qkv.bias", (3 * dim,), "zeros"),
        (f"{prefix}.attn.proj.weight", (dim, dim), "normal"),
        (f"{prefix}.attn.proj.bias", (dim,), "zeros"),
        (f"{prefix}.norm2.gain", (dim,), "ones"),
        (f"{prefix}.norm2.bias", (dim,), "zeros"),
        (f"{prefix}.mlp.fc1.weight", (dim, hidden), "normal"),
        (f"{prefix}.mlp.fc1.bias", (hidden,), "zeros"),
        (f"{prefix}.mlp.fc2.weight", (hidden, dim), "normal"),
        (f"{prefix}.mlp.fc2.bias", (dim,), "zeros"),
    ]


def head_shapes(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    return [
        ("head.fc1.weight", (cfg.encoder_dim, cfg.head_hidden), "normal"),
        ("head.fc1.bias", (cfg.head_hidden,), "zeros"),
        ("head.fc2.weight", (cfg.head_hidden, cfg.num_classes), "normal"),
        ("head.fc2.bias", (cfg.num_classes,), "zeros"),
    ]


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init) for every trainable tensor."""
    e, d = cfg.encoder_dim, cfg.decoder_dim
    shapes = [
        ("encoder.patch_embed.weight", (cfg.patch_dim, e), "normal"),
        ("encoder.patch_embed.bias", (e,), "zeros"),
        ("encoder.cls_token", (e,), "normal"),
    ]
    for i in range(cfg.encoder_depth):
        shapes += _block_shapes(f"encoder.blocks.{i}", e, cfg.mlp_ratio * e)
    shapes += [("encoder.norm.gain", (e,), "ones"), ("encoder.norm.bias", (e,), "zeros")]
    shapes += [
        ("decoder.embed.weight", (e, d), "normal"),
        ("decoder.embed.bias", (d,), "zeros"),
        ("decoder.mask_token", (d,), "normal"),
    ]
    for i in range(cfg.decoder_depth):
        shapes += _block_shapes(f"decoder.blocks.{i}", d, cfg.mlp_ratio * d)
    if cfg.decoder_depth:
        shapes += [("decoder.norm.gain", (d,), "ones"), ("decoder.norm.bias", (d,), "zeros")]
    shapes += [
        ("decoder.pred.weight", (d, cfg.patch_dim), "normal"),
        ("decoder.pred.bias", (cfg.patch_dim,), "zeros"),
    ]
    return shapes + head_shapes(cfg)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _make(rng: np.random.Generator, shape: tuple, init: str) -> Tensor:
    if init == "ones":
        arr = np.ones(shape)
    elif init == "zeros":
        arr = np.zeros(shape)
    else:
        arr = trunc_normal(rng, shape)
    return Tensor(arr, requires_grad=True)


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> VitMae:
    params = {name: _make(rng, shape, init) for name, shape, init in parameter_shapes(config)}
    return VitMae(config, params, position_buffers(config))


def position_buffers(config: ModelConfig) -> dict[str, np.ndarray]:
    dtype = T.get_default_dtype()
    return {
        "encoder.pos_embed": sincos_position_table(config.encoder_dim, config.grid_size).astype(dtype),
        "decoder.pos_embed": sincos_position_table(config.decoder_dim, config.grid_size).astype(dtype),
    }


def init_head(model: VitMae, rng: np.random.Generator) -> None:
    """Replace the classification head with fresh weights."""
    for name, shape, init in head_shapes(model.config):
        model.params[name] = _make(rng, shape, init)


# ---------------------------------------------------------------- forward


def _transformer_block(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int, eps: float) -> Tensor:
    b, n, d = x.shape
    hd = d // heads
    h = T.layernorm(x, p[f"{prefix}.norm1.gain"], p[f"{prefix}.norm1.bias"], eps)
    qkv = T.linear(h, p[f"{prefix}.attn.qkv.weight"], p[f"{prefix}.attn.qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(T.scale(q, 1.0 / math.sqrt(hd)), T.transpose(k))
    attn = T.matmul(T.softmax(scores, axis=-1), v)
    attn = T.reshape(T.transpose(attn, (0, 2, 1, 3)), (b, n, d))
    x = x + T.linear(attn, p[f"{prefix}.attn.proj.weight"], p[f"{prefix}.attn.proj.bias"])
    h = T.layernorm(x, p[f"{prefix}.norm2.gain"], p[f"{prefix}.norm2.bias"], eps)
    h = T.gelu(T.linear(h, p[f"{prefix}.mlp.fc1.weight"], p[f"{prefix}.mlp.fc1.bias"]))
    return x + T.linear(h, p[f"{prefix}.mlp.fc2.weight"], p[f"{prefix}.mlp.fc2.bias"])


def _broadcast_token(token: Tensor, batch: int, count: int) -> Tensor:
    dim = token.shape[-1]
    return T.add(Tensor(np.zeros((batch, count, dim))), T.reshape(token, (1, 1, dim)))


def _as_index_batch(indices, batch: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (batch, idx.shape[0]))
    return idx


def encode_batch(model: VitMae, patches, visible) -> Tensor:
    """Encode the visible patches of a batch.

    Args:
        patches: ``[B, N, patch_dim]`` pixel patches.
        visible: ``[B, K]`` (or shared ``[K]``) patch indices to keep, in the
            order the tokens should appear.

    Returns:
        ``[B, K + 1, encoder_dim]`` with the class token first.
    """
    cfg, p = model.config, model.params
    patches = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    if patches.ndim != 3 or patches.shape[1:] != (cfg.num_patches, cfg.patch_dim):
        raise ShapeError(f"expected patches [B, {cfg.num_patches}, {cfg.patch_dim}], got {patches.shape}")
    b = patches.shape[0]
    vis = _as_index_batch(visible, b)
    rows = np.arange(b)[:, None]
    pos = model.buffers["encoder.pos_embed"]
    x = T.linear(Tensor(patches[rows, vis]), p["encoder.patch_embed.weight"], p["encoder.patch_embed.bias"])
    x = x + Tensor(pos[vis + 1])
    cls = _broadcast_token(p["encoder.cls_token"] + Tensor(pos[0]), b, 1)
    x = T.concat([cls, x], axis=1)
    for i in range(cfg.encoder_depth):
        x = _transformer_block(x, p, f"encoder.blocks.{i}", cfg.encoder_heads, cfg.layernorm_eps)
    return T.layernorm(x, p["encoder.norm.gain"], p["encoder.norm.bias"], cfg.layernorm_eps)


def decode_batch(model: VitMae, encoded: Tensor, visible, masked) -> Tensor:
    """Predict pixels for every patch position: ``[B, N, patch_dim]``."""
    cfg, p = model.config, model.params
    if not model.has_decoder:
        raise ValueError("model has no decoder (it was discarded for fine-tuning)")
    b = encoded.shape[0]
    vis = _as_index_batch(visible, b)
    msk = _as_index_batch(masked, b)
    if encoded.shape[1] != vis.shape[1] + 1:
        raise ValueError(f"encoded sequence of {encoded.shape[1]} tokens does not match {vis.shape[1]} visible patches")
    if vis.shape[1] + msk.shape[1] != cfg.num_patches:
        raise ValueError(f"mask plan covers {vis.shape[1] + msk.shape[1]} of {cfg.num_patches} patches")
    y = T.linear(encoded, p["decoder.embed.weight"], p["decoder.embed.bias"])
    tokens = y[:, 1:]
    if msk.shape[1]:
        tokens = T.concat([tokens, _broadcast_token(p["decoder.mask_token"], b, msk.shape[1])], axis=1)
    restore = np.argsort(np.concatenate([vis, msk], axis=1), axis=1, kind="stable")
    x = T.concat([y[:, :1], T.gather_rows(tokens, restore)], axis=1)
    x = x + Tensor(model.buffers["decoder.pos_embed"])
    for i in range(cfg.decoder_depth):
        x = _transformer_block(x, p, f"decoder.blocks.{i}", cfg.decoder_heads, cfg.layernorm_eps)
    if cfg.decoder_depth:
        x = T.layernorm(x, p["decoder.norm.gain"], p["decoder.norm.bias"], cfg.layernorm_eps)
    x = T.linear(x, p["decoder.pred.weight"], p["decoder.pred.bias"])
    return x[:, 1:]


def mae_loss_batch(pred: Tensor, target, masked) -> Tensor:
    """Mean squared error over masked-patch pixels only."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    msk = _as_index_batch(masked, pred.shape[0])
    if msk.shape[1] == 0:
        raise ValueError("reconstruction loss undefined: no masked patches")
    rows = np.arange(pred.shape[0])[:, None]
    diff = T.gather_rows(pred, msk) - Tensor(target[rows, msk])
    return T.mean(diff * diff)


def classify_batch(model: VitMae, patches) -> Tensor:
    """Logits ``[B, num_classes]`` from the full, unmasked patch sequence."""
    cfg, p = model.config, model.params
    n = cfg.num_patches
    x = encode_batch(model, patches, np.arange(n))
    pooled = x[:, 0] if cfg.pooling == "cls" else T.mean(x[:, 1:], axis=1)
    h = T.gelu(T.linear(pooled, p["head.fc1.weight"], p["head.fc1.bias"]))
    return T.linear(h, p["head.fc2.weight"], p["head.fc2.bias"])


def reconstruction_step(model: VitMae, images_patches: np.ndarray, plans: Sequence[MaskPlan]) -> Tensor:
    """Batched pretraining loss for images that each carry their own mask."""
    vis = np.stack([pl.visible_indices for pl in plans])
    msk = np.stack([pl.masked_indices for pl in plans])
    encoded = encode_batch(model, images_patches, vis)
    pred = decode_batch(model, encoded, vis, msk)
    return mae_loss_batch(pred, images_patches, msk)


# ------------------------------------------------------ single-image API


def _check_plan(model: VitMae, plan: MaskPlan) -> None:
    plan.validate(model.config.num_patches)


def encode(model: VitMae, patches, plan: MaskPlan) -> Tensor:
    _check_plan(model, plan)
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    out = encode_batch(model, arr[None], plan.visible_indices[None])
    return T.reshape(out, out.shape[1:])


def decode_reconstruct(model: VitMae, encoded: Tensor, plan: MaskPlan) -> Tensor:
    _check_plan(model, plan)
    out = decode_batch(model, T.reshape(encoded, (1,) + encoded.shape), plan.visible_indices[None], plan.masked_indices[None])
    return T.reshape(out, out.shape[1:])


def mae_loss(pred: Tensor, target_patches, plan: MaskPlan) -> Tensor:
    target = target_patches.data if isinstance(target_patches, Tensor) else np.asarray(target_patches)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return mae_loss_batch(T.reshape(pred, (1,) + pred.shape), target[None], plan.masked_indices[None])


def classify(model: VitMae, patches) -> Tensor:
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    out = classify_batch(model, arr[None])
    return T.reshape(out, out.shape[1:])
