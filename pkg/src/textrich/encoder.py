"""Hierarchical shifted-window vision encoder.

Tokens are kept in row-major grid order, batched as ``[B, grid_h * grid_w, C]``.
Window partitioning (with or without the cyclic shift) is a fixed permutation of
token indices, so it is expressed as one gather and undone by the inverse gather.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from textrich import tensor as T
from textrich.errors import ConfigError, DimensionError
from textrich.nn import NEG_INF, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param
from textrich.tensor import Tensor


@dataclass
class EncoderConfig:
    input_size: int = 64
    patch_size: int = 4
    window_size: int = 4
    stage_depths: list = field(default_factory=lambda: [1, 1, 2, 1])
    stage_dims: list = field(default_factory=lambda: [16, 32, 64, 128])
    stage_heads: list = field(default_factory=lambda: [1, 2, 4, 8])
    in_chans: int = 3
    mlp_ratio: int = 2

    def grid(self, stage: int, input_size: int | None = None) -> int:
        """Token-grid side of stage ``stage`` (1-based)."""
        size = self.input_size if input_size is None else input_size
        return size // (self.patch_size * 2 ** (stage - 1))

    def validate(self, input_size: int | None = None) -> None:
        size = self.input_size if input_size is None else input_size
        if len(self.stage_depths) != 4 or len(self.stage_dims) != 4 or len(self.stage_heads) != 4:
            raise ConfigError("encoder needs exactly four stages")
        if size % (self.patch_size * 8):
            raise ConfigError(f"input size {size} not divisible by patch_size*8 = {self.patch_size * 8}")
        for s in range(3):
            if self.stage_dims[s + 1] != 2 * self.stage_dims[s]:
                raise ConfigError("stage widths must double at every merge")
        for d, h in zip(self.stage_dims, self.stage_heads):
            if d % h:
                raise ConfigError(f"stage width {d} not divisible by {h} heads")
        for s in range(1, 5):
            g = self.grid(s, size)
            if g % effective_window(g, self.window_size):
                raise ConfigError(f"stage {s} grid {g} not divisible by window {self.window_size}")

    def to_dict(self) -> dict:
        return asdict(self)


# Swin-Large proportions at the 1600 px input; window 10 divides all four grids.
FULL_ENCODER = EncoderConfig(input_size=1600, patch_size=4, window_size=10,
                             stage_depths=[2, 2, 18, 2], stage_dims=[192, 384, 768, 1536],
                             stage_heads=[6, 12, 24, 48], mlp_ratio=4)


@dataclass
class StageFeatures:
    grid_h: int
    grid_w: int
    channels: int
    data: Tensor  # [B, grid_h * grid_w, channels]


def effective_window(grid: int, window: int) -> int:
    return min(grid, window)


@lru_cache(maxsize=64)
def window_order(grid: int, window: int, shift: int) -> tuple[np.ndarray, np.ndarray]:
    """Gather index from row-major tokens to (cyclically shifted) window order, and its inverse."""
    nw = grid // window
    wi, wj, a, b = np.meshgrid(np.arange(nw), np.arange(nw), np.arange(window), np.arange(window),
                               indexing="ij")
    rows = (wi * window + a + shift) % grid
    cols = (wj * window + b + shift) % grid
    idx = (rows * grid + cols).reshape(-1)
    inv = np.empty_like(idx)
    inv[idx] = np.arange(idx.size)
    return idx, inv


@lru_cache(maxsize=64)
def shift_mask(grid: int, window: int, shift: int) -> np.ndarray:
    """Additive mask ``[n_windows, w*w, w*w]`` blocking attention across wrapped regions."""
    labels = np.zeros((grid, grid), dtype=np.int64)
    if shift:
        bounds = (slice(0, grid - window), slice(grid - window, grid - shift), slice(grid - shift, grid))
        k = 0
        for hs in bounds:
            for ws in bounds:
                labels[hs, ws] = k
                k += 1
    nw = grid // window
    win = labels.reshape(nw, window, nw, window).transpose(0, 2, 1, 3).reshape(nw * nw, window * window)
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, NEG_INF, 0.0)


def window_attention(x: StageFeatures, window_size: int, shift: int, attn: MultiHeadAttention) -> StageFeatures:
    """Multi-head self-attention restricted to (optionally shifted) local windows."""
    g = x.grid_h
    if x.grid_w != g:
        raise DimensionError("only square grids are supported")
    if window_size <= 0 or g % window_size:
        raise DimensionError(f"grid {g} not divisible by window {window_size}")
    if shift not in (0, window_size // 2):
        raise DimensionError(f"shift must be 0 or {window_size // 2}, got {shift}")
    b, n, c = x.data.shape
    nw = (g // window_size) ** 2
    idx, inv = window_order(g, window_size, shift)
    xw = T.take(x.data, idx, axis=1).reshape(b, nw, window_size * window_size, c)
    mask = shift_mask(g, window_size, shift)[:, None] if shift else None
    y = attn(xw, mask=mask).reshape(b, n, c)
    return StageFeatures(g, g, c, T.take(y, inv, axis=1))


def patchify(images: Tensor, patch: int) -> Tensor:
    """``[B, H, W, C]`` -> ``[B, (H/p)*(W/p), p*p*C]`` in row-major patch order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def patch_embed(image: Tensor, config: EncoderConfig, proj: Linear, input_size: int | None = None) -> StageFeatures:
    """Project non-overlapping patches to the first stage width.

    ``image`` is ``[H, W, C]`` or batched ``[B, H, W, C]``.
    """
    if image.ndim == 3:
        image = image.reshape(1, *image.shape)
    size = config.input_size if input_size is None else input_size
    _, h, w, c = image.shape
    if h != size or w != size or c != config.in_chans:
        raise DimensionError(f"expected {size}x{size}x{config.in_chans} image, got {h}x{w}x{c}")
    g = size // config.patch_size
    tokens = proj(patchify(image, config.patch_size))
    return StageFeatures(g, g, config.stage_dims[0], tokens)


def patch_merge(x: StageFeatures, merger: "PatchMerging") -> StageFeatures:
    """Concatenate each 2x2 neighbourhood (4C) and project to 2C; grid halves."""
    g = x.grid_h
    if g % 2 or x.grid_w % 2:
        raise DimensionError(f"cannot merge odd grid {x.grid_h}x{x.grid_w}")
    b, _, c = x.data.shape
    h = g // 2
    t = x.data.reshape(b, h, 2, h, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h * h, 4 * c)
    return StageFeatures(h, h, 2 * c, merger.reduction(merger.norm(t)))


def standardize_images(images, dtype=np.float64) -> Tensor:
    """uint8 ``[..., H, W, 3]`` -> float, per channel ``(x/255 - 0.5) / 0.5``."""
    arr = np.asarray(images, dtype=np.float64) / 255.0
    return Tensor(((arr - 0.5) / 0.5).astype(dtype))


class PatchMerging(Module):
    def __init__(self, dim: int, rng, dtype):
        self.norm = LayerNorm(4 * dim, dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng, dtype, bias=False)


class SwinBlock(Module):
    """Pre-norm block: LN -> window attention -> residual -> LN -> FFN -> residual."""

    def __init__(self, dim: int, heads: int, window: int, shifted: bool, mlp_ratio: int, rng, dtype):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, mlp_ratio, rng, dtype)
        self.window = window
        self.shifted = shifted

    def __call__(self, x: StageFeatures) -> StageFeatures:
        w = effective_window(x.grid_h, self.window)
        # no shift when a single window already covers the grid
        shift = w // 2 if self.shifted and x.grid_h > w else 0
        h = StageFeatures(x.grid_h, x.grid_w, x.channels, self.norm1(x.data))
        y = x.data + window_attention(h, w, shift, self.attn).data
        y = y + self.ffn(self.norm2(y))
        return StageFeatures(x.grid_h, x.grid_w, x.channels, y)


class VisionEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        c0 = config.stage_dims[0]
        self.patch_proj = Linear(config.patch_size ** 2 * config.in_chans, c0, rng, dtype)
        g0 = config.grid(1)
        self.pos_embed = param(rng.normal(0.0, 0.02, size=(g0 * g0, c0)), dtype)
        self.embed_norm = LayerNorm(c0, dtype)
        self.stages = []
        self.mergers = []
        for s in range(4):
            dim = config.stage_dims[s]
            blocks = [SwinBlock(dim, config.stage_heads[s], config.window_size, i % 2 == 1,
                                config.mlp_ratio, rng, dtype)
                      for i in range(config.stage_depths[s])]
            self.stages.append(_Stage(blocks))
            if s < 3:
                self.mergers.append(PatchMerging(dim, rng, dtype))

    def _pos(self, grid: int) -> Tensor:
        g0 = self.config.grid(1)
        if grid == g0:
            return self.pos_embed
        src = (np.arange(grid) * g0) // grid
        idx = (src[:, None] * g0 + src[None, :]).reshape(-1)
        return T.take(self.pos_embed, idx, axis=0)

    def forward_stages(self, images: Tensor, input_size: int | None = None) -> list[StageFeatures]:
        size = images.shape[-2] if input_size is None else input_size
        if size > self.config.input_size:
            raise DimensionError(f"image size {size} exceeds encoder input size {self.config.input_size}")
        self.config.validate(size)
        x = patch_embed(images, self.config, self.patch_proj, input_size=size)
        x = StageFeatures(x.grid_h, x.grid_w, x.channels, self.embed_norm(x.data + self._pos(x.grid_h)))
        outs = []
        for s, stage in enumerate(self.stages):
            if s > 0:
                x = patch_merge(x, self.mergers[s - 1])
            for block in stage.blocks:
                x = block(x)
            outs.append(x)
        return outs

    def encode(self, images: Tensor, input_size: int | None = None) -> tuple[StageFeatures, StageFeatures]:
        """Return the stage-3 and stage-4 features of a ``[B, H, W, 3]`` batch."""
        outs = self.forward_stages(images, input_size)
        return outs[2], outs[3]


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks
