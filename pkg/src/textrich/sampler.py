"""Multi-granularity token sampler.

Learned queries cross-attend to stage-3 and stage-4 encoder tokens, giving a
fixed number of visual tokens per stage regardless of image resolution.  The
two results are concatenated (stage 3 first) into the decoder's visual prefix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from textrich import tensor as T
from textrich.encoder import StageFeatures
from textrich.errors import DimensionError
from textrich.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param
from textrich.tensor import Tensor


@dataclass
class SamplerConfig:
    queries_per_stage: int = 8
    depth: int = 2
    decoder_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    stage_dims: list = field(default_factory=lambda: [64, 128])
    share_blocks: bool = False

    @property
    def output_length(self) -> int:
        return 2 * self.queries_per_stage

    def to_dict(self) -> dict:
        return asdict(self)


FULL_SAMPLER = SamplerConfig(queries_per_stage=256, depth=2, decoder_dim=2048, heads=16,
                             mlp_ratio=4, stage_dims=[768, 1536])


class ResamplerBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, dtype):
        self.norm_q = LayerNorm(dim, dtype)
        self.norm_kv = LayerNorm(dim, dtype)
        self.cross = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm_self = LayerNorm(dim, dtype)
        self.self_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm_ffn = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, mlp_ratio, rng, dtype)

    def __call__(self, q: Tensor, feats: Tensor) -> Tensor:
        q = q + self.cross(self.norm_q(q), self.norm_kv(feats))
        q = q + self.self_attn(self.norm_self(q))
        return q + self.ffn(self.norm_ffn(q))


def resample(features: StageFeatures, queries: Tensor, proj: Linear, blocks, norm: LayerNorm) -> Tensor:
    """Compress ``[B, N, C]`` stage tokens to ``[B, Q, D]`` query tokens."""
    feats = proj(features.data)
    b = feats.shape[0]
    q, d = queries.shape
    if feats.shape[-1] != d:
        raise DimensionError(f"projected width {feats.shape[-1]} != query width {d}")
    x = queries + T.zeros((b, q, d), dtype=queries.dtype)
    for block in blocks:
        x = block(x, feats)
    return norm(x)


def fuse(stage3_tokens: Tensor, stage4_tokens: Tensor) -> Tensor:
    """Concatenate along the token axis, stage-3 tokens first."""
    if stage3_tokens.shape[-1] != stage4_tokens.shape[-1]:
        raise DimensionError(f"width mismatch {stage3_tokens.shape[-1]} vs {stage4_tokens.shape[-1]}")
    return T.concat([stage3_tokens, stage4_tokens], axis=-2)


class MGSampler(Module):
    def __init__(self, config: SamplerConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        d = config.decoder_dim
        self.proj3 = Linear(config.stage_dims[0], d, rng, dtype)
        self.proj4 = Linear(config.stage_dims[1], d, rng, dtype)
        self.queries3 = param(rng.normal(0.0, 0.02, size=(config.queries_per_stage, d)), dtype)
        self.queries4 = param(rng.normal(0.0, 0.02, size=(config.queries_per_stage, d)), dtype)
        self.blocks3 = [ResamplerBlock(d, config.heads, config.mlp_ratio, rng, dtype)
                        for _ in range(config.depth)]
        self.blocks4 = [] if config.share_blocks else [
            ResamplerBlock(d, config.heads, config.mlp_ratio, rng, dtype) for _ in range(config.depth)]
        self.norm3 = LayerNorm(d, dtype)
        self.norm4 = LayerNorm(d, dtype)

    def __call__(self, stage3: StageFeatures, stage4: StageFeatures) -> Tensor:
        blocks4 = self.blocks3 if self.config.share_blocks else self.blocks4
        a = resample(stage3, self.queries3, self.proj3, self.blocks3, self.norm3)
        b = resample(stage4, self.queries4, self.proj4, blocks4, self.norm4)
        return fuse(a, b)
