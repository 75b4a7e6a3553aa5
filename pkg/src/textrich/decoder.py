"""Causal transformer decoder over ``[visual prefix | token embeddings]``."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from textrich import tensor as T
from textrich.errors import DegenerateBatchError, SequenceLengthError
from textrich.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, causal_mask, param
from textrich.tensor import Tensor


@dataclass
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn_mult: int = 4
    max_seq: int = 512
    vocab_size: int = 2261

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        return asdict(self)


FULL_DECODER = DecoderConfig(layers=24, heads=16, hidden=2048, ffn_mult=4, max_seq=4096, vocab_size=160_000)


@dataclass
class SequenceBatch:
    """Right-padded token ids with a mask that is true on response tokens only."""

    ids: np.ndarray  # [B, L] int
    loss_mask: np.ndarray  # [B, L] bool
    prefix: Tensor | None = None  # [B, P, D]

    @property
    def positions(self) -> np.ndarray:
        p = 0 if self.prefix is None else self.prefix.shape[1]
        return np.arange(p, p + self.ids.shape[1])


class DecoderBlock(Module):
    def __init__(self, dim: int, heads: int, mult: int, rng, dtype):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, mult, rng, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ffn(self.norm2(x))


class Decoder(Module):
    def __init__(self, config: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        d = config.hidden
        self.tok_emb = param(rng.normal(0.0, 0.02, size=(config.vocab_size, d)), dtype)
        self.pos_emb = param(rng.normal(0.0, 0.02, size=(config.max_seq, d)), dtype)
        self.blocks = [DecoderBlock(d, config.heads, config.ffn_mult, rng, dtype) for _ in range(config.layers)]
        self.norm = LayerNorm(d, dtype)
        self.head = Linear(d, config.vocab_size, rng, dtype)

    def forward(self, prefix: Tensor | None, ids, last_only: bool = False) -> Tensor:
        """Logits ``[B, T, V]`` for the token positions (``[B, 1, V]`` if ``last_only``)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, t = ids.shape
        p = 0 if prefix is None else prefix.shape[1]
        if p + t > self.config.max_seq:
            raise SequenceLengthError(f"sequence of {p + t} exceeds max {self.config.max_seq}")
        x = T.embedding(self.tok_emb, ids)
        if p:
            x = T.concat([prefix, x], axis=1)
        x = x + self.pos_emb[: p + t]
        mask = causal_mask(p + t)
        for block in self.blocks:
            x = block(x, mask)
        x = x[:, p + t - 1:] if last_only else x[:, p:]
        return self.head(self.norm(x))

    def loss(self, batch: SequenceBatch) -> Tensor:
        """Next-token cross entropy restricted to response positions."""
        mask = np.asarray(batch.loss_mask, dtype=bool)[:, 1:]
        if not mask.any():
            raise DegenerateBatchError("batch has no response tokens")
        logits = self.forward(batch.prefix, batch.ids[:, :-1])
        return T.cross_entropy(logits, batch.ids[:, 1:], mask)

    def generate(self, prefix: Tensor | None, prompt_ids, max_new: int, stop_id: int) -> list[int]:
        """Greedy decoding; the returned ids exclude the prompt and the stop token."""
        out = self.generate_batch(prefix, [list(prompt_ids)], max_new, stop_id)
        return out[0]

    def generate_batch(self, prefix: Tensor | None, prompts: list[list[int]], max_new: int,
                       stop_id: int) -> list[list[int]]:
        """Greedy decoding for prompts of equal length sharing one forward per step."""
        if len({len(p) for p in prompts}) > 1:
            return [self.generate_batch(None if prefix is None else prefix[i:i + 1], [p], max_new, stop_id)[0]
                    for i, p in enumerate(prompts)]
        p_len = 0 if prefix is None else prefix.shape[1]
        budget = min(max_new, self.config.max_seq - p_len - len(prompts[0]))
        seqs = np.array(prompts, dtype=np.int64)
        done = np.zeros(len(prompts), dtype=bool)
        outs: list[list[int]] = [[] for _ in prompts]
        with T.no_grad():
            for _ in range(max(budget, 0)):
                logits = self.forward(prefix, seqs, last_only=True).data[:, -1]
                nxt = logits.argmax(axis=-1)
                for i, tok in enumerate(nxt):
                    if done[i]:
                        continue
                    if tok == stop_id:
                        done[i] = True
                    else:
                        outs[i].append(int(tok))
                if done.all():
                    break
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        return outs
