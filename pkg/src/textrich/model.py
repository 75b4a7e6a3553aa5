"""The full image-to-text model: encoder -> sampler -> decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from textrich import tensor as T
from textrich.codec import Vocab, build_prompt, encode_escaped, encode_text
from textrich.decoder import Decoder, DecoderConfig, FULL_DECODER, SequenceBatch
from textrich.encoder import FULL_ENCODER, EncoderConfig, VisionEncoder, standardize_images
from textrich.errors import ConfigError, DegenerateBatchError
from textrich.nn import Module
from textrich.sampler import FULL_SAMPLER, MGSampler, SamplerConfig
from textrich.tensor import Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    bins: int = 1000

    def validate(self) -> None:
        self.encoder.validate()
        if self.sampler.stage_dims != self.encoder.stage_dims[2:]:
            raise ConfigError("sampler stage widths must match encoder stages 3 and 4")
        if self.sampler.decoder_dim != self.decoder.hidden:
            raise ConfigError("sampler output width must equal decoder hidden width")
        if self.decoder.vocab_size != Vocab(self.bins).size:
            raise ConfigError(f"decoder vocab {self.decoder.vocab_size} != {Vocab(self.bins).size}")

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "sampler": self.sampler.to_dict(),
                "decoder": self.decoder.to_dict(), "bins": self.bins}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), SamplerConfig(**d["sampler"]),
                   DecoderConfig(**d["decoder"]), int(d["bins"]))


def desk_config(bins: int = 1000, **decoder_overrides) -> ModelConfig:
    dec = DecoderConfig(vocab_size=Vocab(bins).size, **decoder_overrides)
    return ModelConfig(decoder=dec, bins=bins)


def tiny_config(bins: int = 10) -> ModelConfig:
    """16 px toy model used for finite-difference checks."""
    enc = EncoderConfig(input_size=16, patch_size=2, window_size=2, stage_depths=[1, 1, 1, 1],
                        stage_dims=[4, 8, 16, 32], stage_heads=[1, 1, 2, 2], mlp_ratio=2)
    smp = SamplerConfig(queries_per_stage=2, depth=1, decoder_dim=8, heads=2, mlp_ratio=2, stage_dims=[16, 32])
    dec = DecoderConfig(layers=1, heads=2, hidden=8, ffn_mult=2, max_seq=32, vocab_size=Vocab(bins).size)
    return ModelConfig(enc, smp, dec, bins)


PRESETS = {
    "desk": desk_config,
    "tiny": tiny_config,
}

# Documentation only; never instantiated.
FULL_PRESET = {"encoder": FULL_ENCODER, "sampler": FULL_SAMPLER, "decoder": FULL_DECODER, "bins": 1000}


def build_sequence(prompt: str, target_ids: list[int], vocab: Vocab) -> tuple[list[int], list[bool]]:
    """``<bos> prompt <eos> target <eos>``; the mask marks the response part."""
    head = [vocab.bos_id] + encode_text(prompt) + [vocab.eos_id]
    body = list(target_ids) + [vocab.eos_id]
    return head + body, [False] * len(head) + [True] * len(body)


def prompt_ids(prompt: str, vocab: Vocab) -> list[int]:
    return [vocab.bos_id] + encode_text(prompt) + [vocab.eos_id]


class TextRichVLM(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        config = config or desk_config()
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.vocab = Vocab(config.bins)
        rng = np.random.default_rng(seed)
        self.encoder = VisionEncoder(config.encoder, rng, dtype)
        self.sampler = MGSampler(config.sampler, rng, dtype)
        self.decoder = Decoder(config.decoder, rng, dtype)

    def visual_prefix(self, images, input_size: int | None = None) -> Tensor:
        """``[B, 2Q, D]`` visual tokens for uint8 ``[B, H, W, 3]`` images."""
        x = images if isinstance(images, Tensor) else standardize_images(images, self.dtype)
        s3, s4 = self.encoder.encode(x, input_size)
        return self.sampler(s3, s4)

    def make_batch(self, samples, input_size: int | None = None) -> SequenceBatch:
        seqs = [build_sequence(s.prompt, s.target_ids(self.vocab), self.vocab) for s in samples]
        width = max(len(ids) for ids, _ in seqs)
        ids = np.full((len(seqs), width), self.vocab.pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=bool)
        for i, (seq, m) in enumerate(seqs):
            ids[i, :len(seq)] = seq
            mask[i, :len(m)] = m
        prefix = None
        if samples[0].image is not None:
            images = np.stack([resize_image(s.image, input_size) for s in samples])
            prefix = self.visual_prefix(images, input_size)
        return SequenceBatch(ids, mask, prefix)

    def batch_loss(self, samples, input_size: int | None = None):
        """Token-weighted loss over a mixed batch plus ``(n_tokens, n_correct)``.

        Image and image-free samples run as separate sub-batches since their
        prefix lengths differ.
        """
        groups = [[s for s in samples if s.image is not None], [s for s in samples if s.image is None]]
        total = None
        n_tok = n_correct = 0
        parts = []
        for group in groups:
            if not group:
                continue
            batch = self.make_batch(group, input_size)
            mask = batch.loss_mask[:, 1:]
            logits = self.decoder.forward(batch.prefix, batch.ids[:, :-1])
            loss = T.cross_entropy(logits, batch.ids[:, 1:], mask)
            k = int(mask.sum())
            pred = logits.data.argmax(axis=-1)
            n_correct += int(((pred == batch.ids[:, 1:]) & mask).sum())
            n_tok += k
            parts.append((loss, k))
        if not parts:
            raise DegenerateBatchError("empty batch")
        for loss, k in parts:
            term = T.scale(loss, k / n_tok)
            total = term if total is None else total + term
        return total, n_tok, n_correct

    def generate(self, image, prompt: str, max_new: int = 256, input_size: int | None = None) -> list[int]:
        return self.generate_batch([image], [prompt], max_new, input_size)[0]

    def generate_batch(self, images, prompts: list[str], max_new: int = 256,
                       input_size: int | None = None) -> list[list[int]]:
        with T.no_grad():
            prefix = None
            if images[0] is not None:
                prefix = self.visual_prefix(np.stack([resize_image(im, input_size) for im in images]),
                                            input_size)
            ids = [prompt_ids(p, self.vocab) for p in prompts]
            return self.decoder.generate_batch(prefix, ids, max_new, self.vocab.eos_id)

    def infer(self, image, task: str, params: dict | None = None, max_new: int = 256) -> list[int]:
        return self.generate(image, build_prompt(task, params), max_new)


def resize_image(image: np.ndarray, size: int | None) -> np.ndarray:
    """Block-average downscale by an integer factor (no-op if sizes match)."""
    if size is None or image.shape[0] == size:
        return image
    f = image.shape[0] // size
    if f * size != image.shape[0]:
        raise ConfigError(f"cannot resize {image.shape[0]} px image to {size} px")
    h = image.reshape(size, f, size, f, image.shape[2]).astype(np.int64).sum(axis=(1, 3))
    return ((h + f * f // 2) // (f * f)).astype(np.uint8)


def encode_target(target: str, vocab: Vocab) -> list[int]:
    return encode_escaped(target, vocab)
