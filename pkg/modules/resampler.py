"""
Perceiver resampler: a learned latent array cross-attends to a variable-length
audio embedding and returns a fixed L x D summary.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from modules.mae import sincos_2d
from modules.nn import FeedForward, LayerNorm, Module, MultiHeadAttention
from modules.tensor import ShapeError, Tensor


@dataclass
class ResamplerConfig:
    latents: int = 8
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    audio_positions: bool = True

    def validate(self):
        if self.latents < 1 or self.depth < 1 or self.heads < 1:
            raise ValueError("latents, depth и heads ресэмплера должны быть положительными")


@dataclass
class LatentSummary:
    h: Tensor

    @property
    def shape(self):
        return self.h.shape


class ResamplerBlock(Module):
    def __init__(self, width: int, media_width: int, cfg: ResamplerConfig, rng: np.random.Generator):
        self.latent_norm = LayerNorm(width)
        self.media_norm = LayerNorm(media_width)
        self.attn = MultiHeadAttention(width, media_width, width, cfg.heads, rng)
        self.ff_norm = LayerNorm(width)
        self.ff = FeedForward(width, cfg.mlp_ratio, rng)

    def __call__(self, latents: Tensor, media: Tensor) -> Tensor:
        latents = latents + self.attn(self.latent_norm(latents), context=self.media_norm(media))
        return latents + self.ff(self.ff_norm(latents))


class PerceiverResampler(Module):
    def __init__(self, cfg: ResamplerConfig, media_width: int, width: int, rng: np.random.Generator):
        self.latents = Tensor(rng.normal(0.0, 1.0, size=(cfg.latents, width)), requires_grad=True)
        self.blocks = [ResamplerBlock(width, media_width, cfg, rng) for _ in range(cfg.depth)]
        self._media_width = media_width
        self._audio_positions = cfg.audio_positions

    def __call__(self, e: Tensor, coords: Optional[np.ndarray] = None) -> LatentSummary:
        if e.data.ndim != 2 or e.shape[0] < 1 or e.shape[1] != self._media_width:
            raise ShapeError(f"Ресэмплер ожидает P x {self._media_width}, получено {e.shape}")
        if self._audio_positions and coords is not None:
            e = e + Tensor(sincos_2d(coords, self._media_width))
        latents = self.latents
        for block in self.blocks:
            latents = block(latents, e)
        return LatentSummary(latents)


def resample(e: Tensor, params: PerceiverResampler, coords: Optional[np.ndarray] = None) -> LatentSummary:
    """Compress P x D_enc into L x D for any P >= 1."""
    return params(e, coords)


@dataclass
class FlopCount:
    """Multiply-accumulate counts; decoder-side figures are per injection site."""

    resampler_kv: int
    resampler_attention: int
    resampler_total: int
    decoder_cross: int
    naive_prefix: int


def count_cross_flops(P: int, L: int, D: int, D_enc: int, depth: int, text_len: int = 32) -> FlopCount:
    """
    Analytic cost of the resampler path against feeding the P audio tokens
    straight into one decoder self-attention layer.
    """
    if min(P, L, D, D_enc, depth, text_len) < 1:
        raise ValueError("Все размеры должны быть положительными")
    kv = depth * 2 * P * D_enc * D
    attention = depth * 2 * L * P * D
    latent_projections = depth * 2 * L * D * D
    decoder_cross = 2 * text_len * D * D + 2 * L * D * D + 2 * text_len * L * D
    naive_prefix = 4 * P * D * D + 2 * P * P * D
    return FlopCount(
        resampler_kv=kv,
        resampler_attention=attention,
        resampler_total=kv + attention + latent_projections,
        decoder_cross=decoder_cross,
        naive_prefix=naive_prefix,
    )
