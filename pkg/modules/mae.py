"""
Masked spectrogram autoencoder: pretraining with random patch masking and
full-patch multi-layer encoding for the fused model.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from modules.frontend import PATCH, PatchSequence, Spectrogram, patchify
from modules.nn import LayerNorm, Linear, Module, TransformerBlock
from modules.optim import AdamW, OptimizerConfig, TrainingDivergence, clip_grad_norm
from modules.seeding import make_rng
from modules.tensor import (
    LossError,
    Tensor,
    TensorValueError,
    concat,
    take_rows,
    tensor_abs,
    tensor_mean,
)

PATCH_DIM = PATCH * PATCH


class MaskError(ValueError):
    """Masking parameters leave nothing to keep or nothing to mask."""


@dataclass
class MaeConfig:
    encoder_layers: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_layers: int = 2
    decoder_width: int = 32
    decoder_heads: int = 4
    mask_ratio: float = 0.75
    norm_target: bool = True
    steps: int = 200
    batch_size: int = 8
    lr: float = 2e-3

    def validate(self):
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ValueError("Число слоёв MAE должно быть положительным")
        if self.width % self.heads or self.decoder_width % self.decoder_heads:
            raise ValueError("Ширина MAE должна делиться на число голов")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"Доля маскирования должна лежать в (0, 1): {self.mask_ratio}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps >= 0 и batch_size >= 1")


@dataclass
class EncoderStack:
    """
    Per-layer encoder outputs over all P patches. `layers[0]` is the embedded
    input, `layers[i]` (1 <= i <= N_e) the normalised output of block i.
    """

    layers: List[Tensor]
    coords: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    @property
    def patches(self) -> int:
        return self.layers[0].shape[0]

    @property
    def output(self) -> Tensor:
        return self.layers[-1]


def sincos_1d(positions: np.ndarray, width: int) -> np.ndarray:
    half = width // 2
    omega = 1.0 / 10000.0 ** (np.arange(half, dtype=np.float64) / half)
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(coords: np.ndarray, width: int) -> np.ndarray:
    """
    Fixed 2-D sinusoidal table of shape (P, width): the first 2*(width//4)
    columns encode the time index, the next 2*(width//4) the frequency index.
    Widths not divisible by 4 are padded with zero columns.
    """
    coords = np.asarray(coords)
    half = 2 * (width // 4)
    table = np.concatenate([sincos_1d(coords[:, 0], half), sincos_1d(coords[:, 1], half)], axis=1)
    return np.pad(table, ((0, 0), (0, width - table.shape[1])))


def random_mask(P: int, ratio: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform split of 0..P-1 into (kept, masked) with |masked| = round(ratio * P)."""
    if not 0.0 < ratio < 1.0:
        raise MaskError(f"Доля маскирования вне (0, 1): {ratio}")
    n_masked = int(np.floor(ratio * P + 0.5))
    if P < 2 or n_masked < 1 or n_masked > P - 1:
        raise MaskError(f"P={P} при доле {ratio}: нужно замаскировать и сохранить хотя бы по одному патчу")
    order = rng.permutation(P)
    return np.sort(order[n_masked:]), np.sort(order[:n_masked])


class AudioEncoder(Module):
    """Patch embedding + transformer blocks + final norm: the part kept after pretraining."""

    def __init__(self, cfg: MaeConfig, rng: np.random.Generator):
        self.patch_embed = Linear(PATCH_DIM, cfg.width, rng)
        self.blocks = [TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.encoder_layers)]
        self.norm = LayerNorm(cfg.width)
        self._width = cfg.width

    @property
    def width(self) -> int:
        return self._width

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def embed(self, patches: np.ndarray, coords: np.ndarray) -> Tensor:
        return self.patch_embed(Tensor(patches)) + Tensor(sincos_2d(coords, self._width))

    def __call__(self, patches: np.ndarray, coords: np.ndarray) -> Tensor:
        x = self.embed(patches, coords)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def encode_layers(self, patches: np.ndarray, coords: np.ndarray) -> List[Tensor]:
        x = self.embed(patches, coords)
        layers = [x]
        for block in self.blocks:
            x = block(x)
            layers.append(self.norm(x))
        return layers


class MaskedAutoencoder(Module):
    def __init__(self, cfg: MaeConfig, rng: np.random.Generator):
        self.encoder = AudioEncoder(cfg, rng)
        self.decoder_embed = Linear(cfg.width, cfg.decoder_width, rng)
        self.mask_token = Tensor(rng.normal(0.0, 0.02, size=(1, cfg.decoder_width)), requires_grad=True)
        self.decoder_blocks = [
            TransformerBlock(cfg.decoder_width, cfg.decoder_heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.decoder_layers)
        ]
        self.decoder_norm = LayerNorm(cfg.decoder_width)
        self.decoder_pred = Linear(cfg.decoder_width, PATCH_DIM, rng)
        self._decoder_width = cfg.decoder_width

    def __call__(self, patches: PatchSequence, kept: Optional[np.ndarray] = None) -> Tensor:
        P = patches.count
        kept = np.arange(P) if kept is None else np.asarray(kept, dtype=np.int64)
        masked = np.setdiff1d(np.arange(P), kept)

        x = self.decoder_embed(self.encoder(patches.patches[kept], patches.coords[kept]))
        if masked.size:
            x = concat([x, Tensor(np.zeros((masked.size, self._decoder_width))) + self.mask_token], axis=0)
        restore = np.argsort(np.concatenate([kept, masked]), kind="stable")
        x = take_rows(x, restore) + Tensor(sincos_2d(patches.coords, self._decoder_width))
        for block in self.decoder_blocks:
            x = block(x)
        return self.decoder_pred(self.decoder_norm(x))


def mae_forward(patches: PatchSequence, mask: Optional[Tuple[np.ndarray, np.ndarray]], model: MaskedAutoencoder) -> Tensor:
    """Reconstruct all P patches from the kept subset (all patches when `mask` is None)."""
    return model(patches, None if mask is None else mask[0])


def mae_loss(predicted: Tensor, target, masked: np.ndarray, normalize: bool = True) -> Tensor:
    """Mean absolute error over masked patches, targets normalised per patch."""
    masked = np.asarray(masked, dtype=np.int64)
    if masked.size == 0:
        raise LossError("Пустое множество замаскированных патчей")
    values = target.patches if isinstance(target, PatchSequence) else np.asarray(target, dtype=np.float64)
    goal = values[masked]
    if normalize:
        mu = goal.mean(axis=1, keepdims=True)
        var = goal.var(axis=1, keepdims=True)
        goal = (goal - mu) / np.sqrt(var + 1e-6)
    return tensor_mean(tensor_abs(take_rows(predicted, masked) - Tensor(goal)))


@dataclass
class MaePretrainResult:
    encoder: AudioEncoder
    losses: List[float] = field(default_factory=list)


def pretrain_mae(
    dataset: Sequence[PatchSequence],
    cfg: MaeConfig,
    optimizer_cfg: OptimizerConfig,
    seed: int,
    log_every: int = 50,
) -> MaePretrainResult:
    """Train the full autoencoder, keep only the encoder."""
    if not dataset:
        raise ValueError("Пустой набор данных для предобучения MAE")
    model = MaskedAutoencoder(cfg, make_rng(seed, "mae", "init"))
    mask_rng = make_rng(seed, "mae", "mask")
    batch_rng = make_rng(seed, "mae", "batch")
    optimizer = AdamW(model.parameters(), optimizer_cfg)
    batch_size = min(cfg.batch_size, len(dataset))

    losses: List[float] = []
    for step in range(1, cfg.steps + 1):
        optimizer.zero_grad()
        total = 0.0
        try:
            for i in batch_rng.choice(len(dataset), size=batch_size, replace=False):
                patches = dataset[i]
                mask = random_mask(patches.count, cfg.mask_ratio, mask_rng)
                loss = mae_loss(mae_forward(patches, mask, model), patches, mask[1], cfg.norm_target)
                (loss * (1.0 / batch_size)).backward()
                total += loss.item() / batch_size
        except TensorValueError as e:
            raise TrainingDivergence(f"MAE разошёлся на шаге {step}: {e}") from e
        clip_grad_norm(optimizer.params, optimizer_cfg.clip_norm)
        optimizer.step()
        losses.append(total)
        if log_every and (step == 1 or step % log_every == 0):
            print(f"MAE шаг {step}/{cfg.steps}: потеря {total:.4f}")
    return MaePretrainResult(model.encoder, losses)


def encode_full(X: Spectrogram, encoder: AudioEncoder) -> EncoderStack:
    """Encode every patch (no masking) and keep every layer for injection taps."""
    patches = patchify(X)
    return EncoderStack(encoder.encode_layers(patches.patches, patches.coords), patches.coords)
