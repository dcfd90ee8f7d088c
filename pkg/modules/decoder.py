"""
Causal text decoder with tanh-gated cross-attention injection sites, the
three injection topologies and the frozen/trainable parameter partition.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from modules.mae import AudioEncoder, EncoderStack
from modules.nn import (
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerBlock,
    causal_mask,
    parameter_checksum,
)
from modules.resampler import LatentSummary, PerceiverResampler, ResamplerConfig, resample
from modules.synth import VOCAB_SIZE, TokenSequence
from modules.tensor import ShapeError, Tensor, take_rows, tanh

TRAINABLE_PREFIXES = ("resamplers.", "cross_blocks.")


class TopologyError(ValueError):
    """Injection topology does not fit the encoder/decoder depths."""


class Variant(str, Enum):
    BASELINE = "Baseline"
    DENSE_DEC = "DenseDec"
    DENSE_ENC_DEC = "DenseEncDec"


@dataclass
class DecoderConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    vocab_size: int = VOCAB_SIZE
    max_len: int = 256

    def validate(self):
        if self.layers < 1 or self.width < 1 or self.heads < 1:
            raise ValueError("layers, width и heads декодера должны быть положительными")
        if self.width % self.heads:
            raise ValueError(f"Ширина декодера {self.width} не делится на {self.heads} голов")
        if self.vocab_size < VOCAB_SIZE:
            raise ValueError(f"vocab_size должен быть не меньше {VOCAB_SIZE}")
        if self.max_len < 4:
            raise ValueError("max_len должен быть >= 4")


@dataclass(frozen=True)
class InjectionSite:
    """Encoder tap layer (1..N_e) -> resampler -> decoder layer (1..N_d)."""

    encoder_layer: int
    resampler_id: str
    decoder_layer: int

    def describe(self) -> str:
        return f"{self.encoder_layer}/{self.resampler_id}/{self.decoder_layer}"


@dataclass
class InjectionTopology:
    variant: Variant
    sites: List[InjectionSite] = field(default_factory=list)

    def validate(self, encoder_layers: int, decoder_layers: int):
        if not self.sites:
            raise TopologyError("Топология без точек внедрения")
        if self.variant is Variant.BASELINE and len(self.sites) != 1:
            raise TopologyError("Baseline допускает ровно одну точку внедрения")
        ids = [s.resampler_id for s in self.sites]
        targets = [s.decoder_layer for s in self.sites]
        if len(set(ids)) != len(ids) or len(set(targets)) != len(targets):
            raise TopologyError("Ресэмплеры и слои декодера в топологии должны быть различны")
        for site in self.sites:
            if not 1 <= site.encoder_layer <= encoder_layers:
                raise TopologyError(f"Слой энкодера {site.encoder_layer} вне 1..{encoder_layers}")
            if not 1 <= site.decoder_layer <= decoder_layers:
                raise TopologyError(f"Слой декодера {site.decoder_layer} вне 1..{decoder_layers}")
        if self.variant is Variant.DENSE_DEC and any(s.encoder_layer != encoder_layers for s in self.sites):
            raise TopologyError("DenseDec берёт выход только последнего слоя энкодера")

    def site_for_layer(self, decoder_layer: int) -> Optional[InjectionSite]:
        for site in self.sites:
            if site.decoder_layer == decoder_layer:
                return site
        return None

    def describe(self) -> str:
        """'DenseDec:4/r0/1,4/r1/2' - the form stored in checkpoints and reports."""
        return f"{self.variant.value}:" + ",".join(s.describe() for s in self.sites)

    @classmethod
    def parse(cls, text: str) -> "InjectionTopology":
        try:
            variant, _, body = text.partition(":")
            sites = []
            for chunk in filter(None, body.split(",")):
                enc, rid, dec = chunk.split("/")
                sites.append(InjectionSite(int(enc), rid, int(dec)))
            return cls(Variant(variant), sites)
        except ValueError as e:
            raise TopologyError(f"Не удалось разобрать топологию '{text}': {e}") from e


def build_topology(variant: Union[Variant, str], encoder_layers: int, decoder_layers: int) -> InjectionTopology:
    try:
        variant = Variant(variant)
    except ValueError:
        raise TopologyError(f"Неизвестный вариант топологии: {variant}") from None
    if encoder_layers < 1 or decoder_layers < 1:
        raise TopologyError("Глубины энкодера и декодера должны быть >= 1")

    if variant is Variant.BASELINE:
        sites = [InjectionSite(encoder_layers, "r0", 1)]
    elif variant is Variant.DENSE_DEC:
        sites = [InjectionSite(encoder_layers, f"r{i}", i + 1) for i in range(decoder_layers)]
    else:
        if encoder_layers < decoder_layers:
            raise TopologyError(
                f"DenseEncDec требует N_e >= N_d, получено N_e={encoder_layers}, N_d={decoder_layers}"
            )
        # evenly spaced taps, shallow encoder layers feed shallow decoder layers
        sites = [
            InjectionSite(math.ceil((i + 1) * encoder_layers / decoder_layers), f"r{i}", i + 1)
            for i in range(decoder_layers)
        ]
    topology = InjectionTopology(variant, sites)
    topology.validate(encoder_layers, decoder_layers)
    return topology


class GatedCrossAttention(Module):
    """x + tanh(gate) * CrossAttn(LN(x), h) with a scalar gate starting at zero."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.norm = LayerNorm(width)
        self.attn = MultiHeadAttention(width, width, width, heads, rng)
        self.gate = Tensor(np.zeros((1, 1)), requires_grad=True)

    @property
    def gate_value(self) -> float:
        return float(np.tanh(self.gate.data[0, 0]))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return x + tanh(self.gate) * self.attn(self.norm(x), context=h)


CrossInput = Tuple[GatedCrossAttention, LatentSummary]


class TextDecoder(Module):
    """Byte-level causal transformer; the language model that gets frozen."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.token_embed = Tensor(rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.width)), requires_grad=True)
        self.pos_embed = Tensor(rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.width)), requires_grad=True)
        self.layers = [TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.width)
        self.head = Linear(cfg.width, cfg.vocab_size, rng, bias=False)
        self._cfg = cfg

    @property
    def config(self) -> DecoderConfig:
        return self._cfg

    @property
    def depth(self) -> int:
        return len(self.layers)

    def forward(self, ids: np.ndarray, cross: Optional[Mapping[int, CrossInput]] = None) -> Tensor:
        """
        Logits T x V. `cross` maps a 1-based decoder layer to the gated block
        and latent summary injected in front of that layer's self-attention.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeError(f"Ожидалась непустая последовательность токенов, форма {ids.shape}")
        if ids.size > self._cfg.max_len:
            raise ShapeError(f"Длина последовательности {ids.size} превышает max_len={self._cfg.max_len}")
        if ids.min() < 0 or ids.max() >= self._cfg.vocab_size:
            raise ShapeError(f"Токен вне словаря [0, {self._cfg.vocab_size})")

        x = take_rows(self.token_embed, ids) + take_rows(self.pos_embed, np.arange(ids.size))
        mask = causal_mask(ids.size)
        for index, layer in enumerate(self.layers, start=1):
            if cross and index in cross:
                block, summary = cross[index]
                x = block(x, summary.h)
            x = layer(x, mask=mask)
        return self.head(self.norm(x))

    __call__ = forward


def token_ids(tokens: Union[TokenSequence, np.ndarray, List[int]]) -> np.ndarray:
    return tokens.ids if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)


class JmlaModel(Module):
    """Frozen audio encoder and text decoder joined by per-site resamplers and gated cross blocks."""

    def __init__(
        self,
        encoder: AudioEncoder,
        decoder: TextDecoder,
        topology: InjectionTopology,
        resampler_cfg: ResamplerConfig,
        rng: np.random.Generator,
    ):
        topology.validate(encoder.depth, decoder.depth)
        width = decoder.config.width
        self.encoder = encoder
        self.decoder = decoder
        self.resamplers: Dict[str, PerceiverResampler] = {}
        self.cross_blocks: Dict[str, GatedCrossAttention] = {}
        for site in topology.sites:
            self.resamplers[site.resampler_id] = PerceiverResampler(resampler_cfg, encoder.width, width, rng)
            self.cross_blocks[site.resampler_id] = GatedCrossAttention(width, decoder.config.heads, rng)
        self._topology = topology

    @property
    def topology(self) -> InjectionTopology:
        return self._topology

    def gates(self) -> Dict[str, float]:
        return {rid: block.gate_value for rid, block in self.cross_blocks.items()}

    def summarize(self, stack: EncoderStack) -> Dict[str, LatentSummary]:
        """Run every site's resampler on its encoder tap."""
        if stack.depth < max(s.encoder_layer for s in self._topology.sites):
            raise TopologyError(f"Стек энкодера глубины {stack.depth} не содержит нужных слоёв")
        return {
            site.resampler_id: resample(stack.layers[site.encoder_layer], self.resamplers[site.resampler_id], stack.coords)
            for site in self._topology.sites
        }

    def decoder_forward(self, tokens, summaries: Mapping[str, LatentSummary]) -> Tensor:
        return decoder_forward(tokens, summaries, self._topology, self)


def decoder_forward(
    tokens: Union[TokenSequence, np.ndarray],
    summaries: Mapping[str, LatentSummary],
    topology: InjectionTopology,
    model: JmlaModel,
) -> Tensor:
    cross = {}
    for site in topology.sites:
        if site.resampler_id not in summaries:
            raise TopologyError(f"Нет латентного описания для ресэмплера {site.resampler_id}")
        cross[site.decoder_layer] = (model.cross_blocks[site.resampler_id], summaries[site.resampler_id])
    return model.decoder.forward(token_ids(tokens), cross)


@dataclass
class ParamPartition:
    frozen: Dict[str, Tensor]
    trainable: Dict[str, Tensor]
    resamplers: int
    cross_blocks: int
    gates: int

    @property
    def frozen_count(self) -> int:
        return sum(p.size for p in self.frozen.values())

    @property
    def trainable_count(self) -> int:
        return sum(p.size for p in self.trainable.values())

    def checksums(self) -> Dict[str, str]:
        return {"frozen": parameter_checksum(self.frozen), "trainable": parameter_checksum(self.trainable)}


def partition_params(model: JmlaModel, topology: Optional[InjectionTopology] = None) -> ParamPartition:
    """Freeze encoder and decoder, leave only resamplers and gated cross blocks trainable."""
    topology = topology or model.topology
    frozen, trainable = {}, {}
    for name, p in model.parameters().items():
        is_trainable = name.startswith(TRAINABLE_PREFIXES)
        p.set_requires_grad(is_trainable)
        (trainable if is_trainable else frozen)[name] = p
    return ParamPartition(
        frozen=frozen,
        trainable=trainable,
        resamplers=len({s.resampler_id for s in topology.sites}),
        cross_blocks=len(model.cross_blocks),
        gates=sum(1 for name in trainable if name.endswith(".gate")),
    )
