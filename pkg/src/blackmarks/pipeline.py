"""End-to-end watermarking: scheme, candidates, embedding, filtering."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .embedding import EmbedConfig, EmbedResult, embed
from .encoding import EncodingScheme, Signature, design_scheme
from .engine import Model, OptimizerConfig
from .keygen import AttackConfig, FilterResult, WMKeySet, filter_keys, generate_candidates


def derive_seed(master: int, stage: str) -> int:
    """Independent 32-bit seed for a named stage."""
    return int(np.random.SeedSequence([master, zlib.crc32(stage.encode())]).generate_state(1)[0])


@dataclass
class WatermarkSettings:
    per_class: int = 100
    oversample: int = 10
    num_variants: int = 3
    variant_epochs: int = 5
    variant_lr_factor: float = 0.1
    attack: AttackConfig = field(default_factory=AttackConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)


@dataclass
class Watermark:
    scheme: EncodingScheme
    candidates: WMKeySet
    embedded: EmbedResult
    keys: WMKeySet
    filter: FilterResult
    signature: Signature

    @property
    def marked(self) -> Model:
        return self.embedded.model


def scheme_stage(model: Model, train_data: Dataset, settings: WatermarkSettings, seed: int) -> EncodingScheme:
    per_class = min(settings.per_class, min(len(train_data.class_indices(c))
                                            for c in range(train_data.num_classes)))
    return design_scheme(model, train_data, per_class, derive_seed(seed, "scheme"))


def keygen_stage(model: Model, scheme: EncodingScheme, signature: Signature, train_data: Dataset,
                 settings: WatermarkSettings, seed: int) -> WMKeySet:
    a = settings.attack
    attack = AttackConfig(a.epsilon, a.iterations, a.step_size, a.decay, derive_seed(seed, "keygen"))
    return generate_candidates(model, scheme, signature, train_data, attack, settings.oversample)


def embed_stage(model: Model, train_data: Dataset, candidates: WMKeySet, scheme: EncodingScheme,
                optimizer: OptimizerConfig, settings: WatermarkSettings, seed: int,
                test_data: Optional[Dataset] = None) -> EmbedResult:
    e = settings.embed
    ecfg = EmbedConfig(e.lam, e.epochs, e.lr_factor, e.train_fraction, e.key_ratio, derive_seed(seed, "embed"))
    return embed(model, train_data, candidates, ecfg, scheme, optimizer, test_data)


def filter_stage(candidates: WMKeySet, marked: Model, unmarked: Model, train_data: Dataset,
                 optimizer: OptimizerConfig, settings: WatermarkSettings, seed: int) -> tuple:
    variant_cfg = optimizer.replace(learning_rate=optimizer.learning_rate * settings.variant_lr_factor,
                                    epochs=settings.variant_epochs)
    return filter_keys(candidates, marked, unmarked, train_data, settings.num_variants,
                       variant_cfg, len(candidates.signature), derive_seed(seed, "filter"))


def watermark(model: Model, train_data: Dataset, signature: Signature, optimizer: OptimizerConfig,
              settings: WatermarkSettings, seed: int, test_data: Optional[Dataset] = None) -> Watermark:
    """Run all four embedding steps on ``model`` with stage seeds split from ``seed``."""
    scheme = scheme_stage(model, train_data, settings, seed)
    candidates = keygen_stage(model, scheme, signature, train_data, settings, seed)
    embedded = embed_stage(model, train_data, candidates, scheme, optimizer, settings, seed, test_data)
    keys, result = filter_stage(candidates, embedded.model, model, train_data, optimizer, settings, seed)
    return Watermark(scheme, candidates, embedded, keys, result, signature)
