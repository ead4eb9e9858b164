"""Gram-matrix construction from CNN feature maps, plus ensemble averaging.

A layer's feature map (H x W x C) is flattened to an (H*W) x C matrix F in
row-major spatial order (channel-minor) and multiplied with its own
transpose: G = F^T F. The result discards spatial arrangement and keeps
channel co-activation statistics. When several backbone models produce a
Gram set each, the sets are averaged elementwise per layer into one final
set.

All functions here return float64 arrays (the accumulation dtype); the
store casts to float32 when persisting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigShapeMismatch, OutOfRange, ShapeMismatch
from .records import validate_feature_maps


@dataclass(frozen=True)
class GramConfig:
    """Per-layer weights and normalization policy for Gram computation.

    ``layer_weights`` are the per-layer loss weights (applied at style-loss
    time, not during Gram construction). ``normalize_by_positions`` divides
    each Gram matrix by H*W; off by default so G is literally F^T F. The
    per-query max normalization absorbs global scale either way, but the
    flag helps when layers of very different spatial size must be balanced.
    """

    layer_weights: tuple[float, ...]
    normalize_by_positions: bool = False

    def __post_init__(self):
        weights = tuple(float(w) for w in self.layer_weights)
        object.__setattr__(self, "layer_weights", weights)
        if len(weights) < 1:
            raise ConfigShapeMismatch("layer_weights must be non-empty")
        if any(not np.isfinite(w) or w < 0.0 for w in weights):
            raise OutOfRange("layer weights must be finite and non-negative")
        if not any(w > 0.0 for w in weights):
            raise OutOfRange("at least one layer weight must be positive")

    @staticmethod
    def uniform(layer_count: int, normalize_by_positions: bool = False) -> "GramConfig":
        """Weight 1.0 for every layer (the neutral default)."""
        return GramConfig((1.0,) * layer_count, normalize_by_positions)


def gram_of_layer(feature_map, normalize_by_positions: bool = False) -> np.ndarray:
    """Gram matrix of one layer: flatten to (H*W) x C, return F^T F.

    With ``normalize_by_positions`` the product is divided by H*W.
    Accumulates in float64; the result is symmetric and PSD up to rounding.
    """
    fm = np.asarray(feature_map)
    validate_feature_maps([fm])
    h, w, c = fm.shape
    flat = fm.reshape(h * w, c).astype(np.float64)
    g = flat.T @ flat
    if normalize_by_positions:
        g = g / float(h * w)
    return g


def gram_stack(maps: Sequence, cfg: GramConfig) -> tuple[np.ndarray, ...]:
    """Gram matrix per layer, preserving layer order.

    The config's weights are only checked for count here (they enter at
    style-loss time).
    """
    validate_feature_maps(list(maps))
    if len(cfg.layer_weights) != len(maps):
        raise ConfigShapeMismatch(
            f"config has {len(cfg.layer_weights)} layer weights but stack has {len(maps)} layers"
        )
    return tuple(gram_of_layer(fm, cfg.normalize_by_positions) for fm in maps)


def average_gram_sets(sets: Sequence[Sequence[np.ndarray]]) -> tuple[np.ndarray, ...]:
    """Elementwise arithmetic mean of several Gram sets, layer by layer.

    All sets must share layer count and per-layer shapes. Accumulates in
    float64, so averaging n copies of one float32-valued set returns that
    set exactly.
    """
    if len(sets) < 1:
        raise ShapeMismatch("need at least one gram set to average")
    first = sets[0]
    layer_count = len(first)
    if layer_count < 1:
        raise ShapeMismatch("gram sets must have at least one layer")
    shapes = [np.asarray(g).shape for g in first]
    for s_idx, gset in enumerate(sets[1:], start=1):
        if len(gset) != layer_count:
            raise ShapeMismatch(
                f"gram set {s_idx} has {len(gset)} layers, expected {layer_count}"
            )
        for l, g in enumerate(gset):
            if np.asarray(g).shape != shapes[l]:
                raise ShapeMismatch(
                    f"gram set {s_idx} layer {l} has shape {np.asarray(g).shape}, expected {shapes[l]}"
                )
    averaged = []
    for l in range(layer_count):
        stacked = np.stack([np.asarray(s[l], dtype=np.float64) for s in sets])
        averaged.append(stacked.mean(axis=0))
    return tuple(averaged)
