"""Positional encoding and linear self-/cross-attention for 2D-3D matching.

Single-head linear attention with the elu(x)+1 positive feature map:
the O(N) kernel-sum formulation equals the explicit quadratic
kernel-attention computation exactly (up to float rounding).
Attention weights are either loaded from a weight file or seeded-random;
a zero-layer stack is the identity (attention bypass).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 3D positions are remapped to this grid-like scale so one frequency ladder
# serves both pixel coordinates and normalized object coordinates.
POSITION_GRID_SCALE = 512.0

# Encoding amplitude relative to 1/sqrt(C). The 3D and 2D encodings of a
# matching pair are uncorrelated until attention layers are trained to use
# them, so the untrained default must keep descriptor content dominant.
POSITION_ENCODING_GAIN = 0.1

_ATTENTION_WEIGHT_STREAM = 30
_WEIGHT_ROLES = ("q", "k", "v", "ff1", "ff2")


def sinusoidal_encoding(positions: np.ndarray, channels: int) -> np.ndarray:
    """Log-spaced sin/cos features per axis, zero-padded to `channels`.

    For D position axes each axis gets channels // (2 D) frequencies
    (geometric ladder 1 .. 1/10000), contributing a sin and a cos each.
    The encoding norm is bounded by sqrt(channels).
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    n, dims = pos.shape
    n_freq = channels // (2 * dims)
    if n_freq == 0:
        raise ValueError(f"{channels} channels cannot encode {dims} axes")
    freqs = np.power(10000.0, -np.arange(n_freq) / n_freq)
    args = pos[:, :, None] * freqs[None, None, :]  # (n, dims, n_freq)
    blocks = np.concatenate([np.sin(args), np.cos(args)], axis=2)
    out = np.zeros((n, channels))
    out[:, : dims * 2 * n_freq] = blocks.reshape(n, -1)
    return out


def positional_encode(
    features: np.ndarray,
    positions: np.ndarray,
    *,
    box_min: np.ndarray | None = None,
    box_extent: np.ndarray | None = None,
) -> np.ndarray:
    """Add positional information to descriptors and renormalize rows.

    2D positions are pixel coordinates used as-is; 3D positions must come
    with their bounding box and are remapped to a POSITION_GRID_SCALE cube
    so the shared frequency ladder resolves them. The encoding is scaled
    by POSITION_ENCODING_GAIN / sqrt(C) to keep descriptor content dominant.
    """
    feats = np.asarray(features, dtype=float)
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    if not np.all(np.isfinite(pos)):
        raise ValueError("positions must be finite")
    if pos.shape[1] == 3:
        if box_min is None or box_extent is None:
            raise ValueError("3D positions need box_min/box_extent for normalization")
        extent = np.where(np.asarray(box_extent) > 0, box_extent, 1.0)
        pos = (pos - box_min) / extent * POSITION_GRID_SCALE
    channels = feats.shape[1]
    pe = sinusoidal_encoding(pos, channels) * (POSITION_ENCODING_GAIN / np.sqrt(channels))
    out = feats + pe
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def elu_plus_one(x: np.ndarray) -> np.ndarray:
    """Positive feature map elu(x) + 1 used by linear attention."""
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def linear_attention(
    queries: np.ndarray, keys: np.ndarray, values: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Kernel attention in O(N): phi(Q) (phi(K)^T V) / (phi(Q) sum phi(K)).

    Equivalent to the explicit softmax-free quadratic form
    out_i = sum_j phi(q_i).phi(k_j) v_j / sum_j phi(q_i).phi(k_j).
    """
    queries = np.asarray(queries, dtype=float)
    keys = np.asarray(keys, dtype=float)
    values = np.asarray(values, dtype=float)
    if queries.shape[1] != keys.shape[1] or keys.shape[0] != values.shape[0]:
        raise ValueError(
            f"shape mismatch: Q{queries.shape} K{keys.shape} V{values.shape}"
        )
    Q = elu_plus_one(queries)
    K = elu_plus_one(keys)
    kv = K.T @ values                      # (C, Cv)
    z = Q @ K.sum(axis=0)                  # (N,)
    return (Q @ kv) / np.maximum(z, eps)[:, None]


@dataclass
class AttentionLayer:
    """One encoder layer: projected linear attention, residual, feed-forward."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    ff1: np.ndarray
    ff2: np.ndarray

    def apply(self, x: np.ndarray, source: np.ndarray) -> np.ndarray:
        message = linear_attention(x @ self.wq, source @ self.wk, source @ self.wv)
        h = x + message
        return h + np.maximum(h @ self.ff1, 0.0) @ self.ff2


@dataclass
class AttentionStack:
    """Interleaved self/cross layers applied symmetrically to two feature sets."""

    layers: list[tuple[AttentionLayer, AttentionLayer]]  # (self, cross) per depth

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def random(cls, n_layers: int, dim: int, seed: int) -> "AttentionStack":
        """Seeded-random weights; output projections damped so layers start near identity.

        Untrained layers must not erase the descriptor signal carried by the
        residual stream, otherwise matching with the default layer counts
        would need trained weights to function at all.
        """
        rng = np.random.default_rng([seed, _ATTENTION_WEIGHT_STREAM, n_layers, dim])
        scale = 1.0 / np.sqrt(dim)
        damped = {"v", "ff2"}
        layers = []
        for _ in range(n_layers):
            pair = []
            for _ in range(2):
                w = [
                    rng.normal(0.0, (0.1 if role in damped else 1.0) * scale, (dim, dim))
                    for role in _WEIGHT_ROLES
                ]
                pair.append(AttentionLayer(*w))
            layers.append(tuple(pair))
        return cls(layers=layers)

    def transform(self, feats_a: np.ndarray, feats_b: np.ndarray):
        """Self-attend each set, then cross-attend both directions, per layer."""
        a, b = np.asarray(feats_a, dtype=float), np.asarray(feats_b, dtype=float)
        for self_layer, cross_layer in self.layers:
            a = self_layer.apply(a, a)
            b = self_layer.apply(b, b)
            a2 = cross_layer.apply(a, b)
            b2 = cross_layer.apply(b, a)
            a, b = a2, b2
        return a, b

    def to_sections(self) -> dict[str, np.ndarray]:
        """FMAT sections keyed layer{i}.{self|cross}.{q|k|v|ff1|ff2}."""
        sections = {}
        for i, (self_layer, cross_layer) in enumerate(self.layers):
            for kind, layer in (("self", self_layer), ("cross", cross_layer)):
                for role in _WEIGHT_ROLES:
                    key = {"q": "wq", "k": "wk", "v": "wv"}.get(role, role)
                    sections[f"layer{i}.{kind}.{role}"] = getattr(layer, key)
        return sections

    @classmethod
    def from_sections(cls, sections: dict[str, np.ndarray]) -> "AttentionStack":
        n_layers = 0
        while f"layer{n_layers}.self.q" in sections:
            n_layers += 1
        layers = []
        for i in range(n_layers):
            pair = []
            for kind in ("self", "cross"):
                w = [sections[f"layer{i}.{kind}.{role}"] for role in _WEIGHT_ROLES]
                pair.append(AttentionLayer(*w))
            layers.append(tuple(pair))
        return cls(layers=layers)
