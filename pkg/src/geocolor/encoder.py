"""Shared point-wise MLP backbone, projection head and swapped reconstruction decoders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import affine, affine_backward, init_affine

ACTIVATIONS = ("relu", "identity")


@dataclass
class EncoderParams:
    """One copy of the backbone weights. Both branches read this same object."""

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("encoder needs at least one layer and one bias per layer")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"layer widths do not chain: {a.shape} -> {b.shape}")

    @classmethod
    def init(cls, widths, rng, activation="relu") -> "EncoderParams":
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w, b = init_affine(rng, fan_in, fan_out)
            ws.append(w)
            bs.append(b)
        return cls(ws, bs, activation)

    @property
    def in_width(self):
        return self.weights[0].shape[0]

    @property
    def out_width(self):
        return self.weights[-1].shape[1]


@dataclass
class EncoderCache:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)


def encode(e: np.ndarray, params: EncoderParams, return_cache: bool = False):
    """Forward pass. ReLU follows every layer except the last, whose output is the feature."""
    if e.shape[-1] != params.in_width:
        raise ValueError(f"input width {e.shape[-1]} != encoder width {params.in_width}")
    cache = EncoderCache()
    h = e
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        a = affine(h, w, b)
        cache.pre.append(a)
        if i < last and params.activation == "relu":
            h = np.maximum(a, 0.0)
        else:
            h = a
    return (h, cache) if return_cache else h


def encode_backward(grad_f, cache: EncoderCache, params: EncoderParams):
    """Returns (d_input, dweights, dbiases). ReLU subgradient at exactly 0 is 0."""
    dws = [None] * len(params.weights)
    dbs = [None] * len(params.weights)
    g = grad_f
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i < last and params.activation == "relu":
            g = g * (cache.pre[i] > 0)
        g, dws[i], dbs[i] = affine_backward(g, cache.inputs[i], params.weights[i])
    return g, dws, dbs


@dataclass
class ProjectionHead:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, d_in, d_out, rng):
        return cls(*init_affine(rng, d_in, d_out))


def l2_normalize(h: np.ndarray):
    """Row-wise unit scaling; an exactly-zero row stays zero. Returns (z, norms)."""
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return h / safe, norms


def l2_normalize_backward(grad_z, z, norms):
    safe = np.where(norms > 0, norms, 1.0)
    g = (grad_z - z * np.sum(z * grad_z, axis=1, keepdims=True)) / safe
    return np.where(norms > 0, g, 0.0)


def project(f, head: ProjectionHead):
    """Affine projection followed by l2 normalization. Returns (z, h, norms)."""
    h = affine(f, head.W, head.b)
    z, norms = l2_normalize(h)
    return z, h, norms


def project_backward(grad_z, f, z, norms, head: ProjectionHead):
    dh = l2_normalize_backward(grad_z, z, norms)
    df, dW, db = affine_backward(dh, f, head.W)
    return df, dW, db


@dataclass
class Decoders:
    """``color_W`` maps geometry features to colours; ``geo_W`` maps colour features to coordinates."""

    geo_W: np.ndarray
    geo_b: np.ndarray
    color_W: np.ndarray
    color_b: np.ndarray

    @classmethod
    def init(cls, d_feat, rng):
        gw, gb = init_affine(rng, d_feat, 3)
        cw, cb = init_affine(rng, d_feat, 3)
        return cls(gw, gb, cw, cb)


def decode(f_geo, f_color, decoders: Decoders):
    """Swapped reconstruction: returns (p_hat_geo from f_color, p_hat_color from f_geo)."""
    p_hat_geo = affine(f_color, decoders.geo_W, decoders.geo_b)
    p_hat_color = affine(f_geo, decoders.color_W, decoders.color_b)
    return p_hat_geo, p_hat_color
