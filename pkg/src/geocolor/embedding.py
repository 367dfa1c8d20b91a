"""Geometry, colour and weak positional embeddings.

Each embedding is an affine layer. The positional one reads a single scalar per
point, the squared Euclidean norm of its normalized coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def affine(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError(
            f"width mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def affine_backward(grad_out, x, weight):
    """Vector-Jacobian product of ``x @ weight + bias``: returns (dx, dweight, dbias)."""
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def init_affine(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


@dataclass
class EmbeddingParams:
    W_geo: np.ndarray
    b_geo: np.ndarray
    W_color: np.ndarray
    b_color: np.ndarray
    W_pos: np.ndarray
    b_pos: np.ndarray

    @property
    def width(self) -> int:
        return self.W_geo.shape[1]

    @classmethod
    def init(cls, width: int, rng: np.random.Generator) -> "EmbeddingParams":
        W_geo, b_geo = init_affine(rng, 3, width)
        W_color, b_color = init_affine(rng, 3, width)
        W_pos, b_pos = init_affine(rng, 1, width)
        return cls(W_geo, b_geo, W_color, b_color, W_pos, b_pos)


def squared_norm(geo01: np.ndarray) -> np.ndarray:
    return np.sum(geo01 * geo01, axis=1, keepdims=True)


def embed_geometry(geo01, params: EmbeddingParams):
    return affine(geo01, params.W_geo, params.b_geo)


def embed_color(color01, params: EmbeddingParams):
    return affine(color01, params.W_color, params.b_color)


def embed_position(geo01, params: EmbeddingParams):
    return affine(squared_norm(geo01), params.W_pos, params.b_pos)


def embed_geometry_backward(grad_out, geo01, params):
    dx, dW, db = affine_backward(grad_out, geo01, params.W_geo)
    return dx, {"W_geo": dW, "b_geo": db}


def embed_color_backward(grad_out, color01, params):
    dx, dW, db = affine_backward(grad_out, color01, params.W_color)
    return dx, {"W_color": dW, "b_color": db}


def embed_position_backward(grad_out, geo01, params):
    r = squared_norm(geo01)
    dr, dW, db = affine_backward(grad_out, r, params.W_pos)
    # d(|x|^2)/dx = 2x
    return 2.0 * geo01 * dr, {"W_pos": dW, "b_pos": db}
