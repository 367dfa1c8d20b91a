"""Equal-partition soft assignments via Sinkhorn-Knopp scaling."""

from __future__ import annotations

import numpy as np


def cluster_scores(z: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Inner products of feature rows with prototype columns (B x K)."""
    if z.shape[1] != prototypes.shape[0]:
        raise ValueError(
            f"feature width {z.shape[1]} != prototype width {prototypes.shape[0]}"
        )
    return z @ prototypes


def sinkhorn_assign(scores: np.ndarray, eps: float = 0.05, iters: int = 3) -> np.ndarray:
    """Soft assignment Q (B x K) whose rows sum to one.

    Alternates ``iters`` rounds of prototype-marginal (1/K) and sample-marginal
    (1/B) scaling on exp(scores / eps), then renormalizes each sample. The global
    max of ``scores`` is subtracted first; any global constant cancels in the
    first mass normalization, so this changes nothing but overflow behaviour.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or min(scores.shape) < 1:
        raise ValueError(f"scores must be a nonempty B x K matrix, got {scores.shape}")
    B, K = scores.shape
    q = np.exp((scores - scores.max()) / eps).T  # K x B
    q /= q.sum()
    r = np.full(K, 1.0 / K)
    c = np.full(B, 1.0 / B)
    for _ in range(iters):
        u = q.sum(axis=1)
        q *= (r / u)[:, None]
        q *= (c / q.sum(axis=0))[None, :]
    return (q / q.sum(axis=0, keepdims=True)).T
