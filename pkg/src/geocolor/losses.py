"""Point-level and object-level losses with analytic gradients.

Every loss returns ``(value, grads)`` where ``grads`` is a dict keyed by input
name. Gradients are exact for the forward computation as written; Sinkhorn
targets, argmax labels and confidence masks are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .encoder import l2_normalize, l2_normalize_backward
from .sinkhorn import cluster_scores, sinkhorn_assign


@dataclass(frozen=True)
class Temperatures:
    tau_contrast: float = 0.4
    tau_cluster: float = 0.1

    def __post_init__(self):
        if self.tau_contrast <= 0 or self.tau_cluster <= 0:
            raise ValueError("temperatures must be positive")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 100.0  # reconstruction
    beta: float = 100.0  # swapped prediction
    gamma: float = 1.0  # object contrast

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    point_contrast: float = 0.0
    reconstruct: float = 0.0
    cluster: float = 0.0
    object_contrast: float = 0.0
    total: float = 0.0

    def as_tuple(self):
        return (self.point_contrast, self.reconstruct, self.cluster, self.object_contrast)


def total_loss(parts, weights: LossWeights = LossWeights()) -> float:
    """Weighted sum; ``parts`` is a LossReport or a (pc, pr, clu, oc) sequence."""
    if isinstance(parts, LossReport):
        parts = parts.as_tuple()
    pc, pr, clu, oc = parts
    return pc + weights.alpha * pr + weights.beta * clu + weights.gamma * oc


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def info_nce(anchors: np.ndarray, candidates: np.ndarray, tau: float):
    """Summed InfoNCE with row i of ``candidates`` as the positive for anchor i."""
    logits = anchors @ candidates.T / tau
    logp = log_softmax(logits)
    value = -np.trace(logp)
    d_logits = np.exp(logp)
    d_logits[np.diag_indices_from(d_logits)] -= 1.0
    d_logits /= tau
    return float(value), d_logits @ candidates, d_logits.T @ anchors


def point_contrast_loss(z_geo, z_color, tau: float = 0.4):
    """Geometry rows are anchors, colour rows are candidates; summed over points."""
    if z_geo.shape != z_color.shape:
        raise ValueError("z_geo and z_color must have the same shape")
    if len(z_geo) < 2:
        raise ValueError("point contrast needs at least 2 points (no negatives otherwise)")
    value, g_geo, g_color = info_nce(z_geo, z_color, tau)
    return value, {"z_geo": g_geo, "z_color": g_color}


def point_reconstruct_loss(p_hat_geo, p_hat_color, geo01, color01):
    for a, b in ((p_hat_geo, geo01), (p_hat_color, color01)):
        if a.shape != b.shape:
            raise ValueError(f"prediction shape {a.shape} != target shape {b.shape}")
    n = len(geo01)
    r_geo = p_hat_geo - geo01
    r_color = p_hat_color - color01
    value = (np.sum(r_geo * r_geo) + np.sum(r_color * r_color)) / n
    return float(value), {"p_hat_geo": 2.0 / n * r_geo, "p_hat_color": 2.0 / n * r_color}


@dataclass
class PredictionPair:
    P_geo: np.ndarray
    P_color: np.ndarray
    Q_geo: np.ndarray
    Q_color: np.ndarray

    @property
    def conf_geo(self):
        return self.P_geo.max(axis=1)

    @property
    def conf_color(self):
        return self.P_color.max(axis=1)

    @property
    def label_geo(self):
        return self.P_geo.argmax(axis=1)

    @property
    def label_color(self):
        return self.P_color.argmax(axis=1)


def swapped_prediction_loss(
    z_geo,
    z_color,
    prototypes,
    tau: float = 0.1,
    eps: float = 0.05,
    iters: int = 3,
    targets: Optional[tuple] = None,
    target_mode: str = "sinkhorn",
):
    """Each branch's softmax prediction is scored against the other branch's targets.

    ``value = -0.5 * mean(Q_geo * log P_color + Q_color * log P_geo)`` with the
    mean taken over all B*K entries. ``targets=(Q_geo, Q_color)`` overrides the
    computed targets (gradient checks freeze them this way). ``target_mode``
    ``"softmax"`` swaps Sinkhorn for the branch's own detached softmax, a naive
    baseline with no equal-partition constraint.

    Returns ``(value, grads, preds)``.
    """
    s_geo = cluster_scores(z_geo, prototypes)
    s_color = cluster_scores(z_color, prototypes)
    logp_geo = log_softmax(s_geo / tau)
    logp_color = log_softmax(s_color / tau)
    p_geo, p_color = np.exp(logp_geo), np.exp(logp_color)
    if targets is not None:
        q_geo, q_color = targets
    elif target_mode == "sinkhorn":
        q_geo = sinkhorn_assign(s_geo, eps, iters)
        q_color = sinkhorn_assign(s_color, eps, iters)
    elif target_mode == "softmax":
        q_geo, q_color = p_geo.copy(), p_color.copy()
    else:
        raise ValueError(f"unknown target_mode {target_mode!r}")
    B, K = s_geo.shape
    value = -0.5 * np.mean(q_geo * logp_color + q_color * logp_geo)
    # d/ds of -sum(q * log softmax(s / tau)) = (rowsum(q) * p - q) / tau
    scale = 0.5 / (B * K * tau)
    ds_color = scale * (q_geo.sum(axis=1, keepdims=True) * p_color - q_geo)
    ds_geo = scale * (q_color.sum(axis=1, keepdims=True) * p_geo - q_color)
    grads = {
        "z_geo": ds_geo @ prototypes.T,
        "z_color": ds_color @ prototypes.T,
        "prototypes": z_geo.T @ ds_geo + z_color.T @ ds_color,
    }
    return float(value), grads, PredictionPair(p_geo, p_color, q_geo, q_color)


@dataclass
class ObjectSelection:
    """Frozen discrete choices of the object-level loss: kept rows per label and branch."""

    labels: np.ndarray
    geo_rows: list
    color_rows: list


def select_objects(preds: PredictionPair, threshold_scale: float = 2.0) -> ObjectSelection:
    K = preds.P_geo.shape[1]
    thr = threshold_scale / K
    keep_geo = preds.conf_geo > thr
    keep_color = preds.conf_color > thr
    lab_geo, lab_color = preds.label_geo, preds.label_color
    shared = np.intersect1d(np.unique(lab_geo[keep_geo]), np.unique(lab_color[keep_color]))
    geo_rows = [np.flatnonzero(keep_geo & (lab_geo == k)) for k in shared]
    color_rows = [np.flatnonzero(keep_color & (lab_color == k)) for k in shared]
    return ObjectSelection(shared, geo_rows, color_rows)


def object_contrast_loss(
    z_geo,
    z_color,
    preds: Optional[PredictionPair] = None,
    threshold_scale: float = 2.0,
    tau: float = 0.4,
    selection: Optional[ObjectSelection] = None,
):
    """InfoNCE between normalized per-pseudo-label mean features of the two branches.

    Only rows whose max probability exceeds ``threshold_scale / K`` count, and
    only labels kept in both branches form pairs. With fewer than two such
    labels the loss is 0 with zero gradients.
    """
    if selection is None:
        if preds is None:
            raise ValueError("need predictions or a frozen selection")
        selection = select_objects(preds, threshold_scale)
    g_geo = np.zeros_like(z_geo)
    g_color = np.zeros_like(z_color)
    n_obj = len(selection.labels)
    if n_obj < 2:
        return 0.0, {"z_geo": g_geo, "z_color": g_color}
    m_geo = np.stack([z_geo[rows].mean(axis=0) for rows in selection.geo_rows])
    m_color = np.stack([z_color[rows].mean(axis=0) for rows in selection.color_rows])
    u_geo, n_geo = l2_normalize(m_geo)
    u_color, n_color = l2_normalize(m_color)
    value, du_geo, du_color = info_nce(u_geo, u_color, tau)
    dm_geo = l2_normalize_backward(du_geo, u_geo, n_geo)
    dm_color = l2_normalize_backward(du_color, u_color, n_color)
    for i in range(n_obj):
        rows = selection.geo_rows[i]
        g_geo[rows] += dm_geo[i] / len(rows)
        rows = selection.color_rows[i]
        g_color[rows] += dm_color[i] / len(rows)
    return value, {"z_geo": g_geo, "z_color": g_color}


def usage_entropy(preds: PredictionPair) -> float:
    """Entropy (nats) of the batch-averaged cluster distribution over both branches."""
    mean = 0.5 * (preds.P_geo.mean(axis=0) + preds.P_color.mean(axis=0))
    mean = mean[mean > 0]
    return float(-np.sum(mean * np.log(mean)))
