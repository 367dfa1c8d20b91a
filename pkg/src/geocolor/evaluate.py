"""Unsupervised segmentation scoring and swapped-reconstruction export."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .losses import log_softmax
from .model import ModelParams, forward_pair
from .scene import LabeledPointCloud, normalize_scene, save_cloud
from .sinkhorn import cluster_scores


def predict(params: ModelParams, geo01, color01, tau: float = 0.1):
    """Per-branch cluster probabilities (P_geo, P_color) at temperature ``tau``."""
    fp = forward_pair(geo01, color01, params)
    p_geo = np.exp(log_softmax(cluster_scores(fp.z_geo, params.prototypes) / tau))
    p_color = np.exp(log_softmax(cluster_scores(fp.z_color, params.prototypes) / tau))
    return p_geo, p_color, fp


def fuse_pseudo_labels(p_geo: np.ndarray, p_color: np.ndarray) -> np.ndarray:
    """argmax of the summed branch probabilities; ties go to the smaller index."""
    if p_geo.shape != p_color.shape:
        raise ValueError(f"shape mismatch {p_geo.shape} vs {p_color.shape}")
    return np.argmax(p_geo + p_color, axis=1)


def confusion_matrix(pseudo: np.ndarray, gt: np.ndarray, k_pred: int, k_gt: int) -> np.ndarray:
    """Counts indexed [pseudo_label, gt_label]."""
    pseudo = np.asarray(pseudo, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pseudo.shape != gt.shape:
        raise ValueError("length mismatch between predictions and ground truth")
    return np.bincount(pseudo * k_gt + gt, minlength=k_pred * k_gt).reshape(k_pred, k_gt)


def _hungarian_min(cost):
    """Square min-cost assignment with potentials (O(n^3)); exact for Python ints.

    Returns ``col_of_row``.
    """
    n = len(cost)
    INF = None  # sentinel: larger than anything
    u = [0] * (n + 1)
    v = [0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if minv[j] is INF or cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if delta is INF or minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian_align(cm: np.ndarray) -> dict:
    """Injective map pseudo label -> gt label maximizing the total matched count.

    Rectangular matrices are padded with zero-count dummies. Among optimal
    assignments the lexicographically smallest (row by row) is returned, which
    is enforced exactly by a base-n tie-break term added to integer costs.
    """
    cm = np.asarray(cm)
    k_pred, k_gt = cm.shape
    if k_pred < 1 or k_gt < 1:
        raise ValueError("confusion matrix must be at least 1 x 1")
    if not np.issubdtype(cm.dtype, np.integer):
        raise ValueError("confusion matrix must hold integer counts")
    n = max(k_pred, k_gt)
    big = n ** n
    cost = []
    for i in range(n):
        place = n ** (n - 1 - i)
        row = []
        for j in range(n):
            count = int(cm[i, j]) if i < k_pred and j < k_gt else 0
            row.append(-count * big + j * place)
        cost.append(row)
    cols = _hungarian_min(cost)
    return {i: cols[i] for i in range(k_pred) if cols[i] < k_gt}


def matched_count(cm: np.ndarray, mapping: dict) -> int:
    return int(sum(cm[i, j] for i, j in mapping.items()))


@dataclass
class SegMetrics:
    confusion: np.ndarray  # k_pred x k_gt counts
    mapping: dict
    per_class_iou: np.ndarray  # nan for classes absent from ground truth
    miou: float

    @property
    def num_points(self) -> int:
        return int(self.confusion.sum())


def apply_mapping(pseudo: np.ndarray, mapping: dict) -> np.ndarray:
    """Map pseudo labels to gt labels; unmatched pseudo labels become -1."""
    pseudo = np.asarray(pseudo, dtype=np.int64)
    size = max(max(mapping, default=-1), int(pseudo.max(initial=-1))) + 1
    lut = np.full(max(size, 1), -1, dtype=np.int64)
    for i, j in mapping.items():
        lut[i] = j
    return lut[pseudo]


def iou_from_labels(pred, gt, k_gt: int) -> np.ndarray:
    """Per-class IoU; ``pred`` may contain -1 (no class). Absent gt classes give nan."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("length mismatch between predictions and ground truth")
    out = np.full(k_gt, np.nan)
    for c in range(k_gt):
        in_gt = gt == c
        if not in_gt.any():
            continue
        in_pred = pred == c
        tp = np.count_nonzero(in_gt & in_pred)
        union = np.count_nonzero(in_gt | in_pred)
        out[c] = tp / union
    return out


def compute_miou(pred_labels, gt_labels, k_gt: int) -> SegMetrics:
    """mIoU of labels already expressed in ground-truth ids (identity mapping)."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("length mismatch between predictions and ground truth")
    if gt.size and (gt.min() < 0 or gt.max() >= k_gt):
        raise ValueError("ground-truth label out of range")
    iou = iou_from_labels(pred, gt, k_gt)
    valid = pred >= 0
    k_pred = max(k_gt, int(pred.max()) + 1 if pred.size else 0)
    cm = confusion_matrix(pred[valid], gt[valid], k_pred, k_gt)
    return SegMetrics(cm, {c: c for c in range(k_gt)}, iou, float(np.nanmean(iou)))


def metrics_from_confusion(cm: np.ndarray) -> SegMetrics:
    """Hungarian-align a pseudo x gt confusion matrix and score it."""
    mapping = hungarian_align(cm)
    k_gt = cm.shape[1]
    gt_count = cm.sum(axis=0)
    iou = np.full(k_gt, np.nan)
    pred_to_gt = {j: i for i, j in mapping.items()}
    for c in range(k_gt):
        if gt_count[c] == 0:
            continue
        i = pred_to_gt.get(c)
        if i is None:
            iou[c] = 0.0
            continue
        tp = cm[i, c]
        iou[c] = tp / (gt_count[c] + cm[i].sum() - tp)
    return SegMetrics(cm, mapping, iou, float(np.nanmean(iou)))


def permutation_band(pseudo, gt, k_pred: int, k_gt: int, draws: int = 1000, seed: int = 0):
    """Aligned mIoU of ``draws`` random shufflings of ``pseudo`` against ``gt``.

    Shuffling keeps the predicted label histogram but destroys any relation to
    the scene, so the resulting distribution is the chance level for this
    prediction. Returns the sorted array of mIoU values.
    """
    rng = np.random.default_rng(seed)
    pseudo = np.asarray(pseudo)
    out = np.empty(draws)
    for d in range(draws):
        cm = confusion_matrix(rng.permutation(pseudo), gt, k_pred, k_gt)
        out[d] = metrics_from_confusion(cm).miou
    return np.sort(out)


def unsup_segment(params: ModelParams, cloud: LabeledPointCloud, k_gt: Optional[int] = None,
                  tau: float = 0.1):
    """Fused pseudo labels for one cloud, plus metrics when the cloud has labels.

    Returns ``(pseudo_labels, SegMetrics or None)``. Parameters are only read.
    """
    geo01, color01 = normalize_scene(cloud)
    p_geo, p_color, _ = predict(params, geo01, color01, tau)
    pseudo = fuse_pseudo_labels(p_geo, p_color)
    if cloud.labels is None:
        return pseudo, None
    k_gt = k_gt or int(cloud.labels.max()) + 1
    cm = confusion_matrix(pseudo, cloud.labels, params.num_prototypes, k_gt)
    return pseudo, metrics_from_confusion(cm)


def evaluate_dataset(params: ModelParams, clouds: Sequence[LabeledPointCloud], k_gt: Optional[int] = None,
                     tau: float = 0.1):
    """Dataset-level metrics: one confusion matrix over all labeled clouds, aligned once.

    Returns ``(metrics or None, pseudo labels per cloud)``.
    """
    labeled = [c for c in clouds if c.labels is not None]
    if k_gt is None and labeled:
        k_gt = max(int(c.labels.max()) for c in labeled) + 1
    cm = None
    pseudos = []
    for cloud in clouds:
        pseudo, _ = unsup_segment(params, LabeledPointCloud(cloud.coords, cloud.colors, None, cloud.scene_id),
                                  tau=tau)
        pseudos.append(pseudo)
        if cloud.labels is None:
            continue
        part = confusion_matrix(pseudo, cloud.labels, params.num_prototypes, k_gt)
        cm = part if cm is None else cm + part
    if cm is None:
        return None, pseudos
    return metrics_from_confusion(cm), pseudos


def format_metrics(metrics: SegMetrics, extra: Optional[dict] = None) -> str:
    """Key-value block followed by a per-class table."""
    lines = [f"miou = {metrics.miou:.6f}", f"points = {metrics.num_points}",
             f"pseudo_classes = {metrics.confusion.shape[0]}",
             f"gt_classes = {metrics.confusion.shape[1]}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    mapping = " ".join(f"{i}->{j}" for i, j in sorted(metrics.mapping.items()))
    lines.append(f"mapping = {mapping}")
    lines.append("")
    lines.append(f"{'class':>5} {'iou':>9} {'gt_points':>9} {'pseudo':>6}")
    pred_of = {j: i for i, j in metrics.mapping.items()}
    gt_count = metrics.confusion.sum(axis=0)
    for c, v in enumerate(metrics.per_class_iou):
        iou = "absent" if np.isnan(v) else f"{v:.6f}"
        lines.append(f"{c:>5} {iou:>9} {gt_count[c]:>9} {pred_of.get(c, '-'):>6}")
    return "\n".join(lines) + "\n"


METRIC_CSV_COLUMNS = ("class", "iou", "gt_points", "pseudo_label", "tp")


def metrics_csv(metrics: SegMetrics) -> str:
    """Columns: class,iou,gt_points,pseudo_label,tp (iou empty when absent, pseudo_label -1 if unmatched)."""
    rows = [",".join(METRIC_CSV_COLUMNS)]
    pred_of = {j: i for i, j in metrics.mapping.items()}
    gt_count = metrics.confusion.sum(axis=0)
    for c, v in enumerate(metrics.per_class_iou):
        i = pred_of.get(c, -1)
        tp = int(metrics.confusion[i, c]) if i >= 0 else 0
        iou = "" if np.isnan(v) else f"{v:.6f}"
        rows.append(f"{c},{iou},{gt_count[c]},{i},{tp}")
    return "\n".join(rows) + "\n"


def reconstruct(params: ModelParams, cloud: LabeledPointCloud):
    """Swapped reconstructions and their MSE terms: (geo01, color01, p_hat_geo, p_hat_color, mse_geo, mse_color)."""
    geo01, color01 = normalize_scene(cloud)
    fp = forward_pair(geo01, color01, params)
    n = len(geo01)
    mse_geo = float(np.sum((fp.p_hat_geo - geo01) ** 2) / n)
    mse_color = float(np.sum((fp.p_hat_color - color01) ** 2) / n)
    return geo01, color01, fp.p_hat_geo, fp.p_hat_color, mse_geo, mse_color


def reconstruct_export(params: ModelParams, cloud: LabeledPointCloud, out_dir) -> dict:
    """Write the two swapped reconstructions of ``cloud`` plus an MSE summary.

    ``<id>.color_from_geo.pgcc`` keeps the normalized coordinates with predicted
    colours; ``<id>.geo_from_color.pgcc`` keeps the colours with predicted
    coordinates. Predicted colours are clipped to [0, 1] for the file; the
    reported MSEs use the unclipped predictions.
    """
    os.makedirs(out_dir, exist_ok=True)
    geo01, color01, p_geo, p_color, mse_geo, mse_color = reconstruct(params, cloud)
    sid = cloud.scene_id or "scene"
    paths = {
        "color_from_geo": os.path.join(out_dir, f"{sid}.color_from_geo.pgcc"),
        "geo_from_color": os.path.join(out_dir, f"{sid}.geo_from_color.pgcc"),
        "summary": os.path.join(out_dir, f"{sid}.recon.txt"),
    }
    save_cloud(LabeledPointCloud(geo01, np.clip(p_color, 0.0, 1.0), cloud.labels, sid), paths["color_from_geo"])
    save_cloud(LabeledPointCloud(p_geo, color01, cloud.labels, sid), paths["geo_from_color"])
    with open(paths["summary"], "w") as fh:
        fh.write(f"scene={sid} mse_geo={mse_geo:.9g} mse_color={mse_color:.9g}\n")
    return {"paths": paths, "mse_geo": mse_geo, "mse_color": mse_color}
