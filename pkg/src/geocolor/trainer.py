"""Pre-training loop: batch objective, AdamW updates, cosine schedule, logs and gradcheck."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .losses import (
    LossWeights,
    ObjectSelection,
    object_contrast_loss,
    point_contrast_loss,
    point_reconstruct_loss,
    select_objects,
    swapped_prediction_loss,
    total_loss,
    usage_entropy,
)
from .model import (
    Checkpoint,
    ModelConfig,
    ModelParams,
    backward_pair,
    forward_pair,
    save_checkpoint,
    zero_grads,
)
from .scene import AugmentParams, LabeledPointCloud, augment, list_cloud_files, load_cloud, normalize_scene

log = logging.getLogger(__name__)

TERMS = ("L_pc", "L_pr", "L_clu", "L_oc")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float, step: int):
        self.term = term
        super().__init__(f"non-finite loss term {term} = {value} at step {step}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    # model
    d_emb: int = 32
    hidden: int = 64
    depth: int = 3
    d_feat: int = 32
    d_proj: int = 16
    num_prototypes: int = 20
    activation: str = "relu"
    # objective
    alpha: float = 100.0
    beta: float = 100.0
    gamma: float = 1.0
    tau_contrast: float = 0.4
    tau_cluster: float = 0.1
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3
    threshold_scale: float = 2.0
    contrast_samples: int = 1024
    contrast_reduction: str = "mean"
    object_features: str = "backbone"
    target_mode: str = "sinkhorn"
    # optimizer
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # augmentation
    max_rotation_z: float = 0.0
    jitter_sd: float = 0.0
    color_jitter_sd: float = 0.0
    flip_prob: float = 0.0

    def __post_init__(self):
        positive = ("batch_size", "d_emb", "hidden", "depth", "d_feat", "d_proj",
                    "num_prototypes", "tau_contrast", "tau_cluster", "sinkhorn_eps",
                    "contrast_samples")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("learning_rate", "weight_decay", "epochs", "alpha", "beta", "gamma",
                     "sinkhorn_iters", "threshold_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.contrast_reduction not in ("sum", "mean"):
            raise ValueError("contrast_reduction must be 'sum' or 'mean'")
        if self.object_features not in ("projection", "backbone"):
            raise ValueError("object_features must be 'projection' or 'backbone'")
        if self.target_mode not in ("sinkhorn", "softmax"):
            raise ValueError("target_mode must be 'sinkhorn' or 'softmax'")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d_emb, self.hidden, self.depth, self.d_feat, self.d_proj,
                           self.num_prototypes, self.activation)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def augment_params(self) -> AugmentParams:
        return AugmentParams(self.max_rotation_z, self.jitter_sd, self.color_jitter_sd, self.flip_prob)


def parse_config_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = asdict(base or TrainConfig())
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kind = types[key]
        try:
            values[key] = val if kind == "str" else (int(val) if kind == "int" else float(val))
        except ValueError:
            raise ValueError(f"config line {lineno}: bad value for {key}: {val!r}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def format_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(config).items())


def cosine_lr(lr0: float, t: int, total: int) -> float:
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        arrays = params.named_arrays()
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0)


def adamw_update(params: ModelParams, grads: dict, state: OptimizerState, lr: float,
                 weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place AdamW: decay is applied to the weights directly, not folded into the gradient."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.named_arrays().items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --- objective ---------------------------------------------------------------


@dataclass
class BatchAux:
    """Discrete and detached pieces of one objective evaluation; reusing it freezes them."""

    indices: list
    targets: tuple = None
    selection: ObjectSelection = None
    preds: object = None


@dataclass
class Objective:
    values: dict
    total: float
    grads: dict
    aux: BatchAux
    entropy: float


def _subsample(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    if n <= m:
        return np.arange(n)
    return np.sort(rng.choice(n, size=m, replace=False))


def compute_objective(
    params: ModelParams,
    scenes: Sequence[tuple],
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    aux: Optional[BatchAux] = None,
    term_weights: Optional[tuple] = None,
    need_grads: bool = True,
) -> Objective:
    """All four losses over a batch of normalized scenes ``[(geo01, color01), ...]``.

    Point contrast runs per scene on a subsample of at most ``contrast_samples``
    points; clustering and object contrast use the concatenated subsamples;
    reconstruction uses every point. Passing ``aux`` from an earlier call reuses
    its subsample, Sinkhorn targets and object selection.
    ``term_weights`` weights (L_pc, L_pr, L_clu, L_oc) in the backward pass and
    defaults to (1, alpha, beta, gamma).
    """
    weights = config.loss_weights()
    if term_weights is None:
        term_weights = (1.0, weights.alpha, weights.beta, weights.gamma)
    S = len(scenes)
    if S == 0:
        raise ValueError("empty batch")
    fps = [forward_pair(g, c, params) for g, c in scenes]
    if aux is None:
        rng = rng or np.random.default_rng(0)
        aux = BatchAux([_subsample(rng, len(g), config.contrast_samples) for g, _ in scenes])
    idx = aux.indices

    pc_scale = 1.0 / S
    pc_val = 0.0
    d_zg = [np.zeros_like(fp.z_geo) for fp in fps]
    d_zc = [np.zeros_like(fp.z_color) for fp in fps]
    for s, fp in enumerate(fps):
        if len(idx[s]) < 2:
            continue
        per = 1.0 / len(idx[s]) if config.contrast_reduction == "mean" else 1.0
        v, g = point_contrast_loss(fp.z_geo[idx[s]], fp.z_color[idx[s]], config.tau_contrast)
        pc_val += pc_scale * per * v
        d_zg[s][idx[s]] += term_weights[0] * pc_scale * per * g["z_geo"]
        d_zc[s][idx[s]] += term_weights[0] * pc_scale * per * g["z_color"]

    pr_val = 0.0
    d_pg, d_pcol = [], []
    for s, fp in enumerate(fps):
        geo01, color01 = scenes[s]
        v, g = point_reconstruct_loss(fp.p_hat_geo, fp.p_hat_color, geo01, color01)
        pr_val += v / S
        d_pg.append(term_weights[1] / S * g["p_hat_geo"])
        d_pcol.append(term_weights[1] / S * g["p_hat_color"])

    zg = np.concatenate([fp.z_geo[i] for fp, i in zip(fps, idx)])
    zc = np.concatenate([fp.z_color[i] for fp, i in zip(fps, idx)])
    clu_val, g_clu, preds = swapped_prediction_loss(
        zg, zc, params.prototypes, config.tau_cluster, config.sinkhorn_eps,
        config.sinkhorn_iters, targets=aux.targets, target_mode=config.target_mode,
    )
    if aux.targets is None:
        aux.targets = (preds.Q_geo, preds.Q_color)
    if aux.selection is None:
        aux.selection = select_objects(preds, config.threshold_scale)
    aux.preds = preds
    backbone = config.object_features == "backbone"
    if backbone:
        fg = np.concatenate([fp.f_geo[i] for fp, i in zip(fps, idx)])
        fc = np.concatenate([fp.f_color[i] for fp, i in zip(fps, idx)])
        oc_val, g_oc = object_contrast_loss(fg, fc, selection=aux.selection, tau=config.tau_contrast)
    else:
        oc_val, g_oc = object_contrast_loss(zg, zc, selection=aux.selection, tau=config.tau_contrast)

    values = {"L_pc": pc_val, "L_pr": pr_val, "L_clu": clu_val, "L_oc": oc_val}
    total = total_loss((pc_val, pr_val, clu_val, oc_val), weights)
    grads = None
    if need_grads:
        grads = zero_grads(params)
        grads["prototypes"] += term_weights[2] * g_clu["prototypes"]
        gz_geo = term_weights[2] * g_clu["z_geo"]
        gz_color = term_weights[2] * g_clu["z_color"]
        if not backbone:
            gz_geo = gz_geo + term_weights[3] * g_oc["z_geo"]
            gz_color = gz_color + term_weights[3] * g_oc["z_color"]
        offset = 0
        for s, fp in enumerate(fps):
            n = len(idx[s])
            d_zg[s][idx[s]] += gz_geo[offset:offset + n]
            d_zc[s][idx[s]] += gz_color[offset:offset + n]
            d_fg = d_fc = None
            if backbone:
                d_fg = np.zeros_like(fp.f_geo)
                d_fc = np.zeros_like(fp.f_color)
                d_fg[idx[s]] += term_weights[3] * g_oc["z_geo"][offset:offset + n]
                d_fc[idx[s]] += term_weights[3] * g_oc["z_color"][offset:offset + n]
            offset += n
            backward_pair(fp, params, grads, d_zg[s], d_zc[s], d_pg[s], d_pcol[s],
                          d_f_geo=d_fg, d_f_color=d_fc)
    return Objective(values, total, grads, aux, usage_entropy(preds))


# --- training ----------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    lr: float
    L_pc: float
    L_pr: float
    L_clu: float
    L_oc: float
    total: float
    entropy: float


LOG_COLUMNS = tuple(f.name for f in fields(StepRecord))


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: StepRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("TrainLog steps must increase")
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([repr(getattr(r, c)) for c in LOG_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != LOG_COLUMNS:
            raise ValueError(f"line 1: expected header {','.join(LOG_COLUMNS)}")
        out = cls()
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != len(LOG_COLUMNS):
                raise ValueError(f"line {lineno}: expected {len(LOG_COLUMNS)} fields, got {len(row)}")
            try:
                rec = StepRecord(int(row[0]), *(float(x) for x in row[1:]))
            except ValueError:
                raise ValueError(f"line {lineno}: malformed number") from None
            out.append(rec)
        return out


def prepare_batch(clouds: Sequence[LabeledPointCloud], config: TrainConfig, rng: np.random.Generator):
    aug = config.augment_params()
    identity = aug == AugmentParams()
    out = []
    for cloud in clouds:
        if not identity:
            cloud = augment(cloud, aug, int(rng.integers(2**31)))
        out.append(normalize_scene(cloud))
    return out


def train_step(params: ModelParams, opt: OptimizerState, batch: Sequence[LabeledPointCloud],
               config: TrainConfig, lr: float, step: int):
    """One AdamW step on a batch of scenes, then prototype renormalization. Updates in place."""
    if not batch:
        raise ValueError("empty batch")
    rng = np.random.default_rng([config.seed, step])
    scenes = prepare_batch(batch, config, rng)
    obj = compute_objective(params, scenes, config, rng)
    for term, v in obj.values.items():
        if not np.isfinite(v):
            raise NonFiniteLossError(term, v, step)
    adamw_update(params, obj.grads, opt, lr, config.weight_decay,
                 config.beta1, config.beta2, config.adam_eps)
    params.normalize_prototypes()
    rec = StepRecord(step, lr, obj.values["L_pc"], obj.values["L_pr"], obj.values["L_clu"],
                     obj.values["L_oc"], obj.total, obj.entropy)
    return params, opt, rec


def steps_per_epoch(n_scenes: int, batch_size: int) -> int:
    return math.ceil(n_scenes / batch_size)


def train(config: TrainConfig, clouds: Sequence[LabeledPointCloud], params: Optional[ModelParams] = None):
    """Run the full schedule in memory. Returns (params, optimizer state, TrainLog)."""
    if not clouds:
        raise ValueError("no training scenes")
    if params is None:
        params = ModelParams.init(config.model_config(), config.seed)
    opt = OptimizerState.zeros(params)
    per_epoch = steps_per_epoch(len(clouds), config.batch_size)
    total_steps = config.epochs * per_epoch
    trainlog = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 1_000_003, epoch]).permutation(len(clouds))
        for b in range(per_epoch):
            batch = [clouds[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            lr = cosine_lr(config.learning_rate, step, total_steps)
            _, _, rec = train_step(params, opt, batch, config, lr, step)
            trainlog.append(rec)
            step += 1
        last = trainlog.records[-1]
        log.info("epoch %d total %.4f pc %.4f pr %.5f clu %.5f oc %.4f H %.3f", epoch,
                 last.total, last.L_pc, last.L_pr, last.L_clu, last.L_oc, last.entropy)
    return params, opt, trainlog


def load_dataset(dataset_dir) -> list:
    if not os.path.isdir(dataset_dir):
        raise FileNotFoundError(f"dataset directory {dataset_dir} does not exist")
    files = list_cloud_files(dataset_dir)
    if not files:
        raise FileNotFoundError(f"no cloud files in {dataset_dir}")
    return [load_cloud(f) for f in files]


def log_path_for(checkpoint_path) -> str:
    root, _ = os.path.splitext(os.fspath(checkpoint_path))
    return root + ".log.csv"


def pretrain(config: TrainConfig, dataset_dir, checkpoint_path) -> str:
    """Train on every cloud file in ``dataset_dir``; writes the checkpoint and its TrainLog CSV."""
    clouds = load_dataset(dataset_dir)
    params, opt, trainlog = train(config, clouds)
    text = trainlog.to_csv()
    ckpt = Checkpoint(params, opt.m, opt.v, opt.step, asdict(config), text)
    save_checkpoint(checkpoint_path, ckpt)
    with open(log_path_for(checkpoint_path), "w") as fh:
        fh.write(text)
    return os.fspath(checkpoint_path)


# --- gradient check ---------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: dict
    notes: dict
    tolerance: float = 1e-4

    @property
    def failures(self) -> list:
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def format(self) -> str:
        lines = []
        for k, v in self.max_rel_error.items():
            status = "ok" if v < self.tolerance else "FAIL"
            note = f"  ({self.notes[k]})" if k in self.notes else ""
            lines.append(f"{k:8s} max_rel_err={v:.3e} {status}{note}")
        return "\n".join(lines)


def gradcheck_config(num_prototypes: int = 4) -> TrainConfig:
    return TrainConfig(d_emb=6, hidden=8, depth=3, d_feat=7, d_proj=5,
                       num_prototypes=num_prototypes, threshold_scale=0.0, contrast_samples=5)


def _tiny_batch(rng, n_scenes=2, n_points=6):
    scenes = []
    for _ in range(n_scenes):
        scenes.append((rng.uniform(0, 1, size=(n_points, 3)), rng.uniform(0, 1, size=(n_points, 3))))
    return scenes


def _min_abs_preact(params, scenes):
    worst = np.inf
    for g, c in scenes:
        fp = forward_pair(g, c, params)
        for cache in (fp.cache_geo, fp.cache_color):
            for a in cache.pre[:-1]:
                worst = min(worst, np.abs(a).min())
    return worst


def gradcheck(config: Optional[TrainConfig] = None, seed: int = 0, step: float = 1e-5,
              corrupt: Optional[str] = None) -> GradcheckReport:
    """Central finite differences of every loss term w.r.t. every parameter.

    Runs on a tiny random model and batch in float64. Sinkhorn targets, the
    contrast subsample and object selection are frozen from the base point.
    ``corrupt`` names a term whose analytic gradient is deliberately perturbed.
    """
    config = config or gradcheck_config()
    rng = np.random.default_rng(seed)
    # redraw until no ReLU pre-activation sits near its kink and, when K allows,
    # at least two pseudo-labels are shared so the object loss is non-trivial
    for _ in range(200):
        params = ModelParams.init(config.model_config(), int(rng.integers(2**31)))
        scenes = _tiny_batch(rng)
        aux = compute_objective(params, scenes, config, np.random.default_rng(seed),
                                need_grads=False).aux
        smooth = config.activation != "relu" or _min_abs_preact(params, scenes) > 1e-3
        if smooth and (config.num_prototypes < 2 or len(aux.selection.labels) >= 2):
            break
    notes = {}
    K = config.num_prototypes
    if K == 1:
        notes["L_clu"] = "degenerate K=1: swapped prediction is identically 0"
    if len(aux.selection.labels) < 2:
        notes["L_oc"] = "fewer than 2 shared pseudo-labels: fallback value 0"

    arrays = params.named_arrays()
    result = {}
    for t, term in enumerate(TERMS):
        tw = tuple(1.0 if i == t else 0.0 for i in range(4))
        analytic = compute_objective(params, scenes, config, aux=aux, term_weights=tw).grads
        if corrupt == term:
            for g in analytic.values():
                g += 1e-2 * (1.0 + np.abs(g))
        worst = 0.0
        for name, arr in arrays.items():
            numeric = np.zeros_like(arr)
            for ix in np.ndindex(arr.shape):
                old = arr[ix]
                arr[ix] = old + step
                up = compute_objective(params, scenes, config, aux=aux, need_grads=False).values[term]
                arr[ix] = old - step
                down = compute_objective(params, scenes, config, aux=aux, need_grads=False).values[term]
                arr[ix] = old
                numeric[ix] = (up - down) / (2 * step)
            worst = max(worst, relative_error(analytic[name], numeric))
        result[term] = worst
    return GradcheckReport(result, notes)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """||a - b|| / max(||a||, ||b||); both below ``floor`` counts as agreement."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if max(na, nb) < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / max(na, nb))
