"""Parameter bundle, full Siamese forward/backward pass and checkpoint files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import embedding as emb
from .embedding import EmbeddingParams, affine_backward
from .encoder import (
    Decoders,
    EncoderParams,
    ProjectionHead,
    decode,
    encode,
    encode_backward,
    project,
    project_backward,
)

CHECKPOINT_VERSION = "geocolor-ckpt-1"


@dataclass
class ModelConfig:
    d_emb: int = 32
    hidden: int = 64
    depth: int = 3
    d_feat: int = 32
    d_proj: int = 16
    num_prototypes: int = 20
    activation: str = "relu"

    def encoder_widths(self):
        return [self.d_emb] + [self.hidden] * (self.depth - 1) + [self.d_feat]


@dataclass
class ModelParams:
    embedding: EmbeddingParams
    encoder: EncoderParams
    head: ProjectionHead
    decoders: Decoders
    prototypes: np.ndarray  # d_proj x K, unit-norm columns after every step

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        params = cls(
            EmbeddingParams.init(config.d_emb, rng),
            EncoderParams.init(config.encoder_widths(), rng, config.activation),
            ProjectionHead.init(config.d_feat, config.d_proj, rng),
            Decoders.init(config.d_feat, rng),
            rng.normal(size=(config.d_proj, config.num_prototypes)),
        )
        params.normalize_prototypes()
        return params

    def normalize_prototypes(self):
        norms = np.linalg.norm(self.prototypes, axis=0, keepdims=True)
        self.prototypes /= np.where(norms > 0, norms, 1.0)

    @property
    def num_prototypes(self):
        return self.prototypes.shape[1]

    def named_arrays(self) -> dict:
        """Name -> array reference (in-place edits change the model)."""
        out = {f"emb.{k}": v for k, v in vars(self.embedding).items()}
        for i, (w, b) in enumerate(zip(self.encoder.weights, self.encoder.biases)):
            out[f"enc.W{i}"] = w
            out[f"enc.b{i}"] = b
        out["head.W"] = self.head.W
        out["head.b"] = self.head.b
        for k, v in vars(self.decoders).items():
            out[f"dec.{k}"] = v
        out["prototypes"] = self.prototypes
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, activation: str = "relu") -> "ModelParams":
        a = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        depth = sum(1 for k in a if k.startswith("enc.W"))
        return cls(
            EmbeddingParams(**{k[4:]: v for k, v in a.items() if k.startswith("emb.")}),
            EncoderParams(
                [a[f"enc.W{i}"] for i in range(depth)],
                [a[f"enc.b{i}"] for i in range(depth)],
                activation,
            ),
            ProjectionHead(a["head.W"], a["head.b"]),
            Decoders(**{k[4:]: v for k, v in a.items() if k.startswith("dec.")}),
            a["prototypes"],
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.named_arrays(), self.encoder.activation)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.named_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class FeaturePair:
    f_geo: np.ndarray
    f_color: np.ndarray
    z_geo: np.ndarray
    z_color: np.ndarray
    p_hat_geo: np.ndarray
    p_hat_color: np.ndarray
    # retained for the backward pass
    geo01: np.ndarray = field(repr=False, default=None)
    color01: np.ndarray = field(repr=False, default=None)
    cache_geo: object = field(repr=False, default=None)
    cache_color: object = field(repr=False, default=None)
    norms_geo: np.ndarray = field(repr=False, default=None)
    norms_color: np.ndarray = field(repr=False, default=None)


def forward_pair(geo01: np.ndarray, color01: np.ndarray, params: ModelParams) -> FeaturePair:
    e_geo = emb.embed_geometry(geo01, params.embedding)
    e_color = emb.embed_color(color01, params.embedding) + emb.embed_position(geo01, params.embedding)
    f_geo, cache_geo = encode(e_geo, params.encoder, return_cache=True)
    f_color, cache_color = encode(e_color, params.encoder, return_cache=True)
    z_geo, _, n_geo = project(f_geo, params.head)
    z_color, _, n_color = project(f_color, params.head)
    p_hat_geo, p_hat_color = decode(f_geo, f_color, params.decoders)
    return FeaturePair(
        f_geo, f_color, z_geo, z_color, p_hat_geo, p_hat_color,
        geo01, color01, cache_geo, cache_color, n_geo, n_color,
    )


def zero_grads(params: ModelParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.named_arrays().items()}


def backward_pair(
    fp: FeaturePair,
    params: ModelParams,
    grads: dict,
    d_z_geo=None,
    d_z_color=None,
    d_p_hat_geo=None,
    d_p_hat_color=None,
    return_input_grads: bool = False,
    d_f_geo=None,
    d_f_color=None,
):
    """Accumulate parameter gradients into ``grads`` from output-side gradients.

    Any output gradient may be None (treated as zero). With
    ``return_input_grads`` the gradients w.r.t. ``geo01`` and ``color01`` are
    returned as well.
    """
    df_geo = np.zeros_like(fp.f_geo) if d_f_geo is None else np.array(d_f_geo, dtype=float)
    df_color = np.zeros_like(fp.f_color) if d_f_color is None else np.array(d_f_color, dtype=float)
    if d_z_geo is not None:
        df, dW, db = project_backward(d_z_geo, fp.f_geo, fp.z_geo, fp.norms_geo, params.head)
        df_geo += df
        grads["head.W"] += dW
        grads["head.b"] += db
    if d_z_color is not None:
        df, dW, db = project_backward(d_z_color, fp.f_color, fp.z_color, fp.norms_color, params.head)
        df_color += df
        grads["head.W"] += dW
        grads["head.b"] += db
    dec = params.decoders
    if d_p_hat_geo is not None:
        df, dW, db = affine_backward(d_p_hat_geo, fp.f_color, dec.geo_W)
        df_color += df
        grads["dec.geo_W"] += dW
        grads["dec.geo_b"] += db
    if d_p_hat_color is not None:
        df, dW, db = affine_backward(d_p_hat_color, fp.f_geo, dec.color_W)
        df_geo += df
        grads["dec.color_W"] += dW
        grads["dec.color_b"] += db

    de_geo, dws, dbs = encode_backward(df_geo, fp.cache_geo, params.encoder)
    de_color, dws2, dbs2 = encode_backward(df_color, fp.cache_color, params.encoder)
    for i in range(len(dws)):
        grads[f"enc.W{i}"] += dws[i] + dws2[i]
        grads[f"enc.b{i}"] += dbs[i] + dbs2[i]

    d_geo01, g = emb.embed_geometry_backward(de_geo, fp.geo01, params.embedding)
    d_color01, g2 = emb.embed_color_backward(de_color, fp.color01, params.embedding)
    d_geo01_pos, g3 = emb.embed_position_backward(de_color, fp.geo01, params.embedding)
    for part in (g, g2, g3):
        for k, v in part.items():
            grads[f"emb.{k}"] += v
    if return_input_grads:
        return d_geo01 + d_geo01_pos, d_color01
    return None


# --- checkpoints -----------------------------------------------------------
#
# A checkpoint is an uncompressed .npz archive (float64 arrays keep every bit):
#   format_version      str, CHECKPOINT_VERSION
#   param/<name>        one entry per ModelParams.named_arrays() key
#   opt/m/<name>, opt/v/<name>, opt/step   optional AdamW state
#   config              JSON of the training config (may be "{}")
#   log                 TrainLog CSV text (may be empty)


@dataclass
class Checkpoint:
    params: ModelParams
    opt_m: Optional[dict] = None
    opt_v: Optional[dict] = None
    opt_step: int = 0
    config: dict = field(default_factory=dict)
    log_csv: str = ""


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {"format_version": np.array(CHECKPOINT_VERSION)}
    for k, v in ckpt.params.named_arrays().items():
        arrays[f"param/{k}"] = v
    if ckpt.opt_m is not None:
        for k in ckpt.opt_m:
            arrays[f"opt/m/{k}"] = ckpt.opt_m[k]
            arrays[f"opt/v/{k}"] = ckpt.opt_v[k]
    arrays["opt/step"] = np.array(ckpt.opt_step, dtype=np.int64)
    arrays["config"] = np.array(json.dumps(ckpt.config, sort_keys=True))
    arrays["log"] = np.array(ckpt.log_csv)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        if "format_version" not in data.files or str(data["format_version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
        config = json.loads(str(data["config"]))
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        m = {k[len("opt/m/"):]: data[k] for k in data.files if k.startswith("opt/m/")}
        v = {k[len("opt/v/"):]: data[k] for k in data.files if k.startswith("opt/v/")}
        step = int(data["opt/step"])
        log_csv = str(data["log"])
    activation = config.get("activation", "relu")
    return Checkpoint(
        ModelParams.from_arrays(params, activation),
        m or None,
        v or None,
        step,
        config,
        log_csv,
    )
