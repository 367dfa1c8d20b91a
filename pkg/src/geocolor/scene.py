"""Synthetic labeled scenes, point-cloud text I/O and augmentation.

Scenes are unions of primitive objects (box surface, sphere surface,
horizontal plane patch). Every class owns one shape template and one palette
colour, so classes are separable both by where points sit and by their colour.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

FORMAT_TAG = "pgcc"
FORMAT_VERSION = "v1"

SHAPES = ("box", "sphere", "plane")


class CloudFormatError(ValueError):
    """Raised for malformed point-cloud files. ``line`` is 1-based, or None."""

    def __init__(self, message: str, line: Optional[int] = None, path: str = ""):
        self.line = line
        self.path = path
        where = f"{path}:" if path else ""
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


@dataclass
class LabeledPointCloud:
    coords: np.ndarray
    colors: np.ndarray
    labels: Optional[np.ndarray] = None
    scene_id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be N x 3, got {self.coords.shape}")
        if self.colors.shape != self.coords.shape:
            raise ValueError(
                f"colors shape {self.colors.shape} != coords shape {self.coords.shape}"
            )
        if len(self.coords) < 1:
            raise ValueError("no points")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise ValueError("color channels must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.coords),):
                raise ValueError("labels must have one entry per point")
            if self.labels.min() < 0:
                raise ValueError("labels must be nonnegative")

    def __len__(self):
        return len(self.coords)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None


@dataclass(frozen=True)
class ShapeTemplate:
    """A primitive with a size range (half-extent) and an elevation range for its centre."""

    kind: str
    size_range: tuple[float, float]
    elevation_range: tuple[float, float]

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown shape {self.kind!r}; expected one of {SHAPES}")


def default_palette(num_classes: int) -> np.ndarray:
    """Evenly spaced hues; odd classes are darker so neighbours differ in value too."""
    rows = []
    for k in range(num_classes):
        value = 0.95 if k % 2 == 0 else 0.6
        rows.append(colorsys.hsv_to_rgb(k / num_classes, 0.85, value))
    return np.array(rows, dtype=np.float64)


def default_shapes(num_classes: int) -> tuple[ShapeTemplate, ...]:
    """Class k sits in its own elevation band, so height alone separates classes."""
    out = []
    for k in range(num_classes):
        kind = SHAPES[k % len(SHAPES)]
        size = 0.3 + 0.05 * (k % 4)
        elevation = 1.5 * k
        out.append(ShapeTemplate(kind, (size, size * 1.2), (elevation, elevation + 0.2)))
    return tuple(out)


@dataclass
class SceneSpec:
    num_objects: int = 8
    num_classes: int = 8
    points_per_object: int = 64
    geometry_noise_sd: float = 0.01
    color_noise_sd: float = 0.03
    room_size: float = 6.0
    class_palette: Optional[np.ndarray] = None
    class_shapes: Optional[tuple[ShapeTemplate, ...]] = None

    def __post_init__(self):
        if self.class_palette is None:
            self.class_palette = default_palette(self.num_classes)
        if self.class_shapes is None:
            self.class_shapes = default_shapes(self.num_classes)
        self.class_palette = np.asarray(self.class_palette, dtype=np.float64)

    def validate(self):
        if self.num_objects < 1:
            raise ValueError("num_objects must be positive")
        if self.points_per_object < 1:
            raise ValueError("points_per_object must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        for name in ("geometry_noise_sd", "color_noise_sd"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")
        if self.class_palette.shape != (self.num_classes, 3):
            raise ValueError("class_palette must have one RGB row per class")
        if self.class_palette.min() < 0 or self.class_palette.max() > 1:
            raise ValueError("class_palette entries must lie in [0, 1]")
        if len(self.class_shapes) != self.num_classes:
            raise ValueError("class_shapes must have one template per class")


@dataclass
class AugmentParams:
    max_rotation_z: float = 0.0
    jitter_sd: float = 0.0
    color_jitter_sd: float = 0.0
    flip_prob: float = 0.0

    def validate(self):
        for name in ("max_rotation_z", "jitter_sd", "color_jitter_sd", "flip_prob"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.flip_prob > 1:
            raise ValueError("flip_prob must be at most 1")


def _sample_shape(template: ShapeTemplate, n: int, rng: np.random.Generator) -> np.ndarray:
    half = rng.uniform(*template.size_range)
    if template.kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * half
    if template.kind == "plane":
        xy = rng.uniform(-half, half, size=(n, 2))
        return np.column_stack([xy, np.zeros(n)])
    # box surface: choose a face, then a uniform point on it
    pts = rng.uniform(-half, half, size=(n, 3))
    axis = rng.integers(0, 3, size=n)
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * half
    return pts


def generate_scene(spec: SceneSpec, seed: int) -> LabeledPointCloud:
    """Build one scene of ``num_objects * points_per_object`` points.

    Objects are contiguous in the output. Object ``i`` takes class
    ``perm[i % num_classes]`` for a seeded permutation ``perm``, so all classes
    appear once ``num_objects >= num_classes`` and adjacent objects never share
    a class when there are at least two classes.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    perm = rng.permutation(spec.num_classes)
    coords, colors, labels = [], [], []
    n = spec.points_per_object
    for i in range(spec.num_objects):
        k = int(perm[i % spec.num_classes])
        template = spec.class_shapes[k]
        centre = np.array([
            rng.uniform(0, spec.room_size),
            rng.uniform(0, spec.room_size),
            rng.uniform(*template.elevation_range),
        ])
        pts = _sample_shape(template, n, rng) + centre
        if spec.geometry_noise_sd > 0:
            pts = pts + rng.normal(scale=spec.geometry_noise_sd, size=pts.shape)
        col = np.repeat(spec.class_palette[k][None, :], n, axis=0)
        if spec.color_noise_sd > 0:
            col = np.clip(col + rng.normal(scale=spec.color_noise_sd, size=col.shape), 0.0, 1.0)
        coords.append(pts)
        colors.append(col)
        labels.append(np.full(n, k, dtype=np.int64))
    return LabeledPointCloud(
        np.concatenate(coords),
        np.concatenate(colors),
        np.concatenate(labels),
        scene_id=f"scene-{seed}",
    )


def normalize_scene(cloud: LabeledPointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis min-max scaling of coordinates into [0, 1]; a flat axis maps to 0.5."""
    lo = cloud.coords.min(axis=0)
    span = cloud.coords.max(axis=0) - lo
    flat = span == 0
    geo01 = (cloud.coords - lo) / np.where(flat, 1.0, span)
    geo01[:, flat] = 0.5
    return np.clip(geo01, 0.0, 1.0), cloud.colors.copy()


def augment(cloud: LabeledPointCloud, params: AugmentParams, seed: int) -> LabeledPointCloud:
    params.validate()
    rng = np.random.default_rng(seed)
    coords = cloud.coords.copy()
    colors = cloud.colors.copy()
    if params.max_rotation_z > 0:
        theta = rng.uniform(-params.max_rotation_z, params.max_rotation_z)
        coords = rotate_z(coords, theta)
    if params.flip_prob > 0 and rng.random() < params.flip_prob:
        coords[:, 0] = -coords[:, 0]
    if params.jitter_sd > 0:
        coords = coords + rng.normal(scale=params.jitter_sd, size=coords.shape)
    if params.color_jitter_sd > 0:
        colors = np.clip(colors + rng.normal(scale=params.color_jitter_sd, size=colors.shape), 0.0, 1.0)
    labels = None if cloud.labels is None else cloud.labels.copy()
    return LabeledPointCloud(coords, colors, labels, cloud.scene_id)


def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_z(coords: np.ndarray, theta: float) -> np.ndarray:
    """Rotate about the vertical axis by ``theta`` radians."""
    return coords @ rotation_z(theta).T


# --- text file format -------------------------------------------------------
#
#   pgcc v1 <N> <has_labels 0|1>
#   x y z r g b [label]        (N lines)
#
# '#' lines and blank lines are skipped anywhere. Reals use 9 significant digits.


def save_cloud(cloud: LabeledPointCloud, path) -> None:
    has = cloud.has_labels
    with open(path, "w") as fh:
        fh.write(f"# scene {cloud.scene_id}\n")
        fh.write(f"{FORMAT_TAG} {FORMAT_VERSION} {len(cloud)} {int(has)}\n")
        for i in range(len(cloud)):
            row = " ".join(f"{v:.9g}" for v in (*cloud.coords[i], *cloud.colors[i]))
            if has:
                row += f" {cloud.labels[i]}"
            fh.write(row + "\n")


def load_cloud(path, num_classes: Optional[int] = None) -> LabeledPointCloud:
    """Parse a cloud file. ``num_classes`` (when given) bounds the label range."""
    path = os.fspath(path)
    header = None
    rows = []
    scene_id = os.path.splitext(os.path.basename(path))[0]
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if header is None and line.startswith("# scene "):
                    scene_id = line[len("# scene "):].strip() or scene_id
                continue
            if header is None:
                header = _parse_header(line, lineno, path)
                ncols = 7 if header[1] else 6
                continue
            parts = line.split()
            if len(parts) != ncols:
                raise CloudFormatError(
                    f"expected {ncols} columns, found {len(parts)}", lineno, path
                )
            try:
                vals = [float(p) for p in parts[:6]]
                lab = int(parts[6]) if header[1] else None
            except ValueError as exc:
                raise CloudFormatError(f"bad number: {exc}", lineno, path) from None
            if lab is not None and (lab < 0 or (num_classes is not None and lab >= num_classes)):
                raise CloudFormatError(f"label {lab} out of range", lineno, path)
            if any(not np.isfinite(v) for v in vals):
                raise CloudFormatError("non-finite value", lineno, path)
            if any(v < 0 or v > 1 for v in vals[3:]):
                raise CloudFormatError("color outside [0, 1]", lineno, path)
            rows.append((vals, lab))
    if header is None:
        raise CloudFormatError("no points", None, path)
    n, has_labels = header
    if len(rows) != n:
        raise CloudFormatError(f"header declares {n} points, found {len(rows)}", None, path)
    if n == 0:
        raise CloudFormatError("no points", None, path)
    data = np.array([r[0] for r in rows], dtype=np.float64)
    labels = np.array([r[1] for r in rows], dtype=np.int64) if has_labels else None
    return LabeledPointCloud(data[:, :3], data[:, 3:], labels, scene_id)


def _parse_header(line: str, lineno: int, path: str) -> tuple[int, bool]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != FORMAT_TAG or parts[1] != FORMAT_VERSION:
        raise CloudFormatError(
            f"malformed header {line!r}; expected '{FORMAT_TAG} {FORMAT_VERSION} N has_labels'",
            lineno, path,
        )
    try:
        n = int(parts[2])
        flag = int(parts[3])
    except ValueError:
        raise CloudFormatError(f"malformed header {line!r}", lineno, path) from None
    if n < 0 or flag not in (0, 1):
        raise CloudFormatError(f"malformed header {line!r}", lineno, path)
    return n, bool(flag)


def list_cloud_files(directory) -> list[str]:
    """Sorted ``*.pgcc`` / ``*.txt`` files in a directory."""
    names = sorted(
        f for f in os.listdir(directory) if f.endswith(".pgcc") or f.endswith(".txt")
    )
    return [os.path.join(directory, f) for f in names]
