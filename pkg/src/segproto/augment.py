"""Two-view augmentation with tracked original-point correspondences.

The pipeline order and defaults follow the usual indoor-scene recipe:
z-rotation, small x/y tilts, axis flips, coordinate jitter, four photometric
jitters, colour noise, voxelization, random crop.  Random draws happen in a
fixed order so a view is fully determined by ``(cloud, seed, cfg)``:

1. rotate z / x / y: one ``random()`` for the gate, then one ``uniform`` for the angle
2. flip x, flip y: one ``random()`` each
3. coordinate jitter: ``random()`` gate, then an (M, 3) ``normal`` block
4. brightness, contrast, saturation, hue: ``random()`` gate, then one ``uniform``
5. colour noise: ``random()`` gate, then an (M, 3) ``normal`` block
6. crop: one ``integers`` draw per attempt for the crop centre
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import ConfigError, EmptyInputError
from .pointcloud import PointCloud

CROP_ATTEMPTS = 8
PAIR_ATTEMPTS = 8


@dataclass(frozen=True)
class AugmentConfig:
    rotate_z: float = 1.0          # angle range, multiples of pi
    rotate_xy: float = 1.0 / 64.0  # angle range for the x and y tilts, multiples of pi
    p_rotate: float = 1.0
    p_flip: float = 0.5
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.02
    p_jitter: float = 1.0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.02              # fraction of a full hue cycle
    p_color: float = 0.8
    color_noise_std: float = 0.05
    p_color_noise: float = 0.95
    voxel_size: float = 0.02
    crop_ratio: float = 0.6
    min_overlap: int = 256

    def validate(self) -> None:
        for name in ("p_rotate", "p_flip", "p_jitter", "p_color", "p_color_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"augment.{name} must be in [0, 1], got {v}")
        if not 0.0 < self.crop_ratio <= 1.0:
            raise ConfigError(f"augment.crop_ratio must be in (0, 1], got {self.crop_ratio}")
        for name in ("jitter_sigma", "jitter_clip", "color_noise_std", "voxel_size",
                     "brightness", "contrast", "saturation", "hue", "rotate_z", "rotate_xy"):
            if getattr(self, name) < 0:
                raise ConfigError(f"augment.{name} must be >= 0")
        if self.min_overlap < 1:
            raise ConfigError("augment.min_overlap must be >= 1")

    @classmethod
    def identity(cls, min_overlap: int = 1) -> "AugmentConfig":
        return cls(p_rotate=0.0, p_flip=0.0, p_jitter=0.0, p_color=0.0, p_color_noise=0.0,
                   voxel_size=0.0, crop_ratio=1.0, min_overlap=min_overlap)


def rotation_matrix(axis: str, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def voxel_keep(coords: np.ndarray, ids: np.ndarray, voxel_size: float) -> np.ndarray:
    """Row indices surviving voxelization: the smallest original id per occupied voxel."""
    if voxel_size <= 0:
        return np.arange(len(coords))
    keys = np.floor(coords / voxel_size).astype(np.int64)
    by_id = np.argsort(ids, kind="stable")
    _, first = np.unique(keys[by_id], axis=0, return_index=True)
    return np.sort(by_id[first])


def crop_keep(coords: np.ndarray, center_index: int, ratio: float) -> np.ndarray:
    """Rows inside the smallest xy-aligned box around ``center_index`` holding ``ratio`` of the points.

    The box spans the full height; points are ranked by Chebyshev distance in
    xy, ties toward the smaller row.
    """
    m = len(coords)
    count = int(round(ratio * m))
    if count <= 0:
        return np.empty(0, dtype=np.int64)
    d = np.abs(coords[:, :2] - coords[center_index, :2]).max(axis=1)
    return np.sort(np.argsort(d, kind="stable")[:count])


def _color_jitters(colors: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    c = colors
    if rng.random() < cfg.p_color:
        c = np.clip(c * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness), 0, 1)
    if rng.random() < cfg.p_color:
        f = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        mean = c.mean(axis=0, keepdims=True)
        c = np.clip((c - mean) * f + mean, 0, 1)
    if rng.random() < cfg.p_color:
        f = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        gray = c @ np.array([0.299, 0.587, 0.114])
        c = np.clip(gray[:, None] + (c - gray[:, None]) * f, 0, 1)
    if rng.random() < cfg.p_color:
        shift = rng.uniform(-cfg.hue, cfg.hue)
        hsv = rgb_to_hsv(c)
        hsv[:, 0] = np.mod(hsv[:, 0] + shift, 1.0)
        c = np.clip(hsv_to_rgb(hsv), 0, 1)
    if rng.random() < cfg.p_color_noise:
        c = np.clip(c + rng.normal(0.0, cfg.color_noise_std, size=c.shape), 0, 1)
    return c


def augment(cloud: PointCloud, seed, cfg: AugmentConfig = AugmentConfig()) -> PointCloud:
    """One augmented view of ``cloud``; original ids ride along with every point."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    coords = cloud.coords.copy()
    normals = None if cloud.normals is None else cloud.normals.copy()
    center = (coords.min(axis=0) + coords.max(axis=0)) / 2

    for axis, extent in (("z", cfg.rotate_z), ("x", cfg.rotate_xy), ("y", cfg.rotate_xy)):
        if rng.random() < cfg.p_rotate:
            rot = rotation_matrix(axis, rng.uniform(-extent, extent) * math.pi)
            coords = (coords - center) @ rot.T + center
            if normals is not None:
                normals = normals @ rot.T
    for axis in (0, 1):
        if rng.random() < cfg.p_flip:
            coords[:, axis] = 2 * center[axis] - coords[:, axis]
            if normals is not None:
                normals[:, axis] = -normals[:, axis]
    if rng.random() < cfg.p_jitter:
        noise = rng.normal(0.0, cfg.jitter_sigma, size=coords.shape)
        coords = coords + np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip)
    colors = _color_jitters(cloud.colors, rng, cfg)

    view = cloud.replace(coords=coords, colors=colors, normals=normals)
    view = view.subset(voxel_keep(view.coords, view.ids, cfg.voxel_size))
    if cfg.crop_ratio < 1.0:
        for _ in range(CROP_ATTEMPTS):
            keep = crop_keep(view.coords, int(rng.integers(len(view))), cfg.crop_ratio)
            if len(keep):
                break
        else:
            raise EmptyInputError(f"crop left no points in {cloud.name or 'cloud'} after {CROP_ATTEMPTS} attempts")
        view = view.subset(keep)
    return view


@dataclass(frozen=True)
class ViewPair:
    """Student view ``view_q``, teacher view ``view_k`` and their id-matched overlap.

    ``correspondence`` is a (C, 2) array of (q row, k row), sorted by q row.
    ``source`` is the untransformed cloud both views came from.
    """

    view_q: PointCloud
    view_k: PointCloud
    correspondence: np.ndarray
    name: str = ""
    source: PointCloud | None = field(default=None, compare=False, repr=False)

    @property
    def overlap_q(self) -> np.ndarray:
        return self.correspondence[:, 0]

    @property
    def overlap_k(self) -> np.ndarray:
        return np.sort(self.correspondence[:, 1])

    @property
    def overlap_ids(self) -> np.ndarray:
        """Original ids of the overlap, in q-row order."""
        return self.view_q.ids[self.correspondence[:, 0]]

    def swapped(self) -> "ViewPair":
        corr = self.correspondence[:, ::-1]
        corr = corr[np.argsort(corr[:, 0], kind="stable")]
        return ViewPair(self.view_k, self.view_q, np.ascontiguousarray(corr), self.name, self.source)


def correspondence_of(view_q: PointCloud, view_k: PointCloud) -> np.ndarray:
    _, iq, ik = np.intersect1d(view_q.ids, view_k.ids, assume_unique=True, return_indices=True)
    corr = np.stack([iq, ik], axis=1).astype(np.int64)
    return corr[np.argsort(corr[:, 0], kind="stable")]


def view_seeds(seed, attempt: int) -> tuple[int, int]:
    state = np.random.SeedSequence([*np.atleast_1d(seed).tolist(), attempt]).generate_state(4)
    return (int(state[0]) << 32 | int(state[1])), (int(state[2]) << 32 | int(state[3]))


def make_view_pair(cloud: PointCloud, seed, cfg: AugmentConfig = AugmentConfig()) -> ViewPair:
    """Two independently augmented views; regenerated until the overlap reaches ``cfg.min_overlap``."""
    cfg.validate()
    best = 0
    for attempt in range(PAIR_ATTEMPTS):
        sq, sk = view_seeds(seed, attempt)
        vq, vk = augment(cloud, sq, cfg), augment(cloud, sk, cfg)
        corr = correspondence_of(vq, vk)
        if len(corr) >= cfg.min_overlap:
            return ViewPair(vq, vk, corr, cloud.name, cloud)
        best = max(best, len(corr))
    raise EmptyInputError(
        f"scene {cloud.name or '<unnamed>'}: overlap {best} < min_overlap {cfg.min_overlap} "
        f"after {PAIR_ATTEMPTS} attempts")
