"""Voxel-grid and planar-pose primitives.

Everything downstream (world synthesis, forecasting, planning, metrics)
operates on the value types defined here: a voxelized semantic volume, a
per-voxel backward flow field, per-voxel instance ids, and a planar ego
pose. All types are immutable after construction and all operations are
pure functions.

Grid layout convention: labels are stored as an (h, w, d) array in C
(row-major) order, axis 0 along world x, axis 1 along y, axis 2 along z.
Voxel (i, j, k) covers the half-open cube
[min + i*res, min + (i+1)*res) per axis.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

# Fixed category table. GMO = movable (vehicles, pedestrians),
# GSO = static (drivable surface, static obstacles).
FREE = 0
DRIVABLE = 1
STATIC = 2
VEHICLE = 3
PEDESTRIAN = 4
NUM_CATEGORIES = 5
GMO_CATEGORIES = frozenset({VEHICLE, PEDESTRIAN})
GSO_CATEGORIES = frozenset({DRIVABLE, STATIC})

_TWO_PI = 2.0 * math.pi


def wrap_angle(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    y = (yaw + math.pi) % _TWO_PI - math.pi
    if y <= -math.pi:
        y += _TWO_PI
    return y


@dataclass(frozen=True)
class GridConfig:
    """Axis-aligned voxel volume: ranges in meters, one cubic resolution.

    The ranges must tile exactly: dim = round(extent / resolution) with a
    sub-1e-9 residual, otherwise construction fails.
    """

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]
    resolution: float

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        for name, (lo, hi) in (("x", self.x_range), ("y", self.y_range), ("z", self.z_range)):
            if hi <= lo:
                raise ValueError(f"{name}_range has non-positive extent: ({lo}, {hi})")
            n = (hi - lo) / self.resolution
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(
                    f"{name}_range extent {hi - lo} is not an exact multiple of resolution {self.resolution}"
                )

    @property
    def h(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.resolution))

    @property
    def w(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.resolution))

    @property
    def d(self) -> int:
        return int(round((self.z_range[1] - self.z_range[0]) / self.resolution))

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.d)

    @property
    def origin(self) -> tuple[float, float, float]:
        return (self.x_range[0], self.y_range[0], self.z_range[0])

    def bev_cell_centers(self) -> np.ndarray:
        """(h, w, 2) array of (x, y) cell-center coordinates in meters."""
        xs = self.x_range[0] + (np.arange(self.h) + 0.5) * self.resolution
        ys = self.y_range[0] + (np.arange(self.w) + 0.5) * self.resolution
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def z_centers(self) -> np.ndarray:
        return self.z_range[0] + (np.arange(self.d) + 0.5) * self.resolution


def world_to_voxel(p, cfg: GridConfig):
    """Map a world point (x, y, z) to its voxel index, or None if outside.

    Out-of-range points are never clamped; the voxel center returned by
    voxel_to_world is within resolution/2 of p on every axis.
    """
    idx = []
    for v, (lo, hi) in zip(p, (cfg.x_range, cfg.y_range, cfg.z_range)):
        i = math.floor((v - lo) / cfg.resolution)
        n = round((hi - lo) / cfg.resolution)
        if i < 0 or i >= n:
            return None
        idx.append(int(i))
    return tuple(idx)


def voxel_to_world(idx, cfg: GridConfig) -> tuple[float, float, float]:
    """Center of voxel (i, j, k) in meters."""
    i, j, k = idx
    r = cfg.resolution
    return (
        cfg.x_range[0] + (i + 0.5) * r,
        cfg.y_range[0] + (j + 0.5) * r,
        cfg.z_range[0] + (k + 0.5) * r,
    )


def points_to_indices(pts: np.ndarray, cfg: GridConfig):
    """Vectorized world->voxel for an (n, 2) or (n, 3) point array.

    Returns (indices int64 same width, valid bool mask). Indices of
    invalid rows are clipped and must not be used.
    """
    pts = np.asarray(pts, dtype=np.float64)
    ranges = [cfg.x_range, cfg.y_range, cfg.z_range][: pts.shape[-1]]
    lo = np.array([r[0] for r in ranges])
    dims = np.array([round((r[1] - r[0]) / cfg.resolution) for r in ranges])
    idx = np.floor((pts - lo) / cfg.resolution).astype(np.int64)
    valid = np.all((idx >= 0) & (idx < dims), axis=-1)
    return np.clip(idx, 0, dims - 1), valid


@dataclass(frozen=True)
class EgoPose:
    """Planar rigid transform (SE(2), z fixed at 0): rotation by yaw then
    translation. Yaw is wrapped to (-pi, pi] on construction."""

    yaw: float = 0.0
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    @classmethod
    def identity(cls) -> "EgoPose":
        return cls(0.0, 0.0, 0.0)

    @property
    def translation(self) -> tuple[float, float]:
        return (self.x, self.y)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """2x3 matrix [R | T]."""
        m = np.empty((2, 3))
        m[:, :2] = self.rotation()
        m[:, 2] = (self.x, self.y)
        return m

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform (..., 2) points: R @ p + T."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation().T + np.array([self.x, self.y])

    def rotate(self, vecs: np.ndarray) -> np.ndarray:
        """Rotate (..., 2) vectors without translating."""
        return np.asarray(vecs, dtype=np.float64) @ self.rotation().T


def compose(a: EgoPose, b: EgoPose) -> EgoPose:
    """Pose such that applying it equals applying b, then a."""
    ca, sa = math.cos(a.yaw), math.sin(a.yaw)
    tx = a.x + ca * b.x - sa * b.y
    ty = a.y + sa * b.x + ca * b.y
    return EgoPose(a.yaw + b.yaw, tx, ty)


def inverse(p: EgoPose) -> EgoPose:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return EgoPose(-p.yaw, -(c * p.x + s * p.y), -(-s * p.x + c * p.y))


def relative_pose(frm: EgoPose, to: EgoPose) -> EgoPose:
    """Pose of `to` expressed in the frame of `frm`: inverse(frm) ∘ to."""
    return compose(inverse(frm), to)


def _check_labels(labels: np.ndarray, cfg: GridConfig) -> np.ndarray:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.shape != cfg.dims:
        raise ValueError(f"labels shape {labels.shape} != grid dims {cfg.dims}")
    if labels.size and labels.max() >= NUM_CATEGORIES:
        raise ValueError(f"label {int(labels.max())} outside category table (< {NUM_CATEGORIES})")
    return labels


@dataclass(frozen=True)
class SemanticGrid:
    """One category id per voxel, (h, w, d) uint8."""

    config: GridConfig
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", _check_labels(self.labels, self.config))

    @classmethod
    def empty(cls, cfg: GridConfig) -> "SemanticGrid":
        return cls(cfg, np.zeros(cfg.dims, dtype=np.uint8))


@dataclass(frozen=True)
class FlowGrid:
    """Per-voxel 3D backward flow vectors in meters, (h, w, d, 3) float32.

    Vectors point from a voxel at frame t to its instance's center at
    frame t-1; non-GMO voxels carry all-zero vectors.
    """

    config: GridConfig
    vectors: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.shape != self.config.dims + (3,):
            raise ValueError(f"flow shape {v.shape} != {self.config.dims + (3,)}")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow vectors must be finite")
        object.__setattr__(self, "vectors", v)

    @classmethod
    def zeros(cls, cfg: GridConfig) -> "FlowGrid":
        return cls(cfg, np.zeros(cfg.dims + (3,), dtype=np.float32))


@dataclass(frozen=True)
class InstanceGrid:
    """One instance id per voxel (0 = no instance), (h, w, d) int32."""

    config: GridConfig
    ids: np.ndarray

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.int32)
        if ids.shape != self.config.dims:
            raise ValueError(f"ids shape {ids.shape} != grid dims {self.config.dims}")
        object.__setattr__(self, "ids", ids)

    @classmethod
    def empty(cls, cfg: GridConfig) -> "InstanceGrid":
        return cls(cfg, np.zeros(cfg.dims, dtype=np.int32))

    def compacted(self) -> "InstanceGrid":
        """Relabel nonzero ids to a contiguous 1..n range (ascending order)."""
        uniq = np.unique(self.ids)
        uniq = uniq[uniq != 0]
        out = np.zeros_like(self.ids)
        for new, old in enumerate(uniq, start=1):
            out[self.ids == old] = new
        return InstanceGrid(self.config, out)


def warp_grid(src: SemanticGrid, transform: EgoPose) -> SemanticGrid:
    """Resample a semantic grid into a new ego frame.

    `transform` maps source-frame coordinates into the destination frame;
    each destination voxel takes the label of the source voxel containing
    inverse(transform) applied to its center (nearest-voxel lookup, labels
    are categorical). Destinations that map outside the source become FREE.
    The transform is planar, so whole z-columns move together.
    """
    cfg = src.config
    inv = inverse(transform)
    centers = cfg.bev_cell_centers().reshape(-1, 2)
    src_pts = inv.apply(centers)
    idx, valid = points_to_indices(src_pts, cfg)
    out = np.zeros_like(src.labels)
    flat_valid = valid.reshape(-1)
    ij = idx[flat_valid]
    out.reshape(-1, cfg.d)[flat_valid] = src.labels[ij[:, 0], ij[:, 1], :]
    return SemanticGrid(cfg, out)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean voxel masks.

    An empty union (both masks empty) is defined as IoU 1.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def category_mask(g: SemanticGrid, categories) -> np.ndarray:
    """Boolean mask of voxels whose label is in `categories`."""
    cats = sorted(set(int(c) for c in categories))
    for c in cats:
        if c < 0 or c >= NUM_CATEGORIES:
            raise ValueError(f"unknown category id {c} (table has {NUM_CATEGORIES} entries)")
    return np.isin(g.labels, cats)


def gmo_mask(g: SemanticGrid) -> np.ndarray:
    return category_mask(g, GMO_CATEGORIES)


# Binary dump format: 32-byte little-endian header (magic "OGRD", version
# u16, h/w/d u16, resolution f32, origin 3xf32, 4 pad bytes), then h*w*d
# label bytes, then optionally 3*h*w*d f32 flow values.
_MAGIC = b"OGRD"
_HEADER = struct.Struct("<4sHHHHf3f4x")
DUMP_VERSION = 1


def occupancy_bytes(semantic: SemanticGrid, flow: FlowGrid | None = None) -> bytes:
    cfg = semantic.config
    if flow is not None and flow.config != cfg:
        raise ValueError("flow grid config differs from semantic grid config")
    header = _HEADER.pack(
        _MAGIC, DUMP_VERSION, cfg.h, cfg.w, cfg.d,
        np.float32(cfg.resolution), *(np.float32(v) for v in cfg.origin),
    )
    parts = [header, semantic.labels.tobytes()]
    if flow is not None:
        parts.append(flow.vectors.astype("<f4").tobytes())
    return b"".join(parts)


def save_occupancy(path, semantic: SemanticGrid, flow: FlowGrid | None = None) -> None:
    with open(path, "wb") as f:
        f.write(occupancy_bytes(semantic, flow))


def load_occupancy(path) -> tuple[SemanticGrid, FlowGrid | None]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size or raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an occupancy dump (bad magic)")
    magic, version, h, w, d, res, ox, oy, oz = _HEADER.unpack_from(raw)
    if version != DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    res = float(res)
    cfg = GridConfig(
        x_range=(float(ox), float(ox) + h * res),
        y_range=(float(oy), float(oy) + w * res),
        z_range=(float(oz), float(oz) + d * res),
        resolution=res,
    )
    n = h * w * d
    body = raw[_HEADER.size:]
    if len(body) not in (n, n + 12 * n):
        raise ValueError(f"{path}: payload size {len(body)} does not match dims {(h, w, d)}")
    labels = np.frombuffer(body[:n], dtype=np.uint8).reshape(h, w, d)
    semantic = SemanticGrid(cfg, labels.copy())
    flow = None
    if len(body) > n:
        vecs = np.frombuffer(body[n:], dtype="<f4").reshape(h, w, d, 3)
        flow = FlowGrid(cfg, vecs.copy())
    return semantic, flow
