"""Oriented 3D boxes, pinhole projection, and IoU machinery.

Conventions: camera frame with x right, y down (vertical), z forward.
Yaw rotates about the vertical y axis, right-handed, so the bird's-eye
view lives in the x-z plane. Box centers are geometric centers. These
match the KITTI camera-frame habits this code ingests.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

_CLIP_EPS = 1e-12


class DegeneratePolygonWarning(RuntimeWarning):
    """BEV intersection collapsed numerically; IoU reported as 0."""


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.remainder(a, 2.0 * math.pi)
    return math.pi if r == -math.pi else r


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (x, y, z), dims (l, w, h), yaw about vertical."""

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if any(d <= 0.0 for d in self.dims):
            raise ValueError(f"box dims must be positive, got {self.dims}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        l, w, h = self.dims
        return l * w * h

    def bev_corners(self) -> np.ndarray:
        """(4, 2) corners of the ground-plane footprint in (x, z), CCW."""
        l, w, _ = self.dims
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[l / 2, w / 2], [-l / 2, w / 2],
                          [-l / 2, -w / 2], [l / 2, -w / 2]])
        rot = np.array([[c, -s], [s, c]])        # row-vector form of R_y(yaw)
        return local @ rot + np.array([self.center[0], self.center[2]])

    def corners(self) -> np.ndarray:
        """(8, 3) corners; first four are the top face, last four the bottom."""
        bev = self.bev_corners()
        x, y, z = self.center
        h = self.dims[2]
        top = np.column_stack([bev[:, 0], np.full(4, y - h / 2), bev[:, 1]])
        bottom = np.column_stack([bev[:, 0], np.full(4, y + h / 2), bev[:, 1]])
        return np.vstack([top, bottom])

    def vertical_interval(self) -> tuple[float, float]:
        y, h = self.center[1], self.dims[2]
        return y - h / 2, y + h / 2


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned pixel box."""

    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        if not (self.right > self.left and self.bottom > self.top):
            raise ValueError(
                f"invalid 2D box: need right > left and bottom > top, got "
                f"({self.left}, {self.top}, {self.right}, {self.bottom})")

    @property
    def area(self) -> float:
        return (self.right - self.left) * (self.bottom - self.top)


@dataclass(frozen=True)
class CameraCalib:
    """Pinhole intrinsics plus the projection-matrix translation terms."""

    fx: float
    fy: float
    cx: float
    cy: float
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


def project_center(xyz, calib: CameraCalib) -> tuple[float, float]:
    """Camera-frame point to pixel coordinates."""
    x, y, z = (float(v) for v in xyz)
    if z <= 0.0:
        raise ValueError(f"point behind camera: z={z}")
    w = z + calib.tz
    u = (calib.fx * x + calib.cx * z + calib.tx) / w
    v = (calib.fy * y + calib.cy * z + calib.ty) / w
    return u, v


def backproject_center(u: float, v: float, depth: float, calib: CameraCalib) -> tuple[float, float, float]:
    """Pixel plus depth back to the camera frame; inverse of project_center."""
    if depth <= 0.0:
        raise ValueError(f"depth must be positive, got {depth}")
    z = float(depth)
    w = z + calib.tz
    x = (u * w - calib.cx * z - calib.tx) / calib.fx
    y = (v * w - calib.cy * z - calib.ty) / calib.fy
    return x, y, z


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    return inter / union


def giou_2d(a: Box2D, b: Box2D) -> float:
    """Generalized IoU; penalizes the uncovered part of the enclosing hull."""
    inter_iou = iou_2d(a, b)
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    hull = (max(a.right, b.right) - min(a.left, b.left)) * \
        (max(a.bottom, b.bottom) - min(a.top, b.top))
    return inter_iou - (hull - union) / hull


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for CCW vertex order."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against a convex CCW polygon."""
    out = [tuple(p) for p in subject]
    for i in range(len(clip)):
        if not out:
            break
        a = clip[i]
        b = clip[(i + 1) % len(clip)]
        edge = (b[0] - a[0], b[1] - a[1])

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= -_CLIP_EPS

        def intersect(p, q):
            dp = (q[0] - p[0], q[1] - p[1])
            denom = edge[0] * dp[1] - edge[1] * dp[0]
            t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom
            return (p[0] + t * dp[0], p[1] + t * dp[1])

        current, out = out, []
        s = current[-1]
        for e in current:
            if inside(e):
                if not inside(s):
                    out.append(intersect(s, e))
                out.append(e)
            elif inside(s):
                out.append(intersect(s, e))
            s = e
    return np.array(out) if out else np.zeros((0, 2))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Rotated-box IoU: BEV polygon intersection times vertical overlap."""
    lo = max(a.vertical_interval()[0], b.vertical_interval()[0])
    hi = min(a.vertical_interval()[1], b.vertical_interval()[1])
    overlap_h = hi - lo
    if overlap_h <= 0.0:
        return 0.0
    inter_poly = clip_polygon(a.bev_corners(), b.bev_corners())
    if len(inter_poly) < 3:
        return 0.0
    inter_area = polygon_area(inter_poly)
    if not math.isfinite(inter_area) or inter_area < -1e-9:
        warnings.warn("degenerate BEV intersection polygon; reporting IoU 0",
                      DegeneratePolygonWarning)
        return 0.0
    inter_vol = max(0.0, inter_area) * overlap_h
    union = a.volume + b.volume - inter_vol
    return min(1.0, max(0.0, inter_vol / union))


def _points_in_box(pts: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside an oriented box (boundary inclusive)."""
    rel = pts - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * rel[:, 0] - s * rel[:, 2]
    lz = s * rel[:, 0] + c * rel[:, 2]
    l, w, h = box.dims
    return (np.abs(lx) <= l / 2) & (np.abs(lz) <= w / 2) & (np.abs(rel[:, 1]) <= h / 2)


def monte_carlo_iou3d(a: Box3D, b: Box3D, n_samples: int = 1_000_000,
                      seed: int = 0, shard_size: int = 262_144) -> tuple[float, float]:
    """IoU estimate plus binomial standard error, by uniform rejection sampling.

    Points are drawn over the joint bounding volume in fixed-size shards
    with per-shard seeded streams, so the result depends only on
    (n_samples, seed), never on execution order.
    """
    if n_samples < 1000:
        raise ValueError(f"need at least 1000 samples, got {n_samples}")
    corners = np.vstack([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    in_both = 0
    in_either = 0
    drawn = 0
    shard = 0
    while drawn < n_samples:
        count = min(shard_size, n_samples - drawn)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(shard,)))
        pts = rng.uniform(lo, hi, size=(count, 3))
        hit_a = _points_in_box(pts, a)
        hit_b = _points_in_box(pts, b)
        in_both += int(np.count_nonzero(hit_a & hit_b))
        in_either += int(np.count_nonzero(hit_a | hit_b))
        drawn += count
        shard += 1
    if in_either == 0:
        return 0.0, 0.0
    p = in_both / in_either
    stderr = math.sqrt(p * (1.0 - p) / in_either)
    return p, stderr
