"""Pinhole camera math, virtual plane rendering, mask warping and depth edges.

Conventions used throughout the package:

* Pixel ``(u, v)``: ``u`` is the column, ``v`` the row; integer coordinates
  are pixel centres.
* Camera frame: x right, y down, z forward (OpenCV).
* ``Pose`` is camera-to-world.
* Depth is z-depth (distance along the optical axis), never ray length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage


class GeometryError(ValueError):
    pass


class UnwarpableError(GeometryError):
    """Raised when a warped point lands on or behind the previous camera."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 62.0) -> "CameraIntrinsics":
        fx = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) coordinate arrays of shape (H, W)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return u, v

    def camera_rays(self) -> np.ndarray:
        """Per-pixel ray directions with unit z component, shape (H, W, 3)."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise GeometryError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` looking at ``target``; ``up`` is world up."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self @ other``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2].copy()


@dataclass
class DepthMap:
    values: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise GeometryError(f"depth map must be 2-D, got shape {self.values.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.values) & (self.values > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise GeometryError("valid mask shape does not match depth values")
        good = self.values[self.valid]
        if not (np.all(np.isfinite(good)) and np.all(good > 0)):
            raise GeometryError("valid depth values must be finite and positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def constant(cls, value: float, shape: tuple[int, int]) -> "DepthMap":
        return cls(np.full(shape, float(value)), np.ones(shape, dtype=bool))

    def filled(self, fill: float = np.nan) -> np.ndarray:
        return np.where(self.valid, self.values, fill)


@dataclass(frozen=True)
class PlaneSpec:
    """A virtual infinite plane.

    ``mode="frontoparallel"`` places the plane at z-depth ``distance`` in
    whatever camera renders it. ``mode="world"`` fixes the plane in the world:
    it faces ``anchor`` (a camera-to-world pose) at ``distance`` along the
    anchor's optical axis.
    """

    distance: float
    mode: str = "frontoparallel"
    anchor: Optional[Pose] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.distance > 0:
            raise GeometryError(f"plane distance must be positive, got {self.distance}")
        if self.mode not in ("frontoparallel", "world"):
            raise GeometryError(f"unknown plane mode {self.mode!r}")
        if self.mode == "world" and self.anchor is None:
            raise GeometryError("world-fixed plane requires an anchor pose")

    @classmethod
    def fixed_in_world(cls, anchor: Pose, distance: float) -> "PlaneSpec":
        return cls(distance=distance, mode="world", anchor=anchor)


def warp_location(u: float, v: float, depth: float, pose_t: Pose, pose_prev: Pose,
                  K: CameraIntrinsics) -> tuple[float, float]:
    """Location in the previous frame of pixel ``(u, v)`` seen at ``depth`` in frame t."""
    if not depth > 0:
        raise GeometryError(f"warp depth must be positive, got {depth}")
    uu, vv, ok = warp_locations(np.array([u], float), np.array([v], float),
                                np.array([depth], float), pose_t, pose_prev, K)
    if not ok[0]:
        raise UnwarpableError(f"pixel ({u}, {v}) maps behind the previous camera")
    return float(uu[0]), float(vv[0])


def warp_locations(u: np.ndarray, v: np.ndarray, depth: np.ndarray, pose_t: Pose,
                   pose_prev: Pose, K: CameraIntrinsics):
    """Vectorised :func:`warp_location`.

    Returns ``(u_prev, v_prev, ok)``; ``ok`` is False where the point lands at
    z <= 0 in the previous camera (its coordinates are then NaN).
    """
    rel = pose_prev.inverse().compose(pose_t)
    pts = np.stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], axis=-1)
    q = rel.transform(pts)
    z = q[..., 2]
    ok = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u_prev = np.where(ok, K.fx * q[..., 0] / z + K.cx, np.nan)
        v_prev = np.where(ok, K.fy * q[..., 1] / z + K.cy, np.nan)
    return u_prev, v_prev, ok


def _corner_indices(x: np.ndarray, size: int):
    x0 = np.clip(np.floor(x), 0, max(size - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, size - 1)
    return x0, x1, x - x0


def bilinear_sample_many(image: np.ndarray, u, v, oob_sentinel: float = -1.0) -> np.ndarray:
    """Bilinear lookup of a 2-D map at continuous ``(u, v)``.

    Locations outside ``[0, W-1] x [0, H-1]`` (or non-finite) return the sentinel.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise GeometryError("bilinear_sample expects a non-empty 2-D map")
    h, w = image.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    x0, x1, fx = _corner_indices(uc, w)
    y0, y1, fy = _corner_indices(vc, h)
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.where(inside, out, oob_sentinel)


def bilinear_sample(image: np.ndarray, u: float, v: float, oob_sentinel: float = -1.0) -> float:
    return float(bilinear_sample_many(image, np.array([u]), np.array([v]), oob_sentinel)[0])


def render_plane_depth(spec: PlaneSpec, pose: Pose, K: CameraIntrinsics) -> DepthMap:
    if spec.mode == "frontoparallel":
        return DepthMap.constant(spec.distance, K.shape)
    normal = spec.anchor.forward
    point = spec.anchor.translation + spec.distance * normal
    rays_world = K.camera_rays() @ pose.rotation.T
    denom = rays_world @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((point - pose.translation) @ normal) / denom
    # rays have unit camera-z, so the ray parameter is already the z-depth
    valid = np.isfinite(t) & (t > 0) & (np.abs(denom) > 1e-12)
    return DepthMap(np.where(valid, t, 0.0), valid)


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def sobel_magnitude(depth: DepthMap) -> np.ndarray:
    """Sobel gradient magnitude; NaN where the 3x3 neighbourhood is not fully valid."""
    vals = np.where(depth.valid, depth.values, 0.0)
    gx = ndimage.correlate(vals, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(vals, SOBEL_Y, mode="nearest")
    full = ndimage.minimum_filter(depth.valid.astype(np.uint8), size=3, mode="nearest").astype(bool)
    return np.where(full, np.hypot(gx, gy), np.nan)


def sobel_edge_mask(depth: DepthMap, percentile: float = 0.95) -> np.ndarray:
    mag = sobel_magnitude(depth)
    finite = np.isfinite(mag)
    if finite.sum() == 0:
        return np.zeros(depth.shape, dtype=bool)
    threshold = np.quantile(mag[finite], percentile)
    return finite & (np.where(finite, mag, -np.inf) > threshold)
