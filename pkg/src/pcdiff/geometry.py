"""Point-cloud and pinhole-camera primitives.

Image coordinates are normalised: ``p_h`` runs down the rows and ``p_w``
along the columns, with pixel ``i`` covering ``[i/H, (i+1)/H)`` so that its
centre sits at ``(i + 0.5) / H``.  Camera-frame points are ``(x, y, z)`` with
``x`` horizontal, ``y`` vertical and ``z`` the depth along the optical axis.

Frustum coordinates store ``(u, v, l) = (logit p_h, logit p_w, log z)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .errors import (DegenerateDataError, FrustumViolationError, InvalidInputError,
                     SizeError, UsageError)

FRUSTUM_EPS = 1e-6
FRAMES = ("euclidean", "frustum")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @classmethod
    def centered(cls, focal: float, height: int, width: int | None = None) -> "CameraIntrinsics":
        width = height if width is None else width
        return cls(focal, focal, width / 2.0, height / 2.0, height, width)

    def log_det_unprojection(self) -> float:
        """Constant part of log|d(p_h, p_w, z)/d(x, y, z)|, without the 1/z^2 factor."""
        return float(np.log(self.fx * self.fy / (self.width * self.height)))

    def as_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    height=self.height, width=self.width)


@dataclass(frozen=True)
class PointCloud:
    """An (N, D) coordinate array tagged with the frame it lives in."""
    points: np.ndarray
    frame: str = "euclidean"

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 2:
            raise SizeError(f"point cloud must be N x D with N >= 1, D >= 2; got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point cloud contains non-finite coordinates")
        if self.frame not in FRAMES:
            raise InvalidInputError(f"unknown frame {self.frame!r}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def to_frustum(self, cam: CameraIntrinsics, clamp=False) -> "PointCloud":
        if self.frame != "euclidean":
            raise UsageError("cloud is already in frustum coordinates")
        return PointCloud(to_frustum(self.points, cam, clamp=clamp), "frustum")

    def from_frustum(self, cam: CameraIntrinsics) -> "PointCloud":
        if self.frame != "frustum":
            raise UsageError("cloud is not in frustum coordinates")
        return PointCloud(from_frustum(self.points, cam), "euclidean")


def _check_finite(points):
    points = np.asarray(points, dtype=float)
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("non-finite coordinates")
    return points


def project(points, cam: CameraIntrinsics):
    """Pinhole projection of camera-frame points (..., 3).

    Returns ``(coords, depth, behind)``: ``coords[..., 0] = p_h``,
    ``coords[..., 1] = p_w`` normalised by the image size, the depth ``z``, and
    a mask of points with ``z <= 0`` whose coordinates are meaningless.
    """
    points = _check_finite(points)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    behind = z <= 0
    zs = np.where(behind, 1.0, z)
    ph = (cam.fy * y / zs + cam.cy) / cam.height
    pw = (cam.fx * x / zs + cam.cx) / cam.width
    return np.stack([ph, pw], axis=-1), z.copy(), behind


def unproject(coords, depth, cam: CameraIntrinsics):
    """Inverse of :func:`project` for known depths."""
    coords = np.asarray(coords, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (coords[..., 1] * cam.width - cam.cx) * depth / cam.fx
    y = (coords[..., 0] * cam.height - cam.cy) * depth / cam.fy
    return np.stack([x, y, depth], axis=-1)


def to_frustum(points, cam: CameraIntrinsics, clamp=False, eps=FRUSTUM_EPS):
    """Map camera-frame points into unconstrained ``(u, v, l)`` coordinates.

    Points must be in front of the camera and project inside
    ``[eps, 1 - eps]^2``.  With ``clamp=True`` (dataset construction)
    projections inside the closed unit square are pulled into the margin;
    anything beyond it is still rejected.
    """
    coords, depth, behind = project(points, cam)
    lo, hi = (0.0, 1.0) if clamp else (eps, 1.0 - eps)
    outside = np.any((coords < lo) | (coords > hi), axis=-1)
    bad = np.flatnonzero((behind | outside).reshape(-1))
    if bad.size:
        raise FrustumViolationError("points behind the camera or outside the image", bad)
    if clamp:
        coords = np.clip(coords, eps, 1.0 - eps)
    return np.concatenate([logit(coords), np.log(depth)[..., None]], axis=-1)


def from_frustum(uvl, cam: CameraIntrinsics):
    """Exact inverse of :func:`to_frustum`; every point of R^3 is valid."""
    uvl = _check_finite(uvl)
    coords = expit(uvl[..., :2])
    return unproject(coords, np.exp(uvl[..., 2]), cam)


def frustum_log_det(points, cam: CameraIntrinsics):
    """Per-point log|det d(u, v, l) / d(x, y, z)| for camera-frame points."""
    coords, depth, _ = project(points, cam)
    ph, pw = coords[..., 0], coords[..., 1]
    return (-np.log(ph * (1 - ph)) - np.log(pw * (1 - pw))
            + cam.log_det_unprojection() - 3.0 * np.log(depth))


# ---------------------------------------------------------------- normalisation

@dataclass(frozen=True)
class NormalizationStats:
    """Affine normalisation ``(p - mean) / scale``.

    ``mode`` is ``"global"`` (fixed per-axis mean and std pooled over a
    dataset), ``"per-shape"`` (per-cloud mean and one scalar std, resolved at
    apply time), or ``"none"``.
    """
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    mode: str = "global"

    def __post_init__(self):
        if self.mode not in ("global", "per-shape", "none"):
            raise InvalidInputError(f"unknown normalisation mode {self.mode!r}")
        if self.scale is not None and np.any(np.asarray(self.scale) <= 0):
            raise DegenerateDataError("normalisation scale must be positive")

    @property
    def resolved(self) -> bool:
        return self.mode != "per-shape" or self.mean is not None

    def resolve(self, points) -> "NormalizationStats":
        """Concrete stats for ``points`` (..., N, D); identity for fixed modes."""
        if self.resolved:
            return self
        points = np.asarray(points, dtype=float)
        mean = points.mean(axis=-2, keepdims=True)
        scale = np.sqrt(((points - mean) ** 2).mean(axis=(-2, -1), keepdims=True))
        if np.any(scale <= 0):
            raise DegenerateDataError("cloud with zero spread cannot be normalised per shape")
        return NormalizationStats(mean, scale, "per-shape")

    def apply(self, points):
        if self.mode == "none":
            return np.asarray(points, dtype=float)
        stats = self.resolve(points)
        return (np.asarray(points) - stats.mean) / stats.scale

    def invert(self, points):
        if self.mode == "none":
            return np.asarray(points, dtype=float)
        if not self.resolved:
            raise UsageError("per-shape statistics must be resolved before inverting")
        return np.asarray(points) * self.scale + self.mean

    def log_det(self, n_points: int, dim: int = 3) -> float:
        """log|det| of the map original -> normalised for one cloud of ``n_points``."""
        if self.mode == "none":
            return 0.0
        if not self.resolved:
            raise UsageError("per-shape statistics must be resolved first")
        scale = np.asarray(self.scale, dtype=float)
        if scale.size == 1:
            return -float(n_points * dim * np.log(scale.item()))
        return -float(n_points * np.log(scale.reshape(-1)).sum())

    def as_dict(self) -> dict:
        conv = lambda a: None if a is None else np.asarray(a, dtype=float).tolist()
        return dict(mean=conv(self.mean), scale=conv(self.scale), mode=self.mode)

    @classmethod
    def from_dict(cls, d) -> "NormalizationStats":
        conv = lambda a: None if a is None else np.asarray(a, dtype=float)
        return cls(conv(d.get("mean")), conv(d.get("scale")), d.get("mode", "global"))


def fit_normalization(clouds: Sequence, mode: str = "global") -> NormalizationStats:
    """Fit normalisation statistics on a dataset of (N_i, D) clouds."""
    clouds = [np.asarray(c, dtype=float) for c in clouds]
    if not clouds:
        raise SizeError("cannot fit normalisation on an empty dataset")
    if mode == "none":
        return NormalizationStats(None, None, "none")
    if mode == "per-shape":
        for c in clouds:
            if np.all(c.std(axis=0) == 0):
                raise DegenerateDataError("a cloud has zero spread")
        return NormalizationStats(None, None, "per-shape")
    if mode != "global":
        raise InvalidInputError(f"unknown normalisation mode {mode!r}")
    pool = np.concatenate([c.reshape(-1, c.shape[-1]) for c in clouds], axis=0)
    mean = pool.mean(axis=0)
    std = pool.std(axis=0)
    if np.any(std == 0):
        raise DegenerateDataError(f"zero variance on axis {int(np.argmin(std))}")
    return NormalizationStats(mean, std, "global")


# ---------------------------------------------------------------- sampling

def unproject_depth(depth_map, cam: CameraIntrinsics, n: int, rng: np.random.Generator):
    """Sample ``n`` pixels with probability proportional to 1/depth and unproject them.

    Pixels are unprojected through their centres.  Infinite depth marks an
    empty pixel (weight zero).
    """
    depth_map = np.asarray(depth_map, dtype=float)
    if np.any(~(depth_map > 0)):
        raise InvalidInputError("depth values must be positive")
    H, W = depth_map.shape
    weights = (1.0 / depth_map).reshape(-1)
    total = weights.sum()
    if total <= 0:
        raise InvalidInputError("depth map has no finite pixels")
    idx = rng.choice(H * W, size=n, replace=True, p=weights / total)
    rows, cols = np.divmod(idx, W)
    coords = np.stack([(rows + 0.5) / H, (cols + 0.5) / W], axis=-1)
    return unproject(coords, depth_map.reshape(-1)[idx], cam)


def subsample(points, m: int, rng: np.random.Generator):
    """``m`` points drawn uniformly without replacement."""
    points = np.asarray(points)
    n = points.shape[-2]
    if m > n:
        raise SizeError(f"cannot subsample {m} points from {n}")
    return points[..., rng.choice(n, size=m, replace=False), :]
