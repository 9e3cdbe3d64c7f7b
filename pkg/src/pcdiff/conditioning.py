"""Image conditioning: a small convolutional feature pyramid and the two ways
of handing it to the score network.

``projective`` looks up features where each (noisy) point projects onto the
image and appends them to the point's coordinates; ``global`` mean-pools the
pyramid into one vector that joins the noise embedding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .geometry import CameraIntrinsics

MODES = ("none", "projective", "global")
DEFAULT_CHANNELS = (8, 16, 32)


@dataclass
class FeatureGrid:
    """Multi-scale feature maps, each (B, H_k, W_k, C_k)."""
    levels: list

    @property
    def channels(self) -> int:
        return int(np.sum([_val(l).shape[-1] for l in self.levels]))

    def values(self) -> list:
        return [_val(l) for l in self.levels]


def _val(x):
    return x.value if isinstance(x, ad.Tensor) else np.asarray(x)


def feature_shapes(in_channels: int, channels: Sequence[int] = DEFAULT_CHANNELS) -> dict:
    shapes, cin = {}, in_channels
    for k, cout in enumerate(channels):
        shapes[f"cnn.{k}.w"] = (3, 3, cin, cout)
        shapes[f"cnn.{k}.b"] = (cout,)
        cin = cout
    return shapes


def init_feature_params(in_channels, rng, channels=DEFAULT_CHANNELS, dtype=np.float32) -> dict:
    params = {}
    for name, shape in feature_shapes(in_channels, channels).items():
        if name.endswith(".w"):
            fan_in = shape[0] * shape[1] * shape[2]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def extract_features(params, image, n_levels: int | None = None) -> FeatureGrid:
    """Stride-2 conv + tanh stages on a (B, H, W, C) or (H, W, C) image."""
    img = ad.as_tensor(image)
    if img.value.ndim == 3:
        img = ad.reshape(img, (1,) + img.value.shape)
    k, levels, x = 0, [], img
    while f"cnn.{k}.w" in params and (n_levels is None or k < n_levels):
        x = ad.tanh(ad.conv2d(x, params[f"cnn.{k}.w"], params[f"cnn.{k}.b"], stride=2, pad=1))
        levels.append(x)
        k += 1
    return FeatureGrid(levels)


def projective_lookup(grid: FeatureGrid, coords):
    """Per-point bilinear features from every level, concatenated: (B, N, C_tot)."""
    feats = [ad.bilinear_lookup(level, coords) for level in grid.levels]
    return feats[0] if len(feats) == 1 else ad.concat(feats, axis=-1)


def global_pool(grid: FeatureGrid):
    """Spatial mean of every level, concatenated: (B, C_tot)."""
    pooled = [ad.mean(level, axis=(1, 2)) for level in grid.levels]
    return pooled[0] if len(pooled) == 1 else ad.concat(pooled, axis=-1)


def pinhole_coords(points, cam: CameraIntrinsics, min_depth=1e-6):
    """Differentiable (p_h, p_w) of camera-frame points (B, N, 3).

    Points at depth below ``min_depth`` get coordinate -1 (outside the image,
    so their lookup is zero) and no gradient.
    """
    pts = ad.as_tensor(points)
    z = pts.value[..., 2]
    behind = z < min_depth
    zt = pts[..., 2:3]
    zsafe = ad.mask_fill(zt, behind[..., None], 1.0)
    ph = ad.add(ad.mul(ad.div(pts[..., 1:2], zsafe), cam.fy / cam.height), cam.cy / cam.height)
    pw = ad.add(ad.mul(ad.div(pts[..., 0:1], zsafe), cam.fx / cam.width), cam.cx / cam.width)
    coords = ad.concat([ph, pw], axis=-1)
    return ad.mask_fill(coords, np.broadcast_to(behind[..., None], coords.value.shape), -1.0)


def frustum_coords(uvl):
    """(p_h, p_w) for points stored as (u, v, l): the sigmoid of (u, v)."""
    return ad.sigmoid(ad.as_tensor(uvl)[..., 0:2])


def condition_points(mode: str, points, cam: CameraIntrinsics | None = None,
                     grid: FeatureGrid | None = None, frustum: bool = False, frame_points=None):
    """Token features for the score network.

    ``points`` are the coordinates the network sees; ``frame_points`` (default
    ``points``) are the same points in the camera frame (or frustum
    coordinates when ``frustum``) used to find their image projections.
    """
    if mode not in MODES:
        raise UsageError(f"unknown conditioning mode {mode!r}")
    if mode != "projective":
        if mode == "global" and grid is None:
            raise UsageError("global conditioning needs a feature grid")
        return ad.as_tensor(points)
    if grid is None:
        raise UsageError("projective conditioning needs a feature grid")
    frame_points = points if frame_points is None else frame_points
    if frustum:
        coords = frustum_coords(frame_points)
    else:
        if cam is None:
            raise UsageError("projective conditioning needs camera intrinsics")
        coords = pinhole_coords(frame_points, cam)
    return ad.concat([ad.as_tensor(points), projective_lookup(grid, coords)], axis=-1)
