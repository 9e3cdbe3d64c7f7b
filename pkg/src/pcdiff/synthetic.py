"""Synthetic scenes: parametric shapes placed in front of a pinhole camera,
with surface point clouds and splatted silhouette / inverse-depth images."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import io
from .errors import DegenerateDataError, UsageError
from .geometry import CameraIntrinsics, project
from .rng import make_rng, substream

FAMILIES = ("sphere", "box", "torus")
NEAR, FAR = 1.0, 6.0
DEFAULT_CAMERA = CameraIntrinsics.centered(40.0, 32)
IMAGE_MARGIN = 0.02


# ---------------------------------------------------------------- surfaces

def sphere_surface(n, rng, radius=1.0):
    v = rng.standard_normal((n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def box_surface(n, rng, size=(1.0, 1.0, 1.0)):
    """Uniform over the surface of an axis-aligned box with edge lengths ``size``."""
    a, b, c = size
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(size)
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    uv[np.arange(n), axis] = sign * np.array(size)[axis]
    return uv


def torus_surface(n, rng, major=1.0, minor=0.3):
    """Uniform by area: the tube angle is accepted with weight (R + r cos t) / (R + r)."""
    out = np.empty((0, 2))
    while len(out) < n:
        t = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, 1, size=2 * n) < (major + minor * np.cos(t)) / (major + minor)
        out = np.concatenate([out, np.stack([t[keep], rng.uniform(0, 2 * np.pi, keep.sum())], 1)])
    t, phi = out[:n].T
    ring = major + minor * np.cos(t)
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(t)], axis=1)


def _latents(family, rng):
    if family == "sphere":
        return {"radius": rng.uniform(0.25, 0.5)}
    if family == "box":
        return {"size": rng.uniform(0.3, 0.8, size=3).tolist()}
    if family == "torus":
        return {"major": rng.uniform(0.25, 0.4), "minor": rng.uniform(0.07, 0.15)}
    raise UsageError(f"unknown shape family {family!r}")


def shape_points(family, latents, n, rng):
    if family == "sphere":
        return sphere_surface(n, rng, latents["radius"])
    if family == "box":
        return box_surface(n, rng, latents["size"])
    return torus_surface(n, rng, latents["major"], latents["minor"])


# ---------------------------------------------------------------- rendering

def render(points, cam: CameraIntrinsics, near=NEAR, far=FAR):
    """Z-buffered single-pixel splats: (H, W, 2) silhouette and normalised inverse depth."""
    coords, depth, behind = project(points, cam)
    rows = np.floor(coords[:, 0] * cam.height).astype(int)
    cols = np.floor(coords[:, 1] * cam.width).astype(int)
    ok = (~behind) & (rows >= 0) & (rows < cam.height) & (cols >= 0) & (cols < cam.width)
    zbuf = np.full((cam.height, cam.width), np.inf)
    np.minimum.at(zbuf, (rows[ok], cols[ok]), depth[ok])
    hit = np.isfinite(zbuf)
    inv = np.zeros_like(zbuf)
    inv[hit] = np.clip((1 / zbuf[hit] - 1 / far) / (1 / near - 1 / far), 0, 1)
    return np.stack([hit.astype(float), inv], axis=-1)


# ---------------------------------------------------------------- scenes

@dataclass
class SyntheticScene:
    cloud: np.ndarray
    image: np.ndarray
    cam: CameraIntrinsics
    family: str
    latents: dict = field(default_factory=dict)


def in_frustum(points, cam: CameraIntrinsics, margin=IMAGE_MARGIN) -> bool:
    coords, depth, behind = project(points, cam)
    return bool(np.all(~behind) and np.all((coords > margin) & (coords < 1 - margin)))


def make_scene(family, n_points, rng, cam: CameraIntrinsics = DEFAULT_CAMERA, retries=100) -> SyntheticScene:
    """Sample a shape, rotate it at random and place it inside the camera frustum."""
    latents = _latents(family, rng)
    local = shape_points(family, latents, n_points, rng)
    rot = Rotation.random(random_state=rng)
    local = rot.apply(local)
    for _ in range(retries):
        centre = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(2.6, 3.4)])
        pts = local + centre
        if in_frustum(pts, cam):
            latents = dict(latents, rotation=rot.as_quat().tolist(), centre=centre.tolist())
            return SyntheticScene(pts, render(pts, cam), cam, family, latents)
    raise DegenerateDataError(f"could not place a {family} inside the frustum after {retries} tries")


@dataclass
class Dataset:
    clouds: np.ndarray          # (B, N, 3) camera frame
    images: np.ndarray          # (B, H, W, 2)
    cam: CameraIntrinsics
    families: list

    def __len__(self):
        return len(self.clouds)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.clouds[idx], self.images[idx], self.cam, [self.families[i] for i in idx])


def make_dataset(count, n_points=2048, families=FAMILIES, seed=0, cam=DEFAULT_CAMERA) -> Dataset:
    """``count`` scenes cycling through ``families``; scene ``i`` uses its own stream."""
    scenes = [make_scene(families[i % len(families)], n_points, substream(seed, i), cam)
              for i in range(count)]
    return Dataset(np.stack([s.cloud for s in scenes]), np.stack([s.image for s in scenes]), cam,
                   [s.family for s in scenes])


def write_dataset(ds: Dataset, out, extra=None):
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    io.write_pcb(out / "clouds.pcb", ds.clouds)
    for i, img in enumerate(ds.images):
        io.write_img1(out / "images" / f"{i:05d}.img1", img)
    manifest = {"count": len(ds), "camera": ds.cam.as_dict(), "families": ds.families,
                "clouds": "clouds.pcb", "images": [f"images/{i:05d}.img1" for i in range(len(ds))]}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    clouds = io.read_pcb(path / manifest["clouds"]).astype(float)
    images = np.stack([io.read_img1(path / p) for p in manifest["images"]]).astype(float)
    cam = CameraIntrinsics(**manifest["camera"])
    return Dataset(clouds, images, cam, manifest["families"])


def gen_dataset(out, families=FAMILIES, count=64, n_points=2048, image_size=32, seed=0,
                focal=None) -> Dataset:
    """Generate and write a dataset; the camera is centred with focal ``1.25 * image_size``."""
    for f in families:
        if f not in FAMILIES:
            raise UsageError(f"unknown shape family {f!r}")
    if count < 1:
        raise UsageError("count must be >= 1")
    cam = CameraIntrinsics.centered(focal or 1.25 * image_size, image_size)
    ds = make_dataset(count, n_points, tuple(families), seed, cam)
    write_dataset(ds, out, {"seed": seed})
    return ds
