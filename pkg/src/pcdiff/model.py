"""Denoiser models consumed by the samplers and the likelihood integrator.

A model maps noisy clouds ``x`` (B, N, D) in its diffusion frame and noise
levels to denoised estimates ``D(x; sigma)``, counts its network evaluations
and provides vector-Jacobian products of ``D`` with respect to ``x``.

:class:`ScoreModel` is the trained network; :class:`GaussianModel` is the
exact denoiser for data distributed as N(0, sigma_data^2 I), used as an
analytic reference.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import conditioning as cond_mod
from . import scorenet
from .conditioning import DEFAULT_CHANNELS, FeatureGrid
from .diffusion import DiffusionConfig, c_skip, precondition
from .errors import StructuralError, UsageError
from .geometry import CameraIntrinsics, NormalizationStats, from_frustum, frustum_log_det, to_frustum

NO_NORMALIZATION = NormalizationStats(None, None, "none")


class GaussianModel:
    """Exact denoiser for N(0, sigma_data^2 I) data: D(x; s) = c_skip(s) x.

    With ``covariance`` (a symmetric positive definite matrix over the N*D
    flattened coordinates of one cloud) the data are N(0, covariance) instead
    and D(x; s) = covariance (covariance + s^2 I)^-1 x.  ``normalization``
    describes the frame the data live in, as for a trained model.
    """

    def __init__(self, sigma_data=1.0, dim=3, max_points=None, covariance=None,
                 normalization=NO_NORMALIZATION):
        self.sigma_data = sigma_data
        self.normalization = normalization
        self.dim = dim
        self.max_points = max_points
        self.n_evals = 0
        self.conditioning = "none"
        self.covariance = None
        if covariance is not None:
            cov = np.asarray(covariance, dtype=float)
            self.eigval, self.eigvec = np.linalg.eigh(cov)
            if np.any(self.eigval <= 0) or not np.allclose(cov, cov.T):
                raise UsageError("covariance must be symmetric positive definite")
            self.covariance = cov

    def _coef(self, sigma, ndim):
        s = np.asarray(sigma, dtype=float)
        s = s.reshape(s.shape + (1,) * (ndim - s.ndim)) if s.ndim else s
        return c_skip(s, self.sigma_data)

    def _matrix(self, sigma):
        lam = self.eigval
        return (self.eigvec * (lam / (lam + float(sigma) ** 2))) @ self.eigvec.T

    def _apply(self, x, sigma):
        if self.covariance is None:
            return self._coef(sigma, x.ndim) * x
        flat = x.reshape(x.shape[0], -1) if x.ndim == 3 else x.reshape(1, -1)
        sig = np.broadcast_to(np.asarray(sigma, dtype=float).reshape(-1), flat.shape[:1])
        out = np.stack([self._matrix(s) @ row for s, row in zip(sig, flat)])
        return out.reshape(x.shape)

    def log_density(self, x) -> float:
        """Exact data log-density of one cloud."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.covariance is None:
            var = self.sigma_data ** 2
            return float(-0.5 * x.size * np.log(2 * np.pi * var) - 0.5 * x @ x / var)
        z = self.eigvec.T @ x
        return float(-0.5 * (x.size * np.log(2 * np.pi) + np.sum(np.log(self.eigval))
                             + np.sum(z * z / self.eigval)))

    def denoise(self, x, sigma, cond=None, cached=None, return_trace=False):
        self.n_evals += 1
        x = np.asarray(x, dtype=float)
        out = self._apply(x, sigma)
        return (out, []) if return_trace else out

    def vjp(self, x, sigma, cond, cotangents):
        self.n_evals += 1
        x, V = np.asarray(x, dtype=float), np.asarray(cotangents, dtype=float)
        if self.covariance is None:
            c = self._coef(sigma, 1)
            return c * x, c * V
        A = self._matrix(sigma)     # symmetric, so v^T A = (A v)^T
        return (A @ x.reshape(-1)).reshape(x.shape), (V.reshape(len(V), -1) @ A).reshape(V.shape)

    def prepare(self, image):
        return None


@dataclass
class ScoreModel:
    net: scorenet.NetConfig
    diffusion: DiffusionConfig
    params: dict
    conditioning: str = "none"
    normalization: NormalizationStats = NO_NORMALIZATION
    camera: CameraIntrinsics | None = None
    frustum: bool = False
    image_channels: int = 2
    feature_channels: tuple = DEFAULT_CHANNELS
    max_points: int | None = None
    n_evals: int = field(default=0, compare=False)

    @classmethod
    def create(cls, net: scorenet.NetConfig, diffusion: DiffusionConfig, rng, conditioning="none",
               dtype=np.float32, image_channels=2, feature_channels=DEFAULT_CHANNELS, **kw):
        if conditioning not in cond_mod.MODES:
            raise UsageError(f"unknown conditioning mode {conditioning!r}")
        c_tot = int(np.sum(feature_channels))
        net = net.with_(feature_dim=c_tot if conditioning == "projective" else 0,
                        global_dim=c_tot if conditioning == "global" else 0)
        params = scorenet.init_params(net, rng, dtype)
        if conditioning != "none":
            params.update(cond_mod.init_feature_params(image_channels, rng, feature_channels, dtype))
        return cls(net, diffusion, params, conditioning, image_channels=image_channels,
                   feature_channels=tuple(feature_channels), **kw)

    def __post_init__(self):
        scorenet.check_params(self.params, self.net)
        if self.conditioning == "projective" and not self.frustum and self.camera is None:
            raise UsageError("projective conditioning in the euclidean frame needs a camera")
        if self.conditioning != "none":
            for name, shape in cond_mod.feature_shapes(self.image_channels, self.feature_channels).items():
                if tuple(self.params[name].shape) != shape:
                    raise StructuralError(f"{name}: expected {shape}")

    @property
    def dtype(self):
        return self.params["in.w"].dtype

    def astype(self, dtype) -> "ScoreModel":
        return replace(self, params=scorenet.cast_params(self.params, dtype), n_evals=0)

    def with_params(self, params) -> "ScoreModel":
        return replace(self, params=params, n_evals=0)

    # -------------------------------------------------------- conditioning

    def prepare(self, image, params=None):
        """Feature pyramid of ``image`` (H, W, C) or (B, H, W, C), or None if unconditional."""
        if self.conditioning == "none":
            return None
        if image is None:
            raise UsageError("this model is conditional: an image is required")
        if isinstance(image, FeatureGrid):
            return image
        img = np.asarray(image, dtype=self.dtype)
        return cond_mod.extract_features(self.params if params is None else params, img)

    def _frame(self, x):
        stats = self.normalization
        if stats.mode == "none":
            return x
        if not stats.resolved:
            raise UsageError("conditional models need fixed (global) normalisation")
        dt = x.value.dtype
        return ad.add(ad.mul(x, np.asarray(stats.scale, dtype=dt)), np.asarray(stats.mean, dtype=dt))

    # -------------------------------------------------------- evaluation

    def denoise_tensor(self, tensors, x, sigma, cond=None, cached=None):
        """D(x; sigma) as a Tensor from parameter tensors; also returns the inducer trace.

        ``cond`` is an image batch (features are then built inside the graph,
        as during training) or a precomputed :class:`FeatureGrid`.
        """
        x = ad.as_tensor(x)
        grid = None
        if self.conditioning != "none":
            if cond is None:
                raise UsageError("this model is conditional: an image is required")
            grid = cond if isinstance(cond, FeatureGrid) else cond_mod.extract_features(tensors, cond)
        holder = {}

        def raw(x_in, cn, _):
            tokens = cond_mod.condition_points(self.conditioning, x_in, self.camera, grid,
                                               self.frustum, frame_points=self._frame(x))
            emb = scorenet.noise_embedding(tensors, np.asarray(cn, dtype=x.value.dtype), self.net)
            if self.conditioning == "global":
                pooled = cond_mod.global_pool(grid)
                if pooled.value.shape[0] != emb.value.shape[0]:
                    pooled = ad.broadcast_to(pooled, (emb.value.shape[0], pooled.value.shape[1]))
                emb = ad.concat([emb, pooled], axis=-1)
            out, trace = scorenet.forward(tensors, tokens, emb, self.net, cached)
            holder["trace"] = trace
            return out

        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), x.value.shape[:1])
        D = precondition(raw, x, sigma, self.diffusion.sigma_data)
        return D, holder["trace"]

    def denoise(self, x, sigma, cond=None, cached=None, return_trace=False):
        """Denoised estimate as an array; counts one network evaluation."""
        self.n_evals += 1
        x = np.asarray(x, dtype=self.dtype)
        D, trace = self.denoise_tensor(self.params, x, sigma, self.prepare(cond), cached)
        out = D.value.astype(float)
        return (out, [t.value for t in trace]) if return_trace else out

    def vjp(self, x, sigma, cond, cotangents):
        """``(D(x), rows v^T dD/dx)`` for one cloud ``x`` (N, D) and cotangents (K, N, D)."""
        self.n_evals += 1
        V = np.asarray(cotangents, dtype=self.dtype)
        K = V.shape[0]
        xl = ad.leaf(np.broadcast_to(np.asarray(x, dtype=self.dtype), V.shape).copy())
        D, _ = self.denoise_tensor(self.params, xl, np.full(K, float(sigma)), self.prepare(cond))
        ad.backward(D, V)
        return D.value[0].astype(float), xl.grad.astype(float)


# ------------------------------------------------------------ frames

def encode(model, points):
    """Camera-frame clouds (..., N, 3) -> diffusion frame; returns ``(x, resolved stats)``."""
    x = np.asarray(points, dtype=float)
    if getattr(model, "frustum", False):
        x = to_frustum(x, model.camera)
    stats = getattr(model, "normalization", NO_NORMALIZATION).resolve(x)
    return stats.apply(x), stats


def decode(model, x, stats=None):
    """Diffusion-frame clouds back to the camera frame (or the normalised frame
    when per-shape statistics are unknown)."""
    stats = getattr(model, "normalization", NO_NORMALIZATION) if stats is None else stats
    if not stats.resolved:
        return np.asarray(x, dtype=float)
    out = stats.invert(x)
    if getattr(model, "frustum", False):
        out = from_frustum(out, model.camera)
    return out


def frame_correction(model, x, stats=None) -> float:
    """log|det| of the map camera frame -> diffusion frame for one cloud ``x`` (N, D)."""
    stats = getattr(model, "normalization", NO_NORMALIZATION) if stats is None else stats
    N, D = np.shape(x)
    total = stats.log_det(N, D)
    if getattr(model, "frustum", False):
        total += float(np.sum(frustum_log_det(decode(model, x, stats), model.camera)))
    return total
