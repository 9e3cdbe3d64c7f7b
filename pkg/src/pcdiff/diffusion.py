"""Continuous-time variance-exploding noise model with denoiser preconditioning.

Noise level ``sigma`` doubles as solver time.  The denoiser is parameterised
as ``D(x; s) = c_skip(s) x + c_out(s) F(c_in(s) x, c_noise(s))`` and the score
follows as ``(D - x) / s^2``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable, Mapping

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad
from .errors import DomainError, SizeError, StructuralError, TrainingDivergence


@dataclass(frozen=True)
class DiffusionConfig:
    sigma_max: float = 10.0
    sigma_min: float = 1e-4
    sigma_data: float = 1.0
    rho: float = 7.0
    steps: int = 128

    def __post_init__(self):
        if not (0 < self.sigma_min <= self.sigma_max):
            raise DomainError("need 0 < sigma_min <= sigma_max")
        if self.steps < 2:
            raise DomainError("steps must be >= 2")

    def with_(self, **kw) -> "DiffusionConfig":
        return replace(self, **kw)

    def as_dict(self):
        return asdict(self)


def c_skip(sigma, sigma_data=1.0):
    return sigma_data**2 / (sigma**2 + sigma_data**2)


def c_out(sigma, sigma_data=1.0):
    return sigma * sigma_data / np.sqrt(sigma**2 + sigma_data**2)


def c_in(sigma, sigma_data=1.0):
    return 1.0 / np.sqrt(sigma**2 + sigma_data**2)


def c_noise(sigma):
    return np.log(sigma) / 4.0


def loss_weight(sigma, sigma_data=1.0):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def _sigma_column(sigma, ndim):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be positive")
    return sigma.reshape(sigma.shape + (1,) * (ndim - sigma.ndim)) if sigma.ndim else sigma


def precondition(raw_net: Callable, x, sigma, sigma_data=1.0, cond=None):
    """Denoised estimate D(x; sigma) from a raw network ``F(x_in, c_noise, cond)``.

    ``x`` is (B, N, D) (array or :class:`Tensor`), ``sigma`` scalar or (B,).
    Returns a Tensor when the network does, else an array.
    """
    xv = x.value if isinstance(x, ad.Tensor) else np.asarray(x)
    s = _sigma_column(sigma, xv.ndim)
    s_vec = np.broadcast_to(np.asarray(sigma, dtype=float), xv.shape[:1]) if xv.ndim == 3 else sigma
    dt = xv.dtype
    skip, out, inn = (np.asarray(f(s, sigma_data), dtype=dt) for f in (c_skip, c_out, c_in))
    F = raw_net(ad.mul(x, inn) if isinstance(x, ad.Tensor) else xv * inn, c_noise(s_vec), cond)
    if isinstance(F, ad.Tensor) or isinstance(x, ad.Tensor):
        return ad.add(ad.mul(x, skip), ad.mul(F, out))
    return skip * xv + out * F


def score_from_denoised(denoised, x, sigma):
    s = _sigma_column(sigma, np.ndim(x))
    return (denoised - x) / s**2


# ---------------------------------------------------------------- noise levels

def sample_sigma(cfg: DiffusionConfig, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Log-uniform noise levels on (sigma_min, sigma_max)."""
    lo, hi = np.log(cfg.sigma_min), np.log(cfg.sigma_max)
    if lo == hi:
        return np.full(batch, cfg.sigma_min)
    u = rng.uniform(0.0, 1.0, size=batch)
    # open interval: uniform() may return exactly 0
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return np.exp(lo + u * (hi - lo))


def estimate_sigma_max(clouds, samples: int = 100_000, rng: np.random.Generator | None = None) -> float:
    """Largest Euclidean distance between training clouds as flattened vectors.

    Clouds are compared in storage order, without matching points.  Exhaustive
    up to one million candidate pairs (or ``samples``, if larger); beyond that
    ``samples`` random pairs are drawn.
    """
    flat = np.asarray([np.asarray(c, dtype=float).reshape(-1) for c in clouds])
    n = len(flat)
    if n < 2:
        raise SizeError("need at least two clouds")
    pairs = n * (n - 1) // 2
    if pairs <= max(samples, 1_000_000):
        return float(pdist(flat).max())
    if rng is None:
        raise SizeError("random pair sampling needs an rng")
    i = rng.integers(0, n, size=samples)
    j = rng.integers(0, n - 1, size=samples)
    j = np.where(j >= i, j + 1, j)
    return float(np.sqrt(((flat[i] - flat[j]) ** 2).sum(1)).max())


def perturb(clean, sigma, rng: np.random.Generator):
    """Return ``(clean + sigma * eps, eps)`` with standard-normal ``eps``."""
    clean = np.asarray(clean)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise DomainError("sigma must be non-negative")
    eps = rng.standard_normal(clean.shape).astype(clean.dtype, copy=False)
    s = sigma.reshape(sigma.shape + (1,) * (clean.ndim - sigma.ndim)) if sigma.ndim else sigma
    return (clean + (s * eps).astype(clean.dtype, copy=False)), eps


# ---------------------------------------------------------------- training loss

def denoising_loss(denoise: Callable, params: Mapping[str, np.ndarray], clean, cfg: DiffusionConfig,
                   rng: np.random.Generator, cond=None, sigma=None, noise=None):
    """Weighted denoising loss and its parameter gradients.

    ``denoise(tensors, x_noisy, sigma, cond)`` returns D(x; sigma) as a Tensor
    built from the leaf ``tensors`` (one per entry of ``params``).  The loss is
    ``mean[lambda(sigma) * (D - x)^2]`` over batch, points and coordinates.
    Returns ``(loss, grads)``.
    """
    clean = np.asarray(clean)
    B = clean.shape[0]
    if sigma is None:
        sigma = sample_sigma(cfg, B, rng)
    sigma = np.asarray(sigma, dtype=float).reshape(B)
    if noise is None:
        noisy, _ = perturb(clean, sigma, rng)
    else:
        noisy = clean + (sigma[:, None, None] * noise).astype(clean.dtype)
    leaves = {k: ad.leaf(v) for k, v in params.items()}
    denoised = denoise(leaves, noisy, sigma, cond)
    weight = loss_weight(sigma, cfg.sigma_data).astype(clean.dtype)[:, None, None]
    resid = ad.sub(denoised, clean)
    loss = ad.mean(ad.mul(ad.square(resid), weight))
    value = float(loss.value)
    if not np.isfinite(value):
        raise TrainingDivergence("non-finite loss", where=f"sigma range [{sigma.min():.3g}, {sigma.max():.3g}]")
    ad.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in leaves.items()}
    return value, grads


# ---------------------------------------------------------------- weight averaging

@dataclass
class EmaState:
    shadow: dict
    rate: float = 0.999

    @classmethod
    def init(cls, params: Mapping[str, np.ndarray], rate=0.999) -> "EmaState":
        return cls({k: np.array(v, copy=True) for k, v in params.items()}, rate)


def ema_update(ema: EmaState, live: Mapping[str, np.ndarray]) -> EmaState:
    """shadow <- rate * shadow + (1 - rate) * live, elementwise."""
    if set(ema.shadow) != set(live):
        raise StructuralError("EMA shadow and live parameters have different names")
    new = {}
    for k, w in live.items():
        s = ema.shadow[k]
        if s.shape != w.shape:
            raise StructuralError(f"shape mismatch for {k}: {s.shape} vs {w.shape}")
        new[k] = (ema.rate * s + (1.0 - ema.rate) * w).astype(s.dtype, copy=False)
    return EmaState(new, ema.rate)


def ema_swap(ema: EmaState, live: Mapping[str, np.ndarray]):
    """Exchange roles: returns ``(params_for_inference, ema_holding_live)``."""
    return dict(ema.shadow), EmaState({k: np.array(v, copy=True) for k, v in live.items()}, ema.rate)
