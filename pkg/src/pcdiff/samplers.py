"""Reverse-process samplers and inpainting-based upsampling.

Every sampler works in the model's diffusion frame on arrays (B, N, D) and
calls ``model.denoise``.  Each trajectory draws its noise from its own
stream, derived from the master seed and the trajectory index, so results do
not depend on how trajectories are batched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .diffusion import DiffusionConfig
from .errors import SamplerDivergence, SizeError, UsageError
from .rng import substream

KINDS = ("sde", "ode")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "sde"
    steps: int = 128
    churn: float = 40.0
    churn_range: tuple = (0.0, math.inf)
    noise_inflation: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown sampler {self.kind!r}")
        if self.steps < 2:
            raise UsageError("steps must be >= 2")
        if self.churn < 0:
            raise UsageError("churn must be non-negative")

    def with_(self, **kw) -> "SamplerConfig":
        return replace(self, **kw)


def sigma_schedule(cfg: DiffusionConfig, steps: int | None = None) -> np.ndarray:
    """σ_0 = σ_max > ... > σ_{steps-1} = σ_min, followed by 0."""
    steps = cfg.steps if steps is None else steps
    if steps < 2:
        raise UsageError("steps must be >= 2")
    inv = 1.0 / cfg.rho
    i = np.arange(steps) / (steps - 1)
    s = (cfg.sigma_max**inv + i * (cfg.sigma_min**inv - cfg.sigma_max**inv)) ** cfg.rho
    s[0], s[-1] = cfg.sigma_max, cfg.sigma_min
    return np.append(s, 0.0)


def churn_gamma(scfg: SamplerConfig, sigma: float) -> float:
    if scfg.kind == "ode":
        return 0.0
    lo, hi = scfg.churn_range
    if not lo <= sigma <= hi:
        return 0.0
    return min(scfg.churn / scfg.steps, math.sqrt(2.0) - 1.0)


class _Streams:
    """One generator per trajectory; draws are stacked along the batch axis."""

    def __init__(self, seed, count, tag=0):
        self.gens = [substream(seed, tag, b) for b in range(count)]

    def normal(self, shape):
        return np.stack([g.standard_normal(shape) for g in self.gens])


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise SamplerDivergence("non-finite sampler state", where=where)


def heun_step(denoise, x, s_cur, s_next, gamma=0.0, noise=None, inflation=1.0):
    """One churned second-order step from ``s_cur`` to ``s_next``.

    ``denoise(x, sigma)`` is called twice, or once when ``s_next`` is 0
    (the final step is first order).
    """
    s_hat = s_cur * (1.0 + gamma)
    if gamma > 0:
        x = x + math.sqrt(s_hat**2 - s_cur**2) * inflation * noise
    d = (x - denoise(x, s_hat)) / s_hat
    x_next = x + (s_next - s_hat) * d
    if s_next > 0:
        d2 = (x_next - denoise(x_next, s_next)) / s_next
        x_next = x + (s_next - s_hat) * 0.5 * (d + d2)
    return x_next


def _counted(model, eval_log):
    start = model.n_evals

    def mark():
        nonlocal start
        if eval_log is not None:
            eval_log.append(model.n_evals - start)
        start = model.n_evals
    return mark


def sample(model, cfg: DiffusionConfig, scfg: SamplerConfig, n_points: int, n_samples: int = 1,
           cond=None, dim: int = 3, eval_log: list | None = None, prior=None) -> np.ndarray:
    """Draw ``n_samples`` clouds of ``n_points`` in the model's diffusion frame.

    ``prior`` optionally supplies the standard-normal prior draw (B, N, D).
    ``eval_log`` (a list) receives the number of network evaluations per step.
    """
    sig = sigma_schedule(cfg, scfg.steps)
    streams = _Streams(scfg.seed, n_samples)
    eps = streams.normal((n_points, dim)) if prior is None else np.asarray(prior, dtype=float)
    x = sig[0] * eps
    grid = model.prepare(cond)
    denoise = lambda y, s: model.denoise(y, s, grid)
    mark = _counted(model, eval_log)
    for i in range(scfg.steps):
        gamma = churn_gamma(scfg, sig[i])
        noise = streams.normal((n_points, dim)) if gamma > 0 else None
        x = heun_step(denoise, x, sig[i], sig[i + 1], gamma, noise, scfg.noise_inflation)
        _check(x, f"step {i}")
        mark()
    return x


def sample_sde(model, cfg, scfg: SamplerConfig, n_points, n_samples=1, cond=None, **kw):
    return sample(model, cfg, scfg.with_(kind="sde"), n_points, n_samples, cond, **kw)


def sample_ode(model, cfg, scfg: SamplerConfig, n_points, n_samples=1, cond=None, **kw):
    return sample(model, cfg, scfg.with_(kind="ode"), n_points, n_samples, cond, **kw)


def generate_dense(model, cfg, scfg: SamplerConfig, n_points: int, total: int, cond=None,
                   dim: int = 3) -> np.ndarray:
    """``ceil(total / n_points)`` independent samples concatenated, truncated to ``total``."""
    if n_points < 1 or total < 1:
        raise SizeError("point counts must be positive")
    k = -(-total // n_points)
    x = sample(model, cfg, scfg, n_points, k, cond, dim)
    return x.reshape(k * n_points, dim)[:total]


# ---------------------------------------------------------------- upsampling

def _new_width(model, n_context, n_new, tile):
    width = n_new
    if model.max_points is not None:
        width = model.max_points - n_context
        if width < 1:
            raise UsageError("context already fills the trained point range")
    if n_new > width and not tile:
        raise UsageError(f"{n_new} new points exceed the trained width {width}; enable tiling")
    return min(width, n_new)


def _resampled_step(step, x, s_cur, s_next, substeps, renoise):
    """Reverse step followed by ``substeps`` (re-noise to ``s_cur``, reverse step) cycles."""
    x = step(x, 0)
    for r in range(1, substeps + 1):
        x = x + math.sqrt(s_cur**2 - s_next**2) * renoise()
        x = step(x, r)
    return x


def upsample_inpaint(model, context, target_m: int, cfg: DiffusionConfig, scfg: SamplerConfig,
                     resample_substeps: int = 4, cond=None, tile: bool = False,
                     eval_log: list | None = None) -> np.ndarray:
    """Complete a context cloud (n, D) to ``target_m`` points by inpainting.

    The context is re-diffused to every noise level the solver visits, with
    fresh noise per (sub-)step; only the new points are integrated.  When the
    new points exceed the trained width they are split into tiles, each an
    independent completion of the same context.
    """
    context = np.asarray(context, dtype=float)
    n, dim = context.shape
    k = target_m - n
    if k < 1:
        raise UsageError("target must exceed the context size")
    if resample_substeps < 0:
        raise UsageError("resample sub-steps must be non-negative")
    width = _new_width(model, n, k, tile)
    tiles = -(-k // width)
    sig = sigma_schedule(cfg, scfg.steps)
    new_streams, ctx_streams = _Streams(scfg.seed, tiles, 0), _Streams(scfg.seed, tiles, 1)
    grid = model.prepare(cond)
    x = sig[0] * new_streams.normal((width, dim))
    mark = _counted(model, eval_log)
    for i in range(scfg.steps):
        s_cur, s_next = sig[i], sig[i + 1]

        def step(y, r):
            eps_c = ctx_streams.normal((n, dim))

            def denoise(z, s):
                joint = np.concatenate([context + s * eps_c, z], axis=1)
                return model.denoise(joint, s, grid)[:, n:]
            gamma = churn_gamma(scfg, s_cur)
            noise = new_streams.normal((width, dim)) if gamma > 0 else None
            return heun_step(denoise, y, s_cur, s_next, gamma, noise, scfg.noise_inflation)

        x = _resampled_step(step, x, s_cur, s_next, resample_substeps,
                            lambda: new_streams.normal((width, dim)))
        _check(x, f"step {i}")
        mark()
    new = x.reshape(tiles * width, dim)[:k]
    return np.concatenate([context, new], axis=0)


def cached_denoiser(model, context, grid=None, batches: int = 1):
    """``denoise(new, sigma, eps_c)`` scoring new points against cached inducer state.

    The context (re-diffused with ``eps_c``) runs alone to produce the trace,
    then the new points run with that trace, in ``batches`` groups.
    """
    context = np.asarray(context, dtype=float)

    def denoise(new, s, eps_c):
        _, trace = model.denoise((context + s * eps_c)[None], s, grid, return_trace=True)
        parts = np.array_split(np.asarray(new), batches, axis=-2)
        outs = [model.denoise(p[None] if p.ndim == 2 else p, s, grid, cached=trace) for p in parts]
        return np.concatenate(outs, axis=-2).reshape(np.shape(new))
    return denoise


def upsample_cached(model, context, new_per_tile: int, tiles: int, cfg: DiffusionConfig,
                    scfg: SamplerConfig, resample_substeps: int = 4, cond=None, batches: int = 1,
                    eval_log: list | None = None) -> np.ndarray:
    """Upsample with shared inducer state: all new points reverse-diffuse in
    parallel against the context's cached inducers, so they never interact
    and the cost per step is one context pass plus one pass over new points.
    """
    context = np.asarray(context, dtype=float)
    n, dim = context.shape
    k = new_per_tile * tiles
    if k < 1:
        raise UsageError("need at least one new point")
    if model.max_points is not None and n > model.max_points:
        raise UsageError("context exceeds the trained point range")
    if batches < 1:
        raise UsageError("batches must be positive")
    sig = sigma_schedule(cfg, scfg.steps)
    new_streams, ctx_streams = _Streams(scfg.seed, 1, 0), _Streams(scfg.seed, 1, 1)
    cached = cached_denoiser(model, context, model.prepare(cond), batches)
    x = sig[0] * new_streams.normal((k, dim))     # (1, k, D)
    mark = _counted(model, eval_log)
    for i in range(scfg.steps):
        s_cur, s_next = sig[i], sig[i + 1]

        def step(y, r):
            eps_c = ctx_streams.normal((n, dim))[0]
            gamma = churn_gamma(scfg, s_cur)
            noise = new_streams.normal((k, dim)) if gamma > 0 else None
            return heun_step(lambda z, s: cached(z, s, eps_c), y, s_cur, s_next, gamma, noise,
                             scfg.noise_inflation)

        x = _resampled_step(step, x, s_cur, s_next, resample_substeps,
                            lambda: new_streams.normal((k, dim)))
        _check(x, f"step {i}")
        mark()
    return np.concatenate([context, x[0]], axis=0)

