"""Log-densities through the probability-flow ODE.

The cloud is carried from σ_min up to σ_max along dx/dσ = (x - D(x; σ)) / σ
with Heun steps; the change in log-density is the integral of the divergence
of that vector field, (N·D - tr ∂D/∂x) / σ.  The trace is either exact (one
VJP per coordinate, batched) or a Rademacher probe average.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionConfig
from .errors import SamplerDivergence, UsageError
from .model import frame_correction
from .rng import make_rng
from .samplers import sigma_schedule

EXACT_LIMIT = 4096
METHODS = ("auto", "exact", "probe")


@dataclass(frozen=True)
class LikelihoodResult:
    log_density: float
    frame_correction: float
    divergence_method: str
    probe_stderr: float = 0.0

    @property
    def total(self) -> float:
        return self.log_density + self.frame_correction

    def line(self, cloud_id) -> str:
        return (f"{cloud_id} {self.total:.10g} {self.log_density:.10g} "
                f"{self.frame_correction:.10g} {self.divergence_method}")


def gaussian_log_density(x, variance) -> float:
    x = np.asarray(x, dtype=float)
    return float(-0.5 * x.size * np.log(2 * np.pi * variance) - 0.5 * np.sum(x * x) / variance)


def _rows(model, x, sigma, cond, V, chunk):
    """Denoised value and ``v^T J`` for every row of V, in chunks."""
    D, out = None, []
    for start in range(0, len(V), chunk):
        D, r = model.vjp(x, sigma, cond, V[start:start + chunk])
        out.append(r)
    return D, np.concatenate(out)


def log_likelihood(model, x, cfg: DiffusionConfig, steps: int = 128, cond=None,
                   divergence: str = "auto", probes: int = 16, rng=None, stats=None,
                   chunk_tokens: int = 1 << 16) -> LikelihoodResult:
    """Log-density of one cloud ``x`` (N, D) given in the model's diffusion frame.

    ``stats`` are the resolved normalisation statistics of the cloud (needed
    for per-shape models); ``frame_correction`` converts to the camera frame.
    With probes, every probe vector is held fixed along the trajectory and
    ``probe_stderr`` is the standard error of the per-probe estimates.
    """
    if divergence not in METHODS:
        raise UsageError(f"unknown divergence method {divergence!r}")
    x = x0 = np.asarray(x, dtype=float)
    N, dim = x.shape
    size = N * dim
    method = divergence if divergence != "auto" else ("exact" if size <= EXACT_LIMIT else "probe")
    if method == "exact":
        V = np.eye(size).reshape(size, N, dim)
    else:
        if probes < 2:
            raise UsageError("need at least two probes")
        rng = make_rng(0) if rng is None else make_rng(rng)
        V = rng.choice(np.array([-1.0, 1.0]), size=(probes, N, dim))
    chunk = max(1, chunk_tokens // max(N, 1))
    grid = model.prepare(cond)

    def field(y, s):
        D, R = _rows(model, y, s, grid, V, chunk)
        if method == "exact":
            tr = np.trace(R.reshape(size, size))
        else:
            tr = np.einsum("knd,knd->k", R, V)
        return (y - D) / s, (size - tr) / s

    sig = sigma_schedule(cfg, steps + 1)[:-1][::-1]
    f, g = field(x, sig[0])
    delta = np.zeros_like(g)
    for i in range(steps):
        h = sig[i + 1] - sig[i]
        x_pred = x + h * f
        f2, g2 = field(x_pred, sig[i + 1])
        x = x + 0.5 * h * (f + f2)
        delta = delta + 0.5 * h * (g + g2)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(delta))):
            raise SamplerDivergence("non-finite likelihood trajectory", where=f"sigma={sig[i + 1]:.6g}")
        if i + 1 < steps:
            f, g = field(x, sig[i + 1])
    prior = gaussian_log_density(x, cfg.sigma_max**2 + cfg.sigma_data**2)
    per = prior + delta
    stderr = float(np.std(per, ddof=1) / np.sqrt(len(per))) if method == "probe" else 0.0
    return LikelihoodResult(float(np.mean(per)), frame_correction(model, x0, stats), method, stderr)
