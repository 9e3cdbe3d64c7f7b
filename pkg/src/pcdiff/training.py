"""Training loop: AdaBelief on the denoising loss with EMA, subsampling
augmentation, data-fraction restriction, CD 1-NNA validation and resumable
checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from .diffusion import DiffusionConfig, EmaState, denoising_loss, ema_update, estimate_sigma_max
from .errors import TrainingDivergence, UsageError
from .geometry import fit_normalization, to_frustum
from .metrics import one_nna
from .model import ScoreModel, decode
from .rng import make_rng, set_state_json, state_to_json, substream
from .samplers import SamplerConfig, sample
from .scorenet import NetConfig
from .synthetic import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 2e-4
    data_fraction: float = 1.0
    eval_every: int = 0
    points: int = 128
    conditioning: str = "none"
    normalization: str = "global"
    frustum: bool = False
    seed: int = 0
    ema_rate: float = 0.999
    val_size: int = 16
    val_steps: int = 16
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-12

    def __post_init__(self):
        if not 0 < self.data_fraction <= 1:
            raise UsageError("data fraction must lie in (0, 1]")
        for name in ("steps", "batch", "points"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.conditioning != "none" and self.normalization == "per-shape":
            raise UsageError("conditional models need global normalisation")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdaBelief:
    """Adam variant whose second moment tracks the squared deviation of the
    gradient from its running mean."""
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-12
    m: dict = field(default_factory=dict)
    s: dict = field(default_factory=dict)
    t: int = 0

    def update(self, params: dict, grads: dict) -> dict:
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        out = {}
        for k, w in params.items():
            g = grads[k].astype(np.float64)
            m = self.m.get(k, np.zeros_like(g))
            s = self.s.get(k, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            s = b2 * s + (1 - b2) * (g - m) ** 2 + self.eps
            self.m[k], self.s[k] = m, s
            out[k] = (w - self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)).astype(w.dtype)
        return out


# ---------------------------------------------------------------- data

def frame_clouds(clouds, frustum, cam):
    clouds = np.asarray(clouds, dtype=float)
    return to_frustum(clouds, cam, clamp=True) if frustum else clouds


def data_pool(count: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded prefix of a permutation of the dataset: the indices training may touch."""
    perm = substream(seed, 0xDA7A).permutation(count)
    return np.sort(perm[:math.ceil(fraction * count)])


def build_model(tcfg: TrainConfig, data: Dataset, net: NetConfig | None = None,
                diffusion: DiffusionConfig | None = None, dtype=np.float32) -> ScoreModel:
    """Fresh model with normalisation and σ_max fitted on the usable training pool."""
    pool = data_pool(len(data), tcfg.data_fraction, tcfg.seed)
    clouds = frame_clouds(data.clouds[pool], tcfg.frustum, data.cam)
    stats = fit_normalization(list(clouds), tcfg.normalization)
    diffusion = diffusion or DiffusionConfig()
    if diffusion.sigma_max is None or diffusion.sigma_max <= 0:
        raise UsageError("sigma_max must be positive")
    rng = substream(tcfg.seed, 0x1417)
    model = ScoreModel.create(net or NetConfig.desk(), diffusion, rng, tcfg.conditioning, dtype,
                              image_channels=data.images.shape[-1], normalization=stats,
                              camera=data.cam, frustum=tcfg.frustum, max_points=tcfg.points)
    return model


def fitted_sigma_max(tcfg: TrainConfig, data: Dataset, stats) -> float:
    """Largest pairwise distance between normalised, subsampled training clouds."""
    pool = data_pool(len(data), tcfg.data_fraction, tcfg.seed)
    rng = substream(tcfg.seed, 0x516A)
    clouds = frame_clouds(data.clouds[pool], tcfg.frustum, data.cam)
    sub = [stats.apply(c[rng.choice(c.shape[0], tcfg.points, replace=False)]) for c in clouds]
    return estimate_sigma_max(sub, rng=rng)


# ---------------------------------------------------------------- trainer

class Trainer:
    def __init__(self, model: ScoreModel, tcfg: TrainConfig, data: Dataset, val: Dataset | None = None):
        self.model, self.tcfg, self.data, self.val = model, tcfg, data, val
        self.pool = data_pool(len(data), tcfg.data_fraction, tcfg.seed)
        self.frames = frame_clouds(data.clouds, tcfg.frustum, data.cam)
        self.params = {k: v.copy() for k, v in model.params.items()}
        self.ema = EmaState.init(self.params, tcfg.ema_rate)
        self.opt = AdaBelief(tcfg.lr, tuple(tcfg.betas), tcfg.eps)
        self.rng = make_rng(substream(tcfg.seed, 0x7EA1))
        self.step_count = 0
        self.accessed: set[int] = set()
        self.history: list[float] = []
        self.best_val = math.inf
        self.best_ema = None

    # ------------------------------------------------ one step

    def batch(self):
        rng, t = self.rng, self.tcfg
        idx = rng.choice(self.pool, size=t.batch, replace=len(self.pool) < t.batch)
        self.accessed.update(int(i) for i in idx)
        N = self.frames.shape[1]
        sub = np.stack([self.frames[i][rng.choice(N, t.points, replace=False)] for i in idx])
        clean = self.model.normalization.apply(sub).astype(self.model.dtype)
        images = self.data.images[idx].astype(self.model.dtype) if t.conditioning != "none" else None
        return clean, images

    def loss_fn(self, tensors, noisy, sigma, images):
        D, _ = self.model.denoise_tensor(tensors, noisy, sigma, images)
        return D

    def step(self) -> float:
        clean, images = self.batch()
        loss, grads = denoising_loss(self.loss_fn, self.params, clean, self.model.diffusion,
                                     self.rng, cond=images)
        self.params = self.opt.update(self.params, grads)
        self.ema = ema_update(self.ema, self.params)
        self.step_count += 1
        self.history.append(loss)
        return loss

    def run(self, steps: int | None = None, out=None, log_every: int = 0) -> list:
        """Train ``steps`` more steps (default: up to the configured total).

        On divergence the last good state is written to ``out`` before the
        error propagates.
        """
        steps = self.tcfg.steps - self.step_count if steps is None else steps
        for _ in range(steps):
            good = self.snapshot()
            try:
                loss = self.step()
            except TrainingDivergence:
                if out is not None:
                    self.restore(good)
                    self.save(out)
                raise
            if log_every and self.step_count % log_every == 0:
                log.info("step %d loss %.5f", self.step_count, loss)
            if self.tcfg.eval_every and self.val is not None and self.step_count % self.tcfg.eval_every == 0:
                score = self.validate()
                log.info("step %d val 1-NNA %.4f", self.step_count, score)
                if score < self.best_val:
                    self.best_val = score
                    self.best_ema = dict(self.ema.shadow)
                    if out is not None:
                        self.save(str(out) + ".best", ema=self.best_ema)
        if out is not None:
            self.save(out)
        return self.history

    def snapshot(self):
        return (self.params, self.ema, self.opt.m.copy(), self.opt.s.copy(), self.opt.t,
                self.rng.bit_generator.state, self.step_count)

    def restore(self, snap):
        self.params, self.ema, self.opt.m, self.opt.s, self.opt.t, state, self.step_count = snap
        self.rng.bit_generator.state = state

    # ------------------------------------------------ validation

    def inference_model(self) -> ScoreModel:
        return self.model.with_params(dict(self.ema.shadow))

    def validate(self) -> float:
        """CD 1-NNA of EMA samples against a validation subset (lower is better)."""
        t, val = self.tcfg, self.val
        n = min(t.val_size, len(val))
        model = self.inference_model()
        rng = substream(t.seed, 0x5A11, self.step_count)
        ref = [val.clouds[i][rng.choice(val.clouds.shape[1], t.points, replace=False)] for i in range(n)]
        scfg = SamplerConfig("sde", t.val_steps, seed=t.seed)
        if t.conditioning == "none":
            gen = decode(model, sample(model, model.diffusion, scfg, t.points, n))
        else:
            gen = np.stack([decode(model, sample(model, model.diffusion, scfg.with_(seed=t.seed + i),
                                                 t.points, 1, val.images[i]))[0] for i in range(n)])
        return one_nna(ref, list(gen), "cd")

    # ------------------------------------------------ persistence

    def save(self, path, ema=None):
        model = self.model.with_params(self.params)
        extra = ckpt.join(opt_m=self.opt.m, opt_s=self.opt.s)
        meta = {"train": asdict(self.tcfg), "step": self.step_count, "opt_t": self.opt.t,
                "rng": state_to_json(self.rng),
                "accessed": sorted(self.accessed), "history": self.history, "best_val": self.best_val}
        ckpt.save_model(path, model, ema or self.ema.shadow, extra, meta)

    @classmethod
    def resume(cls, path, data: Dataset, val: Dataset | None = None) -> "Trainer":
        tensors, meta = ckpt.load(path)
        tcfg = TrainConfig(**{**meta["train"], "betas": tuple(meta["train"]["betas"])})
        model = ckpt.model_from_meta(meta["model"], ckpt.split(tensors, "params"))
        tr = cls(model, tcfg, data, val)
        tr.ema = EmaState({k: v.copy() for k, v in ckpt.split(tensors, "ema").items()}, tcfg.ema_rate)
        tr.opt.m, tr.opt.s, tr.opt.t = ckpt.split(tensors, "opt_m"), ckpt.split(tensors, "opt_s"), meta["opt_t"]
        set_state_json(tr.rng, meta["rng"])
        tr.step_count = meta["step"]
        tr.accessed = set(meta["accessed"])
        tr.history = list(meta["history"])
        tr.best_val = meta["best_val"]
        return tr


def train(tcfg: TrainConfig, data: Dataset, net: NetConfig | None = None,
          diffusion: DiffusionConfig | None = None, val: Dataset | None = None, out=None,
          fit_sigma_max: bool = True, log_every: int = 0) -> Trainer:
    """Build a model for ``data`` and train it; returns the finished trainer."""
    model = build_model(tcfg, data, net, diffusion)
    if fit_sigma_max:
        smax = fitted_sigma_max(tcfg, data, model.normalization)
        model = replace(model, diffusion=model.diffusion.with_(sigma_max=max(smax, 2 * model.diffusion.sigma_min)))
    tr = Trainer(model, tcfg, data, val)
    tr.run(out=out, log_every=log_every)
    return tr
