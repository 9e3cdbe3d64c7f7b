"""Command-line entry point: ``pcdiff <subcommand> ...``.

Exit codes: 0 on success, 2 for usage errors (bad flags, missing inputs,
inconsistent options), 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import io
from .config import build, read_config
from .errors import PcdiffError, UsageError
from .likelihood import log_likelihood
from .metrics import DISTANCES, evaluate_sets, icp_align
from .model import decode, encode
from .samplers import SamplerConfig, sample, upsample_cached, upsample_inpaint
from .synthetic import FAMILIES, gen_dataset, load_dataset
from .training import Trainer, build_model, fitted_sigma_max

log = logging.getLogger("pcdiff")


def _csv(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcdiff", description="Point-cloud diffusion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--families", type=_csv, default=list(FAMILIES))
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--points", type=int, default=2048)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a score model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data-fraction", type=float)
    t.add_argument("--conditioning", choices=("none", "projective", "global"))
    t.add_argument("--frustum", action="store_true", default=None)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--points", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--normalization", choices=("global", "per-shape", "none"))
    t.add_argument("--eval-every", type=int)
    t.add_argument("--val", help="validation dataset directory")
    t.add_argument("--resume", action="store_true", help="continue from --out if it exists")

    s = sub.add_parser("sample", help="draw point clouds from a trained model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--points", type=int, default=None)
    s.add_argument("--sampler", choices=("sde", "ode"), default="sde")
    s.add_argument("--steps", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image")
    s.add_argument("--out", required=True)
    s.add_argument("--ply")

    u = sub.add_parser("upsample", help="add points to an existing cloud by inpainting")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--in", dest="inp", required=True)
    u.add_argument("--target-m", type=int, required=True)
    u.add_argument("--resample-substeps", type=int, default=4)
    u.add_argument("--cached", action="store_true")
    u.add_argument("--tile", action="store_true", help="allow tiled completions beyond the trained width")
    u.add_argument("--sampler", choices=("sde", "ode"), default="sde")
    u.add_argument("--steps", type=int, default=128)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--image")
    u.add_argument("--out", required=True)

    lk = sub.add_parser("likelihood", help="log-density of point clouds")
    lk.add_argument("--ckpt", required=True)
    lk.add_argument("--in", dest="inp", required=True)
    lk.add_argument("--divergence", choices=("exact", "probe", "auto"), default="auto")
    lk.add_argument("--probes", type=int, default=16)
    lk.add_argument("--steps", type=int, default=128)
    lk.add_argument("--seed", type=int, default=0)
    lk.add_argument("--image")
    lk.add_argument("--out")

    e = sub.add_parser("evaluate", help="set metrics between reference and generated clouds")
    e.add_argument("--ref", required=True)
    e.add_argument("--gen", required=True)
    e.add_argument("--metrics", type=_csv, default=["cd", "emd"])
    e.add_argument("--icp", action="store_true", help="align each generated cloud to its reference")
    e.add_argument("--icp-scale", action="store_true")
    e.add_argument("--report")
    e.add_argument("--mtx", help="prefix for MTX1 matrix dumps")
    return p


# ---------------------------------------------------------------- commands

def cmd_gen_data(a):
    ds = gen_dataset(a.out, a.families, a.count, a.points, a.image_size, a.seed)
    print(f"wrote {len(ds)} scenes to {a.out}")


def cmd_train(a):
    file_values = read_config(a.config) if a.config else {}
    over = dict(steps=a.steps, batch=a.batch, lr=a.lr, data_fraction=a.data_fraction, eval_every=a.eval_every,
                points=a.points, conditioning=a.conditioning, normalization=a.normalization,
                frustum=a.frustum, seed=a.seed)
    tcfg = build("train", file_values, over)
    data = load_dataset(a.data)
    val = load_dataset(a.val) if a.val else None
    if a.resume and Path(a.out).exists():
        trainer = Trainer.resume(a.out, data, val)
        if a.steps is not None:
            trainer.tcfg = trainer.tcfg.with_(steps=a.steps)
    else:
        net, diffusion = build("net", file_values), build("diffusion", file_values)
        model = build_model(tcfg, data, net, diffusion)
        if "sigma_max" not in file_values.get("diffusion", {}):
            smax = fitted_sigma_max(tcfg, data, model.normalization)
            model = replace(model, diffusion=diffusion.with_(sigma_max=smax))
        trainer = Trainer(model, tcfg, data, val)
    trainer.run(out=a.out, log_every=100)
    print(f"trained {trainer.step_count} steps, final loss {trainer.history[-1]:.5f}; saved {a.out}")


def _image(model, path):
    if model.conditioning == "none":
        if path:
            raise UsageError("this model is unconditional; drop --image")
        return None
    if not path:
        raise UsageError("this model is conditional; pass --image")
    img = io.read_image(path)
    if img.shape[-1] != model.image_channels:
        raise UsageError(f"image has {img.shape[-1]} channels, model expects {model.image_channels}")
    return img


def cmd_sample(a):
    model, _, _ = ckpt.load_model(a.ckpt)
    cond = _image(model, a.image)
    points = a.points or model.max_points
    if points is None:
        raise UsageError("pass --points")
    scfg = SamplerConfig(a.sampler, a.steps, seed=a.seed)
    clouds = decode(model, sample(model, model.diffusion, scfg, points, a.n, cond))
    io.write_pcb(a.out, clouds)
    if a.ply:
        io.write_ply(a.ply, clouds.reshape(-1, clouds.shape[-1]))
    print(f"wrote {len(clouds)} cloud(s) of {points} points to {a.out}")


def cmd_upsample(a):
    model, _, _ = ckpt.load_model(a.ckpt)
    cond = _image(model, a.image)
    clouds = io.read_pcb(a.inp).astype(float)
    if model.normalization.mode == "per-shape":
        raise UsageError("upsampling needs a model with fixed normalisation")
    scfg = SamplerConfig(a.sampler, a.steps, seed=a.seed)
    out = []
    for context in clouds:
        n = len(context)
        x, _ = encode(model, context)
        if a.cached:
            if a.target_m <= n:
                raise UsageError("target must exceed the context size")
            y = upsample_cached(model, x, a.target_m - n, 1, model.diffusion, scfg, a.resample_substeps, cond)
        else:
            y = upsample_inpaint(model, x, a.target_m, model.diffusion, scfg, a.resample_substeps, cond, a.tile)
        full = decode(model, y)
        full[:n] = context  # the context block is the input itself
        out.append(full)
    io.write_pcb(a.out, np.stack(out))
    print(f"wrote {len(out)} cloud(s) of {a.target_m} points to {a.out}")


def cmd_likelihood(a):
    model, _, _ = ckpt.load_model(a.ckpt)
    model = model.astype(np.float64)
    cond = _image(model, a.image)
    clouds = io.read_pcb(a.inp).astype(float)
    lines = []
    for i, c in enumerate(clouds):
        x, stats = encode(model, c)
        res = log_likelihood(model, x, model.diffusion, a.steps, cond, a.divergence, a.probes,
                             rng=a.seed, stats=stats)
        lines.append(res.line(i))
    text = "\n".join(lines) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)


def cmd_evaluate(a):
    for m in a.metrics:
        if m not in DISTANCES:
            raise UsageError(f"unknown metric {m!r}; choose from {','.join(DISTANCES)}")
    ref = list(io.read_pcb(a.ref).astype(float))
    gen = list(io.read_pcb(a.gen).astype(float))
    if a.icp or a.icp_scale:
        if len(ref) != len(gen):
            raise UsageError("ICP alignment pairs clouds: --ref and --gen need equal counts")
        gen = [icp_align(g, r, estimate_scale=a.icp_scale)[1] for g, r in zip(gen, ref)]
    report = evaluate_sets(ref, gen, a.metrics, paired=len(ref) == len(gen))
    if a.report:
        Path(a.report).write_text(report.to_csv())
    if a.mtx:
        for d, m in report.matrices.items():
            io.write_mtx1(f"{a.mtx}.{d}.mtx", m.values)
    sys.stdout.write(report.to_text())


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "upsample": cmd_upsample, "likelihood": cmd_likelihood, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pcdiff {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (PcdiffError, OSError, ValueError) as exc:
        print(f"pcdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
