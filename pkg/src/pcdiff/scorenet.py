"""Permutation-equivariant score network built from inducer cross-attention.

Each layer runs four residual sub-blocks on the point tokens ``T`` and that
layer's learned inducers ``I``:

    I = I0 + Attn(norm(I) <- norm(T))     inducers read the points
    I = I + MLP(norm(I))                  shallow inducer MLP
    T = T + Attn(norm(T) <- norm(I))      points read the inducers
    T = T + MLP(norm(T))                  token MLP

``norm`` is a per-token group norm whose scale and bias are affine in the
noise embedding: ``GN(x) * (1 + e Ws) + e Wb``.  MLPs use the Gaussian
activation ``exp(-x^2 / 2a^2)``.  Points only meet through the inducers, so
running the last two sub-blocks against cached inducers scores new points
independently of one another.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import NumericalFailure, StructuralError, UsageError

NORM_SITES = ("tok_a", "ind_a", "ind_b", "tok_c", "ind_c", "tok_d")


@dataclass(frozen=True)
class NetConfig:
    layers: int = 4
    d_nn: int = 64
    inducers: int = 16
    heads: int = 4
    gaussian_a: float = 1.0
    groupnorm_groups: int = 8
    point_dim: int = 3
    feature_dim: int = 0       # per-point conditioning channels appended to coordinates
    global_dim: int = 0        # pooled conditioning channels appended to the noise embedding
    embed_dim: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        counts = (self.layers, self.d_nn, self.inducers, self.heads, self.groupnorm_groups,
                  self.point_dim, self.embed_dim, self.mlp_ratio)
        if min(counts) < 1:
            raise StructuralError("all network counts must be >= 1")
        if self.d_nn % self.heads or self.d_nn % self.groupnorm_groups:
            raise StructuralError("d_nn must be divisible by heads and groupnorm_groups")
        if (self.d_nn * self.mlp_ratio) % self.groupnorm_groups:
            raise StructuralError("MLP width must be divisible by groupnorm_groups")

    @property
    def token_dim(self):
        return self.point_dim + self.feature_dim

    @property
    def cond_dim(self):
        return self.embed_dim + self.global_dim

    def with_(self, **kw) -> "NetConfig":
        return replace(self, **kw)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def desk(cls, **kw) -> "NetConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "NetConfig":
        return cls(**{**dict(layers=6, d_nn=384, inducers=64, heads=8, groupnorm_groups=16,
                             embed_dim=128), **kw})


def param_shapes(cfg: NetConfig) -> dict:
    d, de, h = cfg.d_nn, cfg.cond_dim, cfg.d_nn * cfg.mlp_ratio
    shapes = {
        "noise.w1": (1, cfg.embed_dim), "noise.b1": (cfg.embed_dim,),
        "noise.w2": (cfg.embed_dim, cfg.embed_dim), "noise.b2": (cfg.embed_dim,),
        "in.w": (cfg.token_dim, d), "in.b": (d,),
    }
    for l in range(cfg.layers):
        p = f"l{l}."
        shapes[p + "inducers"] = (cfg.inducers, d)
        for site in NORM_SITES:
            shapes[f"{p}{site}.ws"] = (de, d)
            shapes[f"{p}{site}.wb"] = (de, d)
        for blk in ("a", "c"):
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"{p}{blk}.{w}"] = (d, d)
            shapes[f"{p}{blk}.bo"] = (d,)
        for blk in ("ib", "tb"):
            shapes[f"{p}{blk}.w1"] = (d, h)
            shapes[f"{p}{blk}.b1"] = (h,)
            shapes[f"{p}{blk}.w2"] = (h, d)
            shapes[f"{p}{blk}.b2"] = (d,)
    shapes["out.ws"] = (de, d)
    shapes["out.wb"] = (de, d)
    shapes["out.w"] = (d, cfg.point_dim)
    shapes["out.b"] = (cfg.point_dim,)
    return shapes


def init_params(cfg: NetConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Random initial weights; residual output projections start small."""
    d = cfg.d_nn
    small = 0.02 / np.sqrt(2 * cfg.layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf_name = name.rsplit(".", 1)[-1]
        if name == "noise.w1":
            w = 3.0 * rng.standard_normal(shape)
        elif name == "noise.b1":
            w = rng.uniform(-3.0, 3.0, shape)
        elif name == "in.b":
            w = rng.standard_normal(shape)
        elif leaf_name in ("b1",):
            w = rng.uniform(-1.0, 1.0, shape)
        elif leaf_name in ("ws", "wb"):
            w = 0.02 * rng.standard_normal(shape)
        elif leaf_name == "inducers":
            w = rng.standard_normal(shape)
        elif name == "out.w":
            w = (0.01 / np.sqrt(d)) * rng.standard_normal(shape)
        elif leaf_name in ("wo", "w2"):
            w = small * rng.standard_normal(shape)
        elif len(shape) == 2:
            w = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            w = np.zeros(shape)
        params[name] = np.asarray(w, dtype=dtype)
    return params


def check_params(params: dict, cfg: NetConfig):
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise StructuralError(f"missing parameter {name}")
        if tuple(params[name].shape) != tuple(shape):
            raise StructuralError(f"{name}: expected {shape}, got {params[name].shape}")


def cast_params(params: dict, dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


# ---------------------------------------------------------------- building blocks

def noise_embedding(params, c_noise, cfg: NetConfig):
    """Embed the scalar ``c_noise = ln(sigma)/4`` for every batch element, (B, embed_dim)."""
    c = ad.as_tensor(c_noise)
    cv = c.value
    c = ad.reshape(c, (cv.size, 1)) if cv.ndim != 2 else c
    h = ad.gaussian(ad.linear(c, params["noise.w1"], params["noise.b1"]), 1.0)
    return ad.linear(h, params["noise.w2"], params["noise.b2"])


def _cond_affine(xn, params, prefix, emb):
    B = emb.value.shape[0]
    scale = ad.reshape(ad.add(ad.matmul(emb, params[prefix + ".ws"]), 1.0), (B, 1, -1))
    bias = ad.reshape(ad.matmul(emb, params[prefix + ".wb"]), (B, 1, -1))
    return ad.scale_shift(xn, scale, bias)


def _cond_norm(x, params, prefix, emb, groups):
    return _cond_affine(ad.group_norm(x, groups), params, prefix, emb)


def _attention(q_in, kv_in, params, prefix, heads):
    B, Q, d = q_in.value.shape
    K = kv_in.value.shape[1]
    dh = d // heads

    def split(x, n):
        return ad.transpose(ad.reshape(x, (B, n, heads, dh)), (0, 2, 1, 3))

    q = split(ad.matmul(q_in, params[prefix + ".wq"]), Q)
    k = split(ad.matmul(kv_in, params[prefix + ".wk"]), K)
    v = split(ad.matmul(kv_in, params[prefix + ".wv"]), K)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), float(1.0 / np.sqrt(dh)))
    att = ad.softmax(scores, axis=-1)
    o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, Q, d))
    return ad.linear(o, params[prefix + ".wo"], params[prefix + ".bo"])


def _mlp(x, params, prefix, a):
    h = ad.gaussian(ad.linear(x, params[prefix + ".w1"], params[prefix + ".b1"]), a)
    return ad.linear(h, params[prefix + ".w2"], params[prefix + ".b2"])


def canonical_order(tokens: np.ndarray) -> np.ndarray:
    """Per-cloud lexicographic row order, (B, N).

    The network evaluates tokens in this order and scatters results back, so
    float reductions over points see the same operand order for every input
    permutation: equivariance then holds bit for bit, not just up to rounding.
    """
    keys = np.moveaxis(tokens, -1, 0)[::-1]
    return np.lexsort(keys, axis=-1)


def forward(params, tokens, embedding, cfg: NetConfig, cached_inducers=None):
    """Raw network output for token features (B, N, token_dim).

    ``embedding`` is the (B, cond_dim) noise (plus global-condition) vector.
    Returns ``(out, trace)``: point outputs (B, N, point_dim) and the
    per-layer inducer states after the inducer MLP.  With ``cached_inducers``
    (one (B, M, d_nn) state per layer) the inducer sub-blocks are skipped.
    """
    tokens = ad.as_tensor(tokens)
    emb = ad.as_tensor(embedding)
    B, N, _ = tokens.value.shape
    if emb.value.shape[0] != B:
        emb = ad.broadcast_to(emb, (B, emb.value.shape[-1]))
    if tokens.value.shape[-1] != cfg.token_dim:
        raise StructuralError(f"token width {tokens.value.shape[-1]} != {cfg.token_dim}")
    if cached_inducers is not None and len(cached_inducers) != cfg.layers:
        raise StructuralError("cached inducers must hold one state per layer")

    order = canonical_order(tokens.value)
    inverse = np.argsort(order, axis=1)
    g, a = cfg.groupnorm_groups, cfg.gaussian_a
    T = ad.linear(ad.permute_rows(tokens, order), params["in.w"], params["in.b"])
    trace = []
    for l in range(cfg.layers):
        p = f"l{l}."
        Tn = ad.group_norm(T, g)  # tokens are unchanged until sub-block (c)
        if cached_inducers is None:
            I0 = ad.broadcast_to(params[p + "inducers"], (B, cfg.inducers, cfg.d_nn))
            I = ad.add(I0, _attention(_cond_norm(I0, params, p + "ind_a", emb, g),
                                      _cond_affine(Tn, params, p + "tok_a", emb),
                                      params, p + "a", cfg.heads))
            I = ad.add(I, _mlp(_cond_norm(I, params, p + "ind_b", emb, g), params, p + "ib", a))
        else:
            I = ad.as_tensor(cached_inducers[l])
            if I.value.shape[1:] != (cfg.inducers, cfg.d_nn):
                raise StructuralError(f"cached inducer state {l} has shape {I.value.shape}")
            if I.value.shape[0] != B:
                I = ad.broadcast_to(I, (B, cfg.inducers, cfg.d_nn))
        trace.append(I)
        T = ad.add(T, _attention(_cond_affine(Tn, params, p + "tok_c", emb),
                                 _cond_norm(I, params, p + "ind_c", emb, g),
                                 params, p + "c", cfg.heads))
        T = ad.add(T, _mlp(_cond_norm(T, params, p + "tok_d", emb, g), params, p + "tb", a))
        if not np.all(np.isfinite(T.value)):
            raise NumericalFailure("non-finite activation", where=f"layer {l}")
    out = ad.linear(_cond_norm(T, params, "out", emb, g), params["out.w"], params["out.b"])
    return ad.permute_rows(out, inverse), trace


# ---------------------------------------------------------------- explicit tape API

class ForwardContext:
    """Recorded forward pass, consumed by :func:`backward`."""

    def __init__(self, leaves, inputs, output, trace):
        self.leaves = leaves
        self.inputs = inputs
        self.output = output
        self.trace = trace
        self.used = False


def forward_recorded(params, tokens, embedding, cfg: NetConfig, cached_inducers=None):
    """Like :func:`forward` on arrays, keeping what :func:`backward` needs."""
    leaves = {k: ad.leaf(v) for k, v in params.items()}
    inputs = {"tokens": ad.leaf(tokens), "embedding": ad.leaf(embedding)}
    out, trace = forward(leaves, inputs["tokens"], inputs["embedding"], cfg, cached_inducers)
    ctx = ForwardContext(leaves, inputs, out, trace)
    return out.value, [t.value for t in trace], ctx


def backward(ctx: ForwardContext | None, upstream):
    """Reverse-mode gradients of ``<upstream, out>`` for parameters and inputs."""
    if ctx is None or ctx.used:
        raise UsageError("backward needs a fresh forward context")
    ctx.used = True
    upstream = np.asarray(upstream, dtype=ctx.output.value.dtype)
    if upstream.shape != ctx.output.value.shape:
        raise StructuralError("upstream gradient shape does not match the output")
    ad.backward(ctx.output, upstream)
    zeros = lambda t: t.grad if t.grad is not None else np.zeros_like(t.value)
    return ({k: zeros(t) for k, t in ctx.leaves.items()},
            {k: zeros(t) for k, t in ctx.inputs.items()})


def embed_sigma(params, sigma, cfg: NetConfig):
    """Noise embedding of ``sigma`` (scalar or (B,)); sigma must be positive."""
    from .diffusion import c_noise
    from .errors import DomainError
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    if np.any(sigma <= 0):
        raise DomainError("sigma must be positive")
    dtype = np.asarray(params["noise.w1"].value if isinstance(params["noise.w1"], ad.Tensor)
                       else params["noise.w1"]).dtype
    return noise_embedding(params, c_noise(sigma).astype(dtype), cfg)
