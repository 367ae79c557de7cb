"""Toy part-attention backbone and classifier family.

Images go through a per-position affine map + tanh (the embedding network),
a per-position affine map + sigmoid (the part detector), masked average
pooling into part descriptors, and concatenation with the global descriptor.
Every forward has a matching ``*_backward``.

Parameters live in a flat ``dict[str, ndarray]``; the EMA-tracked mean
classifiers are kept in a separate dict so the optimizer never sees them.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import NumericDomainError, softmax, stream

CLASSIFIERS = ("cls", "part", "vis", "ir")
MEAN_CLASSIFIERS = ("mean_vis", "mean_ir")
PARAM_ORDER = (
    "embed_W", "embed_b", "det_W", "det_b",
    "cls_W", "cls_b", "part_W", "part_b",
    "vis_W", "vis_b", "ir_W", "ir_b",
    "mean_vis_W", "mean_vis_b", "mean_ir_W", "mean_ir_b",
)


@dataclass(frozen=True)
class ModelDims:
    C_in: int = 3
    C_f: int = 16
    M: int = 6
    num_ids: int = 64

    @property
    def desc_dim(self) -> int:
        return (self.M + 1) * self.C_f

    @property
    def part_dim(self) -> int:
        return self.M * self.C_f


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(dims: ModelDims, seed: int) -> tuple[dict, dict]:
    """Trainable params and mean classifiers (initialised as copies of the live ones).

    The two modality classifiers start identical, so the modality-learning
    term is exactly zero at step 0 and only grows as they specialise.
    """
    rng = stream(seed, "init")
    p = {
        "embed_W": _uniform(rng, dims.C_in, (dims.C_in, dims.C_f)),
        "embed_b": _uniform(rng, dims.C_in, (dims.C_f,)),
        "det_W": _uniform(rng, dims.C_f, (dims.C_f, dims.M)),
        "det_b": _uniform(rng, dims.C_f, (dims.M,)),
    }
    for name, fan_in in (("cls", dims.desc_dim), ("part", dims.part_dim),
                         ("vis", dims.desc_dim), ("ir", dims.desc_dim)):
        p[f"{name}_W"] = _uniform(rng, fan_in, (fan_in, dims.num_ids))
        p[f"{name}_b"] = _uniform(rng, fan_in, (dims.num_ids,))
    p["ir_W"], p["ir_b"] = p["vis_W"].copy(), p["vis_b"].copy()
    mean = {
        "mean_vis_W": p["vis_W"].copy(), "mean_vis_b": p["vis_b"].copy(),
        "mean_ir_W": p["ir_W"].copy(), "mean_ir_b": p["ir_b"].copy(),
    }
    return p, mean


def dims_of(params: dict) -> ModelDims:
    C_in, C_f = params["embed_W"].shape
    M = params["det_W"].shape[1]
    return ModelDims(C_in, C_f, M, params["cls_W"].shape[1])


# ---------------------------------------------------------------------------
# embedding network


def _flatten_images(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    n, h, w, c = x.shape
    return x.reshape(n, h * w, c)


def embed(params, x):
    """Feature map ``(N, S, C_f)`` for images ``(N, H, W, C_in)`` (or one image)."""
    X = _flatten_images(x)
    if X.shape[-1] != params["embed_W"].shape[0]:
        raise ValueError(f"expected {params['embed_W'].shape[0]} input channels, got {X.shape[-1]}")
    return np.tanh(X @ params["embed_W"] + params["embed_b"])


def embed_backward(params, x, f, df):
    X = _flatten_images(x)
    dz = df * (1.0 - f * f)
    n, s, c = X.shape
    grads = {
        "embed_W": X.reshape(-1, c).T @ dz.reshape(n * s, -1),
        "embed_b": dz.sum(axis=(0, 1)),
    }
    dx = dz @ params["embed_W"].T
    return grads, dx


# ---------------------------------------------------------------------------
# part detector and pooling


def detect_parts(params, f):
    """Part maps ``(N, S, M)``, every entry strictly inside (0, 1)."""
    logits = f @ params["det_W"] + params["det_b"]
    e = np.exp(-np.abs(logits))
    m = np.where(logits >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if not np.all((m > 0.0) & (m < 1.0)):
        raise NumericDomainError("part map saturated to 0 or 1")
    return m


def detect_parts_backward(params, f, m, dm):
    dlogit = dm * m * (1.0 - m)
    n, s, k = dlogit.shape
    grads = {
        "det_W": f.reshape(n * s, -1).T @ dlogit.reshape(n * s, k),
        "det_b": dlogit.sum(axis=(0, 1)),
    }
    return grads, dlogit @ params["det_W"].T


def _masked_mean(f, m):
    # sums over the spatial axis in ascending index order for every (part, channel)
    return (m[..., :, :, None] * f[..., :, None, :]).sum(axis=-3) / f.shape[-2]


def pool_parts(f, m):
    """Part descriptors ``(N, M, C_f)``: spatial mean of each part map times every channel."""
    f = np.asarray(f, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if f.shape[:-1] != m.shape[:-1]:
        raise ValueError(f"feature map {f.shape} and part maps {m.shape} disagree on positions")
    return _masked_mean(f, m)


def pool_parts_backward(f, m, dp):
    s = f.shape[-2]
    df = np.einsum("...mc,...sm->...sc", dp, m) / s
    dm = np.einsum("...mc,...sc->...sm", dp, f) / s
    return df, dm


def global_pool(f):
    return _masked_mean(f, np.ones(f.shape[:-1] + (1,)))[..., 0, :]


@dataclass(frozen=True, eq=False)
class PersonDescriptor:
    global_: np.ndarray       # (C_f,)
    parts: np.ndarray         # (M, C_f)

    @property
    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.global_, self.parts.ravel()])

    @classmethod
    def from_concatenated(cls, d, C_f: int) -> "PersonDescriptor":
        d = np.asarray(d)
        return cls(d[:C_f].copy(), d[C_f:].reshape(-1, C_f).copy())


def person_descriptor(f, p):
    """Concatenated ``[global | part_1 | ... | part_M]``, shape ``(N, (M+1) C_f)``."""
    g = global_pool(f)
    return np.concatenate([g, p.reshape(p.shape[:-2] + (-1,))], axis=-1)


def person_descriptor_backward(f, dd, C_f):
    s = f.shape[-2]
    dg = dd[..., :C_f]
    dp = dd[..., C_f:].reshape(dd.shape[:-1] + (-1, C_f))
    df = np.broadcast_to(dg[..., None, :] / s, f.shape).copy()
    return df, dp


# ---------------------------------------------------------------------------
# whole backbone


@dataclass(eq=False)
class ForwardCache:
    x: np.ndarray
    f: np.ndarray
    m: np.ndarray
    p: np.ndarray
    d: np.ndarray


def forward(params, x) -> ForwardCache:
    f = embed(params, x)
    m = detect_parts(params, f)
    p = pool_parts(f, m)
    d = person_descriptor(f, p)
    return ForwardCache(x, f, m, p, d)


def forward_from_features(params, x, f) -> ForwardCache:
    m = detect_parts(params, f)
    p = pool_parts(f, m)
    return ForwardCache(x, f, m, p, person_descriptor(f, p))


def backward(params, cache: ForwardCache, dd=None, dp=None, to_features=False):
    """Backbone gradients given upstream gradients on descriptors and/or parts.

    ``dd`` is ``(N, (M+1) C_f)``; ``dp`` is an extra ``(N, M, C_f)`` gradient on
    the part descriptors (from losses that consume parts directly). With
    ``to_features`` the gradient w.r.t. the feature map is returned as well.
    """
    C_f = cache.f.shape[-1]
    df = np.zeros_like(cache.f)
    dparts = np.zeros_like(cache.p)
    if dd is not None:
        df_g, dp_d = person_descriptor_backward(cache.f, dd, C_f)
        df += df_g
        dparts += dp_d
    if dp is not None:
        dparts += dp
    df_p, dm = pool_parts_backward(cache.f, cache.m, dparts)
    df += df_p
    grads, df_m = detect_parts_backward(params, cache.f, cache.m, dm)
    df += df_m
    if to_features:
        return grads, df
    g_embed, _ = embed_backward(params, cache.x, cache.f, df)
    grads.update(g_embed)
    return grads


# ---------------------------------------------------------------------------
# classifiers


def logits(params, name, d):
    W, b = params[f"{name}_W"], params[f"{name}_b"]
    if d.shape[-1] != W.shape[0]:
        raise ValueError(f"classifier {name} expects dim {W.shape[0]}, got {d.shape[-1]}")
    return d @ W + b


def classify(params, name, d):
    """Identity probabilities from classifier ``name`` (softmax of the affine map)."""
    return softmax(logits(params, name, np.asarray(d, dtype=np.float64)))


def logits_backward(params, name, d, dz):
    W = params[f"{name}_W"]
    return {f"{name}_W": d.T @ dz, f"{name}_b": dz.sum(axis=0)}, dz @ W.T


def ema_update(mean: dict, live: dict, momentum: float = 0.9) -> dict:
    """``mean <- momentum * mean + (1 - momentum) * live`` for each mean_* entry."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    out = {}
    for key, value in mean.items():
        src = live[key.removeprefix("mean_")]
        if src.shape != value.shape:
            raise ValueError(f"{key}: shape {value.shape} vs live {src.shape}")
        out[key] = momentum * value + (1.0 - momentum) * src
    return out


def add_grads(total: dict, new: dict, scale: float = 1.0) -> dict:
    for k, v in new.items():
        if k in total:
            total[k] = total[k] + scale * v
        else:
            total[k] = scale * v
    return total


# ---------------------------------------------------------------------------
# params.bin
#
# Layout (all little-endian):
#   8 bytes   magic b"PMXPARAM"
#   u32       version (1)
#   u32 x 4   C_in, C_f, M, num_ids
#   then, for each name in PARAM_ORDER, the array as float64 in C order.
# Shapes are implied by the dims.

MAGIC = b"PMXPARAM"
VERSION = 1


def _shapes(dims: ModelDims) -> dict[str, tuple]:
    sh = {
        "embed_W": (dims.C_in, dims.C_f), "embed_b": (dims.C_f,),
        "det_W": (dims.C_f, dims.M), "det_b": (dims.M,),
    }
    for name in ("cls", "vis", "ir", "mean_vis", "mean_ir"):
        sh[f"{name}_W"] = (dims.desc_dim, dims.num_ids)
        sh[f"{name}_b"] = (dims.num_ids,)
    sh["part_W"] = (dims.part_dim, dims.num_ids)
    sh["part_b"] = (dims.num_ids,)
    return sh


def save_params(path, params: dict, mean: dict) -> None:
    dims = dims_of(params)
    allp = {**params, **mean}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", VERSION, dims.C_in, dims.C_f, dims.M, dims.num_ids))
        for name in PARAM_ORDER:
            fh.write(np.ascontiguousarray(allp[name], dtype="<f8").tobytes())


def load_params(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a params file")
    version, C_in, C_f, M, num_ids = struct.unpack("<5I", blob[8:28])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = ModelDims(C_in, C_f, M, num_ids)
    shapes = _shapes(dims)
    off = 28
    params, mean = {}, {}
    for name in PARAM_ORDER:
        n = int(np.prod(shapes[name]))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shapes[name]).copy()
        off += 8 * n
        (mean if name.startswith("mean_") else params)[name] = arr
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes")
    return params, mean
