"""Float64 primitives shared by every other module.

Probability helpers, cosine similarity, a central-difference gradient
checker, Adam, and the named random streams used for reproducible runs.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

PROB_CLAMP = 1e-12


class NumericDomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class DegenerateInputError(ValueError):
    """Input that makes an operation undefined (e.g. a zero vector)."""


# ---------------------------------------------------------------------------
# random streams


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Counter-based generator for the stream ``names`` under ``seed``.

    Streams with different names are statistically independent, and adding a
    new stream never perturbs an existing one.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *names) -> int:
    """Integer seed for a named child stream (for APIs that take ``seed: int``)."""
    return int(stream(seed, *names).integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# probability


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what} contains non-finite values")


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    _check_finite(z, "logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def logsumexp(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _check_simplex(p: np.ndarray, what: str) -> None:
    _check_finite(p, what)
    if np.any(p < 0):
        raise NumericDomainError(f"{what} has negative entries")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-9):
        raise NumericDomainError(f"{what} does not sum to 1")


def shannon_entropy(p, axis: int = -1) -> np.ndarray | float:
    """Entropy in nats, with ``0 ln 0 = 0``. Works row-wise on 2-d input."""
    p = np.asarray(p, dtype=np.float64)
    _check_simplex(np.moveaxis(p, axis, -1), "p")
    logp = np.log(np.clip(p, PROB_CLAMP, None))
    h = -np.sum(np.where(p > 0, p * logp, 0.0), axis=axis)
    return float(h) if np.ndim(h) == 0 else h


def kl_divergence(p, q) -> float:
    """KL(p || q). ``q`` is clamped at 1e-12 where ``p`` has mass."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    mask = p > 0
    lp = np.log(np.clip(p, PROB_CLAMP, None))
    lq = np.log(np.clip(q, PROB_CLAMP, None))
    kl = np.sum(np.where(mask, p * (lp - lq), 0.0), axis=-1)
    return float(np.maximum(kl, 0.0)) if np.ndim(kl) == 0 else np.maximum(kl, 0.0)


# ---------------------------------------------------------------------------
# similarity


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine between matching rows of ``a`` and ``b``."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine similarity of a zero vector")
    return np.sum(a * b, axis=-1) / (na * nb)


def cosine_rows_backward(a, b, grad):
    """Gradients of ``sum(grad * cosine_rows(a, b))`` w.r.t. ``a`` and ``b``."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    cos = np.sum(a * b, axis=-1, keepdims=True) / (na * nb)
    g = grad[..., None]
    da = g * (b / (na * nb) - cos * a / na**2)
    db = g * (a / (na * nb) - cos * b / nb**2)
    return da, db


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: int
    numeric: np.ndarray
    analytic: np.ndarray

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def fd_gradient(f: Callable[[np.ndarray], float], params, step: float = 1e-5) -> np.ndarray:
    theta = np.array(params, dtype=np.float64)
    flat = theta.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f(theta)
        flat[i] = old - step
        fm = f(theta)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericDomainError(f"objective not finite near coordinate {i}")
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(theta.shape)


def fd_gradient_check(f, params, analytic_grad, step: float = 1e-5) -> GradCheckResult:
    """Compare ``analytic_grad`` with central differences of ``f`` at ``params``.

    Relative error per coordinate is ``|a - g| / max(|a|, |g|, 1e-8)``.
    """
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    numeric = fd_gradient(f, params, step)
    if numeric.shape != analytic.shape:
        raise ValueError(f"gradient shape {analytic.shape} != params shape {numeric.shape}")
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-8)
    rel = (np.abs(numeric - analytic) / denom).ravel()
    worst = int(np.argmax(rel)) if rel.size else -1
    return GradCheckResult(float(rel.max()) if rel.size else 0.0, worst, numeric, analytic)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update over every key in ``grads``.

    Parameters absent from ``grads`` are passed through untouched.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != param shape {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state
