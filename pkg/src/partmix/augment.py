"""Part-descriptor mixing, positive/negative synthesis, and image-level mixers.

Mixed samples are generated as index plans (:class:`MixPlan`): for every
candidate, which batch entry and slot each of its ``M`` parts is copied
from. Materialising a plan is a single fancy-index, and gradients flow back
through the same indices with ``np.add.at``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Modality
from .numerics import stream

ROUTES = ("inter", "intra")


class EmptyPoolError(LookupError):
    """An anchor has no partner to mix with."""


@dataclass(eq=False)
class DescriptorBank:
    """Part descriptors of one mini-batch, both modalities.

    ``indices(t)`` gives the entries forming the per-modality bank.
    """
    parts: np.ndarray          # (N, M, C_f)
    identities: np.ndarray     # (N,)
    modalities: np.ndarray     # (N,)

    def __post_init__(self):
        self.parts = np.asarray(self.parts, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.modalities = np.asarray(self.modalities, dtype=np.int64)
        if self.parts.ndim != 3:
            raise ValueError("parts must be (N, M, C_f)")
        if not (len(self.parts) == len(self.identities) == len(self.modalities)):
            raise ValueError("parts, identities and modalities disagree in length")

    def __len__(self):
        return len(self.parts)

    @property
    def M(self) -> int:
        return self.parts.shape[1]

    def indices(self, modality) -> np.ndarray:
        return np.flatnonzero(self.modalities == int(Modality.parse(modality)))


@dataclass(frozen=True, eq=False)
class MixedSample:
    parts: np.ndarray                      # (M, C_f)
    anchor_index: int
    donor_index: int
    replaced_slots: tuple[tuple[int, int], ...]   # 0-based (u, h)
    route: str                             # "inter" | "intra"
    role: str                              # "positive" | "negative"
    same_identity: bool


@dataclass(eq=False)
class MixPlan:
    """Columnar description of ``n`` mixed candidates."""
    anchor: np.ndarray      # (n,)
    donor: np.ndarray       # (n,)
    u: np.ndarray           # (n, B) recipient slots
    h: np.ndarray           # (n, B) donor slots
    inter: np.ndarray       # (n,) bool
    same_id: np.ndarray     # (n,) bool
    positive: bool

    def __len__(self):
        return len(self.anchor)

    @classmethod
    def empty(cls, B: int, positive: bool) -> "MixPlan":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros((0, B), np.int64), np.zeros((0, B), np.int64),
                   np.zeros(0, bool), np.zeros(0, bool), positive)

    @classmethod
    def concat(cls, plans: Sequence["MixPlan"], B: int, positive: bool) -> "MixPlan":
        plans = [p for p in plans if len(p)]
        if not plans:
            return cls.empty(B, positive)
        return cls(*(np.concatenate([getattr(p, f) for p in plans])
                     for f in ("anchor", "donor", "u", "h", "inter", "same_id")), positive)

    def take(self, idx) -> "MixPlan":
        idx = np.asarray(idx, dtype=np.int64)
        return MixPlan(self.anchor[idx], self.donor[idx], self.u[idx], self.h[idx],
                       self.inter[idx], self.same_id[idx], self.positive)

    def sources(self, M: int) -> tuple[np.ndarray, np.ndarray]:
        """Per candidate and slot: the (entry, slot) each part is copied from."""
        n = len(self)
        entry = np.repeat(self.anchor[:, None], M, axis=1)
        slot = np.repeat(np.arange(M)[None, :], n, axis=0)
        rows = np.repeat(np.arange(n)[:, None], self.u.shape[1], axis=1)
        entry[rows, self.u] = self.donor[:, None]
        slot[rows, self.u] = self.h
        return entry, slot

    def materialize(self, parts: np.ndarray) -> np.ndarray:
        entry, slot = self.sources(parts.shape[1])
        return parts[entry, slot]

    def scatter_grad(self, dcand: np.ndarray, dparts: np.ndarray) -> None:
        """Accumulate gradients on materialised candidates back into ``dparts``."""
        entry, slot = self.sources(dparts.shape[1])
        np.add.at(dparts, (entry, slot), dcand)

    def samples(self, bank: DescriptorBank) -> list[MixedSample]:
        mats = self.materialize(bank.parts)
        role = "positive" if self.positive else "negative"
        return [
            MixedSample(
                parts=mats[i],
                anchor_index=int(self.anchor[i]),
                donor_index=int(self.donor[i]),
                replaced_slots=tuple((int(a), int(b)) for a, b in zip(self.u[i], self.h[i])),
                route="inter" if self.inter[i] else "intra",
                role=role,
                same_identity=bool(self.same_id[i]),
            )
            for i in range(len(self))
        ]


# ---------------------------------------------------------------------------
# the mixing operator


def part_mix(recipient, u: int, donor, h: int) -> np.ndarray:
    """Copy of ``recipient`` whose slot ``u`` is replaced by ``donor``'s slot ``h`` (0-based)."""
    recipient = np.asarray(recipient)
    donor = np.asarray(donor)
    M = recipient.shape[0]
    if not (0 <= u < M and 0 <= h < donor.shape[0]):
        raise IndexError(f"slot indices ({u}, {h}) out of range for M={M}")
    out = recipient.copy()
    out[u] = donor[h]
    return out


def replay(anchor_parts, donor_parts, replaced_slots) -> np.ndarray:
    out = np.asarray(anchor_parts)
    for u, h in replaced_slots:
        out = part_mix(out, u, donor_parts, h)
    return out


# ---------------------------------------------------------------------------
# slot sampling


def _distinct_slots(rng, n: int, M: int, B: int) -> np.ndarray:
    if B == 0:
        return np.zeros((n, 0), dtype=np.int64)
    return np.argsort(rng.random((n, M)), axis=1)[:, :B].astype(np.int64)


def _distinct_slots_avoiding(rng, u: np.ndarray, M: int) -> np.ndarray:
    """B distinct donor slots per row with ``h[i, b] != u[i, b]`` for every b."""
    n, B = u.shape
    h = _distinct_slots(rng, n, M, B)
    bad = np.any(h == u, axis=1)
    while np.any(bad):
        idx = np.flatnonzero(bad)
        h[idx] = _distinct_slots(rng, idx.size, M, B)
        bad[idx] = np.any(h[idx] == u[idx], axis=1)
    return h


def _cap(plan: MixPlan, cap: int, rng) -> MixPlan:
    if len(plan) <= cap:
        return plan
    keep = np.sort(rng.choice(len(plan), size=cap, replace=False))
    return plan.take(keep)


def _donors(bank: DescriptorBank, anchor: int, route: str, same_id: bool) -> np.ndarray:
    t = bank.modalities[anchor]
    mod_ok = bank.modalities != t if route == "inter" else bank.modalities == t
    id_ok = (bank.identities == bank.identities[anchor]) if same_id else \
        (bank.identities != bank.identities[anchor])
    mask = mod_ok & id_ok
    mask[anchor] = False
    return np.flatnonzero(mask)


def _check_B(B: int, M: int) -> None:
    if not 0 <= B <= M:
        raise ValueError(f"B={B} must lie in [0, M={M}]")


def positive_plan(bank: DescriptorBank, anchor: int, B: int, U: int, rng,
                  routes=ROUTES) -> MixPlan:
    """Same-identity donors, matching slots, every donor via its route."""
    _check_B(B, bank.M)
    donors, inter = [], []
    for route in ROUTES:
        if route in routes:
            d = _donors(bank, anchor, route, same_id=True)
            donors.append(d)
            inter.append(np.full(d.size, route == "inter"))
    donors = np.concatenate(donors) if donors else np.zeros(0, np.int64)
    inter = np.concatenate(inter) if inter else np.zeros(0, bool)
    n = donors.size
    u = _distinct_slots(rng, n, bank.M, B)
    plan = MixPlan(np.full(n, anchor, np.int64), donors, u, u.copy(), inter,
                   np.ones(n, bool), positive=True)
    return _cap(plan, U, rng)


def negative_plan(bank: DescriptorBank, anchor: int, B: int, Q: int, rng,
                  routes=ROUTES) -> MixPlan:
    """Same-identity donors with mismatched slots, then other identities with matching slots."""
    _check_B(B, bank.M)
    pieces = []
    for same in (True, False):
        if same and B > 0 and bank.M < 2:
            continue   # no k != h exists
        for route in ROUTES:
            if route not in routes:
                continue
            d = _donors(bank, anchor, route, same_id=same)
            n = d.size
            u = _distinct_slots(rng, n, bank.M, B)
            h = _distinct_slots_avoiding(rng, u, bank.M) if same else u.copy()
            pieces.append(MixPlan(np.full(n, anchor, np.int64), d, u, h,
                                  np.full(n, route == "inter"), np.full(n, same), False))
    plan = MixPlan.concat(pieces, B, positive=False)
    return _cap(plan, Q, rng)


def gen_positive(anchor: int, bank: DescriptorBank, B: int, seed: int, U: int = 16,
                 routes=ROUTES) -> list[MixedSample]:
    plan = positive_plan(bank, anchor, B, U, stream(seed, "positive", anchor), routes)
    if not len(plan):
        raise EmptyPoolError(f"anchor {anchor} has no same-identity partner")
    return plan.samples(bank)


def gen_negative(anchor: int, bank: DescriptorBank, B: int, seed: int, Q: int = 64,
                 routes=ROUTES) -> list[MixedSample]:
    plan = negative_plan(bank, anchor, B, Q, stream(seed, "negative", anchor), routes)
    if not len(plan):
        raise EmptyPoolError(f"anchor {anchor} has no partner for negatives")
    return plan.samples(bank)


def build_pools(bank: DescriptorBank, B: int, U: int, Q: int, seed: int,
                routes=ROUTES) -> tuple[list[MixPlan], list[MixPlan]]:
    """Positive and negative candidate plans for every anchor of the batch.

    Batched form of :func:`positive_plan` / :func:`negative_plan`: the same
    candidate sets, pool order and caps, drawn from one stream per call.
    """
    _check_B(B, bank.M)
    rng = stream(seed, "pools")
    n = len(bank)
    same = bank.identities[:, None] == bank.identities[None, :]
    inter = bank.modalities[:, None] != bank.modalities[None, :]
    allowed = np.zeros((n, n), bool)
    for route in routes:
        allowed |= inter if route == "inter" else ~inter
    np.fill_diagonal(allowed, False)
    # pool order: same-identity before different, inter before intra, then donor index
    group = np.where(same, 0, 2) + np.where(inter, 0, 1)
    order_key = group * n + np.arange(n)[None, :]

    def pick(valid, cap, positive):
        keys = np.where(valid, rng.random((n, n)), np.inf)
        counts = np.minimum(valid.sum(axis=1), cap)
        width = int(counts.max(initial=0))
        chosen = np.argsort(keys, axis=1, kind="stable")[:, :width]
        ok = np.arange(width)[None, :] < counts[:, None]
        ordkey = np.where(ok, np.take_along_axis(order_key, chosen, 1), np.iinfo(np.int64).max)
        chosen = np.take_along_axis(chosen, np.argsort(ordkey, axis=1, kind="stable"), 1)
        anchor = np.repeat(np.arange(n), counts)
        donor = chosen[np.arange(width)[None, :] < counts[:, None]]
        sid = same[anchor, donor]
        u = _distinct_slots(rng, donor.size, bank.M, B)
        h = u.copy()
        if not positive and sid.any():
            h[sid] = _distinct_slots_avoiding(rng, u[sid], bank.M)
        plan = MixPlan(anchor, donor, u, h, inter[anchor, donor], sid, positive)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        return [plan.take(np.arange(bounds[a], bounds[a + 1])) for a in range(n)]

    neg_valid = allowed & ~same if (B > 0 and bank.M < 2) else allowed
    return pick(allowed & same, U, True), pick(neg_valid, Q, False)


# ---------------------------------------------------------------------------
# image-level baselines


def sample_lambda(rng, alpha: float = 1.0) -> float:
    return float(rng.beta(alpha, alpha))


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")


def mixup(x1, x2, lam: float):
    """Linear interpolation of two images; label weights for ``(y1, y2)``."""
    _check_lambda(lam)
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch {x1.shape} vs {x2.shape}")
    return lam * x1 + (1.0 - lam) * x2, np.array([lam, 1.0 - lam])


def manifold_mixup(h1, h2, lam: float, layer_choice: str = "post_embed"):
    """Mixup applied to the representation at ``layer_choice``.

    ``input`` means raw pixels, ``post_embed`` the embedding feature map; the
    caller produces ``h1``/``h2`` at that layer and continues the forward pass
    from the mixed result.
    """
    if layer_choice not in ("input", "post_embed"):
        raise ValueError(f"unknown layer {layer_choice!r}")
    return mixup(h1, h2, lam)


@dataclass(frozen=True)
class Box:
    y0: int
    x0: int
    y1: int
    x1: int

    @property
    def area(self) -> int:
        return max(0, self.y1 - self.y0) * max(0, self.x1 - self.x0)


def cutmix_box(H: int, W: int, lam: float, rng) -> tuple[Box, int]:
    """Box of side ``(H sqrt(1-lam), W sqrt(1-lam))`` placed uniformly inside the image.

    Returns the (clipped) box and the unclipped integer area.
    """
    _check_lambda(lam)
    r = math.sqrt(1.0 - lam)
    bh = min(H, int(round(H * r)))
    bw = min(W, int(round(W * r)))
    y0 = int(rng.integers(0, H - bh + 1))
    x0 = int(rng.integers(0, W - bw + 1))
    box = Box(max(0, y0), max(0, x0), min(H, y0 + bh), min(W, x0 + bw))
    return box, bh * bw


def cutmix(x1, x2, lam: float, seed):
    """Paste a box of ``x2`` into ``x1``. Label weights follow the pasted area."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch {x1.shape} vs {x2.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "cutmix")
    H, W = x1.shape[:2]
    box, _ = cutmix_box(H, W, lam, rng)
    keep = np.ones((H, W), dtype=np.float64)
    keep[box.y0:box.y1, box.x0:box.x1] = 0.0
    mask = keep[:, :, None] if x1.ndim == 3 else keep
    mixed = mask * x1 + (1.0 - mask) * x2
    lam_eff = 1.0 - box.area / (H * W)
    return mixed, np.array([lam_eff, 1.0 - lam_eff]), box
