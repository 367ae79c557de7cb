"""Entropy-based selection of reliable mixed positives and negatives.

A candidate's score is the absolute difference between the entropy of the
part classifier's identity distribution for the anchor and for the
candidate. Positives keep the smallest gaps, negatives the largest.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder
from .augment import MixedSample, MixPlan
from .numerics import shannon_entropy, softmax


@dataclass(frozen=True, eq=False)
class EntropyRecord:
    candidate: MixedSample
    entropy_gap: float
    pool_position: int


@dataclass(eq=False)
class MinedBanks:
    positives: list
    negatives: list


def part_entropy(params, parts) -> np.ndarray:
    """Entropy of the part classifier on each flattened ``(..., M, C_f)`` part set."""
    parts = np.asarray(parts, dtype=np.float64)
    flat = parts.reshape(parts.shape[:-2] + (-1,))
    z = encoder.logits(params, "part", flat)
    return shannon_entropy(softmax(z))


def entropy_gap(params, anchor_parts, candidate) -> float:
    cand = candidate.parts if isinstance(candidate, MixedSample) else candidate
    h = part_entropy(params, np.stack([np.asarray(anchor_parts), np.asarray(cand)]))
    return float(abs(h[0] - h[1]))


def select(gaps, quota: int, descending: bool) -> np.ndarray:
    """Pool positions of the top ``quota`` gaps; ties keep pool order."""
    gaps = np.asarray(gaps, dtype=np.float64)
    if quota < 1:
        raise ValueError("quota must be >= 1")
    if not np.all(np.isfinite(gaps)):
        raise ValueError("non-finite entropy gap")
    key = -gaps if descending else gaps
    order = np.argsort(key, kind="stable")
    return order[:quota]


def mine(params, anchor_parts, pos_pool, neg_pool, U_prime: int = 2, Q_prime: int = 20) -> MinedBanks:
    """Keep the ``U_prime`` lowest-gap positives and ``Q_prime`` highest-gap negatives.

    Pools are lists of :class:`MixedSample`. The returned banks hold
    :class:`EntropyRecord` entries in selection order.
    """
    out = []
    for pool, quota, desc in ((pos_pool, U_prime, False), (neg_pool, Q_prime, True)):
        if quota < 1:
            raise ValueError("quotas must be >= 1")
        if not pool:
            out.append([])
            continue
        ents = part_entropy(params, np.stack([anchor_parts] + [c.parts for c in pool]))
        gaps = np.abs(ents[0] - ents[1:])
        idx = select(gaps, quota, desc)
        out.append([EntropyRecord(pool[i], float(gaps[i]), int(i)) for i in idx])
    return MinedBanks(*out)


def mine_plans(params, parts, pos_plans, neg_plans, U_prime: int, Q_prime: int, use_entropy=True,
               rng=None):
    """Batch version over per-anchor :class:`MixPlan` pools.

    Returns the selected positive and negative plans (one per anchor). With
    ``use_entropy=False`` the selection is a seeded uniform subsample instead.
    """
    if U_prime < 1 or Q_prime < 1:
        raise ValueError("quotas must be >= 1")
    N, M, C = parts.shape
    h_anchor = part_entropy(params, parts) if use_entropy else None
    out = []
    for plans, quota, desc in ((pos_plans, U_prime, False), (neg_plans, Q_prime, True)):
        sizes = np.array([len(p) for p in plans], dtype=np.int64)
        if sizes.sum() == 0:
            out.append(list(plans))
            continue
        B = next(p.u.shape[1] for p in plans if len(p))
        allplan = MixPlan.concat(plans, B, plans[0].positive)
        owner = np.repeat(np.arange(len(plans)), sizes)
        position = np.arange(len(allplan)) - np.repeat(np.cumsum(sizes) - sizes, sizes)
        if use_entropy:
            gaps = np.abs(h_anchor[allplan.anchor] - part_entropy(params, allplan.materialize(parts)))
            if not np.all(np.isfinite(gaps)):
                raise ValueError("non-finite entropy gap")
            key = -gaps if desc else gaps
        else:
            key = rng.random(len(allplan))
        order = np.lexsort((position, key, owner))
        keep = order[_group_rank(owner[order]) < quota]
        if not use_entropy:
            keep = keep[np.lexsort((position[keep], owner[keep]))]
        starts = np.searchsorted(owner[keep], np.arange(len(plans) + 1))
        out.append([allplan.take(keep[starts[a]:starts[a + 1]]) for a in range(len(plans))])
    return out[0], out[1]


def _group_rank(sorted_owner):
    """Position of each element within its run of equal values."""
    n = len(sorted_owner)
    start = np.r_[0, np.flatnonzero(np.diff(sorted_owner)) + 1]
    lens = np.diff(np.r_[start, n])
    return np.arange(n) - np.repeat(start, lens)
