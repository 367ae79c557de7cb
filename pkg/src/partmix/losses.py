"""Training objectives and their gradients.

Every loss returns its value together with gradients w.r.t. whatever it
consumes: classifier parameters (as a dict keyed like the model params) and
the descriptors / parts fed into it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .augment import MixPlan
from .data import Modality
from .numerics import DegenerateInputError, cosine_rows, cosine_rows_backward, log_softmax, softmax

LOSS_NAMES = ("L_id", "L_cc", "L_sid", "L_ML", "L_aid", "L_cont")


@dataclass(frozen=True)
class LossWeights:
    lambda_sid: float = 0.5
    lambda_ML: float = 2.5
    lambda_aid: float = 0.5
    lambda_cont: float = 0.5

    def __post_init__(self):
        for k, v in vars(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and >= 0, got {v}")


# ---------------------------------------------------------------------------
# contrastive regularization


def contrastive_from_sims(s_pos, s_neg, tau: float, pos_mask=None, neg_mask=None):
    """Sum over anchors of ``-log(sum exp(s+/tau) / (sum exp(s+/tau) + sum exp(s-/tau)))``.

    ``s_pos`` is ``(n, U)``, ``s_neg`` is ``(n, Q)``; masks flag valid entries.
    Anchors without a valid positive contribute 0. Returns
    ``(loss, ds_pos, ds_neg, skipped)``.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    s_pos = np.atleast_2d(np.asarray(s_pos, dtype=np.float64))
    s_neg = np.asarray(s_neg, dtype=np.float64).reshape(len(s_pos), -1)
    pos_mask = np.ones(s_pos.shape, bool) if pos_mask is None else np.asarray(pos_mask, bool)
    neg_mask = np.ones(s_neg.shape, bool) if neg_mask is None else np.asarray(neg_mask, bool)
    valid = pos_mask.any(axis=1)
    zp = np.where(pos_mask, s_pos / tau, -np.inf)
    zn = np.where(neg_mask, s_neg / tau, -np.inf)
    z_all = np.concatenate([zp, zn], axis=1)
    m = np.where(valid, z_all.max(axis=1), 0.0)[:, None]
    e_all = np.exp(z_all - m)
    e_pos = e_all[:, : zp.shape[1]]
    sum_all = e_all.sum(axis=1)
    sum_pos = e_pos.sum(axis=1)
    sum_all_safe = np.where(valid, sum_all, 1.0)
    sum_pos_safe = np.where(valid, sum_pos, 1.0)
    per_anchor = np.where(valid, np.log(sum_all_safe) - np.log(sum_pos_safe), 0.0)
    w_all = e_all / sum_all_safe[:, None]
    w_pos = e_pos / sum_pos_safe[:, None]
    ds_pos = np.where(valid[:, None], (w_all[:, : zp.shape[1]] - w_pos) / tau, 0.0)
    ds_neg = np.where(valid[:, None], w_all[:, zp.shape[1]:] / tau, 0.0)
    return float(per_anchor.sum()), ds_pos, ds_neg, int((~valid).sum())


def contrastive_loss(anchors, pos, neg, tau: float, pos_mask=None, neg_mask=None):
    """Cosine-similarity contrastive loss on flattened part vectors.

    ``anchors`` ``(n, D)``, ``pos`` ``(n, U, D)``, ``neg`` ``(n, Q, D)``.
    Returns ``(loss, d_anchors, d_pos, d_neg, skipped)``.
    """
    a = np.asarray(anchors, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    pos_mask = np.ones(pos.shape[:2], bool) if pos_mask is None else pos_mask
    neg_mask = np.ones(neg.shape[:2], bool) if neg_mask is None else neg_mask
    # padded entries get a dummy unit vector so the cosine stays defined
    pos_safe = np.where(pos_mask[..., None], pos, 1.0)
    neg_safe = np.where(neg_mask[..., None], neg, 1.0)
    s_pos = cosine_rows(a[:, None, :], pos_safe)
    s_neg = cosine_rows(a[:, None, :], neg_safe)
    loss, gp, gn, skipped = contrastive_from_sims(s_pos, s_neg, tau, pos_mask, neg_mask)
    da_p, dpos = cosine_rows_backward(a[:, None, :], pos_safe, gp)
    da_n, dneg = cosine_rows_backward(a[:, None, :], neg_safe, gn)
    da = da_p.sum(axis=1) + da_n.sum(axis=1)
    return loss, da, dpos * pos_mask[..., None], dneg * neg_mask[..., None], skipped


def _pad(plans: list[MixPlan], width: int):
    """Stack per-anchor plans into padded (n, width) candidate index arrays."""
    n = len(plans)
    lens = np.array([len(p) for p in plans], dtype=np.int64)
    mask = np.arange(width)[None, :] < lens[:, None]
    flat = MixPlan.concat(plans, plans[0].u.shape[1], plans[0].positive) if n else None
    return flat, mask


def contrastive_loss_plans(parts, pos_plans, neg_plans, tau: float):
    """Contrastive loss for a batch given per-anchor mined plans.

    Anchors are every entry of ``parts`` ``(N, M, C_f)``; gradients of anchors
    and of every copied slot are accumulated into one ``(N, M, C_f)`` array.
    """
    N, M, C = parts.shape
    D = M * C
    flat_parts = parts.reshape(N, D)
    U = max([len(p) for p in pos_plans] + [1])
    Q = max([len(p) for p in neg_plans] + [1])
    out = {}
    blocks = {}
    for key, plans, width in (("pos", pos_plans, U), ("neg", neg_plans, Q)):
        flat, mask = _pad(plans, width)
        vecs = np.zeros((N, width, D))
        if flat is not None and len(flat):
            vecs[mask] = flat.materialize(parts).reshape(len(flat), D)
        blocks[key] = (flat, mask, vecs)
    loss, da, dpos, dneg, skipped = contrastive_loss(
        flat_parts, blocks["pos"][2], blocks["neg"][2], tau, blocks["pos"][1], blocks["neg"][1])
    dparts = da.reshape(N, M, C).copy()
    for key, dv in (("pos", dpos), ("neg", dneg)):
        flat, mask, _ = blocks[key]
        if flat is not None and len(flat):
            flat.scatter_grad(dv[mask].reshape(len(flat), M, C), dparts)
    out.update(loss=loss, dparts=dparts, skipped=skipped)
    return out


# ---------------------------------------------------------------------------
# classification losses


def _check_labels(labels, C):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range [0, {C})")
    return labels


def soft_cross_entropy(z, targets):
    """Mean of ``-sum_c t_c log softmax(z)_c`` and its gradient w.r.t. ``z``."""
    n = len(z)
    if n == 0:
        return 0.0, np.zeros_like(z)
    logp = log_softmax(z)
    loss = -np.sum(targets * logp) / n
    dz = (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) / n
    return float(loss), dz


def cross_entropy(z, labels):
    labels = _check_labels(labels, z.shape[1])
    t = np.zeros_like(z)
    t[np.arange(len(labels)), labels] = 1.0
    return soft_cross_entropy(z, t)


def part_id_loss(params, parts, labels):
    """Mean cross-entropy of the part classifier over all samples."""
    parts = np.asarray(parts, dtype=np.float64)
    flat = parts.reshape(len(parts), -1)
    z = encoder.logits(params, "part", flat)
    loss, dz = cross_entropy(z, labels)
    grads, dflat = encoder.logits_backward(params, "part", flat, dz)
    return loss, grads, dflat.reshape(parts.shape)


def _per_modality_ce(params, name_for, d, targets, modalities):
    loss = 0.0
    grads: dict = {}
    dd = np.zeros_like(d)
    for t in (Modality.VISIBLE, Modality.INFRARED):
        idx = np.flatnonzero(modalities == int(t))
        if idx.size == 0:
            continue
        name = name_for(t)
        z = encoder.logits(params, name, d[idx])
        l_t, dz = soft_cross_entropy(z, targets[idx])
        g, ddi = encoder.logits_backward(params, name, d[idx], dz)
        encoder.add_grads(grads, g)
        dd[idx] += ddi
        loss += l_t
    return loss, grads, dd


def _one_hot(labels, C):
    labels = _check_labels(labels, C)
    t = np.zeros((len(labels), C))
    t[np.arange(len(labels)), labels] = 1.0
    return t


def id_loss(params, d, labels, modalities, soft_targets=None):
    """Shared-classifier cross-entropy, averaged within each modality and summed."""
    d = np.asarray(d, dtype=np.float64)
    C = params["cls_W"].shape[1]
    t = _one_hot(labels, C) if soft_targets is None else np.asarray(soft_targets, dtype=np.float64)
    return _per_modality_ce(params, lambda _: "cls", d, t, np.asarray(modalities))


def modality_specific_id_loss(params, d, labels, modalities):
    """Visible samples through the visible classifier, infrared through the infrared one."""
    d = np.asarray(d, dtype=np.float64)
    C = params["vis_W"].shape[1]
    return _per_modality_ce(params, lambda t: "vis" if t is Modality.VISIBLE else "ir",
                            d, _one_hot(labels, C), np.asarray(modalities))


def modality_learning_loss(params, mean, d, modalities):
    """Sum of KL(live own-modality classifier || mean other-modality classifier).

    The mean classifiers are constants: no gradient is produced for them.
    """
    d = np.asarray(d, dtype=np.float64)
    modalities = np.asarray(modalities)
    loss = 0.0
    grads: dict = {}
    dd = np.zeros_like(d)
    for t, live, target in ((Modality.VISIBLE, "vis", "mean_ir"), (Modality.INFRARED, "ir", "mean_vis")):
        idx = np.flatnonzero(modalities == int(t))
        if idx.size == 0:
            continue
        x = d[idx]
        za = encoder.logits(params, live, x)
        zb = x @ mean[f"{target}_W"] + mean[f"{target}_b"]
        lp, lq = log_softmax(za), log_softmax(zb)
        p, q = np.exp(lp), np.exp(lq)
        r = lp - lq
        kl = np.sum(p * r, axis=1)
        loss += float(kl.sum())
        dza = p * (r - kl[:, None])
        dzb = q - p
        g, dx = encoder.logits_backward(params, live, x, dza)
        encoder.add_grads(grads, g)
        dd[idx] += dx + dzb @ mean[f"{target}_W"].T
    return loss, grads, dd


def center_cluster_loss(d, labels, rho: float = 1.0):
    """Mean distance to identity centres plus a hinge keeping centres ``rho`` apart.

    Returns ``(loss, dd, single_identity)``; with one identity only the pull
    term is evaluated and ``single_identity`` is True.
    """
    d = np.asarray(d, dtype=np.float64)
    labels = np.asarray(labels)
    N = len(d)
    ids, inv = np.unique(labels, return_inverse=True)
    P = len(ids)
    counts = np.bincount(inv, minlength=P).astype(np.float64)
    centers = np.zeros((P, d.shape[1]))
    np.add.at(centers, inv, d)
    centers /= counts[:, None]

    diff = d - centers[inv]
    dist = np.linalg.norm(diff, axis=1)
    unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
    pull = dist.sum() / N
    dd = unit / N
    dz = np.zeros_like(centers)
    np.add.at(dz, inv, -unit / N)

    push = 0.0
    single = P < 2
    if single:
        warnings.warn("center cluster loss with a single identity: hinge term skipped", RuntimeWarning)
    else:
        scale = 2.0 / (P * (P - 1))
        k, j = np.triu_indices(P, 1)
        cd = centers[k] - centers[j]
        cdist = np.linalg.norm(cd, axis=1)
        active = cdist < rho
        push = scale * float(np.sum(rho - cdist[active]))
        cu = np.divide(cd, cdist[:, None], out=np.zeros_like(cd), where=cdist[:, None] > 0)
        g = np.where(active[:, None], -scale * cu, 0.0)
        np.add.at(dz, k, g)
        np.add.at(dz, j, -g)
    dd += dz[inv] / counts[inv][:, None]
    return float(pull + push), dd, single


# ---------------------------------------------------------------------------
# total


@dataclass
class LossResult:
    total: float
    components: dict
    grads: dict
    diagnostics: dict = field(default_factory=dict)


def total_loss(params, mean, x, labels, modalities, weights: LossWeights = LossWeights(),
               tau: float = 0.1, rho: float = 1.0, pos_plans=None, neg_plans=None,
               include_partmix: bool = True, cache=None, id_term=None):
    """Weighted sum of all objectives with gradients on every trainable parameter.

    ``pos_plans``/``neg_plans`` are the mined per-anchor plans; when
    ``include_partmix`` is False the part-ID and contrastive terms are not
    evaluated at all. ``id_term``, if given, is a zero-argument callable
    returning ``(value, grads)`` that replaces the identity loss (the
    image-level mixers compute it on mixed inputs).
    """
    labels = np.asarray(labels)
    modalities = np.asarray(modalities)
    cache = encoder.forward(params, x) if cache is None else cache
    d, parts = cache.d, cache.p
    comps = dict.fromkeys(LOSS_NAMES, 0.0)
    grads: dict = {}
    dd = np.zeros_like(d)
    dparts = np.zeros_like(parts)
    diag = {"evaluated": []}

    if id_term is None:
        comps["L_id"], g, ddi = id_loss(params, d, labels, modalities)
        dd += ddi
    else:
        comps["L_id"], g = id_term()
    encoder.add_grads(grads, g)
    comps["L_cc"], ddc, _ = center_cluster_loss(d, labels, rho)
    dd += ddc
    comps["L_sid"], g, dds = modality_specific_id_loss(params, d, labels, modalities)
    encoder.add_grads(grads, g, weights.lambda_sid)
    dd += weights.lambda_sid * dds
    comps["L_ML"], g, ddm = modality_learning_loss(params, mean, d, modalities)
    encoder.add_grads(grads, g, weights.lambda_ML)
    dd += weights.lambda_ML * ddm
    diag["evaluated"] += ["L_id", "L_cc", "L_sid", "L_ML"]

    if include_partmix:
        comps["L_aid"], g, dpa = part_id_loss(params, parts, labels)
        encoder.add_grads(grads, g, weights.lambda_aid)
        dparts += weights.lambda_aid * dpa
        diag["evaluated"].append("L_aid")
        if pos_plans is not None:
            res = contrastive_loss_plans(parts, pos_plans, neg_plans, tau)
            comps["L_cont"] = res["loss"]
            dparts += weights.lambda_cont * res["dparts"]
            diag["empty_positive"] = res["skipped"]
            diag["evaluated"].append("L_cont")

    encoder.add_grads(grads, encoder.backward(params, cache, dd=dd, dp=dparts))
    total = (comps["L_id"] + comps["L_cc"] + weights.lambda_sid * comps["L_sid"]
             + weights.lambda_ML * comps["L_ML"] + weights.lambda_aid * comps["L_aid"]
             + weights.lambda_cont * comps["L_cont"])
    for k in params:
        grads.setdefault(k, np.zeros_like(params[k]))
    return LossResult(float(total), comps, grads, diag)
