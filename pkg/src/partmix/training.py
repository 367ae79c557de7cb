"""Two-phase training loop, evaluation and the sweep drivers.

Phase 1 (warm-up) optimises the baseline objective only. Phase 2 adds the
configured regularizer. One run seed feeds independent named streams for
data, initialisation, batching, mixing and evaluation.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, encoder, evaluation, losses, mining
from .config import REGULARIZERS, ExperimentConfig
from .data import DatasetSplit, generate_dataset, index_by_identity, epoch_batches, stack_images
from .numerics import AdamState, adam_step, derive_seed, stream

log = logging.getLogger(__name__)

ROUTES_FOR = {
    "partmix": ("inter", "intra"),
    "partmix_no_mining": ("inter", "intra"),
    "intra_only": ("intra",),
    "inter_only": ("inter",),
}


class NumericFailure(RuntimeError):
    pass


@dataclass
class RunRecord:
    config_hash: str
    losses: list[dict]
    reports: list[evaluation.MetricsReport] = field(default_factory=list)
    wall_clock: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def map_of(self, protocol_name="infrared_to_visible", shot="single") -> float:
        for r in self.reports:
            if r.protocol.name == protocol_name and r.protocol.shot_mode == shot:
                return r.map_score
        raise KeyError((protocol_name, shot))


@dataclass
class TrainedModel:
    params: dict
    mean: dict
    split: DatasetSplit
    record: RunRecord


def learning_rate(config: ExperimentConfig, epoch: int) -> float:
    """Step decay; epochs count from the start of warm-up."""
    opt = config.optimizer
    n = sum(1 for e in opt.decay_epochs if epoch >= e)
    return opt.lr * opt.decay_factor**n


def dataset_for(config: ExperimentConfig) -> DatasetSplit:
    return generate_dataset(config.dataset, derive_seed(config.data_stream_seed, "data"))


# ---------------------------------------------------------------------------
# one optimisation step


def _partmix_plans(config, params, cache, y, t, step_seed, routes, use_entropy):
    bank = augment.DescriptorBank(cache.p, y, t)
    pos, neg = augment.build_pools(bank, config.mix.B, config.mix.U, config.mix.Q,
                                   derive_seed(step_seed, "pools"), routes)
    if not use_entropy:     # ablations keep every pooled sample
        return pos, neg
    return mining.mine_plans(params, cache.p, pos, neg, config.mining.U_prime,
                             config.mining.Q_prime, use_entropy=use_entropy,
                             rng=stream(step_seed, "random-selection"))


def _soft_targets(y, perm, lam, C):
    t = np.zeros((len(y), C))
    t[np.arange(len(y)), y] += lam
    t[np.arange(len(y)), y[perm]] += 1.0 - lam
    return t


def _mixer_id_term(config, params, x, y, t, cache, step_seed):
    """Identity loss on an image-level mixed batch: (value, grads) closure."""
    rng = stream(step_seed, "mixer")
    C = params["cls_W"].shape[1]
    perm = rng.permutation(len(y))
    lam = augment.sample_lambda(rng, config.mix_alpha)
    reg = config.regularizer
    layer = "input"
    if reg == "manifold_mixup":
        layer = ("input", "post_embed")[int(rng.integers(2))]
    if reg == "cutmix":
        H, W = x.shape[1:3]
        box, _ = augment.cutmix_box(H, W, lam, rng)
        keep = np.ones((H, W, 1))
        keep[box.y0:box.y1, box.x0:box.x1] = 0.0
        xm = keep * x + (1.0 - keep) * x[perm]
        lam = 1.0 - box.area / (H * W)
    elif layer == "input":
        xm, _ = augment.mixup(x, x[perm], lam)
    targets = _soft_targets(y, perm, lam, C)

    def term():
        if layer == "post_embed":
            f_mix, _ = augment.manifold_mixup(cache.f, cache.f[perm], lam, "post_embed")
            mc = encoder.forward_from_features(params, x, f_mix)
            value, grads, dd = losses.id_loss(params, mc.d, None, t, soft_targets=targets)
            g_bb, df_mix = encoder.backward(params, mc, dd=dd, to_features=True)
            df = lam * df_mix
            np.add.at(df, perm, (1.0 - lam) * df_mix)
            g_emb, _ = encoder.embed_backward(params, x, cache.f, df)
            encoder.add_grads(grads, g_bb)
            encoder.add_grads(grads, g_emb)
            return value, grads
        mc = encoder.forward(params, xm)
        value, grads, dd = losses.id_loss(params, mc.d, None, t, soft_targets=targets)
        encoder.add_grads(grads, encoder.backward(params, mc, dd=dd))
        return value, grads

    return term


def training_step(config, params, mean, x, y, t, warm: bool, step_seed: int):
    cache = encoder.forward(params, x)
    reg = config.regularizer
    kw = dict(weights=config.losses.weights, tau=config.losses.tau, rho=config.losses.rho, cache=cache)
    if warm or reg == "none":
        return losses.total_loss(params, mean, x, y, t, include_partmix=False, **kw)
    if reg in ROUTES_FOR:
        sp, sn = _partmix_plans(config, params, cache, y, t, step_seed, ROUTES_FOR[reg],
                                use_entropy=(reg == "partmix"))
        return losses.total_loss(params, mean, x, y, t, pos_plans=sp, neg_plans=sn, **kw)
    term = _mixer_id_term(config, params, x, y, t, cache, step_seed)
    return losses.total_loss(params, mean, x, y, t, include_partmix=False, id_term=term, **kw)


# ---------------------------------------------------------------------------
# runs


def train(config: ExperimentConfig, split: DatasetSplit | None = None, dump_mixes=None) -> TrainedModel:
    """Train one model; returns parameters, mean classifiers and the run record."""
    config.validate()
    t0 = time.perf_counter()
    split = dataset_for(config) if split is None else split
    dims = encoder.ModelDims(config.dataset.C_in, config.model.C_f, config.model.M,
                             len(split.train_ids))
    params, mean = encoder.init_params(dims, derive_seed(config.seed, "init"))
    adam = AdamState(lr=config.optimizer.lr)
    table = index_by_identity(split.train)
    id_index = {i: k for k, i in enumerate(split.train_ids)}
    counters = Counter()
    history = []
    batch_seed = derive_seed(config.seed, "batch")
    mix_seed = derive_seed(config.seed, "mix")
    step = 0
    for epoch in range(config.schedule.total_epochs):
        adam.lr = learning_rate(config, epoch)
        warm = epoch < config.schedule.warmup_epochs
        sums = Counter()
        batches = epoch_batches(split.train, config.batch.P, config.batch.K, batch_seed, epoch, table)
        for b, batch in enumerate(batches):
            x, y_raw, t = stack_images(batch.images)
            y = np.array([id_index[i] for i in y_raw])
            res = training_step(config, params, mean, x, y, t, warm, derive_seed(mix_seed, step))
            if not np.isfinite(res.total):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, batch {b}")
            for name in res.diagnostics["evaluated"]:
                counters[("warmup" if warm else "main", name)] += 1
            counters["empty_positive"] += res.diagnostics.get("empty_positive", 0)
            for k, v in res.components.items():
                sums[k] += v
            sums["total"] += res.total
            params, adam = adam_step(params, res.grads, adam)
            mean = encoder.ema_update(mean, params, config.losses.ema_momentum)
            if dump_mixes is not None and not warm and config.regularizer in ROUTES_FOR:
                _dump_mix_record(dump_mixes, config, params, x, y, t, epoch, b,
                                 derive_seed(mix_seed, step))
            step += 1
        row = {"epoch": epoch}
        row.update({k: sums[k] / len(batches) for k in (*losses.LOSS_NAMES, "total")})
        history.append(row)
        log.debug("epoch %d lr %.2e total %.4f", epoch, adam.lr, row["total"])
    record = RunRecord(config.hash(), history, wall_clock=time.perf_counter() - t0,
                       diagnostics={"counters": {"/".join(k) if isinstance(k, tuple) else k: v
                                                 for k, v in counters.items()}, "steps": step})
    return TrainedModel(params, mean, split, record)


def _dump_mix_record(fh, config, params, x, y, t, epoch, b, step_seed):
    cache = encoder.forward(params, x)
    sp, sn = _partmix_plans(config, params, cache, y, t, step_seed,
                            ROUTES_FOR[config.regularizer], config.regularizer == "partmix")
    for plans, role in ((sp, "positive"), (sn, "negative")):
        for plan in plans:
            for i in range(len(plan)):
                fh.write(json.dumps({
                    "epoch": epoch, "batch": b, "role": role,
                    "anchor": int(plan.anchor[i]), "donor": int(plan.donor[i]),
                    "route": "inter" if plan.inter[i] else "intra",
                    "same_identity": bool(plan.same_id[i]),
                    "replaced_slots": [[int(u), int(h)] for u, h in zip(plan.u[i], plan.h[i])],
                }) + "\n")


def evaluate(params, split: DatasetSplit, protocols=evaluation.DEFAULT_PROTOCOLS, seed: int = 0):
    cache: dict = {}
    pseed = derive_seed(seed, "protocol")
    return [evaluation.run_protocol(params, split, p, pseed, desc_cache=cache) for p in protocols]


def train_and_evaluate(config: ExperimentConfig, split=None, protocols=evaluation.DEFAULT_PROTOCOLS,
                       dump_mixes=None) -> TrainedModel:
    model = train(config, split, dump_mixes)
    model.record.reports = evaluate(model.params, model.split, protocols, config.seed)
    return model


# ---------------------------------------------------------------------------
# files


def write_losses(history, path) -> None:
    cols = ["epoch", *losses.LOSS_NAMES, "total"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


def write_run(out: Path, config: ExperimentConfig, model: TrainedModel) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(config.to_json())
    write_losses(model.record.losses, out / "losses.csv")
    if model.record.reports:
        evaluation.write_metrics(model.record.reports, out / "metrics.csv", out / "metrics.json")
    encoder.save_params(out / "params.bin", model.params, model.mean)


# ---------------------------------------------------------------------------
# sweeps


def sweep_configs(base: ExperimentConfig, param: str, values) -> list[ExperimentConfig]:
    """One config per swept value. An M sweep sets B to a third of M (at least 1)."""
    out = []
    for i, v in enumerate(values):
        if param == "B":
            cfg = base.replace(**{"mix.B": int(v)})
        elif param == "M":
            cfg = base.replace(**{"model.M": int(v), "mix.B": max(1, round(int(v) / 3))})
        elif param == "tau":
            cfg = base.replace(**{"losses.tau": float(v)})
        else:
            raise ValueError(f"cannot sweep {param!r}")
        cfg = cfg.replace(data_seed=base.data_stream_seed, seed=derive_seed(base.seed, "sweep", i))
        out.append(cfg.validate())
    return out


def ablate(base: ExperimentConfig, param: str, values, out: Path | None = None,
           protocols=evaluation.DEFAULT_PROTOCOLS) -> list[dict]:
    split = dataset_for(base)
    rows = []
    for v, cfg in zip(values, sweep_configs(base, param, values)):
        model = train_and_evaluate(cfg, split, protocols)
        for r in model.record.reports:
            rows.append({"param": param, "value": v, "protocol": r.protocol.name,
                         "shot_mode": r.protocol.shot_mode, "rank1": r.cmc.get(1, float("nan")),
                         "mAP": r.map_score})
    if out is not None:
        _write_rows(rows, Path(out) / "ablation.csv")
    return rows


def compare(base: ExperimentConfig, regularizers, seeds=(0,), out: Path | None = None,
            protocols=evaluation.DEFAULT_PROTOCOLS) -> list[dict]:
    """Same data and seeds for every regularizer; one row per (regularizer, seed, protocol)."""
    for r in regularizers:
        if r not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {r!r}")
    rows = []
    for seed in seeds:
        seeded = base.replace(seed=int(seed))
        split = dataset_for(seeded)
        for reg in regularizers:
            cfg = seeded.replace(regularizer=reg)
            model = train_and_evaluate(cfg, split, protocols)
            for r in model.record.reports:
                rows.append({"regularizer": reg, "seed": int(seed), "protocol": r.protocol.name,
                             "shot_mode": r.protocol.shot_mode, "rank1": r.cmc.get(1, float("nan")),
                             "mAP": r.map_score})
    if out is not None:
        _write_rows(rows, Path(out) / "comparison.csv")
    return rows


def _write_rows(rows, path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
