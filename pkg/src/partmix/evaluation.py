"""Cross-modality retrieval: ranking, CMC, mAP and query/gallery protocols."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import encoder
from .data import DatasetSplit, Modality, stack_images
from .numerics import DegenerateInputError, stream


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalProtocol:
    query_modality: Modality = Modality.INFRARED
    gallery_modality: Modality = Modality.VISIBLE
    shot_mode: str = "single"
    ranks: tuple[int, ...] = (1, 5, 10, 20)
    gallery_filter: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if Modality.parse(self.query_modality) == Modality.parse(self.gallery_modality):
            raise ProtocolError("query and gallery modality must differ")
        if self.shot_mode not in ("single", "multi"):
            raise ProtocolError(f"unknown shot mode {self.shot_mode!r}")
        if list(self.ranks) != sorted(self.ranks) or min(self.ranks) < 1:
            raise ProtocolError("ranks must be ascending positive integers")

    @property
    def name(self) -> str:
        q = Modality.parse(self.query_modality).tag
        g = Modality.parse(self.gallery_modality).tag
        return f"{q}_to_{g}"


DEFAULT_PROTOCOLS = (
    RetrievalProtocol(Modality.INFRARED, Modality.VISIBLE, "single"),
    RetrievalProtocol(Modality.INFRARED, Modality.VISIBLE, "multi"),
    RetrievalProtocol(Modality.VISIBLE, Modality.INFRARED, "single"),
    RetrievalProtocol(Modality.VISIBLE, Modality.INFRARED, "multi"),
)


@dataclass
class MetricsReport:
    cmc: dict[int, float]
    map_score: float
    num_queries: int
    protocol: RetrievalProtocol
    seed: int

    def rows(self):
        name, shot = self.protocol.name, self.protocol.shot_mode
        for k, v in self.cmc.items():
            yield {"protocol": name, "shot_mode": shot, "k": k, "cmc": v}
        yield {"protocol": name, "shot_mode": shot, "mAP": self.map_score}

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol.name,
            "shot_mode": self.protocol.shot_mode,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "mAP": self.map_score,
            "num_queries": self.num_queries,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# ranking and metrics


def _normalize(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("zero-norm descriptor")
    return x / n


def similarity_matrix(query, gallery) -> np.ndarray:
    return _normalize(np.atleast_2d(query)) @ _normalize(np.atleast_2d(gallery)).T


TIE_TOL = 1e-12


def rank_gallery(query_d, gallery) -> np.ndarray:
    """Gallery indices by descending cosine similarity; ties by ascending index.

    Similarities closer than ``TIE_TOL`` count as tied, so rounding noise in
    the cosine cannot reorder mathematically equal scores. With a 2-d
    ``query_d`` one ranking row per query is returned.
    """
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if len(gallery) == 0:
        raise ProtocolError("empty gallery")
    single = np.ndim(query_d) == 1
    sims = similarity_matrix(query_d, gallery)
    order = np.argsort(-sims, axis=1, kind="stable")
    ranked = np.take_along_axis(sims, order, axis=1)
    group = np.concatenate([np.zeros((len(sims), 1), np.int64),
                            np.cumsum(ranked[:, :-1] - ranked[:, 1:] > TIE_TOL, axis=1)], axis=1)
    within = np.lexsort((order, group), axis=1)
    order = np.take_along_axis(order, within, axis=1)
    return order[0] if single else order


def match_flags(order, query_labels, gallery_labels) -> np.ndarray:
    """Boolean ``(Q, G)`` array: is the gallery item at each rank a true match."""
    gallery_labels = np.asarray(gallery_labels)
    return gallery_labels[np.atleast_2d(order)] == np.asarray(query_labels)[:, None]


def _check_matches(flags):
    flags = np.atleast_2d(np.asarray(flags, dtype=bool))
    if flags.shape[0] == 0:
        raise ProtocolError("no queries")
    if not np.all(flags.any(axis=1)):
        raise ProtocolError("a query has no true match in the gallery")
    return flags


def cmc(flags, ks: Sequence[int]) -> dict[int, float]:
    """Fraction of queries whose first true match sits at rank <= k."""
    flags = _check_matches(flags)
    first = flags.argmax(axis=1) + 1
    return {int(k): float(np.mean(first <= k)) for k in ks}


def average_precision(flags_row) -> float:
    row = np.asarray(flags_row, dtype=bool)
    hits = np.flatnonzero(row) + 1
    return float(np.mean(np.arange(1, hits.size + 1) / hits))


def mean_average_precision(flags) -> float:
    flags = _check_matches(flags)
    return float(np.mean([average_precision(r) for r in flags]))


# ---------------------------------------------------------------------------
# protocols


def descriptors(params, images, batch: int = 256) -> np.ndarray:
    x, _, _ = stack_images(images)
    return np.concatenate([encoder.forward(params, x[i:i + batch]).d
                           for i in range(0, len(x), batch)])


def select_gallery(labels, shot_mode: str, rng) -> np.ndarray:
    """Indices kept in the gallery: all (multi-shot) or one seeded pick per identity."""
    labels = np.asarray(labels)
    if shot_mode == "multi":
        return np.arange(len(labels))
    keep = [int(rng.choice(np.flatnonzero(labels == i))) for i in np.unique(labels)]
    return np.array(sorted(keep), dtype=np.int64)


def evaluate_descriptors(q_desc, q_labels, g_desc, g_labels, protocol: RetrievalProtocol,
                         seed: int = 0) -> MetricsReport:
    rng = stream(seed, "protocol", protocol.name, protocol.shot_mode)
    keep = select_gallery(g_labels, protocol.shot_mode, rng)
    g_desc, g_labels = np.asarray(g_desc)[keep], np.asarray(g_labels)[keep]
    if len(q_desc) == 0 or len(g_desc) == 0:
        raise ProtocolError("empty query or gallery")
    order = rank_gallery(q_desc, g_desc)
    flags = match_flags(order, q_labels, g_labels)
    ks = [k for k in protocol.ranks if k <= len(g_desc)] or [len(g_desc)]
    return MetricsReport(cmc(flags, ks), mean_average_precision(flags), len(q_desc), protocol, seed)


def run_protocol(params, split: DatasetSplit, protocol: RetrievalProtocol, seed: int = 0,
                 desc_cache: dict | None = None) -> MetricsReport:
    """Queries: every test image of the query modality. Gallery: the other modality."""
    pool = split.test
    qm, gm = Modality.parse(protocol.query_modality), Modality.parse(protocol.gallery_modality)
    queries = [im for im in pool if im.modality == qm]
    gallery = [im for im in pool if im.modality == gm]
    if protocol.gallery_filter is not None:
        gallery = [im for im in gallery if protocol.gallery_filter(im)]
    if not queries or not gallery:
        raise ProtocolError("empty query or gallery")
    cache = desc_cache if desc_cache is not None else {}
    for mod, ims in ((qm, queries), (gm, gallery)):
        if mod not in cache or protocol.gallery_filter is not None:
            cache[mod] = descriptors(params, ims)
    q_labels = np.array([im.identity for im in queries])
    g_labels = np.array([im.identity for im in gallery])
    return evaluate_descriptors(cache[qm], q_labels, cache[gm], g_labels, protocol, seed)


def self_retrieval(desc) -> MetricsReport:
    """Sanity protocol: the gallery is the query set; each query's only match is itself."""
    desc = np.asarray(desc)
    labels = np.arange(len(desc))
    flags = match_flags(rank_gallery(desc, desc), labels, labels)
    proto = RetrievalProtocol(Modality.INFRARED, Modality.VISIBLE, "multi", (1,))
    return MetricsReport(cmc(flags, [1]), mean_average_precision(flags), len(desc), proto, 0)


def permutation_chance_band(q_desc, q_labels, g_desc, g_labels, n_perm: int = 1000,
                            seed: int = 0, quantiles=(0.005, 0.995)):
    """mAP null distribution from permuting gallery labels against a fixed ranking."""
    order = rank_gallery(q_desc, g_desc)
    g_labels = np.asarray(g_labels)
    rng = stream(seed, "chance-band")
    maps = np.empty(n_perm)
    for i in range(n_perm):
        maps[i] = mean_average_precision(match_flags(order, q_labels, rng.permutation(g_labels)))
    lo, hi = np.quantile(maps, quantiles)
    return float(lo), float(hi), maps


# ---------------------------------------------------------------------------
# files


def write_metrics(reports: Sequence[MetricsReport], csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["protocol", "shot_mode", "k", "cmc", "mAP"])
        for r in reports:
            for row in r.rows():
                w.writerow([row["protocol"], row["shot_mode"], row.get("k", ""),
                            repr(row["cmc"]) if "cmc" in row else "",
                            repr(row["mAP"]) if "mAP" in row else ""])
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
