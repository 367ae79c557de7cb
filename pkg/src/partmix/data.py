"""Synthetic two-modality person dataset and identity-balanced batch sampling.

A synthetic person is ``M_gt`` stacked horizontal bands. Each band's base
colour comes from the identity's latent part attributes; the two modalities
see that colour through different fixed affine channel transforms.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import derive_seed, stream


class Modality(enum.IntEnum):
    VISIBLE = 0
    INFRARED = 1

    @property
    def tag(self) -> str:
        return "visible" if self is Modality.VISIBLE else "infrared"

    @property
    def other(self) -> "Modality":
        return Modality(1 - int(self))

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        if isinstance(value, str):
            tags = {"visible": cls.VISIBLE, "infrared": cls.INFRARED}
            if value.lower() not in tags:
                raise ValueError(f"unknown modality {value!r}")
            return tags[value.lower()]
        return cls(int(value))


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_train_ids: int = 64
    num_test_ids: int = 32
    images_per_id_per_modality: int = 10
    M_gt: int = 6
    A: int = 8
    H: int = 24
    W: int = 8
    C_in: int = 3
    pixel_noise: float = 0.04
    band_scale: float = 0.15
    p_occ: float = 0.2
    jitter: int = 1
    band_share: float = 0.7     # weight of the per-band centre common to all identities

    def validate(self) -> None:
        for name in ("num_train_ids", "num_test_ids", "images_per_id_per_modality",
                     "M_gt", "A", "H", "W", "C_in"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.H % self.M_gt:
            raise ValueError(f"H={self.H} not divisible by M_gt={self.M_gt}")
        if self.num_test_ids < 2:
            raise ValueError("num_test_ids must be >= 2 for retrieval")
        if not 0.0 <= self.p_occ <= 1.0:
            raise ValueError("p_occ must lie in [0, 1]")
        if not 0.0 <= self.band_share < 1.0:
            raise ValueError("band_share must lie in [0, 1)")


@dataclass(frozen=True)
class ModalityTransform:
    matrix: np.ndarray   # (C_in, C_in)
    offset: np.ndarray   # (C_in,)

    def apply(self, colors: np.ndarray) -> np.ndarray:
        return colors @ self.matrix.T + self.offset


@dataclass(frozen=True)
class PartAttributeProfile:
    identity: int
    attributes: np.ndarray  # (M_gt, A)


@dataclass(frozen=True, eq=False)
class PersonImage:
    pixels: np.ndarray      # (H, W, C_in) in [0, 1]
    identity: int
    modality: Modality
    nuisance_seed: int


@dataclass(eq=False)
class DatasetSplit:
    spec: DatasetSpec
    seed: int
    train: list[PersonImage]
    gallery: list[PersonImage]   # test images, visible
    query: list[PersonImage]     # test images, infrared
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    profiles: dict[int, PartAttributeProfile]
    palette: np.ndarray
    transforms: dict[Modality, ModalityTransform] = field(default_factory=dict)

    @property
    def test(self) -> list[PersonImage]:
        return self.gallery + self.query

    def train_arrays(self):
        return stack_images(self.train)


def stack_images(images) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(pixels (N,H,W,C), identities (N,), modalities (N,)) for a list of images."""
    x = np.stack([im.pixels for im in images])
    y = np.array([im.identity for im in images], dtype=np.int64)
    t = np.array([int(im.modality) for im in images], dtype=np.int64)
    return x, y, t


# ---------------------------------------------------------------------------
# generation

MAX_CONDITION = 100.0


def _modality_transforms(spec: DatasetSpec, seed: int) -> dict[Modality, ModalityTransform]:
    """Visible: ``0.8 Q`` with ``Q`` a near-identity rotation. Infrared: the
    visible map followed by a half turn about the grey axis.

    The half turn keeps brightness and negates chroma, so colour identity
    survives only up to a sign flip and a model must learn the correspondence.
    Both maps fix mid-grey, keep base colours inside [0, 1] and are orthogonal
    up to scale (condition number 1).
    """
    rng = stream(seed, "modality-transform")
    c = spec.C_in
    q, r = np.linalg.qr(np.eye(c) + 0.1 * rng.standard_normal((c, c)))
    q = q * np.sign(np.diag(r))
    grey = np.full(c, 1.0 / np.sqrt(c))
    half_turn = 2.0 * np.outer(grey, grey) - np.eye(c)
    out = {}
    for t, matrix in ((Modality.VISIBLE, 0.8 * q), (Modality.INFRARED, 0.8 * half_turn @ q)):
        cond = np.linalg.cond(matrix)
        if not cond < MAX_CONDITION:
            raise RuntimeError(f"modality transform condition number {cond:.1f} too large")
        out[t] = ModalityTransform(matrix, 0.5 - matrix @ np.full(c, 0.5))
    return out


def band_rows(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Band index for every image row, with each inner boundary jittered by up to ``jitter`` rows."""
    h = spec.H // spec.M_gt
    bounds = np.arange(1, spec.M_gt) * h
    if spec.jitter:
        bounds = bounds + rng.integers(-spec.jitter, spec.jitter + 1, size=bounds.size)
    return np.searchsorted(bounds, np.arange(spec.H), side="right")


def render(
    profile: PartAttributeProfile,
    modality: Modality,
    nuisance_seed: int,
    spec: DatasetSpec,
    palette: np.ndarray,
    transform: ModalityTransform,
) -> np.ndarray:
    """Pixels for one image. Pure in its arguments."""
    rng = stream(nuisance_seed, "render")
    base = 1.0 / (1.0 + np.exp(-profile.attributes @ palette.T))   # (M_gt, C_in)
    colors = transform.apply(base)
    colors = colors * rng.uniform(1.0 - spec.band_scale, 1.0 + spec.band_scale, size=(spec.M_gt, 1))
    if rng.random() < spec.p_occ:
        colors[rng.integers(spec.M_gt)] = 0.0
    rows = band_rows(spec, rng)
    pixels = np.broadcast_to(colors[rows][:, None, :], (spec.H, spec.W, spec.C_in)).copy()
    pixels += spec.pixel_noise * rng.standard_normal(pixels.shape)
    return np.clip(pixels, 0.0, 1.0)


def generate_dataset(spec: DatasetSpec, seed: int) -> DatasetSplit:
    spec.validate()
    n_ids = spec.num_train_ids + spec.num_test_ids
    rng = stream(seed, "identities")
    palette = rng.standard_normal((spec.C_in, spec.A)) * (2.0 / np.sqrt(spec.A))
    # every identity sits near a shared per-band centre, so a band's colours are
    # more alike across people than across bands of the same person
    c = spec.band_share
    centres = stream(seed, "band-centres").standard_normal((spec.M_gt, spec.A))
    profiles = {
        i: PartAttributeProfile(i, c * centres + np.sqrt(1 - c * c) * rng.standard_normal((spec.M_gt, spec.A)))
        for i in range(n_ids)
    }
    transforms = _modality_transforms(spec, seed)
    train_ids = tuple(range(spec.num_train_ids))
    test_ids = tuple(range(spec.num_train_ids, n_ids))

    def images_for(ids, modality):
        out = []
        for i in ids:
            for j in range(spec.images_per_id_per_modality):
                ns = derive_seed(seed, "nuisance", i, int(modality), j)
                px = render(profiles[i], modality, ns, spec, palette, transforms[modality])
                out.append(PersonImage(px, i, modality, ns))
        return out

    train = images_for(train_ids, Modality.VISIBLE) + images_for(train_ids, Modality.INFRARED)
    return DatasetSplit(
        spec=spec,
        seed=seed,
        train=train,
        gallery=images_for(test_ids, Modality.VISIBLE),
        query=images_for(test_ids, Modality.INFRARED),
        train_ids=train_ids,
        test_ids=test_ids,
        profiles=profiles,
        palette=palette,
        transforms=transforms,
    )


def rerender(split: DatasetSplit, image: PersonImage) -> np.ndarray:
    return render(split.profiles[image.identity], image.modality, image.nuisance_seed,
                  split.spec, split.palette, split.transforms[image.modality])


# ---------------------------------------------------------------------------
# sampling


@dataclass(eq=False)
class MiniBatch:
    images: list[PersonImage]
    indices: np.ndarray          # positions in the source list
    P: int
    K: int

    @property
    def identities(self) -> np.ndarray:
        return np.array([im.identity for im in self.images], dtype=np.int64)

    @property
    def modalities(self) -> np.ndarray:
        return np.array([int(im.modality) for im in self.images], dtype=np.int64)


def index_by_identity(images) -> dict[int, dict[Modality, list[int]]]:
    table: dict[int, dict[Modality, list[int]]] = {}
    for pos, im in enumerate(images):
        table.setdefault(im.identity, {Modality.VISIBLE: [], Modality.INFRARED: []})
        table[im.identity][im.modality].append(pos)
    return table


def sample_minibatch(train, P: int, K: int, seed: int, table=None) -> MiniBatch:
    """``P`` identities, each with ``K/2`` visible and ``K/2`` infrared images.

    ``train`` is a list of images (or a :class:`DatasetSplit`, whose train list
    is used). Batch order: identity-major, visible before infrared.
    """
    images = train.train if isinstance(train, DatasetSplit) else train
    if K < 2 or K % 2:
        raise SamplingError(f"K={K} must be a positive even number")
    if P < 1:
        raise SamplingError("P must be >= 1")
    table = table if table is not None else index_by_identity(images)
    half = K // 2
    eligible = sorted(i for i, by_mod in table.items()
                      if all(len(v) >= half for v in by_mod.values()))
    if len(eligible) < P:
        raise SamplingError(f"need {P} identities with >= {half} images per modality, "
                            f"have {len(eligible)}")
    rng = stream(seed, "minibatch")
    ids = rng.choice(np.array(eligible), size=P, replace=False)
    picks = []
    for i in ids:
        for t in (Modality.VISIBLE, Modality.INFRARED):
            pool = np.array(table[int(i)][t])
            picks.extend(rng.choice(pool, size=half, replace=False).tolist())
    picks = np.array(picks, dtype=np.int64)
    return MiniBatch([images[p] for p in picks], picks, P, K)


def epoch_batches(images, P: int, K: int, seed: int, epoch: int, table=None):
    """Batches covering one epoch: ``len(images) // (P*K)`` independently seeded batches."""
    table = table if table is not None else index_by_identity(images)
    n = max(1, len(images) // (P * K))
    return [sample_minibatch(images, P, K, derive_seed(seed, "epoch", epoch, b), table)
            for b in range(n)]


def spec_dict(spec: DatasetSpec) -> dict:
    return asdict(spec)


# ---------------------------------------------------------------------------
# persistence

SPLITS = ("train", "gallery", "query")


def _write_tensor(path, images: list[PersonImage], spec: DatasetSpec) -> None:
    with open(path, "wb") as fh:
        fh.write(f"{spec.H} {spec.W} {spec.C_in} {len(images)}\n".encode("ascii"))
        for im in images:
            fh.write(np.ascontiguousarray(im.pixels, dtype="<f8").tobytes())


def _read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        H, W, C, n = (int(v) for v in fh.readline().decode("ascii").split())
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * H * W * C:
        raise ValueError(f"{path}: expected {n * H * W * C} values, found {data.size}")
    return data.reshape(n, H, W, C).astype(np.float64)


def save_dataset(split: DatasetSplit, directory) -> None:
    """``meta.json`` plus one ``<split>.bin`` tensor file per split."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "spec": spec_dict(split.spec),
        "seed": split.seed,
        "train_ids": list(split.train_ids),
        "test_ids": list(split.test_ids),
        "transforms": {Modality(t).tag: {"matrix": tr.matrix.tolist(), "offset": tr.offset.tolist()}
                       for t, tr in sorted(split.transforms.items())},
        "palette": split.palette.tolist(),
        "profiles": {str(i): p.attributes.tolist() for i, p in sorted(split.profiles.items())},
        "images": {name: [[im.identity, int(im.modality), im.nuisance_seed]
                          for im in getattr(split, name)] for name in SPLITS},
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    for name in SPLITS:
        _write_tensor(d / f"{name}.bin", getattr(split, name), split.spec)


def load_dataset(directory) -> DatasetSplit:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    spec = DatasetSpec(**meta["spec"])
    lists = {}
    for name in SPLITS:
        pixels = _read_tensor(d / f"{name}.bin")
        rows = meta["images"][name]
        if len(rows) != len(pixels):
            raise ValueError(f"{name}: {len(rows)} metadata rows for {len(pixels)} images")
        lists[name] = [PersonImage(px, int(i), Modality(int(t)), int(ns))
                       for px, (i, t, ns) in zip(pixels, rows)]
    transforms = {Modality.parse(tag): ModalityTransform(np.array(v["matrix"]), np.array(v["offset"]))
                  for tag, v in meta["transforms"].items()}
    profiles = {int(i): PartAttributeProfile(int(i), np.array(a)) for i, a in meta["profiles"].items()}
    return DatasetSplit(spec, int(meta["seed"]), lists["train"], lists["gallery"], lists["query"],
                        tuple(meta["train_ids"]), tuple(meta["test_ids"]), profiles,
                        np.array(meta["palette"]), transforms)
