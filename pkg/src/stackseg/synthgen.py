"""Deterministic synthetic volumes with exact ground truth.

Class 0 is background. With three classes, spheres are class 1 and tubes class 2;
with two classes both shapes are class 1. Tubes are long and thin, so a plane
that contains the tube axis shows a stripe while the orthogonal plane shows
only a small disc; this gives the per-plane learners different strengths.

Every item has its own PCG64 stream seeded from ``SeedSequence([seed, index])``,
so items can be generated in any order (or in parallel) with identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptyLabeledSplit, FormatError, InfeasibleSpec
from .volume import LabelVolume, Volume, read_vvol, write_vvol

SPLITS = ("train_labeled", "train_unlabeled", "test")
ORIENTATIONS = ("axis", "diagonal", "mixed")
MAX_PLACEMENT_ATTEMPTS = 32


def item_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple = (32, 32, 32)
    num_classes: int = 3
    sphere_count: tuple = (2, 4)
    sphere_radius: tuple = (3.0, 6.0)
    tube_count: tuple = (1, 3)
    tube_radius: tuple = (1.5, 2.5)
    tube_orientation: str = "mixed"
    noise_sigma: float = 0.5
    intensity_means: tuple = (0.0, 1.0, 2.0)
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def validate(self):
        if self.num_classes not in (2, 3):
            raise InfeasibleSpec("num_classes must be 2 or 3")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InfeasibleSpec(f"bad dims {self.dims}")
        if len(self.intensity_means) != self.num_classes:
            raise InfeasibleSpec("need one intensity mean per class")
        if len(set(self.intensity_means)) != len(self.intensity_means):
            raise InfeasibleSpec("intensity means must be pairwise distinct")
        if self.tube_orientation not in ORIENTATIONS:
            raise InfeasibleSpec(f"tube_orientation must be one of {ORIENTATIONS}")
        if self.noise_sigma < 0:
            raise InfeasibleSpec("noise_sigma must be >= 0")
        for lo, hi in (self.sphere_count, self.tube_count):
            if lo < 0 or hi < lo:
                raise InfeasibleSpec("count ranges must satisfy 0 <= lo <= hi")
        if self.sphere_count[0] + self.tube_count[0] < 1:
            raise InfeasibleSpec("at least one shape is required")
        if self.num_classes == 3 and (self.sphere_count[0] < 1 or self.tube_count[0] < 1):
            raise InfeasibleSpec("three classes need at least one sphere and one tube")
        half = (min(self.dims) - 1) / 2.0
        for lo, hi in (self.sphere_radius, self.tube_radius):
            if lo <= 0 or hi < lo:
                raise InfeasibleSpec("radius ranges must satisfy 0 < lo <= hi")
            if hi > half:
                raise InfeasibleSpec(f"radius {hi} does not fit inside dims {self.dims}")


@dataclass(frozen=True)
class Item:
    item_id: str
    image: Volume
    label: LabelVolume
    split: str = "train_labeled"
    seed: int = 0


@dataclass(frozen=True)
class Dataset:
    items: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        for it in self.items:
            if it.split not in SPLITS:
                raise ValueError(f"unknown split tag {it.split!r}")
        if self.items and not any(it.split == "train_labeled" for it in self.items):
            raise EmptyLabeledSplit("dataset has no train_labeled item")

    def __len__(self):
        return len(self.items)

    def by_split(self, *splits):
        return [it for it in self.items if it.split in splits]

    def get(self, item_id):
        for it in self.items:
            if it.item_id == item_id:
                return it
        raise KeyError(item_id)


def _grid(dims):
    return np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")


def _draw_direction(rng, orientation):
    if orientation == "mixed":
        orientation = ORIENTATIONS[int(rng.integers(0, 2))]
    if orientation == "axis":
        d = np.zeros(3)
        d[int(rng.integers(0, 3))] = 1.0
        return d
    # diagonal: within one coordinate plane, at 45 degrees
    a, b = sorted(rng.choice(3, size=2, replace=False))
    d = np.zeros(3)
    d[a] = 1.0
    d[b] = 1.0 if rng.random() < 0.5 else -1.0
    return d / math.sqrt(2.0)


def _place(spec, rng, coords):
    dims = np.asarray(spec.dims, dtype=np.float64)
    labels = np.zeros(spec.dims, dtype=np.int64)
    n_sph = int(rng.integers(spec.sphere_count[0], spec.sphere_count[1] + 1))
    n_tub = int(rng.integers(spec.tube_count[0], spec.tube_count[1] + 1))
    tube_class = 2 if spec.num_classes == 3 else 1
    for _ in range(n_sph):
        r = rng.uniform(*spec.sphere_radius)
        c = np.array([rng.uniform(r, n - 1 - r) for n in dims])
        d2 = sum((coords[k] - c[k]) ** 2 for k in range(3))
        labels[d2 <= r * r] = 1
    for _ in range(n_tub):
        r = rng.uniform(*spec.tube_radius)
        u = _draw_direction(rng, spec.tube_orientation)
        # a point on the axis, kept away from the faces in the directions orthogonal to u
        p = np.array([rng.uniform(r, n - 1 - r) for n in dims])
        rel = [coords[k] - p[k] for k in range(3)]
        along = sum(rel[k] * u[k] for k in range(3))
        d2 = sum((rel[k] - along * u[k]) ** 2 for k in range(3))
        labels[d2 <= r * r] = tube_class
    return labels


def generate_item(spec: SynthSpec, index: int, split: str = "train_labeled") -> Item:
    spec.validate()
    rng = item_rng(spec.seed, index)
    coords = _grid(spec.dims)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        labels = _place(spec, rng, coords)
        if np.unique(labels).size == spec.num_classes:
            break
    else:
        raise InfeasibleSpec(f"could not place shapes covering all classes for item {index}")
    means = np.asarray(spec.intensity_means, dtype=np.float64)
    image = means[labels]
    if spec.noise_sigma > 0:
        image = image + spec.noise_sigma * rng.standard_normal(spec.dims)
    return Item(
        item_id=f"item{index:03d}",
        image=Volume(image, spec.spacing),
        label=LabelVolume(labels, spec.num_classes, spec.spacing),
        split=split,
        seed=spec.seed,
    )


def generate(spec: SynthSpec, n: int) -> Dataset:
    if n < 1:
        raise InfeasibleSpec("n must be >= 1")
    spec.validate()
    return Dataset(tuple(generate_item(spec, i) for i in range(n)))


def split(d: Dataset, policy, seed: int = 0) -> Dataset:
    """Assign split tags by a seeded shuffle.

    ``policy`` is ``(labeled, unlabeled, test)`` fractions summing to 1. Counts are
    rounded for the labeled and unlabeled groups; the test group takes the rest.
    """
    fl, fu, ft = (float(f) for f in policy)
    if min(fl, fu, ft) < 0 or abs(fl + fu + ft - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be nonnegative and sum to 1, got {policy}")
    n = len(d.items)
    n_l = int(round(fl * n))
    n_u = min(int(round(fu * n)), n - n_l)
    if n_l == 0:
        raise EmptyLabeledSplit(f"policy {policy} leaves no labeled item among {n}")
    order = item_rng(seed, 0x5B11).permutation(n)
    tags = [None] * n
    for rank, idx in enumerate(order):
        tags[idx] = SPLITS[0] if rank < n_l else SPLITS[1] if rank < n_l + n_u else SPLITS[2]
    return Dataset(tuple(replace(it, split=t) for it, t in zip(d.items, tags)))


# --- on-disk layout ---------------------------------------------------------

MANIFEST_HEADER = "# stackseg-manifest v1: item_id image label split seed"


def write_dataset(d: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for it in d.items:
        img, lab = f"{it.item_id}.image.vvol", f"{it.item_id}.label.vvol"
        write_vvol(out / img, it.image)
        write_vvol(out / lab, it.label)
        lines.append("\t".join([it.item_id, img, lab, it.split, str(it.seed)]))
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path):
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5 or fields[3] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: malformed manifest record")
        records.append(fields)
    return records


def read_dataset(path, num_classes: int) -> Dataset:
    path = Path(path)
    root = path.parent
    items = []
    for item_id, img, lab, tag, seed in read_manifest(path):
        items.append(Item(item_id, read_vvol(root / img), read_vvol(root / lab, num_classes), tag, int(seed)))
    return Dataset(tuple(items))
