"""Base-learners: three per-plane 2D FCNs and one 3D FCN, plus pseudo-label sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, checkpoint
from .errors import DimsMismatch, DivergedLoss, NoLabeledData, UntrainedLearner
from .nets import ArchSpec, MiniFCN
from .synthgen import item_rng
from .volume import AUGMENT_OPS, LabelVolume, ProbVolume, Volume, augment_array, plane_array, unplane_array

LEARNER_IDS = ("xy2d", "xz2d", "yz2d", "vol3d")
PLANE_OF = {"xy2d": "xy", "xz2d": "xz", "yz2d": "yz"}
TRAIN_AUGMENTS = ("identity",) + AUGMENT_OPS


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 500
    batch: int = 8
    base_lr: float = 2e-3
    lr_policy: str = "poly"  # poly | step | constant
    poly_power: float = 0.9
    max_iter: int | None = None  # poly horizon, defaults to iterations
    step_milestone: int | None = None  # step policy, defaults to iterations // 2
    step_gamma: float = 0.1
    patch: int = 16  # 3D training crop edge
    augment: bool = True
    seed: int = 0

    def make_schedule(self):
        if self.lr_policy == "poly":
            return ad.PolyLR(max(1, self.max_iter or self.iterations), self.poly_power)
        if self.lr_policy == "step":
            return ad.StepLR(self.step_milestone or max(1, self.iterations // 2), self.step_gamma)
        if self.lr_policy == "constant":
            return ad.ConstantLR()
        raise ValueError(f"unknown lr_policy {self.lr_policy!r}")


def default_schedule(learner_id: str, **overrides) -> TrainSchedule:
    """Plane learners: 8 slices per step with a step decay; vol3d: 2 crops with poly decay."""
    if learner_id == "vol3d":
        base = dict(batch=2, lr_policy="poly")
    else:
        base = dict(batch=8, lr_policy="step")
    base.update(overrides)
    return TrainSchedule(**base)


@dataclass
class BaseLearner:
    id: str
    num_classes: int
    arch: ArchSpec = field(default_factory=ArchSpec)
    seed: int = 0
    trained: bool = False
    loss_trace: list = field(default_factory=list)
    tile_patch: int = 32
    tile_stride: int = 16

    def __post_init__(self):
        if self.id not in LEARNER_IDS:
            raise ValueError(f"learner id must be one of {LEARNER_IDS}, got {self.id!r}")
        self.net = MiniFCN(self.ndim, 1, self.num_classes, self.arch, self.seed)

    @property
    def ndim(self) -> int:
        return 3 if self.id == "vol3d" else 2

    @property
    def plane(self) -> str | None:
        return PLANE_OF.get(self.id)

    def hyper(self) -> dict:
        return {
            "learner": self.id, "num_classes": self.num_classes, "arch": self.arch.to_dict(),
            "seed": self.seed, "trained": self.trained, "tile_patch": self.tile_patch,
            "tile_stride": self.tile_stride,
        }

    def to_bytes(self) -> bytes:
        return self.net.to_bytes(self.hyper())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BaseLearner":
        state, hyper = checkpoint.load(path)
        bl = cls(hyper["learner"], hyper["num_classes"], ArchSpec(**hyper["arch"]), hyper["seed"],
                 trained=hyper["trained"], tile_patch=hyper["tile_patch"], tile_stride=hyper["tile_stride"])
        bl.net.load_state(state)
        return bl


# --- training ---------------------------------------------------------------------


def _crop_shape(dims_list, patch):
    return tuple(min(patch, min(d[k] for d in dims_list)) for k in range(3))


def _sample_batch(learner, images, labels, schedule, rng, crop):
    """Draw a batch of (input, target) arrays. Returns a list of same-shape groups."""
    groups: dict[tuple, list] = {}
    for _ in range(schedule.batch):
        i = int(rng.integers(len(images)))
        op = TRAIN_AUGMENTS[int(rng.integers(len(TRAIN_AUGMENTS)))] if schedule.augment else "identity"
        img, lab = augment_array(images[i], op), augment_array(labels[i], op)
        if learner.plane is not None:
            planes_img, planes_lab = plane_array(img, learner.plane), plane_array(lab, learner.plane)
            k = int(rng.integers(planes_img.shape[0]))
            x, y = planes_img[k], planes_lab[k]
        else:
            origin = [int(rng.integers(0, img.shape[a] - crop[a] + 1)) for a in range(3)]
            win = tuple(slice(o, o + c) for o, c in zip(origin, crop))
            x, y = img[win], lab[win]
        groups.setdefault(x.shape, []).append((x, y))
    return list(groups.values())


def train_base(learner: BaseLearner, images, supervision, schedule: TrainSchedule) -> BaseLearner:
    """Adam-train ``learner`` on normalized ``images`` (Volumes) against ``supervision`` (LabelVolumes)."""
    if not images or len(images) != len(supervision):
        raise NoLabeledData("base-learner training needs one label volume per labeled image")
    imgs = [v.data for v in images]
    labs = [l.labels for l in supervision]
    for v, l in zip(imgs, labs):
        if v.shape != l.shape:
            raise DimsMismatch(f"image {v.shape} vs labels {l.shape}")
    rng = item_rng(schedule.seed, LEARNER_IDS.index(learner.id), 0x7EA1)
    crop = _crop_shape([v.shape for v in imgs], schedule.patch)
    params = learner.net.parameters()
    state = ad.AdamState(base_lr=schedule.base_lr, schedule=schedule.make_schedule())
    for _ in range(schedule.iterations):
        groups = _sample_batch(learner, imgs, labs, schedule, rng, crop)
        learner.net.zero_grad()
        step_loss = 0.0
        try:
            for group in groups:
                x = np.stack([g[0] for g in group])[None]
                y = np.stack([g[1] for g in group])
                logits = learner.net.forward(Tensor(x))
                loss = ad.softmax_cross_entropy(logits, y)
                w = len(group) / schedule.batch
                if w != 1.0:
                    loss = loss * w
                loss.backward()
                step_loss += loss.item()
        except ad.NonFiniteValue as exc:
            raise DivergedLoss(f"{learner.id}: {exc}") from exc
        if not math.isfinite(step_loss):
            raise DivergedLoss(f"{learner.id}: loss became {step_loss}")
        ad.adam_step(params, state)
        learner.loss_trace.append(step_loss)
    learner.trained = True
    return learner


# --- inference --------------------------------------------------------------------


def tile_starts(n: int, patch: int, stride: int):
    """Window origins covering ``[0, n)`` with windows of ``min(patch, n)``; the last window is flush."""
    patch = min(patch, n)
    starts = list(range(0, n - patch + 1, max(1, stride)))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts, patch


def tiles(dims, patch: int, stride: int):
    per_axis = [tile_starts(n, patch, stride) for n in dims]
    for ox in per_axis[0][0]:
        for oy in per_axis[1][0]:
            for oz in per_axis[2][0]:
                yield tuple(slice(o, o + p) for o, p in zip((ox, oy, oz), (a[1] for a in per_axis)))


def tiled_probs(forward, channels: np.ndarray, num_classes: int, patch: int, stride: int) -> np.ndarray:
    """Average ``forward`` softmax outputs over overlapping tiles.

    ``channels`` is ``(C_in, nx, ny, nz)``; ``forward`` maps a ``(C_in, 1, *tile)``
    array to ``(C, 1, *tile)`` logits.
    """
    dims = channels.shape[1:]
    acc = np.zeros((num_classes,) + dims)
    cover = np.zeros(dims)
    with ad.no_grad():
        for win in tiles(dims, patch, stride):
            logits = forward(channels[(slice(None),) + win][:, None])
            acc[(slice(None),) + win] += ad.softmax(logits[:, 0], axis=0)
            cover[win] += 1.0
    return acc / cover


def predict(learner: BaseLearner, v: Volume, slice_batch: int = 64) -> ProbVolume:
    if not learner.trained:
        raise UntrainedLearner(f"{learner.id} has not been trained")
    if learner.plane is None:
        probs = tiled_probs(lambda a: learner.net.forward(Tensor(a)).data, v.data[None], learner.num_classes,
                            learner.tile_patch, learner.tile_stride)
        return ProbVolume(probs, v.spacing)
    planes = plane_array(v.data, learner.plane)
    out = np.empty((learner.num_classes,) + planes.shape)
    with ad.no_grad():
        for lo in range(0, planes.shape[0], slice_batch):
            chunk = planes[lo:lo + slice_batch][None]
            out[:, lo:lo + chunk.shape[1]] = ad.softmax(learner.net.forward(Tensor(chunk)).data, axis=0)
    return ProbVolume(unplane_array(out, learner.plane), v.spacing)


# --- pseudo-labels ----------------------------------------------------------------


@dataclass(frozen=True)
class PseudoLabelSet:
    """Per-item base-learner predictions, ordered by learner id, and their summary.

    ``summary`` is a ``(C', nx, ny, nz)`` array: the voxelwise mean (C' = C)
    or the channel concatenation (C' = m*C) of the members.
    """

    item_id: str
    learner_ids: tuple
    members: tuple
    summary: np.ndarray
    reduction: str = "average"

    @property
    def m(self) -> int:
        return len(self.members)

    def hard(self, j: int) -> LabelVolume:
        return LabelVolume(np.argmax(self.members[j].probs, axis=0), self.members[j].num_classes,
                           self.members[j].spacing)


def summarize(members, reduction: str = "average") -> np.ndarray:
    if not members:
        raise ValueError("no members to summarize")
    ref = members[0]
    for mbr in members[1:]:
        if mbr.dims != ref.dims or mbr.num_classes != ref.num_classes:
            raise DimsMismatch("pseudo-label members differ in dims or class count")
    if reduction == "average":
        return np.mean(np.stack([mbr.probs for mbr in members]), axis=0)
    if reduction == "concat":
        return np.concatenate([mbr.probs for mbr in members], axis=0)
    raise ValueError(f"reduction must be 'average' or 'concat', got {reduction!r}")


def pseudolabel_set(item_id, named_members: dict, reduction: str = "average") -> PseudoLabelSet:
    ids = tuple(lid for lid in LEARNER_IDS if lid in named_members)
    members = tuple(named_members[lid] for lid in ids)
    return PseudoLabelSet(item_id, ids, members, summarize(members, reduction), reduction)


def make_pseudolabels(learners, items, reduction: str = "average"):
    """``items`` is an iterable of ``(item_id, normalized Volume)``."""
    ordered = sorted(learners, key=lambda bl: LEARNER_IDS.index(bl.id))
    out = []
    for item_id, vol in items:
        out.append(pseudolabel_set(item_id, {bl.id: predict(bl, vol) for bl in ordered}, reduction))
    return out
