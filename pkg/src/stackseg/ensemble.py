"""Meta-learner stacking: supervision selection, random-fit, nearest-neighbor-fit.

Targets for the meta-learner are hard argmax labels of each base-learner's
prediction (or the ground truth, depending on the supervision mode); the
meta-learner's second input is the soft summary of the pseudo-label set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, checkpoint
from .errors import DimsMismatch, DivergedLoss, MissingGroundTruth, NotWarmStarted
from .learners import PseudoLabelSet, tiles
from .nets import ArchSpec, MetaNet
from .synthgen import item_rng
from .volume import LabelVolume, ProbVolume, argmax_labels

SUPERVISION_MODES = ("GT", "PL", "GT+PL")
SETTINGS = ("only_training_data", "semi_supervised", "transductive")
SETTING_SPLITS = {
    "only_training_data": ("train_labeled",),
    "semi_supervised": ("train_labeled", "train_unlabeled"),
    "transductive": ("train_labeled", "train_unlabeled", "test"),
}
RANDOM_STREAM = 0xA1
NN_STREAM = 0xA2


# --- ground truth access ----------------------------------------------------------


class GroundTruthStore:
    """Holds ground-truth labels and records every read with its context."""

    def __init__(self, labels: dict | None, splits: dict, loader=None):
        """``labels`` maps item id to LabelVolume; alternatively ``loader(item_id)`` fetches lazily."""
        self._labels = dict(labels or {})
        self._splits = dict(splits)
        self._loader = loader
        self.reads: list[tuple[str, str, str]] = []

    def has(self, item_id) -> bool:
        return item_id in self._labels or (self._loader is not None and item_id in self._splits)

    def split_of(self, item_id) -> str:
        return self._splits[item_id]

    def read(self, item_id, context: str) -> LabelVolume:
        if not self.has(item_id):
            raise MissingGroundTruth(f"no ground truth for item {item_id!r} ({context})")
        self.reads.append((item_id, self._splits[item_id], context))
        if item_id in self._labels:
            return self._labels[item_id]
        return self._loader(item_id)

    def reads_of(self, split=None, context_prefix: str = ""):
        return [r for r in self.reads
                if (split is None or r[1] == split) and r[2].startswith(context_prefix)]


@dataclass(frozen=True)
class SupervisionSource:
    mode: str = "PL"

    def __post_init__(self):
        if self.mode not in SUPERVISION_MODES:
            raise ValueError(f"supervision mode must be one of {SUPERVISION_MODES}, got {self.mode!r}")


def select_supervision(source: SupervisionSource, item_id, split: str, pls: PseudoLabelSet | None,
                       gt: GroundTruthStore | None, soft: bool = False) -> list:
    """Training targets for one item. Only labeled training items ever touch ground truth.

    Returns hard label arrays, or probability arrays when ``soft`` is set (ground
    truth then enters as a one-hot stack).
    """
    uses_gt = source.mode in ("GT", "GT+PL") and split == "train_labeled"
    targets = []
    if not uses_gt or source.mode == "GT+PL":
        if pls is None:
            raise ValueError(f"item {item_id!r} needs pseudo-labels for mode {source.mode}")
        for j in range(pls.m):
            targets.append(pls.members[j].probs if soft else pls.hard(j).labels)
    if uses_gt:
        if gt is None:
            raise MissingGroundTruth(f"mode {source.mode} needs ground truth for {item_id!r}")
        lab = gt.read(item_id, "train-meta")
        if soft:
            targets.append(np.moveaxis(np.eye(lab.num_classes)[lab.labels], -1, 0))
        else:
            targets.append(np.asarray(lab.labels))
    return targets


@dataclass(frozen=True)
class MetaSample:
    item_id: str
    image: np.ndarray  # (nx, ny, nz) normalized intensities
    summary: np.ndarray  # (C', nx, ny, nz)
    targets: tuple  # hard (nx, ny, nz) arrays, or soft (C, nx, ny, nz) arrays

    @property
    def dims(self):
        return self.image.shape


def build_samples(items, pseudolabels: dict, source: SupervisionSource, gt: GroundTruthStore | None,
                  splits: dict, soft: bool = False) -> list[MetaSample]:
    """``items`` is ``[(item_id, Volume)]``; ``pseudolabels`` maps item id to its set."""
    out = []
    for item_id, vol in items:
        pls = pseudolabels.get(item_id)
        targets = select_supervision(source, item_id, splits[item_id], pls, gt, soft)
        summary = pls.summary if pls is not None else None
        if summary is None:
            raise ValueError(f"item {item_id!r} has no pseudo-label summary")
        if summary.shape[1:] != vol.dims:
            raise DimsMismatch(f"{item_id}: summary {summary.shape[1:]} vs image {vol.dims}")
        out.append(MetaSample(item_id, np.asarray(vol.data), summary, tuple(targets)))
    return out


# --- meta-learner -----------------------------------------------------------------


@dataclass
class MetaLearner:
    summary_channels: int
    num_classes: int
    arch: ArchSpec = field(default_factory=ArchSpec)
    seed: int = 0
    use_image: bool = True
    aux_head: bool = False
    aux_weight: float = 0.3
    warm: bool = False  # set once random-fit has run
    tile_patch: int = 32
    tile_stride: int = 16

    def __post_init__(self):
        self.net = MetaNet(self.summary_channels, self.num_classes, self.arch, self.seed,
                           self.use_image, self.aux_head)

    def hyper(self) -> dict:
        return {
            "summary_channels": self.summary_channels, "num_classes": self.num_classes,
            "arch": self.arch.to_dict(), "seed": self.seed, "use_image": self.use_image,
            "aux_head": self.aux_head, "aux_weight": self.aux_weight, "warm": self.warm,
            "tile_patch": self.tile_patch, "tile_stride": self.tile_stride,
        }

    def to_bytes(self) -> bytes:
        return self.net.to_bytes(self.hyper())

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MetaLearner":
        state, hyper = checkpoint.load(path)
        hyper = dict(hyper)
        hyper["arch"] = ArchSpec(**hyper["arch"])
        h = cls(**hyper)
        h.net.load_state(state)
        return h

    def forward_batch(self, images: np.ndarray, summaries: np.ndarray):
        """images ``(N, *sp)``, summaries ``(N, C', *sp)`` -> logits ``(C, N, *sp)`` (+ aux)."""
        img = Tensor(images[None]) if self.use_image else None
        summ = Tensor(np.moveaxis(summaries, 1, 0))
        return self.net.forward(img, summ)


def meta_forward(h: MetaLearner, image, summary: np.ndarray):
    """Tiled, overlap-averaged inference. Returns ``(ProbVolume, aux ProbVolume | None)``."""
    data = np.asarray(getattr(image, "data", image))
    spacing = getattr(image, "spacing", (1.0, 1.0, 1.0))
    if summary.shape[1:] != data.shape:
        raise DimsMismatch(f"summary {summary.shape[1:]} vs image {data.shape}")
    if summary.shape[0] != h.summary_channels:
        raise DimsMismatch(f"summary has {summary.shape[0]} channels, meta-learner expects {h.summary_channels}")
    c = h.num_classes
    acc = np.zeros((c,) + data.shape)
    acc_aux = np.zeros_like(acc) if h.aux_head else None
    cover = np.zeros(data.shape)
    with ad.no_grad():
        for win in tiles(data.shape, h.tile_patch, h.tile_stride):
            out, aux = h.forward_batch(data[win][None], summary[(slice(None),) + win][None])
            acc[(slice(None),) + win] += ad.softmax(out.data[:, 0], axis=0)
            if aux is not None:
                acc_aux[(slice(None),) + win] += ad.softmax(aux.data[:, 0], axis=0)
            cover[win] += 1.0
    main = ProbVolume(acc / cover, spacing)
    return main, (ProbVolume(acc_aux / cover, spacing) if acc_aux is not None else None)


def segment(h: MetaLearner, image, summary) -> LabelVolume:
    return argmax_labels(meta_forward(h, image, summary)[0])


def mean_ce_from_probs(probs: np.ndarray, target: np.ndarray) -> float:
    """Voxel-mean cross-entropy of a probability stack against hard labels."""
    picked = np.take_along_axis(probs, np.asarray(target)[None], axis=0)[0]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def eq1_loss(h: MetaLearner, samples: list[MetaSample]) -> float:
    """Sum over items and their targets of the voxel-mean cross-entropy (monitoring only)."""
    total = 0.0
    for s in samples:
        probs = meta_forward(h, s.image, s.summary)[0].probs
        for t in s.targets:
            if t.ndim == s.image.ndim:
                total += mean_ce_from_probs(probs, t)
            else:
                total += float(-np.mean(np.sum(t * np.log(np.maximum(probs, 1e-300)), axis=0)))
    return total


def average_ensemble(pls: PseudoLabelSet) -> ProbVolume:
    ref = pls.members[0]
    return ProbVolume(np.mean(np.stack([mbr.probs for mbr in pls.members]), axis=0), ref.spacing)


# --- meta training ----------------------------------------------------------------


@dataclass(frozen=True)
class MetaSchedule:
    random_iters: int = 3000
    nn_iters: int = 1500
    batch: int = 2
    base_lr: float = 2e-3
    nn_lr: float | None = None  # NN-fit starting lr; defaults to base_lr
    lr_policy: str = "poly"  # per phase: poly | constant
    poly_power: float = 0.9
    patch: int = 16  # training crop edge; whole items when >= dims
    seed: int = 0

    def make_state(self, iters: int, base_lr: float | None = None) -> ad.AdamState:
        if self.lr_policy == "poly":
            sched = ad.PolyLR(max(1, iters), self.poly_power)
        elif self.lr_policy == "constant":
            sched = ad.ConstantLR()
        else:
            raise ValueError(f"unknown lr_policy {self.lr_policy!r}")
        return ad.AdamState(base_lr=self.base_lr if base_lr is None else base_lr, schedule=sched)


def _crop(samples, patch):
    return tuple(min(patch, min(s.dims[k] for s in samples)) for k in range(3))


def _draw_origin(rng, dims, crop):
    return tuple(int(rng.integers(0, dims[a] - crop[a] + 1)) for a in range(3))


def draw_slots(rng, n_items: int, counts, batch: int, dims_of, crop, with_q: bool):
    """One step's worth of slot draws: p, then q (random-fit only), then crop origin."""
    slots = []
    for _ in range(batch):
        p = int(rng.integers(n_items))
        q = int(rng.integers(counts[p])) if with_q else None
        slots.append((p, q, _draw_origin(rng, dims_of[p], crop)))
    return slots


def replay_draws(log, samples, schedule: MetaSchedule, phase: str = "random"):
    """Regenerate the (p, q, origin) draws a training run should have made and pair them with the log."""
    stream = RANDOM_STREAM if phase == "random" else NN_STREAM
    iters = schedule.random_iters if phase == "random" else schedule.nn_iters
    rng = item_rng(schedule.seed, stream)
    crop = _crop(samples, schedule.patch)
    counts = [len(s.targets) for s in samples]
    dims_of = [s.dims for s in samples]
    out = []
    for _ in range(iters):
        out.extend(draw_slots(rng, len(samples), counts, schedule.batch, dims_of, crop, phase == "random"))
    logged = [(r["p"], r["q"] if phase == "random" else None, tuple(r["origin"]))
              for r in log if r["phase"] == phase]
    return out, logged


def _window(crop, origin):
    return tuple(slice(o, o + c) for o, c in zip(origin, crop))


def _gather(samples, slots, crop):
    imgs = np.stack([samples[p].image[_window(crop, o)] for p, _, o in slots])
    summ = np.stack([samples[p].summary[(slice(None),) + _window(crop, o)] for p, _, o in slots])
    return imgs, summ


def _target_crop(t, win):
    return t[win] if t.ndim == 3 else t[(slice(None),) + win]


def slot_losses(logits: np.ndarray, slot_index: int, targets) -> list[float]:
    """Voxel-mean cross-entropy of one slot's logits ``(C, N, *sp)[:, slot]`` against each target."""
    logp = ad.log_softmax(logits[:, slot_index], axis=0)
    out = []
    for t in targets:
        if t.ndim == logp.ndim - 1:
            out.append(float(-np.mean(np.take_along_axis(logp, t[None], axis=0))))
        else:
            out.append(float(-np.mean(np.sum(t * logp, axis=0))))
    return out


def nearest_target(losses) -> int:
    """Index of the minimal loss; exact ties go to the lowest index."""
    return int(np.argmin(np.asarray(losses)))


def _stack_targets(picked):
    if picked[0].ndim == 3:
        return np.stack(picked)
    return np.stack(picked, axis=1)  # (C, N, *sp)


def _step_loss(h, logits, aux, target):
    loss = ad.softmax_cross_entropy(logits, target)
    if aux is not None:
        loss = ad.add(loss, ad.scale(ad.softmax_cross_entropy(aux, target), h.aux_weight))
    return loss


def _run_phase(h: MetaLearner, samples, schedule: MetaSchedule, phase: str, log: list | None,
               snapshot_dir=None, log_path=None):
    iters = schedule.random_iters if phase == "random" else schedule.nn_iters
    if iters <= 0:
        return h
    if not samples:
        raise ValueError("meta training needs at least one sample")
    rng = item_rng(schedule.seed, RANDOM_STREAM if phase == "random" else NN_STREAM)
    crop = _crop(samples, schedule.patch)
    counts = [len(s.targets) for s in samples]
    dims_of = [s.dims for s in samples]
    params = h.net.parameters()
    state = schedule.make_state(iters, schedule.nn_lr if phase == "nn" else None)
    fh = open(log_path, "a") if log_path is not None else None
    if snapshot_dir is not None:
        Path(snapshot_dir).mkdir(parents=True, exist_ok=True)
    try:
        for step in range(iters):
            slots = draw_slots(rng, len(samples), counts, schedule.batch, dims_of, crop, phase == "random")
            if snapshot_dir is not None and phase == "nn":
                (Path(snapshot_dir) / f"nn_{step:06d}.ckpt").write_bytes(h.to_bytes())
            imgs, summ = _gather(samples, slots, crop)
            h.net.zero_grad()
            try:
                logits, aux = h.forward_batch(imgs, summ)
                picked, records = [], []
                for k, (p, q, origin) in enumerate(slots):
                    cands = [_target_crop(t, _window(crop, origin)) for t in samples[p].targets]
                    rec = {"step": step, "phase": phase, "slot": k, "p": p, "item": samples[p].item_id,
                           "origin": list(origin)}
                    if phase == "nn":
                        losses = slot_losses(logits.data, k, cands)
                        q = nearest_target(losses)
                        rec["ce"] = losses
                    rec["q"] = q
                    picked.append(cands[q])
                    records.append(rec)
                loss = _step_loss(h, logits, aux, _stack_targets(picked))
                loss.backward()
            except ad.NonFiniteValue as exc:
                raise DivergedLoss(f"meta {phase}-fit step {step}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"meta {phase}-fit step {step}: loss became {value}")
            lr = ad.adam_step(params, state)
            for rec in records:
                rec["loss"] = value
                rec["lr"] = lr
                if log is not None:
                    log.append(rec)
                if fh is not None:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh is not None:
            fh.close()
    return h


def random_fit(h: MetaLearner, samples, schedule: MetaSchedule, log: list | None = None, log_path=None):
    """Per slot: item p and target q drawn uniformly, train on that target."""
    if schedule.batch < 1:
        raise ValueError("batch must be >= 1")
    _run_phase(h, samples, schedule, "random", log, log_path=log_path)
    h.warm = True
    return h


def nn_fit(h: MetaLearner, samples, schedule: MetaSchedule, log: list | None = None,
           snapshot_dir=None, log_path=None):
    """Per slot: item p drawn uniformly, trained toward the target nearest the current output.

    All slots of a step are selected with the same parameters (those before the
    step's update). With ``snapshot_dir`` those parameters are saved per step.
    """
    if not h.warm:
        raise NotWarmStarted("nn_fit needs a meta-learner warm-started by random_fit")
    if schedule.batch < 1:
        raise ValueError("batch must be >= 1")
    return _run_phase(h, samples, schedule, "nn", log, snapshot_dir, log_path)


def audit_nn_step(snapshot_path, samples, step_records, schedule: MetaSchedule):
    """Recompute every slot's candidate losses from a saved snapshot.

    Returns ``[(logged q, recomputed q, recomputed losses)]`` for the step.
    """
    h = MetaLearner.load(snapshot_path)
    crop = _crop(samples, schedule.patch)
    recs = sorted(step_records, key=lambda r: r["slot"])
    slots = [(r["p"], None, tuple(r["origin"])) for r in recs]
    imgs, summ = _gather(samples, slots, crop)
    with ad.no_grad():
        logits, _ = h.forward_batch(imgs, summ)
    out = []
    for k, r in enumerate(recs):
        cands = [_target_crop(t, _window(crop, tuple(r["origin"]))) for t in samples[r["p"]].targets]
        losses = slot_losses(logits.data, k, cands)
        out.append((r["q"], nearest_target(losses), losses))
    return out


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
