"""Segmentation evaluation: Dice, surface distances, the overall ranking score, Rand F-score.

Surface distances use 6-connectivity boundaries and Euclidean distances in mm.
ADB is the mean of the two directed mean nearest-surface distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DimsMismatch, EmptySurface
from .volume import LabelVolume

SCORE_WEIGHTS = (0.5, -0.25, -1.0 / 30.0)  # Dice, ADB, Hausdorff
SIX_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


def _check_pair(pred: LabelVolume, gt: LabelVolume):
    if pred.dims != gt.dims:
        raise DimsMismatch(f"pred dims {pred.dims} vs gt dims {gt.dims}")


def dice(pred: LabelVolume, gt: LabelVolume, cls: int) -> float:
    _check_pair(pred, gt)
    a, b = pred.mask(cls), gt.mask(cls)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass(frozen=True)
class SurfaceSet:
    cls: int
    points: np.ndarray  # (k, 3) physical coordinates in mm

    def __len__(self):
        return len(self.points)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a face neighbour outside the mask or outside the grid."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def extract_surface(l: LabelVolume, cls: int) -> SurfaceSet:
    idx = np.argwhere(boundary_mask(l.mask(cls)))
    return SurfaceSet(cls, idx * np.asarray(l.spacing, dtype=np.float64))


def _directed(a: SurfaceSet, b: SurfaceSet) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest point of ``b``."""
    dist, _ = cKDTree(b.points).query(a.points, k=1)
    return np.asarray(dist, dtype=np.float64)


def _surfaces(pred, gt, cls):
    _check_pair(pred, gt)
    sp, sg = extract_surface(pred, cls), extract_surface(gt, cls)
    if len(sp) == 0 or len(sg) == 0:
        which = "prediction" if len(sp) == 0 else "ground truth"
        raise EmptySurface(f"class {cls} is empty in the {which}")
    return sp, sg


def surface_distances(pred: LabelVolume, gt: LabelVolume, cls: int):
    """Return ``(adb, hausdorff)`` in mm, sharing one surface extraction."""
    sp, sg = _surfaces(pred, gt, cls)
    d_pg, d_gp = _directed(sp, sg), _directed(sg, sp)
    return 0.5 * (d_pg.mean() + d_gp.mean()), max(d_pg.max(), d_gp.max())


def adb(pred: LabelVolume, gt: LabelVolume, cls: int) -> float:
    return float(surface_distances(pred, gt, cls)[0])


def hausdorff(pred: LabelVolume, gt: LabelVolume, cls: int) -> float:
    return float(surface_distances(pred, gt, cls)[1])


@dataclass
class ClassMetrics:
    dice: float
    adb: float
    hausdorff: float


@dataclass
class MetricsReport:
    per_class: dict = field(default_factory=dict)  # cls -> ClassMetrics
    rand: tuple | None = None  # (merge, split, F)

    @property
    def score(self) -> float:
        return overall_score(self)


def overall_score(report) -> float:
    """Sum over foreground classes of 1/2 Dice - 1/4 ADB - 1/30 Hausdorff.

    Accepts a MetricsReport or a mapping ``cls -> (dice, adb, hausdorff)``.
    """
    per_class = report.per_class if isinstance(report, MetricsReport) else report
    wd, wa, wh = SCORE_WEIGHTS
    total = 0.0
    for m in per_class.values():
        d, a, h = (m.dice, m.adb, m.hausdorff) if isinstance(m, ClassMetrics) else m
        total += wd * d + wa * a + wh * h
    return total


def _labels_of(x):
    return np.asarray(x.labels if isinstance(x, LabelVolume) else x)


def contingency(pred, gt, exclude_background: bool = True) -> np.ndarray:
    """Counts n_ij of voxels in pred segment i and gt segment j, as a dense matrix."""
    p, g = _labels_of(pred).ravel(), _labels_of(gt).ravel()
    if p.shape != g.shape:
        raise DimsMismatch(f"partition sizes differ: {p.size} vs {g.size}")
    if exclude_background:
        keep = g != 0
        p, g = p[keep], g[keep]
    _, pi = np.unique(p, return_inverse=True)
    _, gj = np.unique(g, return_inverse=True)
    n = np.zeros((pi.max() + 1 if p.size else 0, gj.max() + 1 if g.size else 0), dtype=np.int64)
    np.add.at(n, (pi, gj), 1)
    return n


def rand_fscore(pred, gt, exclude_background: bool = True):
    """Rand ``(merge, split, F)`` from pair counts within segments.

    split = sum n_ij^2 / sum_j (gt segment size)^2,
    merge = sum n_ij^2 / sum_i (pred segment size)^2, F = harmonic mean.
    With background excluded, voxels whose ground-truth label is 0 are ignored.
    """
    p, g = _labels_of(pred), _labels_of(gt)
    if p.shape != g.shape:
        raise DimsMismatch(f"pred dims {p.shape} vs gt dims {g.shape}")
    n = contingency(p, g, exclude_background)
    if n.size == 0:
        return 1.0, 1.0, 1.0
    both = float((n.astype(np.float64) ** 2).sum())
    split_score = both / float((n.sum(axis=0).astype(np.float64) ** 2).sum())
    merge_score = both / float((n.sum(axis=1).astype(np.float64) ** 2).sum())
    f = 2.0 * merge_score * split_score / (merge_score + split_score)
    return merge_score, split_score, f


def connected_components(l: LabelVolume, exclude_background: bool = True) -> np.ndarray:
    """6-connected components of every class, numbered consecutively from 1 (0 = background)."""
    out = np.zeros(l.dims, dtype=np.int64)
    offset = 0
    for cls in range(1 if exclude_background else 0, l.num_classes):
        comp, k = ndimage.label(l.mask(cls), structure=SIX_CONNECTIVITY)
        out[comp > 0] = comp[comp > 0] + offset
        offset += k
    return out


def evaluate_item(pred: LabelVolume, gt: LabelVolume, with_rand: bool = False) -> MetricsReport:
    report = MetricsReport()
    for cls in range(1, gt.num_classes):
        d = dice(pred, gt, cls)
        a, h = surface_distances(pred, gt, cls)
        report.per_class[cls] = ClassMetrics(d, float(a), float(h))
    if with_rand:
        report.rand = rand_fscore(connected_components(pred), connected_components(gt))
    return report
