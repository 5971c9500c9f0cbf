"""Overlap and surface-distance scores for label maps.

Distances are in voxel units.  Surfaces are the mask voxels with at least one
face neighbour outside the mask, the volume border counting as outside.
Nearest-surface lookups go through a k-d tree, which is exact for the
Euclidean metric.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DimensionError, UndefinedMetricError

__all__ = [
    "dice",
    "surface_voxels",
    "hausdorff",
    "assd",
    "RegionReport",
    "evaluate",
    "CSV_HEADER",
]

CSV_HEADER = ("sample", "label", "dice", "hd", "assd")

_FACES = ndimage.generate_binary_structure(3, 1)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shapes {a.shape} and {b.shape} differ")


def dice(pred, gt, label=None) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty.

    With ``label`` given, the masks are ``pred == label`` and ``gt == label``;
    otherwise the inputs are treated as boolean masks.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_shapes(pred, gt)
    if label is None:
        p, g = pred.astype(bool), gt.astype(bool)
    else:
        p, g = pred == label, gt == label
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / total


def surface_voxels(mask) -> np.ndarray:
    """Integer coordinates [n, ndim] of the surface voxels of a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise DimensionError(f"surface_voxels expects a 3-D mask, got {mask.ndim}-D")
    interior = ndimage.binary_erosion(mask, structure=_FACES, border_value=0)
    return np.argwhere(mask & ~interior)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def _surfaces(pred_mask, gt_mask, name):
    pred_mask, gt_mask = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    _check_shapes(pred_mask, gt_mask)
    if not pred_mask.any() or not gt_mask.any():
        raise UndefinedMetricError(f"{name} is undefined for an empty mask")
    return surface_voxels(pred_mask), surface_voxels(gt_mask)


def hausdorff(pred_mask, gt_mask) -> float:
    """Symmetric Hausdorff distance between the two mask surfaces."""
    sp, sg = _surfaces(pred_mask, gt_mask, "hausdorff distance")
    return float(max(_directed(sp, sg).max(), _directed(sg, sp).max()))


def assd(pred_mask, gt_mask) -> float:
    """Mean of the two directed average surface distances."""
    sp, sg = _surfaces(pred_mask, gt_mask, "average surface distance")
    return float(0.5 * (_directed(sp, sg).mean() + _directed(sg, sp).mean()))


@dataclass
class RegionReport:
    """Per-sample, per-label scores.  Undefined distances are stored as NaN."""

    labels: list[int]
    rows: list[tuple[str, int, float, float, float]] = field(default_factory=list)

    def add(self, sample: str, pred, gt) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        _check_shapes(pred, gt)
        for lab in self.labels:
            p, g = pred == lab, gt == lab
            try:
                hd, sd = hausdorff(p, g), assd(p, g)
            except UndefinedMetricError:
                hd = sd = math.nan
            self.rows.append((sample, lab, dice(p, g), hd, sd))

    @property
    def samples(self) -> list[str]:
        return list(dict.fromkeys(r[0] for r in self.rows))

    def _column(self, metric: str) -> np.ndarray:
        col = CSV_HEADER.index(metric)
        return np.array([r[col] for r in self.rows], dtype=np.float64)

    def per_label(self, metric: str) -> dict[int, tuple[float, float]]:
        """Mean and standard deviation over samples for each label (NaNs skipped)."""
        values = self._column(metric)
        labels = np.array([r[1] for r in self.rows])
        out = {}
        for lab in self.labels:
            v = values[(labels == lab) & ~np.isnan(values)]
            out[lab] = (float(v.mean()), float(v.std())) if v.size else (math.nan, math.nan)
        return out

    def per_sample(self, metric: str) -> dict[str, float]:
        """Label-averaged score of each sample."""
        values = self._column(metric)
        names = [r[0] for r in self.rows]
        out = {}
        for s in self.samples:
            v = np.array([x for x, n in zip(values, names) if n == s])
            v = v[~np.isnan(v)]
            out[s] = float(v.mean()) if v.size else math.nan
        return out

    def macro(self, metric: str) -> tuple[float, float]:
        """Mean and (population) standard deviation across samples of the label-averaged score."""
        v = np.array(list(self.per_sample(metric).values()))
        v = v[~np.isnan(v)]
        if not v.size:
            return math.nan, math.nan
        return float(v.mean()), float(v.std())

    def missing(self) -> int:
        return int(np.isnan(self._column("hd")).sum())

    def to_text(self) -> str:
        lines = [f"{'label':>6} {'dice':>16} {'hd':>16} {'assd':>16}"]
        stats = {m: self.per_label(m) for m in ("dice", "hd", "assd")}
        for lab in self.labels:
            cells = [f"{stats[m][lab][0]:.4f} +- {stats[m][lab][1]:.4f}" for m in ("dice", "hd", "assd")]
            lines.append(f"{lab:>6} " + " ".join(f"{c:>16}" for c in cells))
        cells = [f"{a:.4f} +- {b:.4f}" for a, b in (self.macro(m) for m in ("dice", "hd", "assd"))]
        lines.append(f"{'mean':>6} " + " ".join(f"{c:>16}" for c in cells))
        lines.append(f"samples {len(self.samples)}, undefined distances {self.missing()}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        """One row per (sample, label); undefined distances are left empty."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for sample, lab, d, hd, sd in self.rows:
            writer.writerow([sample, lab, repr(d), "" if math.isnan(hd) else repr(hd), "" if math.isnan(sd) else repr(sd)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> RegionReport:
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader, ()))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected report header {header}")
        rows = []
        for sample, lab, d, hd, sd in reader:
            rows.append((sample, int(lab), float(d), float(hd or "nan"), float(sd or "nan")))
        labels = sorted({r[1] for r in rows})
        return cls(labels, rows)


def evaluate(preds, gts, labels=None, names=None) -> RegionReport:
    """Score paired label maps; labels default to the nonzero values present in ``gts``."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} predictions for {len(gts)} references")
    if labels is None:
        labels = sorted({int(v) for g in gts for v in np.unique(g) if v != 0})
    names = [f"{i:04d}" for i in range(len(preds))] if names is None else list(names)
    report = RegionReport(list(labels))
    for name, p, g in zip(names, preds, gts):
        report.add(name, p, g)
    return report
