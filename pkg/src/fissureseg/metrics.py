"""Overlap and surface-distance metrics: DSC, HD95, ASSD.

Distances are Euclidean in voxel units between surface voxels, where a
surface voxel is a foreground voxel with at least one 6-connected neighbor
that is background or outside the volume.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ParameterError, UndefinedMetricError
from .morphology import DEFAULT_ADJACENCY, LOBE_NAMES, FissureAdjacency, fissure_gt_from_lobes
from .volume import as_array

_SIX = ndimage.generate_binary_structure(3, 1)


def _pair(pred, gt):
    p = as_array(pred).astype(bool)
    g = as_array(gt).astype(bool)
    if p.shape != g.shape:
        raise ParameterError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def surface_voxels(mask) -> np.ndarray:
    """Integer coordinates (N, 3) of the mask's surface voxels."""
    m = as_array(mask).astype(bool)
    interior = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return np.argwhere(m & ~interior)


def dsc(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def directed_surface_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each point of ``src`` to its nearest point in ``dst``."""
    d, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def _surface_pair(pred, gt):
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        raise UndefinedMetricError("surface distance is undefined for an empty mask")
    sp, sg = surface_voxels(p), surface_voxels(g)
    return directed_surface_distances(sp, sg), directed_surface_distances(sg, sp)


def nearest_rank(values: np.ndarray, pct: int = 95) -> float:
    """Smallest value whose cumulative fraction is at least ``pct`` percent."""
    v = np.sort(np.asarray(values))
    rank = max(1, (pct * v.size + 99) // 100)
    return float(v[rank - 1])


def hd95(pred, gt) -> float:
    a, b = _surface_pair(pred, gt)
    return nearest_rank(np.concatenate([a, b]), 95)


def assd(pred, gt) -> float:
    a, b = _surface_pair(pred, gt)
    return (float(a.mean()) + float(b.mean())) / 2.0


@dataclass
class ClassMetrics:
    kind: str          # "lobe" or "fissure"
    label: int
    name: str
    dsc: float
    hd95: float = math.nan
    assd: float = math.nan
    defined: bool = True
    note: str = ""


@dataclass
class MetricsReport:
    case: str
    lobes: list = field(default_factory=list)
    fissures: list = field(default_factory=list)

    @staticmethod
    def _mean(values):
        vals = [v for v in values if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_dsc(self) -> float:
        return self._mean([c.dsc for c in self.lobes])

    @property
    def mean_hd95(self) -> float:
        return self._mean([c.hd95 for c in self.lobes])

    @property
    def mean_assd(self) -> float:
        return self._mean([c.assd for c in self.fissures])

    def rows(self) -> list:
        out = []
        for c in self.lobes + self.fissures:
            out.append({"case": self.case, **asdict(c)})
        return out

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        doc = {
            "case": self.case,
            "classes": [{k: clean(v) for k, v in r.items() if k != "case"} for r in self.rows()],
            "mean_dsc": clean(self.mean_dsc),
            "mean_hd95": clean(self.mean_hd95),
            "mean_assd": clean(self.mean_assd),
        }
        return json.dumps(doc, indent=2, sort_keys=True)


CSV_COLUMNS = ["case", "kind", "label", "name", "dsc", "hd95", "assd", "defined", "note"]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        for row in rep.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def evaluate_segmentation(pred, gt, adj: FissureAdjacency = DEFAULT_ADJACENCY, radius: int = 1,
                          num_classes: int | None = None, case: str = "case") -> MetricsReport:
    """Per-lobe DSC/HD95 and per-fissure ASSD for one predicted label map.

    Undefined distances (empty prediction or reference) are reported as NaN
    with ``defined=False`` and a note, never dropped.
    """
    p = as_array(pred)
    g = as_array(gt)
    if p.shape != g.shape:
        raise ParameterError(f"label shapes differ: {p.shape} vs {g.shape}")
    if num_classes is None:
        num_classes = max(int(p.max()), int(g.max()), adj.max_lobe) + 1
    report = MetricsReport(case)
    for k in range(1, num_classes):
        pm, gm = p == k, g == k
        entry = ClassMetrics("lobe", k, LOBE_NAMES.get(k, f"L{k}"), dsc(pm, gm))
        try:
            entry.hd95 = hd95(pm, gm)
        except UndefinedMetricError:
            entry.defined = False
            entry.note = "empty prediction" if gm.any() else ("empty reference" if pm.any() else "absent in both")
        report.lobes.append(entry)
    fp = fissure_gt_from_lobes(p, radius, adj).data
    fg = fissure_gt_from_lobes(g, radius, adj).data
    for e, name in zip(adj.entries, adj.names()):
        pm, gm = fp == e.fissure, fg == e.fissure
        entry = ClassMetrics("fissure", e.fissure, name, dsc(pm, gm))
        try:
            entry.assd = assd(pm, gm)
        except UndefinedMetricError:
            entry.defined = False
            entry.note = "empty prediction" if gm.any() else ("empty reference" if pm.any() else "absent in both")
        report.fissures.append(entry)
    return report
