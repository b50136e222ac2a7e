"""Dice and 95th-percentile Hausdorff distance, per-organ reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .catalog import OrganCatalog
from .pipeline import crop_array


def dsc(pred_mask, gt_mask) -> float:
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask) -> np.ndarray:
    """Mask voxels with a face-neighbor outside the mask (volume edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def surface_points(mask, spacing) -> np.ndarray:
    """Physical coordinates ``[n, 3]`` of boundary voxels (index * spacing)."""
    mask = np.asarray(mask, dtype=bool)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (mask.ndim,):
        raise ValueError(f"need {mask.ndim} spacing values, got {spacing.shape}")
    pts = np.argwhere(boundary(mask)).astype(np.float64) * spacing
    if mask.ndim < 3:
        pts = np.hstack([np.zeros((len(pts), 3 - mask.ndim)), pts])
    return np.ascontiguousarray(pts)


def percentile_linear(values, q: float) -> float:
    """``q``-th percentile with linear interpolation between order statistics."""
    d = np.sort(np.asarray(values, dtype=np.float64))
    h = (len(d) - 1) * (q / 100.0)
    lo = math.floor(h)
    hi = min(lo + 1, len(d) - 1)
    return float(d[lo] + (d[hi] - d[lo]) * (h - lo))


def directed_surface_distances(a_pts, b_pts, kernel=None) -> np.ndarray:
    kernel = kernel or kernels.directed_min_sqdist
    return np.sqrt(kernel(a_pts, b_pts))


def hd95(pred_mask, gt_mask, spacing_mm, kernel=None) -> float | None:
    """Symmetric HD95 in mm; ``None`` when either mask is empty."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return None
    a = surface_points(pred, spacing_mm)
    b = surface_points(gt, spacing_mm)
    return max(
        percentile_linear(directed_surface_distances(a, b, kernel), 95),
        percentile_linear(directed_surface_distances(b, a, kernel), 95),
    )


@dataclass
class CaseMetrics:
    case_id: str
    source: int
    dsc: dict  # organ name -> float or None (absent)
    hd95: dict  # organ name -> float or None (absent)


def evaluate_case(p, case, catalog: OrganCatalog) -> CaseMetrics:
    """Score per-slice probabilities ``[D, C, H, W]`` against the complete labels.

    Ground truth is center-cropped to the prediction's in-plane size.
    Argmax ties go to the lowest class index.
    """
    p = np.asarray(p)
    D = case.full_label_map.shape[0]
    if p.ndim != 4 or p.shape[0] != D:
        raise ValueError(f"predictions must cover all {D} slices, got shape {p.shape}")
    if p.shape[1] != catalog.num_classes:
        raise ValueError(f"expected {catalog.num_classes} channels, got {p.shape[1]}")
    pred = np.argmax(p, axis=1)
    gt = crop_array(case.full_label_map, p.shape[2], p.shape[3])
    d, h = {}, {}
    for o in catalog.organs:
        pm, gm = pred == o.index, gt == o.index
        if not pm.any() and not gm.any():
            d[o.name] = h[o.name] = None
            continue
        d[o.name] = dsc(pm, gm)
        h[o.name] = hd95(pm, gm, case.spacing_mm)
    return CaseMetrics(case.case_id, case.source, d, h)


def _mean_std(xs):
    if not xs:
        return None, None
    a = np.asarray(xs, dtype=np.float64)
    return float(a.mean()), float(a.std())


@dataclass
class MetricsReport:
    organs: list
    dsc_mean: dict  # percent
    dsc_std: dict
    dsc_n: dict
    hd95_mean: dict  # mm
    hd95_std: dict
    hd95_n: dict
    average_dsc: float | None
    average_hd95: float | None
    cases: list = field(default_factory=list)

    def dsc_cell(self, organ) -> str:
        m = self.dsc_mean[organ]
        return "n/a" if m is None else f"{m:.2f} ± {self.dsc_std[organ]:.2f}"

    def hd95_cell(self, organ) -> str:
        m = self.hd95_mean[organ]
        return "n/a" if m is None else f"{m:.2f} ± {self.hd95_std[organ]:.2f}"

    def to_dict(self) -> dict:
        return {
            "organs": self.organs,
            "dsc_mean": self.dsc_mean, "dsc_std": self.dsc_std, "dsc_n": self.dsc_n,
            "hd95_mean": self.hd95_mean, "hd95_std": self.hd95_std, "hd95_n": self.hd95_n,
            "average_dsc": self.average_dsc, "average_hd95": self.average_hd95,
            "cases": self.cases,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d.get(k, [] if k == "cases" else None) for k in cls.__dataclass_fields__})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        w = max(len("Average"), *(len(o) for o in self.organs))
        lines = [f"{'Organ':<{w}}  {'DSC (%)':>16}  {'HD95 (mm)':>16}  {'n':>3}"]
        for o in self.organs:
            lines.append(f"{o:<{w}}  {self.dsc_cell(o):>16}  {self.hd95_cell(o):>16}  {self.dsc_n[o]:>3}")
        avg_d = "n/a" if self.average_dsc is None else f"{self.average_dsc:.2f}"
        avg_h = "n/a" if self.average_hd95 is None else f"{self.average_hd95:.2f}"
        lines.append(f"{'Average':<{w}}  {avg_d:>16}  {avg_h:>16}")
        return "\n".join(lines) + "\n"


def aggregate_report(case_metrics, catalog: OrganCatalog) -> MetricsReport:
    if not case_metrics:
        raise ValueError("no case metrics to aggregate")
    names = catalog.organ_names
    dm, ds, dn, hm, hs, hn = {}, {}, {}, {}, {}, {}
    for o in names:
        dvals = [100.0 * c.dsc[o] for c in case_metrics if c.dsc.get(o) is not None]
        hvals = [c.hd95[o] for c in case_metrics if c.hd95.get(o) is not None]
        dm[o], ds[o] = _mean_std(dvals)
        hm[o], hs[o] = _mean_std(hvals)
        dn[o], hn[o] = len(dvals), len(hvals)
    davail = [v for v in dm.values() if v is not None]
    havail = [v for v in hm.values() if v is not None]
    return MetricsReport(
        organs=names, dsc_mean=dm, dsc_std=ds, dsc_n=dn,
        hd95_mean=hm, hd95_std=hs, hd95_n=hn,
        average_dsc=float(np.mean(davail)) if davail else None,
        average_hd95=float(np.mean(havail)) if havail else None,
        cases=[{"case_id": c.case_id, "source": c.source, "dsc": c.dsc, "hd95": c.hd95}
               for c in case_metrics],
    )


def comparison_table(reports: dict) -> str:
    """Side-by-side DSC table, one column per labelled report, with an Average row."""
    labels = list(reports)
    organs = []
    for r in reports.values():
        organs += [o for o in r.organs if o not in organs]
    cells = {lab: {o: (r.dsc_cell(o) if o in r.organs else "n/a") for o in organs}
             for lab, r in reports.items()}
    for lab, r in reports.items():
        cells[lab]["Average"] = "n/a" if r.average_dsc is None else f"{r.average_dsc:.2f}"
    rows = organs + ["Average"]
    w0 = max(len("OARs"), *(len(o) for o in rows))
    widths = [max(len(lab), *(len(cells[lab][o]) for o in rows)) for lab in labels]
    head = f"{'OARs':<{w0}}  " + "  ".join(f"{lab:>{w}}" for lab, w in zip(labels, widths))
    lines = [head, "-" * len(head)]
    for o in rows:
        if o == "Average":
            lines.append("-" * len(head))
        lines.append(f"{o:<{w0}}  " + "  ".join(f"{cells[lab][o]:>{w}}" for lab, w in zip(labels, widths)))
    return "\n".join(lines) + "\n"
