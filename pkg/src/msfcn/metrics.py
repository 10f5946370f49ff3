"""Segmentation quality metrics: Dice overlap, average perpendicular
distance (APD) in millimetres between boundary contours, and the
percentage of good contours, aggregated per case and overall."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .dataio import CLASS_CAVITY, CLASS_MYOCARDIUM, contour_to_mask
from .errors import InvalidArgument

GOOD_CONTOUR_THRESHOLD_MM = 5.0  # MICCAI 2009 challenge convention
RESAMPLE_STEP_PX = 0.5


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty, 0.0 when
    exactly one is."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgument(f"dice: mask shapes differ, {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


# ---------------------------------------------------------------------------
# contour extraction (marching squares on a binary indicator, iso-level 0.5)
# ---------------------------------------------------------------------------

# Directed segments per cell case, oriented with the filled region on the
# left of travel.  Corners: bit0 = top-left, bit1 = top-right,
# bit2 = bottom-right, bit3 = bottom-left.  Edges: T, R, B, L midpoints.
_SEGMENTS: dict[int, tuple[tuple[str, str], ...]] = {
    0: (),
    1: (("L", "T"),),
    2: (("T", "R"),),
    3: (("L", "R"),),
    4: (("R", "B"),),
    5: (("L", "T"), ("R", "B")),  # saddle: keep diagonal corners separate
    6: (("T", "B"),),
    7: (("L", "B"),),
    8: (("B", "L"),),
    9: (("B", "T"),),
    10: (("T", "R"), ("B", "L")),  # saddle
    11: (("B", "R"),),
    12: (("R", "L"),),
    13: (("R", "T"),),
    14: (("T", "L"),),
    15: (),
}


def _trace_iso_contours(indicator: np.ndarray) -> list[np.ndarray]:
    """All closed iso-0.5 polygons of a binary image, in pixel coordinates
    (x = column, y = row).  The image is treated as zero-padded, so every
    contour closes."""
    ind = np.asarray(indicator, dtype=np.uint8)
    h, w = ind.shape
    f = np.zeros((h + 2, w + 2), dtype=np.uint8)
    f[1:-1, 1:-1] = ind
    tl = f[:-1, :-1]
    tr = f[:-1, 1:]
    br = f[1:, 1:]
    bl = f[1:, :-1]
    case = tl | (tr << 1) | (br << 2) | (bl << 3)
    rs, cs = np.nonzero((case != 0) & (case != 15))

    # Edge midpoints in original (unpadded) coordinates; padding shifts by 1.
    def midpoint(edge: str, r: int, c: int) -> tuple[float, float]:
        if edge == "T":
            return (c + 0.5 - 1.0, r - 1.0)
        if edge == "B":
            return (c + 0.5 - 1.0, r + 1.0 - 1.0)
        if edge == "L":
            return (c - 1.0, r + 0.5 - 1.0)
        return (c + 1.0 - 1.0, r + 0.5 - 1.0)  # R

    nxt: dict[tuple[float, float], tuple[float, float]] = {}
    for r, c in zip(rs.tolist(), cs.tolist()):
        for a, b in _SEGMENTS[int(case[r, c])]:
            nxt[midpoint(a, r, c)] = midpoint(b, r, c)

    loops: list[np.ndarray] = []
    while nxt:
        start = min(nxt)  # deterministic loop ordering
        points = [start]
        cur = nxt.pop(start)
        while cur != start:
            points.append(cur)
            cur = nxt.pop(cur)
        loops.append(np.asarray(points, dtype=np.float64))
    return loops


def polygon_area(polygon: np.ndarray) -> float:
    """Unsigned shoelace area."""
    p = np.asarray(polygon, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def mask_to_contour(mask: np.ndarray, region: str) -> Optional[np.ndarray]:
    """Boundary polygon of the largest connected component of a region.

    ``region`` is ``"cavity"`` (inner boundary, the endocardium) or
    ``"epicardial"`` (cavity plus myocardium, the outer boundary).  Returns
    None when the region is empty.  If the component has holes, the
    largest-area loop (the outer boundary) is returned.
    """
    mask = np.asarray(mask)
    if region == "cavity":
        indicator = mask == CLASS_CAVITY
    elif region == "epicardial":
        indicator = (mask == CLASS_CAVITY) | (mask == CLASS_MYOCARDIUM)
    else:
        raise InvalidArgument(f"unknown region {region!r}; use 'cavity' or 'epicardial'")
    if not indicator.any():
        return None
    labels, count = ndimage.label(indicator)
    if count > 1:
        sizes = ndimage.sum_labels(indicator, labels, index=np.arange(1, count + 1))
        indicator = labels == (int(np.argmax(sizes)) + 1)
    loops = _trace_iso_contours(indicator)
    return max(loops, key=polygon_area)


# ---------------------------------------------------------------------------
# average perpendicular distance
# ---------------------------------------------------------------------------


def resample_polygon(polygon: np.ndarray, step: float = RESAMPLE_STEP_PX) -> np.ndarray:
    """Resample a closed polygon to uniform arc-length spacing <= step."""
    p = np.asarray(polygon, dtype=np.float64)
    if len(p) < 3:
        raise InvalidArgument(f"polygon needs >= 3 points, got {len(p)}")
    closed = np.vstack([p, p[:1]])
    seg = np.diff(closed, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    perimeter = float(lengths.sum())
    if perimeter == 0.0:
        return p[:1].repeat(3, axis=0)
    n = max(int(math.ceil(perimeter / step)), 3)
    t = np.arange(n) * (perimeter / n)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    x = np.interp(t, cum, closed[:, 0])
    y = np.interp(t, cum, closed[:, 1])
    return np.stack([x, y], axis=1)


def _min_distances_to_polyline(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Distance from each point to the closed polyline through polygon."""
    a = polygon
    b = np.roll(polygon, -1, axis=0)
    ab = b - a  # (m, 2)
    denom = (ab**2).sum(axis=1)
    denom = np.where(denom == 0.0, 1.0, denom)
    ap = points[:, None, :] - a[None, :, :]  # (n, m, 2)
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    d = np.hypot(*(points[:, None, :] - closest).transpose(2, 0, 1))
    return d.min(axis=1)


def apd(
    pred: np.ndarray,
    gt: np.ndarray,
    spacing: float | tuple[float, float],
    symmetric: bool = False,
    step: float = RESAMPLE_STEP_PX,
) -> float:
    """Mean distance in mm from the predicted contour to the reference.

    Both polygons are resampled to uniform arc-length spacing before
    averaging, so the value does not depend on vertex density.  Directional
    (prediction to reference) by default, matching the challenge protocol.
    """
    if pred is None or gt is None:
        raise InvalidArgument("apd requires both contours; absence is handled by the caller")
    sy, sx = (spacing, spacing) if np.isscalar(spacing) else (spacing[0], spacing[1])
    if sy <= 0 or sx <= 0:
        raise InvalidArgument(f"spacing must be positive, got {spacing}")
    p = resample_polygon(pred, step) * np.array([sx, sy])
    g = resample_polygon(gt, step) * np.array([sx, sy])
    forward = float(_min_distances_to_polyline(p, g).mean())
    if not symmetric:
        return forward
    backward = float(_min_distances_to_polyline(g, p).mean())
    return 0.5 * (forward + backward)


def good_fraction(apds: Sequence[Optional[float]], threshold_mm: float = GOOD_CONTOUR_THRESHOLD_MM) -> float:
    """Percentage of contours that are present and within the threshold."""
    if len(apds) == 0:
        raise InvalidArgument("good_fraction of an empty list is undefined")
    good = sum(1 for a in apds if a is not None and a < threshold_mm)
    return 100.0 * good / len(apds)


# ---------------------------------------------------------------------------
# per-slice evaluation and aggregation
# ---------------------------------------------------------------------------


@dataclass
class ContourSet:
    """Reference boundaries for one slice, in pixel coordinates.

    ``mask`` optionally carries authoritative region labels (for datasets
    labeled by masks rather than contours); region overlaps are then scored
    against it directly instead of re-rasterizing the contours.
    """

    slice_id: str
    endo: Optional[np.ndarray]
    epi: Optional[np.ndarray]
    spacing: tuple[float, float]
    case_id: Optional[str] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        for name, poly in (("endo", self.endo), ("epi", self.epi)):
            if poly is not None and (np.asarray(poly).ndim != 2 or len(poly) < 3):
                raise InvalidArgument(f"{self.slice_id}: {name} contour needs >= 3 points")


@dataclass
class SliceRecord:
    case_id: str
    slice_id: str
    dice_endo: float
    dice_epi: float
    apd_endo: Optional[float]
    apd_epi: Optional[float]
    good_endo: bool
    good_epi: bool


_METRIC_KEYS = ("dice_endo", "dice_epi", "apd_endo", "apd_epi", "good_endo", "good_epi")


@dataclass
class MetricsReport:
    records: list[SliceRecord]
    per_case: dict[str, dict[str, Optional[float]]]
    overall: dict[str, Optional[tuple[float, Optional[float]]]]
    threshold_mm: float = GOOD_CONTOUR_THRESHOLD_MM
    spacing_note: str = ""

    def to_csv(self) -> str:
        lines = ["case,slice,dice_endo,dice_epi,apd_endo_mm,apd_epi_mm,good_endo,good_epi"]
        fmt = lambda v: "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(int(v)))
        for r in self.records:
            lines.append(
                f"{r.case_id},{r.slice_id},{r.dice_endo:.6f},{r.dice_epi:.6f},"
                f"{fmt(r.apd_endo)},{fmt(r.apd_epi)},{int(r.good_endo)},{int(r.good_epi)}"
            )
        for case, vals in self.per_case.items():
            cells = ",".join(fmt(vals[k]) for k in _METRIC_KEYS)
            lines.append(f"{case},__case_mean__,{cells}")
        cells = []
        for k in _METRIC_KEYS:
            agg = self.overall.get(k)
            cells.append("" if agg is None else f"{agg[0]:.6f}")
        lines.append(f"__overall__,__mean__,{','.join(cells)}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        """Render the mean(std) summary table over cases."""

        def cell(key: str, scale: float = 1.0, digits: int = 2) -> str:
            agg = self.overall.get(key)
            if agg is None:
                return "-"
            mean, std = agg
            if std is None:
                return f"{mean * scale:.{digits}f}(-)"
            return f"{mean * scale:.{digits}f}({std * scale:.{digits}f})"

        n = len(self.per_case)
        lines = [
            f"evaluated cases: {n}" + (f"   [{self.spacing_note}]" if self.spacing_note else ""),
            "metric            region   mean(std)",
            "-" * 40,
            f"Dice              Endo     {cell('dice_endo', digits=3)}",
            f"Dice              Epi      {cell('dice_epi', digits=3)}",
            f"APD(mm)           Endo     {cell('apd_endo')}",
            f"APD(mm)           Epi      {cell('apd_epi')}",
            f"Good Contours(%)  Endo     {cell('good_endo')}",
            f"Good Contours(%)  Epi      {cell('good_epi')}",
        ]
        return "\n".join(lines)


def evaluate_slices(
    preds: dict[str, np.ndarray],
    gts: dict[str, ContourSet],
    threshold_mm: float = GOOD_CONTOUR_THRESHOLD_MM,
) -> list[SliceRecord]:
    """Score predicted class masks against reference contours, slice by slice.

    Dice compares regions (reference contours are rasterized); APD compares
    boundary polygons extracted from the prediction against the reference
    polygons directly.
    """
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        raise InvalidArgument(f"prediction/reference slice ids do not match: {missing[:5]}")
    records = []
    for sid in sorted(preds):
        pred = np.asarray(preds[sid])
        gt = gts[sid]
        size = pred.shape[0]
        gt_mask = gt.mask if gt.mask is not None else contour_to_mask(gt.endo, gt.epi, size)
        d_endo = dice(pred == CLASS_CAVITY, gt_mask == CLASS_CAVITY)
        d_epi = dice(pred >= CLASS_MYOCARDIUM, gt_mask >= CLASS_MYOCARDIUM)
        pc_endo = mask_to_contour(pred, "cavity")
        pc_epi = mask_to_contour(pred, "epicardial")
        a_endo = apd(pc_endo, gt.endo, gt.spacing) if pc_endo is not None and gt.endo is not None else None
        a_epi = apd(pc_epi, gt.epi, gt.spacing) if pc_epi is not None and gt.epi is not None else None
        records.append(
            SliceRecord(
                case_id=gt.case_id or sid,
                slice_id=sid,
                dice_endo=d_endo,
                dice_epi=d_epi,
                apd_endo=a_endo,
                apd_epi=a_epi,
                good_endo=a_endo is not None and a_endo < threshold_mm,
                good_epi=a_epi is not None and a_epi < threshold_mm,
            )
        )
    return records


def aggregate_report(
    records: Sequence[SliceRecord],
    threshold_mm: float = GOOD_CONTOUR_THRESHOLD_MM,
    spacing_note: str = "",
) -> MetricsReport:
    """Per-case means first, then mean and sample std (n-1) across cases.

    A case's APD aggregate is the mean of its present values and absent when
    no slice has one; absent contours count as bad in the good percentage.
    """
    cases: dict[str, list[SliceRecord]] = {}
    for r in records:
        cases.setdefault(r.case_id, []).append(r)

    per_case: dict[str, dict[str, Optional[float]]] = {}
    for case, recs in sorted(cases.items()):
        vals: dict[str, Optional[float]] = {
            "dice_endo": float(np.mean([r.dice_endo for r in recs])),
            "dice_epi": float(np.mean([r.dice_epi for r in recs])),
        }
        for key in ("apd_endo", "apd_epi"):
            present = [getattr(r, key) for r in recs if getattr(r, key) is not None]
            vals[key] = float(np.mean(present)) if present else None
        vals["good_endo"] = good_fraction([r.apd_endo for r in recs], threshold_mm)
        vals["good_epi"] = good_fraction([r.apd_epi for r in recs], threshold_mm)
        per_case[case] = vals

    overall: dict[str, Optional[tuple[float, Optional[float]]]] = {}
    for key in _METRIC_KEYS:
        values = [v[key] for v in per_case.values() if v[key] is not None]
        if not values:
            overall[key] = None
        elif len(values) == 1:
            overall[key] = (float(values[0]), None)
        else:
            overall[key] = (float(np.mean(values)), float(np.std(values, ddof=1)))
    return MetricsReport(
        records=list(records),
        per_case=per_case,
        overall=overall,
        threshold_mm=threshold_mm,
        spacing_note=spacing_note,
    )
