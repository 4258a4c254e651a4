"""Overlap and surface-distance metrics for binary masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import DataError

_CROSS = ndimage.generate_binary_structure(2, 1)
_SQUARE = ndimage.generate_binary_structure(2, 2)


@dataclass(frozen=True)
class MetricResult:
    dsc: float
    hd95: Optional[float]  # None when exactly one surface is empty
    asd: Optional[float]


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DataError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(a, b) -> float:
    a, b = _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_mask(m, connectivity: int = 4) -> np.ndarray:
    """Foreground pixels with at least one background neighbour (off-grid counts as background)."""
    m = np.asarray(m).astype(bool)
    structure = _CROSS if connectivity == 4 else _SQUARE
    eroded = ndimage.binary_erosion(m, structure=structure, border_value=0)
    return m & ~eroded


def extract_surface(m, connectivity: int = 4) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(surface_mask(m, connectivity))
    return list(zip(rows.tolist(), cols.tolist()))


def directed_surface_distances(a, b, spacing: float = 1.0, connectivity: int = 4) -> np.ndarray:
    """Distance from every surface pixel of ``a`` to the nearest surface pixel of ``b``."""
    sa = surface_mask(a, connectivity)
    sb = surface_mask(b, connectivity)
    if not sa.any() or not sb.any():
        return np.zeros(0)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dist_to_b[sa]


def nearest_rank(values: np.ndarray, q: float) -> float:
    """q-th percentile by nearest rank: element ceil(q*n) (1-based) of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(q * len(v) - 1e-12))
    return float(v[rank - 1])


def _surface_pair(a, b, spacing, connectivity):
    a, b = _check_pair(a, b)
    na = int(surface_mask(a, connectivity).sum())
    nb = int(surface_mask(b, connectivity).sum())
    if na == 0 and nb == 0:
        return "both_empty", None, None
    if na == 0 or nb == 0:
        return "one_empty", None, None
    return (
        "ok",
        directed_surface_distances(a, b, spacing, connectivity),
        directed_surface_distances(b, a, spacing, connectivity),
    )


def hd95(a, b, spacing: float = 1.0, connectivity: int = 4) -> Optional[float]:
    state, d_ab, d_ba = _surface_pair(a, b, spacing, connectivity)
    if state == "both_empty":
        return 0.0
    if state == "one_empty":
        return None
    return max(nearest_rank(d_ab, 0.95), nearest_rank(d_ba, 0.95))


def asd(a, b, spacing: float = 1.0, connectivity: int = 4) -> Optional[float]:
    state, d_ab, d_ba = _surface_pair(a, b, spacing, connectivity)
    if state == "both_empty":
        return 0.0
    if state == "one_empty":
        return None
    return float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba)))


def evaluate_pair(pred, truth, spacing: float = 1.0, connectivity: int = 4) -> MetricResult:
    state, d_ab, d_ba = _surface_pair(pred, truth, spacing, connectivity)
    if state == "both_empty":
        h, s = 0.0, 0.0
    elif state == "one_empty":
        h, s = None, None
    else:
        h = max(nearest_rank(d_ab, 0.95), nearest_rank(d_ba, 0.95))
        s = float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba)))
    return MetricResult(dsc(pred, truth), h, s)


@dataclass(frozen=True)
class MetricSummary:
    """Mean and population std per metric; DSC in percent."""

    n: int
    dsc_mean: float
    dsc_std: float
    hd95_mean: float
    hd95_std: float
    asd_mean: float
    asd_std: float
    hd95_undefined: int
    asd_undefined: int

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize(results: Sequence[MetricResult]) -> MetricSummary:
    d = [100.0 * r.dsc for r in results]
    h = [r.hd95 for r in results if r.hd95 is not None]
    s = [r.asd for r in results if r.asd is not None]
    dm, ds = _mean_std(d)
    hm, hs = _mean_std(h)
    sm, ss = _mean_std(s)
    return MetricSummary(
        n=len(results), dsc_mean=dm, dsc_std=ds, hd95_mean=hm, hd95_std=hs, asd_mean=sm, asd_std=ss,
        hd95_undefined=len(results) - len(h), asd_undefined=len(results) - len(s),
    )


def evaluate_dataset(
    preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], spacing: float = 1.0, connectivity: int = 4
) -> tuple[list[MetricResult], MetricSummary]:
    if len(preds) != len(truths):
        raise DataError(f"{len(preds)} predictions for {len(truths)} truths")
    results = [evaluate_pair(p, t, spacing, connectivity) for p, t in zip(preds, truths)]
    return results, summarize(results)


METRICS_CSV_COLUMNS = ["checkpoint", "DSC_mean", "DSC_std", "HD95_mean", "HD95_std", "ASD_mean", "ASD_std"]


def summary_row(label: str, s: MetricSummary) -> list[str]:
    vals = [s.dsc_mean, s.dsc_std, s.hd95_mean, s.hd95_std, s.asd_mean, s.asd_std]
    return [label] + [f"{v:.6f}" for v in vals]
