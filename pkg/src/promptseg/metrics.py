"""Segmentation quality metrics: DSC, NSD, HD95 and report aggregation.

Conventions (mirrored by the brute-force test oracle, do not change one
without the other):

* boundaries use 4-connectivity and out-of-bounds counts as background,
* distances are Euclidean, computed as sqrt((dy*sy)^2 + (dx*sx)^2),
* percentiles use linear interpolation between order statistics,
* dsc(empty, empty) = 1.0; one-sided emptiness gives dsc 0 and a report
  without surface metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from promptseg.errors import EmptySurfaceError, ShapeError

Spacing = tuple[float, float]

#: report flags
EMPTY_PREDICTION = "empty_prediction"
EMPTY_REFERENCE = "empty_reference"
EXCLUDED_FROM_MEAN = "excluded_from_mean"


def _as_mask(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be a 2D mask, got shape {m.shape}")
    return m.astype(bool)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def _as_spacing(spacing: Spacing | float | None) -> tuple[float, float]:
    if spacing is None:
        return (1.0, 1.0)
    if isinstance(spacing, (int, float)):
        return (float(spacing), float(spacing))
    sy, sx = spacing
    if sy <= 0 or sx <= 0:
        raise ValueError(f"spacing components must be > 0, got {spacing}")
    return (float(sy), float(sx))


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice similarity 2|a∩b| / (|a|+|b|); dsc(empty, empty) = 1.0."""
    a = _as_mask(a, "a")
    b = _as_mask(b, "b")
    _check_same_shape(a, b)
    na = int(a.sum())
    nb = int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels of a binary mask as an [N, 2] array of (row, col).

    A foreground pixel is boundary if any of its 4 neighbors is background;
    pixels on the image edge always qualify (out-of-bounds is background).
    Rows are sorted lexicographically. Empty mask gives an empty array.
    """
    mask = _as_mask(mask, "mask")
    if not mask.any():
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    edge = mask & ~interior
    coords = np.argwhere(edge).astype(np.int64)
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    return coords[order]


def directed_distances(
    A: np.ndarray, B: np.ndarray, spacing: Spacing | float | None = None
) -> np.ndarray:
    """For each point in A, the distance to its nearest point in B.

    A and B are [N, 2] coordinate arrays (row, col). Returns a float array of
    length |A|. Raises EmptySurfaceError if B is empty; an empty A gives an
    empty result.
    """
    sy, sx = _as_spacing(spacing)
    A = np.asarray(A, dtype=np.int64).reshape(-1, 2)
    B = np.asarray(B, dtype=np.int64).reshape(-1, 2)
    if B.shape[0] == 0:
        raise EmptySurfaceError("cannot measure distances to an empty surface")
    if A.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    dy = (A[:, None, 0] - B[None, :, 0]).astype(np.float64) * sy
    dx = (A[:, None, 1] - B[None, :, 1]).astype(np.float64) * sx
    d = np.sqrt(dy * dy + dx * dx)
    return d.min(axis=1)


def percentile_linear(values: np.ndarray, q: float) -> float:
    """q-th percentile with linear interpolation between order statistics."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = values.shape[0]
    if n == 0:
        raise ValueError("percentile of an empty sequence")
    rank = (q / 100.0) * (n - 1)
    lo = int(math.floor(rank))
    hi = int(math.ceil(rank))
    frac = rank - lo
    return float(values[lo] + frac * (values[hi] - values[lo]))


def hd95(
    a: np.ndarray, b: np.ndarray, spacing: Spacing | float | None = None
) -> float:
    """Symmetric 95th-percentile Hausdorff distance between mask boundaries.

    Takes the max of the two directed 95th percentiles (not the percentile of
    the combined multiset). Both masks must be nonempty.
    """
    a = _as_mask(a, "a")
    b = _as_mask(b, "b")
    _check_same_shape(a, b)
    if not a.any():
        raise EmptySurfaceError("first mask is empty", side="first")
    if not b.any():
        raise EmptySurfaceError("second mask is empty", side="second")
    ba = boundary(a)
    bb = boundary(b)
    d_ab = directed_distances(ba, bb, spacing)
    d_ba = directed_distances(bb, ba, spacing)
    return max(percentile_linear(d_ab, 95.0), percentile_linear(d_ba, 95.0))


def nsd(
    a: np.ndarray,
    b: np.ndarray,
    tau: float,
    spacing: Spacing | float | None = None,
) -> float:
    """Normalized surface distance at tolerance tau.

    Fraction of boundary points of each mask lying within tau of the other
    mask's boundary: (|{d in D(∂a,∂b): d <= tau}| + |{d in D(∂b,∂a): d <= tau}|)
    / (|∂a| + |∂b|). Both masks must be nonempty and tau > 0.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    a = _as_mask(a, "a")
    b = _as_mask(b, "b")
    _check_same_shape(a, b)
    if not a.any():
        raise EmptySurfaceError("first mask is empty", side="first")
    if not b.any():
        raise EmptySurfaceError("second mask is empty", side="second")
    ba = boundary(a)
    bb = boundary(b)
    d_ab = directed_distances(ba, bb, spacing)
    d_ba = directed_distances(bb, ba, spacing)
    hits = int((d_ab <= tau).sum()) + int((d_ba <= tau).sum())
    return hits / (ba.shape[0] + bb.shape[0])


@dataclass
class MetricReport:
    """Per-sample metric record. Surface metrics are None when either mask
    is empty; flags record emptiness and mean-exclusion."""

    dsc: float
    nsd: float | None
    hd95: float | None
    flags: set[str] = field(default_factory=set)
    sample_id: str | None = None
    organ_id: int | None = None
    organ_name: str | None = None
    tau: float = 1.0

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "organ_id": self.organ_id,
            "organ_name": self.organ_name,
            "dsc": self.dsc,
            "nsd": self.nsd,
            "hd95": self.hd95,
            "tau": self.tau,
            "flags": sorted(self.flags),
        }


def evaluate_pair(
    pred: np.ndarray,
    ref: np.ndarray,
    tau: float = 1.0,
    spacing: Spacing | float | None = None,
    sample_id: str | None = None,
    organ_id: int | None = None,
    organ_name: str | None = None,
) -> MetricReport:
    """All three metrics for one prediction/reference pair, with the
    empty-mask conventions applied."""
    pred = _as_mask(pred, "pred")
    ref = _as_mask(ref, "ref")
    _check_same_shape(pred, ref)
    flags: set[str] = set()
    if not pred.any():
        flags.add(EMPTY_PREDICTION)
    if not ref.any():
        flags.add(EMPTY_REFERENCE)
    if flags:
        return MetricReport(
            dsc=dsc(pred, ref),
            nsd=None,
            hd95=None,
            flags=flags,
            sample_id=sample_id,
            organ_id=organ_id,
            organ_name=organ_name,
            tau=tau,
        )
    return MetricReport(
        dsc=dsc(pred, ref),
        nsd=nsd(pred, ref, tau, spacing),
        hd95=hd95(pred, ref, spacing),
        flags=flags,
        sample_id=sample_id,
        organ_id=organ_id,
        organ_name=organ_name,
        tau=tau,
    )


@dataclass
class MetricSummary:
    """Mean ± population std per metric over a list of reports.

    Entries with dsc below the exclusion threshold are dropped from the DSC
    and NSD means (the Table-2 style convention). HD95 averages every report
    that carries a value. Means are None (and flagged undefined) when nothing
    survives.
    """

    n_total: int
    n_excluded: int
    dsc_mean: float | None
    dsc_std: float | None
    nsd_mean: float | None
    nsd_std: float | None
    hd95_mean: float | None
    hd95_std: float | None
    n_used_dsc: int
    n_used_nsd: int
    n_used_hd95: int
    exclusion_threshold: float
    undefined_means: bool

    def to_json(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_excluded": self.n_excluded,
            "dsc_mean": self.dsc_mean,
            "dsc_std": self.dsc_std,
            "nsd_mean": self.nsd_mean,
            "nsd_std": self.nsd_std,
            "hd95_mean": self.hd95_mean,
            "hd95_std": self.hd95_std,
            "n_used_dsc": self.n_used_dsc,
            "n_used_nsd": self.n_used_nsd,
            "n_used_hd95": self.n_used_hd95,
            "exclusion_threshold": self.exclusion_threshold,
            "undefined_means": self.undefined_means,
        }


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std (ddof=0)


def aggregate(
    reports: list[MetricReport], exclusion_threshold: float = 0.1
) -> MetricSummary:
    """Summarize reports, excluding low-DSC entries from the DSC/NSD means.

    Flags each excluded report in place with EXCLUDED_FROM_MEAN.
    """
    if not reports:
        raise ValueError("aggregate needs at least one report")
    for r in reports:
        if r.dsc < exclusion_threshold:
            r.flags.add(EXCLUDED_FROM_MEAN)
        else:
            r.flags.discard(EXCLUDED_FROM_MEAN)
    kept = [r for r in reports if EXCLUDED_FROM_MEAN not in r.flags]
    dscs = [r.dsc for r in kept]
    nsds = [r.nsd for r in kept if r.nsd is not None]
    hd95s = [r.hd95 for r in reports if r.hd95 is not None]
    dsc_mean, dsc_std = _mean_std(dscs)
    nsd_mean, nsd_std = _mean_std(nsds)
    hd95_mean, hd95_std = _mean_std(hd95s)
    return MetricSummary(
        n_total=len(reports),
        n_excluded=len(reports) - len(kept),
        dsc_mean=dsc_mean,
        dsc_std=dsc_std,
        nsd_mean=nsd_mean,
        nsd_std=nsd_std,
        hd95_mean=hd95_mean,
        hd95_std=hd95_std,
        n_used_dsc=len(dscs),
        n_used_nsd=len(nsds),
        n_used_hd95=len(hd95s),
        exclusion_threshold=exclusion_threshold,
        undefined_means=len(kept) == 0,
    )
