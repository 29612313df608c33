"""Stress statistics and segmentation-comparison metrics.

Percentiles use the nearest-rank convention (value at index ceil(p*N/100) of
the ascending sort, 1-based).  Hausdorff distances are exact on the given
point sets; large inputs are accelerated with a k-d tree.  Per-slice Hausdorff
profiles compare boundary-voxel contours slice by slice along the axial (z)
axis and summarize them percentile-over-slices.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.spatial import cKDTree

from .meshing import WALL, TetMesh
from .solver import StressField
from .volume import BinaryMask

_BRUTE_BUDGET = 4_000_000


@dataclasses.dataclass(frozen=True)
class StressStats:
    peak: float                      # MPa
    p99: float                       # MPa
    percentile_curve: np.ndarray     # (K,2): percentile, MPa ascending


@dataclasses.dataclass(frozen=True)
class SliceHDProfile:
    slice_indices: np.ndarray        # (S,) axial slice indices
    z_mm: np.ndarray                 # (S,) slice positions
    hd_mm: np.ndarray                # (S,) per-slice Hausdorff distances
    mean_mm: float
    percentile_curve: np.ndarray     # (K,2): percentile over slices, HD mm

    convention = "percentile-over-slices"


def relative_difference(v_auto: float, v_semi: float) -> float:
    """Signed percentage difference of v_auto relative to v_semi."""
    if v_semi == 0:
        raise ValueError("reference value must be nonzero")
    return (v_auto - v_semi) / v_semi * 100.0


# ---------------------------------------------------------------------------
# stress statistics over the wall region
# ---------------------------------------------------------------------------

def region_values(field: StressField, mesh: TetMesh, region: int = WALL) -> np.ndarray:
    """Nodal max-principal values restricted to nodes of one region."""
    mask = mesh.node_region_mask(region)
    if not mask.any():
        raise ValueError(f"region {region} has no nodes")
    return field.max_principal[mask]


def _nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    n = len(sorted_values)
    # round() guards float artifacts like 99*200/100 = 198.00000000000003
    k = math.ceil(round(p * n / 100.0, 9))
    return float(sorted_values[min(max(k, 1), n) - 1])


def peak_stress(field: StressField, mesh: TetMesh, region: int = WALL) -> float:
    """Maximum nodal max-principal stress over the region (MPa)."""
    return float(region_values(field, mesh, region).max())


def percentile_stress(field: StressField, mesh: TetMesh, p: float,
                      region: int = WALL) -> float:
    """Nearest-rank percentile of nodal max-principal stress (MPa)."""
    if not 0.0 < p <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    return _nearest_rank(np.sort(region_values(field, mesh, region)), p)


def percentile_curve(field: StressField, mesh: TetMesh, region: int = WALL,
                     max_points: int = 1000) -> StressStats:
    """Full percentile curve (100*k/N, k-th sorted value), downsampled to at
    most `max_points` while always keeping the last (peak) point."""
    values = np.sort(region_values(field, mesh, region))
    n = len(values)
    if n <= max_points:
        ks = np.arange(1, n + 1)
    else:
        ks = np.unique(np.rint(np.linspace(1, n, max_points)).astype(np.int64))
    curve = np.column_stack([100.0 * ks / n, values[ks - 1]])
    return StressStats(peak=float(values[-1]), p99=_nearest_rank(values, 99.0),
                       percentile_curve=curve)


# ---------------------------------------------------------------------------
# Hausdorff distances
# ---------------------------------------------------------------------------

def _as_points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise ValueError(f"point set must be (n,2) or (n,3), got shape {pts.shape}")
    if len(pts) == 0:
        raise ValueError("point set is empty")
    return pts


def directed_hausdorff(x, y, chunk: int = 512) -> float:
    """max over x of the distance to the nearest point of y (mm)."""
    x = _as_points(x)
    y = _as_points(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError("point sets must share dimensionality")
    if len(x) * len(y) <= _BRUTE_BUDGET:
        worst_sq = 0.0
        for start in range(0, len(x), chunk):
            diff = x[start:start + chunk, None, :] - y[None, :, :]
            d2 = (diff * diff).sum(axis=2)
            worst_sq = max(worst_sq, d2.min(axis=1).max())
        return math.sqrt(worst_sq)
    dists, _ = cKDTree(y).query(x, k=1)
    return float(dists.max())


def hausdorff(x, y) -> float:
    """Symmetric Hausdorff distance: max of both directed values (mm)."""
    return max(directed_hausdorff(x, y), directed_hausdorff(y, x))


# ---------------------------------------------------------------------------
# per-slice Hausdorff profile
# ---------------------------------------------------------------------------

def _boundary_points_2d(slice_mask: np.ndarray, spacing_xy: np.ndarray,
                        origin_xy: np.ndarray) -> np.ndarray:
    """Centers (mm) of foreground voxels with a 4-neighbor background
    (out-of-bounds counts as background)."""
    pad = np.pad(slice_mask, 1, constant_values=False)
    interior = (pad[1:-1, :-2] & pad[1:-1, 2:] & pad[:-2, 1:-1] & pad[2:, 1:-1])
    ii, jj = np.nonzero(slice_mask & ~interior)
    return origin_xy + np.column_stack([ii, jj]) * spacing_xy


def slice_hd_profile(mask_a: BinaryMask, mask_b: BinaryMask) -> SliceHDProfile:
    """2D Hausdorff distance between mask boundaries on every axial slice
    where both masks are nonempty."""
    if mask_a.values.shape != mask_b.values.shape:
        raise ValueError("masks must share grid dimensions")
    if not np.allclose(mask_a.spacing, mask_b.spacing, rtol=0, atol=1e-9) \
            or not np.allclose(mask_a.origin, mask_b.origin, rtol=0, atol=1e-6):
        raise ValueError("masks must share grid spacing and origin")
    a = mask_a.values.astype(bool)
    b = mask_b.values.astype(bool)
    spacing = np.asarray(mask_a.spacing, dtype=np.float64)
    origin = np.asarray(mask_a.origin, dtype=np.float64)
    indices = []
    values = []
    for k in range(a.shape[2]):
        sa, sb = a[:, :, k], b[:, :, k]
        if not (sa.any() and sb.any()):
            continue
        pa = _boundary_points_2d(sa, spacing[:2], origin[:2])
        pb = _boundary_points_2d(sb, spacing[:2], origin[:2])
        indices.append(k)
        values.append(hausdorff(pa, pb))
    if not indices:
        raise ValueError("masks have no common nonempty axial slice")
    indices = np.asarray(indices, dtype=np.int64)
    hd = np.asarray(values, dtype=np.float64)
    srt = np.sort(hd)
    n = len(srt)
    ks = np.arange(1, n + 1)
    curve = np.column_stack([100.0 * ks / n, srt])
    return SliceHDProfile(slice_indices=indices,
                          z_mm=origin[2] + indices * spacing[2],
                          hd_mm=hd, mean_mm=float(hd.mean()),
                          percentile_curve=curve)


# ---------------------------------------------------------------------------
# CSV outputs (deterministic %.17g formatting)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_stats_csv(path: str, rows: list[tuple[str, float, float]]) -> None:
    """stats.csv: one (case, peak, p99) row per case."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("case,peak_mpa,p99_mpa\n")
        for case, peak, p99 in rows:
            fh.write(f"{case},{_fmt(peak)},{_fmt(p99)}\n")


def write_percentile_csv(path: str, curve: np.ndarray) -> None:
    """percentile_curve.csv: (percentile, MPa) pairs."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("percentile,max_principal_mpa\n")
        for p, v in np.asarray(curve):
            fh.write(f"{_fmt(p)},{_fmt(v)}\n")


def write_hd_profile_csv(path: str, profile: SliceHDProfile) -> None:
    """hd_profile.csv: per-slice (index, z, HD) rows."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("slice_index,z_mm,hd_mm\n")
        for k, z, h in zip(profile.slice_indices, profile.z_mm, profile.hd_mm):
            fh.write(f"{int(k)},{_fmt(z)},{_fmt(h)}\n")
