"""Multi-scale point hierarchy built by voxel-wise barycenter clustering.

Every level is aggregated independently from the raw input cloud: space is
partitioned into axis-aligned cells of edge ``omega * gamma**(s-1)``
anchored at the origin, and each non-empty cell is replaced by the
barycenter of the input points it contains. The coarsest scale is a single
global cell covering the whole scene, represented only by the cloud mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene_io import PointCloud, save_point_cloud


@dataclass
class ScaleLevel:
    level_index: int
    voxel_edge: float
    representatives: np.ndarray  # (n, 3), ascending lexicographic cell order
    source_counts: np.ndarray  # (n,) points merged into each representative

    @property
    def count(self) -> int:
        return self.representatives.shape[0]


@dataclass
class PointHierarchy:
    levels: list[ScaleLevel]  # fine -> coarse (level_index 1..S)
    global_center: np.ndarray  # (3,) mean of the input cloud
    omega: float
    gamma: float

    @property
    def num_local_levels(self) -> int:
        return len(self.levels)


def cell_indices(positions: np.ndarray, voxel_edge: float) -> np.ndarray:
    """Integer cell coordinates, cells anchored at the origin."""
    return np.floor(positions / voxel_edge).astype(np.int64)


def grid_subsample(cloud: PointCloud, voxel_edge: float, level_index: int = 1) -> ScaleLevel:
    """One representative per non-empty cell: the barycenter of its members."""
    if voxel_edge <= 0:
        raise ValueError("voxel_edge must be positive")
    pos = cloud.positions
    if pos.shape[0] == 0:
        return ScaleLevel(
            level_index, float(voxel_edge),
            np.zeros((0, 3)), np.zeros((0,), dtype=np.int64),
        )
    cells = cell_indices(pos, voxel_edge)
    # np.unique on rows sorts lexicographically, which fixes the output order
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((counts.shape[0], 3))
    for a in range(3):
        sums[:, a] = np.bincount(inverse, weights=pos[:, a], minlength=counts.shape[0])
    reps = sums / counts[:, None]
    return ScaleLevel(level_index, float(voxel_edge), reps, counts.astype(np.int64))


def build_hierarchy(
    cloud: PointCloud, omega: float, gamma: float, num_local_levels: int
) -> PointHierarchy:
    """Levels s=1..num_local_levels at edge omega*gamma**(s-1), plus the global mean."""
    if num_local_levels < 0:
        raise ValueError("num_local_levels must be >= 0")
    if num_local_levels > 0:
        if omega <= 0:
            raise ValueError("omega must be positive")
        if gamma <= 1:
            raise ValueError("gamma must be > 1")
    levels = [
        grid_subsample(cloud, omega * gamma ** (s - 1), level_index=s)
        for s in range(1, num_local_levels + 1)
    ]
    center = cloud.positions.mean(axis=0) if cloud.count else np.zeros(3)
    return PointHierarchy(levels, center, float(omega), float(gamma))


def median_nn_spacing(cloud: PointCloud, sample_cap: int = 2048) -> float:
    """Median nearest-neighbor distance, exact for clouds up to sample_cap.

    Larger clouds take the median over an evenly strided subset of the
    lexicographically sorted positions, which keeps the result independent
    of input order.
    """
    pos = cloud.positions
    n = pos.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")
    order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0]))
    stride = max(1, int(np.ceil(n / sample_cap)))
    sample = pos[order[::stride]]
    d2 = np.sum((sample[:, None, :] - pos[None, :, :]) ** 2, axis=2)
    d2[d2 == 0.0] = np.inf  # self (and exact duplicates) excluded
    nearest = np.sqrt(np.min(d2, axis=1))
    finite = nearest[np.isfinite(nearest)]
    if finite.size == 0:
        raise ValueError("degenerate cloud: all points coincident")
    return float(np.median(finite))


def auto_schedule(cloud: PointCloud, num_local_levels: int) -> tuple[float, float]:
    """Pick (omega, gamma) from the cloud when no explicit schedule is given.

    omega is twice the median nearest-neighbor spacing; gamma is chosen so
    the coarsest local edge is 1/8 of the bounding-box diagonal. Explicit
    config values always take precedence over this heuristic.
    """
    omega = 2.0 * median_nn_spacing(cloud)
    if num_local_levels <= 1:
        return omega, 2.0
    diag = float(np.linalg.norm(cloud.positions.max(axis=0) - cloud.positions.min(axis=0)))
    target = diag / 8.0
    if target <= omega:
        return omega, 1.1
    gamma = (target / omega) ** (1.0 / (num_local_levels - 1))
    return omega, float(max(gamma, 1.05))


def dump_hierarchy(hierarchy: PointHierarchy, out_dir) -> Path:
    """Write one PLY per level plus a plain-text manifest of edges/counts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"omega {hierarchy.omega!r}", f"gamma {hierarchy.gamma!r}"]
    for level in hierarchy.levels:
        name = f"level_{level.level_index}.ply"
        save_point_cloud(out_dir / name, PointCloud(level.representatives))
        lines.append(f"level {level.level_index} edge {level.voxel_edge!r} count {level.count}")
    gc = hierarchy.global_center
    lines.append(f"global center {gc[0]!r} {gc[1]!r} {gc[2]!r}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="ascii")
    return manifest
