"""Voxel-hash spatial index for ball queries around ray samples.

Representative points are bucketed by their integer cell coordinate
(cell = floor(p / voxel_edge)). A query scans the (2c+1)^3 cell
neighborhood with c = ceil(tau), which makes the ball query exact for any
tau: every point within tau * voxel_edge of the query lies in that shell.
Results are sorted by distance (ties broken by ascending point index) and
truncated to the nearest max_neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import ScaleLevel, cell_indices

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_LIMIT = (1 << _KEY_BITS) - 1


class IndexRangeError(ValueError):
    """Cell coordinates exceed the packed 21-bit-per-axis key range."""


def _pack_cells(cells: np.ndarray) -> np.ndarray:
    shifted = cells + _KEY_OFFSET
    if shifted.size and (shifted.min() < 0 or shifted.max() > _KEY_LIMIT):
        raise IndexRangeError(
            "cell coordinate out of range; voxel edge too small for scene extent"
        )
    return (
        (shifted[:, 0] << (2 * _KEY_BITS))
        | (shifted[:, 1] << _KEY_BITS)
        | shifted[:, 2]
    )


@dataclass
class NeighborSet:
    level_index: int
    point_indices: np.ndarray  # (k,) int64, sorted by ascending distance
    distances: np.ndarray  # (k,) float64

    @property
    def count(self) -> int:
        return self.point_indices.shape[0]

    @property
    def empty(self) -> bool:
        return self.count == 0


class VoxelHashIndex:
    """Immutable cell-bucketed index over one hierarchy level."""

    def __init__(self, level: ScaleLevel):
        self.level_index = level.level_index
        self.voxel_edge = level.voxel_edge
        self.positions = level.representatives
        cells = cell_indices(self.positions, self.voxel_edge)
        keys = _pack_cells(cells)
        self._order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[self._order]

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def cell_map(self) -> dict[tuple[int, int, int], list[int]]:
        """Sparse cell -> point-index lists (diagnostic view of the index)."""
        cells = cell_indices(self.positions, self.voxel_edge)
        out: dict[tuple[int, int, int], list[int]] = {}
        for i, c in enumerate(cells):
            out.setdefault((int(c[0]), int(c[1]), int(c[2])), []).append(i)
        return out


def build_index(level: ScaleLevel) -> VoxelHashIndex:
    return VoxelHashIndex(level)


def _shell_offsets(tau: float) -> np.ndarray:
    c = int(np.ceil(tau - 1e-12))
    c = max(c, 1)
    r = np.arange(-c, c + 1, dtype=np.int64)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def ball_query_batch(
    index: VoxelHashIndex, queries: np.ndarray, tau: float, max_neighbors: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ball query for many points at once.

    Returns flat pair arrays (query_row, point_index, distance) sorted by
    (query_row, distance, point_index) and truncated per query to the
    nearest max_neighbors.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    nq = queries.shape[0]
    empty = (
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.float64),
    )
    if nq == 0 or index.count == 0:
        return empty

    qcells = cell_indices(queries, index.voxel_edge)
    offs = _shell_offsets(tau)
    keys = _pack_cells(
        (qcells[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    )
    lo = np.searchsorted(index._sorted_keys, keys, side="left")
    hi = np.searchsorted(index._sorted_keys, keys, side="right")
    lens = hi - lo
    total = int(lens.sum())
    if total == 0:
        return empty

    csum = np.cumsum(lens)
    starts = np.repeat(lo - np.concatenate(([0], csum[:-1])), lens)
    flat = np.arange(total, dtype=np.int64) + starts
    cand = index._order[flat]
    pair_q = np.repeat(np.arange(nq, dtype=np.int64), lens.reshape(nq, -1).sum(axis=1))

    diff = index.positions[cand] - queries[pair_q]
    d2 = np.einsum("ij,ij->i", diff, diff)
    radius = tau * index.voxel_edge
    keep = d2 <= radius * radius
    pair_q, cand, d2 = pair_q[keep], cand[keep], d2[keep]
    if pair_q.size == 0:
        return empty

    order = np.lexsort((cand, d2, pair_q))
    pair_q, cand, d2 = pair_q[order], cand[order], d2[order]

    # rank within each query segment, then cap at max_neighbors
    seg_start = np.concatenate(([True], pair_q[1:] != pair_q[:-1]))
    seg_first = np.flatnonzero(seg_start)
    rank = np.arange(pair_q.size, dtype=np.int64) - np.repeat(
        seg_first, np.diff(np.concatenate((seg_first, [pair_q.size])))
    )
    keep = rank < max_neighbors
    return pair_q[keep], cand[keep], np.sqrt(d2[keep])


def ball_query(
    index: VoxelHashIndex, q: np.ndarray, tau: float, max_neighbors: int
) -> NeighborSet:
    """Neighbors of one query point within tau * voxel_edge."""
    _, idx, dist = ball_query_batch(index, np.asarray(q).reshape(1, 3), tau, max_neighbors)
    return NeighborSet(index.level_index, idx, dist)


GLOBAL_LEVEL = 0


def valid_scales(
    indices: list[VoxelHashIndex], q: np.ndarray, tau: float, max_neighbors: int
) -> list[tuple[int, NeighborSet | None]]:
    """Levels with at least one neighbor of q, plus the always-valid global scale.

    The global scale is reported as (GLOBAL_LEVEL, None): it has no point
    neighbors, a single cell covers the whole scene.
    """
    out: list[tuple[int, NeighborSet | None]] = []
    for index in indices:
        ns = ball_query(index, q, tau, max_neighbors)
        if not ns.empty:
            out.append((index.level_index, ns))
    out.append((GLOBAL_LEVEL, None))
    return out
