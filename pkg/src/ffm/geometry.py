"""Level-by-level cubic octrees for the target and source clouds.

Both trees share the same root edge length, so at a given depth every box of
one tree is a translate of every box of the other. Boxes are kept as integer
lattice indices relative to the tree's own origin; node ranges are described
by a permutation sorted by box and an offsets array (CSR style).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DegenerateGeometryError",
    "PointCloud",
    "LevelGrid",
    "InteractionPair",
    "bounding_cubes",
    "subdivide",
    "restrict",
    "child_pairs",
    "classify",
    "classify_pairs",
    "offset_vectors",
    "read_points_binary",
    "write_points_binary",
    "read_points_csv",
    "load_points",
]

FAR = "far"
NEAR = "near"


class DegenerateGeometryError(ValueError):
    """Raised when the clouds span no volume at all (root edge of zero)."""


@dataclass(frozen=True)
class PointCloud:
    """Node coordinates plus the current box ordering.

    ``permutation[box_offsets[b]:box_offsets[b + 1]]`` lists the node ids held
    by box ``b`` of the matching :class:`LevelGrid`. ``positions`` is never
    copied when the cloud is refined; only the permutation is rewritten.
    """

    positions: np.ndarray
    permutation: np.ndarray
    box_offsets: np.ndarray

    @classmethod
    def from_positions(cls, positions) -> "PointCloud":
        pos = np.ascontiguousarray(positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {pos.shape}")
        if len(pos) == 0:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pos)):
            raise ValueError("point cloud contains non-finite coordinates")
        n = len(pos)
        return cls(pos, np.arange(n, dtype=np.int64), np.array([0, n], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_active(self) -> int:
        return int(self.box_offsets[-1])

    @property
    def n_boxes(self) -> int:
        return len(self.box_offsets) - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.box_offsets)

    def box_of_sorted(self) -> np.ndarray:
        """Box id of every entry of ``permutation``."""
        return np.repeat(np.arange(self.n_boxes), self.counts)

    def nodes(self, box: int) -> np.ndarray:
        return self.permutation[self.box_offsets[box]:self.box_offsets[box + 1]]

    @property
    def nbytes(self) -> int:
        return self.permutation.nbytes + self.box_offsets.nbytes


@dataclass(frozen=True)
class LevelGrid:
    """Occupied boxes of one tree at depth ``level``."""

    level: int
    edge: float
    origin: np.ndarray
    index: np.ndarray
    parent: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.index)

    @property
    def centers(self) -> np.ndarray:
        return self.origin + (self.index + 0.5) * self.edge

    @property
    def nbytes(self) -> int:
        extra = 0 if self.parent is None else self.parent.nbytes
        return self.index.nbytes + extra


@dataclass(frozen=True)
class InteractionPair:
    target_box: int
    source_box: int
    offset: tuple[int, int, int]
    tag: str


def _extent(pos: np.ndarray) -> tuple[np.ndarray, float]:
    lo = pos.min(axis=0)
    return lo, float((pos.max(axis=0) - lo).max())


def bounding_cubes(X: PointCloud, Y: PointCloud) -> tuple[LevelGrid, LevelGrid, float]:
    """Root cubes of common edge ``d0 = max(extent(X), extent(Y))``.

    Each cube sits at the minimal corner of its own cloud.
    """
    lo_x, dx = _extent(X.positions)
    lo_y, dy = _extent(Y.positions)
    d0 = max(dx, dy)
    if not d0 > 0.0:
        raise DegenerateGeometryError(
            "all nodes coincide: the bounding cube has zero edge length"
        )
    root = np.zeros((1, 3), dtype=np.int64)
    return LevelGrid(0, d0, lo_x, root), LevelGrid(0, d0, lo_y, root.copy()), d0


def subdivide(grid: LevelGrid, cloud: PointCloud) -> tuple[LevelGrid, PointCloud]:
    """Split every box of ``grid`` into its occupied octants.

    Nodes of each child are made contiguous by a stable sort on
    ``parent * 8 + octant``; empty children are dropped. Children of one parent
    are emitted together, in octant order.
    """
    edge = grid.edge / 2.0
    parent_of_node = cloud.box_of_sorted()
    pos = cloud.positions[cloud.permutation[: cloud.n_active]]
    # d_{l+1} = d_l / 2 exactly, so this floor refines the parent floor.
    lattice = np.floor((pos - grid.origin) / edge).astype(np.int64)
    base = 2 * grid.index[parent_of_node]
    np.clip(lattice, base, base + 1, out=lattice)
    bits = lattice - base
    del lattice, pos, base
    octant = (bits[:, 0] << 2) | (bits[:, 1] << 1) | bits[:, 2]
    key = parent_of_node * 8 + octant
    del bits, octant, parent_of_node
    order = np.argsort(key, kind="stable")
    key = key[order]
    perm = cloud.permutation[: cloud.n_active][order]
    del order

    if len(key):
        starts = np.flatnonzero(np.concatenate(([True], key[1:] != key[:-1])))
    else:
        starts = np.zeros(0, dtype=np.int64)
    ukey = key[starts]
    offsets = np.append(starts, len(key)).astype(np.int64)
    parent = ukey // 8
    oct_ = ukey % 8
    child_bits = np.stack([(oct_ >> 2) & 1, (oct_ >> 1) & 1, oct_ & 1], axis=1)
    index = 2 * grid.index[parent] + child_bits
    child = LevelGrid(grid.level + 1, edge, grid.origin, index, parent)
    return child, PointCloud(cloud.positions, perm, offsets)


def restrict(grid: LevelGrid, cloud: PointCloud, keep: np.ndarray) -> tuple[LevelGrid, PointCloud, np.ndarray]:
    """Drop boxes not flagged in ``keep`` (and their nodes).

    Returns the reduced grid and cloud and the old-to-new box id map
    (``-1`` for dropped boxes).
    """
    keep = np.asarray(keep, dtype=bool)
    counts = cloud.counts
    node_keep = np.repeat(keep, counts)
    perm = cloud.permutation[: cloud.n_active][node_keep]
    offsets = np.concatenate(([0], np.cumsum(counts[keep]))).astype(np.int64)
    remap = np.full(len(keep), -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    parent = None if grid.parent is None else grid.parent[keep]
    new_grid = LevelGrid(grid.level, grid.edge, grid.origin, grid.index[keep], parent)
    return new_grid, PointCloud(cloud.positions, perm, offsets), remap


def child_ranges(child: LevelGrid, n_parent: int) -> np.ndarray:
    """CSR offsets of the children of each parent box (children are grouped)."""
    counts = np.bincount(child.parent, minlength=n_parent)
    return np.concatenate(([0], np.cumsum(counts))).astype(np.int64)


def child_pairs(
    t_parent: np.ndarray,
    s_parent: np.ndarray,
    t_ranges: np.ndarray,
    s_ranges: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """All (target child, source child) combinations of the given parent pairs."""
    t0 = t_ranges[t_parent]
    s0 = s_ranges[s_parent]
    nt = t_ranges[t_parent + 1] - t0
    ns = s_ranges[s_parent + 1] - s0
    sizes = nt * ns
    total = int(sizes.sum())
    rep = np.repeat(np.arange(len(sizes)), sizes)
    local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    ns_r = ns[rep]
    t = t0[rep] + local // ns_r
    s = s0[rep] + local % ns_r
    return t, s


def offset_vectors(t_grid: LevelGrid, s_grid: LevelGrid, delta: np.ndarray) -> np.ndarray:
    """Center-to-center vectors ``c_t - c_s`` from integer lattice deltas.

    The result depends on ``delta`` only (plus the fixed origin shift), so two
    pairs sharing a delta get bitwise-identical vectors.
    """
    shift = t_grid.origin - s_grid.origin
    return shift + np.asarray(delta, dtype=np.float64) * t_grid.edge


def classify(t_grid: LevelGrid, s_grid: LevelGrid, t: np.ndarray, s: np.ndarray):
    """Admissibility of box pairs: far iff center distance > 2 * edge (strict).

    Returns ``(far_mask, delta)`` where ``delta`` is the integer lattice offset
    ``index_t - index_s`` keying translation-equivalent pairs.
    """
    delta = t_grid.index[t] - s_grid.index[s]
    r0 = offset_vectors(t_grid, s_grid, delta)
    far = np.einsum("ij,ij->i", r0, r0) > (2.0 * t_grid.edge) ** 2
    return far, delta


def classify_pairs(
    pairs: list[InteractionPair], t_grid: LevelGrid, s_grid: LevelGrid
) -> tuple[list[InteractionPair], list[InteractionPair]]:
    """Tag a list of pairs far or near."""
    if not pairs:
        return [], []
    t = np.array([p.target_box for p in pairs], dtype=np.int64)
    s = np.array([p.source_box for p in pairs], dtype=np.int64)
    mask, delta = classify(t_grid, s_grid, t, s)
    far, near = [], []
    for i, p in enumerate(pairs):
        off = tuple(int(v) for v in delta[i])
        if mask[i]:
            far.append(InteractionPair(p.target_box, p.source_box, off, FAR))
        else:
            near.append(InteractionPair(p.target_box, p.source_box, off, NEAR))
    return far, near


# -- point-cloud files -------------------------------------------------------


def read_points_binary(path) -> np.ndarray:
    """Little-endian float64 stream, three values per node."""
    data = np.fromfile(path, dtype="<f8")
    if data.size % 3:
        raise ValueError(f"{path}: {data.size} values is not a multiple of 3")
    return data.reshape(-1, 3).astype(np.float64)


def write_points_binary(path, points) -> None:
    np.ascontiguousarray(points, dtype="<f8").tofile(path)


def read_points_csv(path) -> np.ndarray:
    """CSV with x,y,z columns; a non-numeric first row is taken as header."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row[:3]]
            except ValueError:
                if i == 0:
                    continue
                raise
            if len(vals) != 3:
                raise ValueError(f"{path}: row {i + 1} has {len(vals)} columns")
            rows.append(vals)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def load_points(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in {".csv", ".txt"}:
        return read_points_csv(path)
    return read_points_binary(path)
