"""Octree process organization for the distributed factorization.

P = 8**k ranks sit at the leaves of a k-deep octree, one leaf per octant of
the domain, ranks assigned lexicographically by leaf coordinates.  Each
coarsening step merges sibling octants: the group responsible for a region
at tree depth t is the cube of 2**t x 2**t x 2**t leaves covering it, so a
group at depth t is the union of its eight depth-(t-1) children (the child
cubes whose halved coordinates give the parent's).  Factorization level l
runs on the groups at depth min(l, k): fine levels inside single ranks,
then sibling merges, then the whole machine in one fixed group for every
remaining level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import grid as g


@dataclass(frozen=True)
class ProcessGroup:
    """One cube of ranks at a fixed tree depth.

    members are ascending global ranks; the first member acts as group
    root for gathers and inter-group traffic.
    """

    depth: int
    coords: tuple
    members: tuple

    @property
    def root(self) -> int:
        return self.members[0]

    @property
    def size(self) -> int:
        return len(self.members)


class ProcessTree:
    """Rank octree for P = 8**k processes over an L-level grid.

    levels is the grid refinement depth L; the tree requires L >= k so
    that every leaf starts with a whole number of octants (at least one
    level-0 cell block per rank along each axis).
    """

    def __init__(self, size: int, levels: int):
        k = 0
        p = size
        while p > 1 and p % 8 == 0:
            p //= 8
            k += 1
        if p != 1 or size < 1:
            raise ValueError(f"process count {size} is not a power of 8")
        if levels < k:
            raise ValueError(
                f"misalignment: {size} ranks need a tree of depth {k} but the "
                f"grid has only {levels} levels; lower P or refine the grid"
            )
        self.size = size
        self.depth = k
        self.width = 1 << k
        self.levels = levels

    def leaf_rank(self, j1: int, j2: int, j3: int) -> int:
        w = self.width
        return (j1 * w + j2) * w + j3

    def leaf_coords(self, rank: int) -> tuple:
        w = self.width
        return rank // (w * w), (rank // w) % w, rank % w

    def tree_depth(self, level: int) -> int:
        """Tree depth active at factorization level ``level``."""
        return min(level, self.depth)

    def groups_per_dim(self, level: int) -> int:
        return 1 << (self.depth - self.tree_depth(level))

    def group(self, level: int, coords: tuple) -> ProcessGroup:
        t = self.tree_depth(level)
        side = 1 << t
        a, b, c = coords
        members = tuple(
            self.leaf_rank(j1, j2, j3)
            for j1 in range(a * side, (a + 1) * side)
            for j2 in range(b * side, (b + 1) * side)
            for j3 in range(c * side, (c + 1) * side)
        )
        return ProcessGroup(depth=t, coords=tuple(coords), members=members)

    def groups(self, level: int) -> list:
        """All groups active at a level, lexicographic by coordinates."""
        gpd = self.groups_per_dim(level)
        return [
            self.group(level, (a, b, c))
            for a in range(gpd)
            for b in range(gpd)
            for c in range(gpd)
        ]

    def cell_group_coords(self, level: int, cell: g.Cell) -> tuple:
        """Group coordinates owning a cell at its factorization level.

        Cells per group side is 2**(L - k) at every level at which more
        than one group is active, so a single shift maps cell blocks to
        groups; past the merge-complete level everything lands at (0,0,0).
        """
        if level > self.levels:
            raise ValueError(f"level {level} deeper than the grid allows")
        shift = self.levels - max(level, self.depth)
        return (cell.i >> shift, cell.j >> shift, cell.k >> shift)

    def group_of_cell(self, level: int, cell: g.Cell) -> ProcessGroup:
        return self.group(level, self.cell_group_coords(level, cell))

    def group_of_rank(self, level: int, rank: int) -> ProcessGroup:
        t = self.tree_depth(level)
        j1, j2, j3 = self.leaf_coords(rank)
        return self.group(level, (j1 >> t, j2 >> t, j3 >> t))

    def leaf_owner_of_dofs(self, spec: g.GridSpec) -> np.ndarray:
        """Rank owning each DOF's leaf octant, as an int32 array over N.

        The leaf octant of a DOF is its level-0 cell block coarsened to the
        tree width; this array fixes both the initial column distribution
        and the ownership of solution vector entries.
        """
        shift = spec.levels - self.depth
        block = spec.m << shift  # grid points per octant side
        ids = np.arange(spec.ndof, dtype=np.int64)
        x1, x2, x3 = g.dof_coords(spec, ids)
        return (
            ((x1 // block) * self.width + x2 // block) * self.width + x3 // block
        ).astype(np.int32)


def build_process_tree(size: int, spec: g.GridSpec) -> ProcessTree:
    """Validate P and build the rank octree for one problem geometry."""
    return ProcessTree(size, spec.levels)
