"""Periodic grid geometry for the multilevel elimination hierarchy.

The domain is the unit cube [0, 1)^3 discretized by n points per dimension
with periodic wraparound, n = m * 2**L.  Points are identified by their
integer coordinates (x1, x2, x3) in [0, n)^3 and linearized lexicographically,

    dof = (x1 * n + x2) * n + x3.

Level ``l`` (0 <= l < L) tiles the grid with cubic cells of side
``s = m * 2**l``.  Within a level every point falls into exactly one of three
classes, determined by how many of its coordinates are multiples of s:

* zero multiples: the point lies strictly inside a cell (interior candidate),
* one multiple: the point lies on the open frame of a face,
* two or three multiples: the point lies on a cell edge or corner.

Faces are the open frames only: the face normal to axis d at plane
``x_d = s * c_d`` holds the points whose two tangential offsets inside the
adjacent cell are in 1..s-1.  Edge and corner points belong to no face; they
are picked up as interiors of coarser cells once the planes containing them
stop being cell boundaries.  This keeps the per-level face sets pairwise
disjoint, which the elimination engine relies on.

Each cell touches six faces, three on its low sides (which it owns) and
three on its high sides (owned by the +x/+y/+z neighbor cells, periodically).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np


class Cell(NamedTuple):
    """A level-l cell, addressed by its block coordinates."""

    level: int
    i: int
    j: int
    k: int


class Face(NamedTuple):
    """The low face of cell (i, j, k) at ``level`` with normal ``axis``.

    The face plane is ``x_axis = s * c_axis`` where s is the level cell size
    and c is the (i, j, k) triple; the in-plane extent is the open frame of
    that cell, offsets 1..s-1 along both tangential axes.
    """

    level: int
    axis: int
    i: int
    j: int
    k: int


@dataclass(frozen=True)
class GridSpec:
    """Geometry of one periodic problem instance.

    n is the point count per dimension, m the leaf cell size and levels the
    number of refinement levels L, with n = m * 2**levels exactly.
    """

    n: int
    m: int
    levels: int

    def __post_init__(self):
        if self.n != self.m * (1 << self.levels):
            raise ValueError(
                f"inconsistent grid: n={self.n} != m={self.m} * 2**{self.levels}"
            )
        if self.m > 64:
            raise ValueError(f"leaf cell size m={self.m} exceeds the cap of 64")

    @property
    def h(self) -> float:
        """Grid spacing, h * n == 1."""
        return 1.0 / self.n

    @property
    def ndof(self) -> int:
        """Total number of unknowns, n**3."""
        return self.n ** 3

    def level_size(self, level: int) -> int:
        """Cell side length at ``level``."""
        return self.m * (1 << level)

    def cells_per_dim(self, level: int) -> int:
        return self.n // self.level_size(level)


def build_grid(n: int, m: int | None = None) -> GridSpec:
    """Pick the (m, L) split for an n-point-per-dimension grid.

    Without an override the leaf size is the smallest divisor of n of the
    form n / 2**L that is at least 4, so the hierarchy is as deep as
    possible.  An explicit m must divide n with a power-of-two quotient.

    Parameters
    ----------
    n : int
        Points per dimension, at least 4.
    m : int, optional
        Explicit leaf cell size override (m >= 2).

    Returns
    -------
    GridSpec
    """
    if n < 4:
        raise ValueError(f"need at least 4 points per dimension, got n={n}")
    if m is None:
        m = n
        levels = 0
        while m % 2 == 0 and m // 2 >= 4:
            m //= 2
            levels += 1
    else:
        if m < 2:
            raise ValueError(
                f"leaf cell size m={m} is too small; single-point cells have "
                "no interior or face structure"
            )
        if n % m != 0:
            raise ValueError(f"m={m} does not divide n={n}")
        q = n // m
        if q & (q - 1):
            raise ValueError(f"n/m = {q} must be a power of two")
        levels = q.bit_length() - 1
    return GridSpec(n=n, m=m, levels=levels)


def dof_ids(spec: GridSpec, x1, x2, x3):
    """Linearize integer coordinates (arrays are fine) to DOF ids."""
    n = spec.n
    return (np.asarray(x1) * n + np.asarray(x2)) * n + np.asarray(x3)


def dof_coords(spec: GridSpec, ids) -> tuple:
    """Inverse of dof_ids."""
    ids = np.asarray(ids)
    n = spec.n
    return ids // (n * n), (ids // n) % n, ids % n


def cells(spec: GridSpec, level: int) -> Iterator[Cell]:
    """All level cells in lexicographic (i, j, k) order."""
    nc = spec.cells_per_dim(level)
    for i in range(nc):
        for j in range(nc):
            for k in range(nc):
                yield Cell(level, i, j, k)


def faces(spec: GridSpec, level: int) -> Iterator[Face]:
    """All level faces in canonical (axis, i, j, k) order."""
    nc = spec.cells_per_dim(level)
    for axis in range(3):
        for i in range(nc):
            for j in range(nc):
                for k in range(nc):
                    yield Face(level, axis, i, j, k)


def cell_index(spec: GridSpec, cell: Cell) -> int:
    """Lexicographic rank of a cell within its level."""
    nc = spec.cells_per_dim(cell.level)
    return (cell.i * nc + cell.j) * nc + cell.k


def face_index(spec: GridSpec, face: Face) -> int:
    """Canonical rank of a face within its level (axis-major)."""
    nc = spec.cells_per_dim(face.level)
    return ((face.axis * nc + face.i) * nc + face.j) * nc + face.k


def neighbor_cell(spec: GridSpec, cell: Cell, axis: int, step: int) -> Cell:
    """Periodic cell neighbor along one axis."""
    nc = spec.cells_per_dim(cell.level)
    c = [cell.i, cell.j, cell.k]
    c[axis] = (c[axis] + step) % nc
    return Cell(cell.level, *c)


def cell_dofs(spec: GridSpec, cell: Cell) -> np.ndarray:
    """All DOFs in the half-open cell box, sorted ascending."""
    s = spec.level_size(cell.level)
    r1 = np.arange(cell.i * s, (cell.i + 1) * s)
    r2 = np.arange(cell.j * s, (cell.j + 1) * s)
    r3 = np.arange(cell.k * s, (cell.k + 1) * s)
    x1, x2, x3 = np.meshgrid(r1, r2, r3, indexing="ij")
    return dof_ids(spec, x1, x2, x3).ravel()


def interior_box(spec: GridSpec, cell: Cell) -> np.ndarray:
    """Strict-interior DOFs of a cell (offsets 1..s-1 on every axis), sorted."""
    s = spec.level_size(cell.level)
    off = np.arange(1, s)
    x1, x2, x3 = np.meshgrid(
        cell.i * s + off, cell.j * s + off, cell.k * s + off, indexing="ij"
    )
    return dof_ids(spec, x1, x2, x3).ravel()


def interior_dofs(spec: GridSpec, cell: Cell, active: np.ndarray) -> np.ndarray:
    """Active DOFs strictly inside ``cell``.

    At level 0 this is the full (m-1)^3 interior; at coarser levels it is
    whatever skeleton and edge points survive inside the cell.

    Parameters
    ----------
    spec : GridSpec
    cell : Cell
    active : ndarray of bool, shape (ndof,)
        Current global active mask.

    Returns
    -------
    ndarray
        Sorted global DOF ids.
    """
    box = interior_box(spec, cell)
    return box[active[box]]


def face_dofs(spec: GridSpec, face: Face) -> np.ndarray:
    """Geometric DOFs of the open face frame, sorted ascending.

    The normal coordinate is pinned at the cell's low plane; the two
    tangential offsets run over 1..s-1.
    """
    s = spec.level_size(face.level)
    pos = (face.i, face.j, face.k)
    off = np.arange(1, s)
    axes = []
    for d in range(3):
        if d == face.axis:
            axes.append(np.array([pos[d] * s]))
        else:
            axes.append(pos[d] * s + off)
    x1, x2, x3 = np.meshgrid(*axes, indexing="ij")
    return dof_ids(spec, x1, x2, x3).ravel()


def face_active_dofs(spec: GridSpec, face: Face, active: np.ndarray) -> np.ndarray:
    """Currently active DOFs on the face frame, sorted."""
    fd = face_dofs(spec, face)
    return fd[active[fd]]


def surrounding_faces(spec: GridSpec, cell: Cell) -> list:
    """The six faces around a cell: low then high per axis.

    The three low entries are the faces the cell owns; the high entries
    belong to the +axis neighbors (periodically).  On a one-cell level the
    low and high entries coincide pairwise.
    """
    out = []
    for axis in range(3):
        out.append(Face(cell.level, axis, cell.i, cell.j, cell.k))
        nb = neighbor_cell(spec, cell, axis, +1)
        out.append(Face(cell.level, axis, nb.i, nb.j, nb.k))
    return out


def boundary_multiplicity(spec: GridSpec, level: int) -> np.ndarray:
    """Per-DOF count of coordinates that are multiples of the level size.

    0 marks interior candidates, 1 face points, >= 2 edge and corner points.
    """
    s = spec.level_size(level)
    coord = np.arange(spec.n)
    on = (coord % s == 0).astype(np.uint8)
    return (
        on[:, None, None] + on[None, :, None] + on[None, None, :]
    ).ravel()


def interior_candidate_mask(spec: GridSpec, level: int) -> np.ndarray:
    """Boolean mask of DOFs strictly inside some level cell."""
    return boundary_multiplicity(spec, level) == 0


def owning_cell(spec: GridSpec, level: int, dof: int) -> Cell:
    """The level cell whose half-open box contains a DOF."""
    s = spec.level_size(level)
    x1, x2, x3 = dof_coords(spec, dof)
    return Cell(level, int(x1) // s, int(x2) // s, int(x3) // s)
