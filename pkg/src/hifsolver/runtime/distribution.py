"""Two-dimensional block-cyclic layout for group-distributed dense blocks.

A group of G ranks is arranged as a pr x pc mesh (nearest-square: pr is
the largest divisor of G not exceeding sqrt(G), so pr <= pc), matrix rows
and columns are tiled into fixed-size blocks, and block (bi, bj) belongs to
mesh position (bi mod pr, bj mod pc).  Mesh positions map to group members
row-major.  Every element has exactly one owner and per-rank block-row and
block-column counts differ by at most one, which bounds the storage
imbalance of any square slab.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCK = 32


def mesh_shape(size: int) -> tuple:
    """Nearest-square mesh (pr, pc) with pr * pc == size and pr <= pc."""
    if size < 1:
        raise ValueError(f"mesh needs a positive rank count, got {size}")
    pr = int(np.sqrt(size))
    while size % pr:
        pr -= 1
    return pr, size // pr


@dataclass(frozen=True)
class BlockDistribution:
    """Block-cyclic ownership of an n_rows x n_cols index space."""

    n_rows: int
    n_cols: int
    pr: int
    pc: int
    block: int = BLOCK

    @classmethod
    def for_group(
        cls, n_rows: int, n_cols: int, size: int, block: int = BLOCK
    ) -> "BlockDistribution":
        pr, pc = mesh_shape(size)
        return cls(n_rows=n_rows, n_cols=n_cols, pr=pr, pc=pc, block=block)

    @property
    def size(self) -> int:
        return self.pr * self.pc

    def mesh_coords(self, mesh_rank: int) -> tuple:
        return mesh_rank // self.pc, mesh_rank % self.pc

    def owner_of(self, i, j):
        """Mesh rank owning element (i, j); arrays broadcast."""
        i = np.asarray(i)
        j = np.asarray(j)
        return ((i // self.block) % self.pr) * self.pc + (j // self.block) % self.pc

    def mesh_row_of(self, i):
        return (np.asarray(i) // self.block) % self.pr

    def mesh_col_of(self, j):
        return (np.asarray(j) // self.block) % self.pc

    def local_row_of(self, i):
        """Packed local row index at the owning mesh row; arrays broadcast."""
        i = np.asarray(i)
        return (i // self.block // self.pr) * self.block + i % self.block

    def local_col_of(self, j):
        j = np.asarray(j)
        return (j // self.block // self.pc) * self.block + j % self.block

    def _span(self, total: int, stride: int, which: int) -> int:
        """Packed extent of the cyclic selection ``which`` out of ``stride``."""
        n_blocks = -(-total // self.block)
        mine = (n_blocks - which + stride - 1) // stride
        span = mine * self.block
        last = n_blocks - 1
        if mine and last % stride == which:
            span -= n_blocks * self.block - total
        return span

    def n_local_rows(self, mesh_row: int) -> int:
        return self._span(self.n_rows, self.pr, mesh_row)

    def n_local_cols(self, mesh_col: int) -> int:
        return self._span(self.n_cols, self.pc, mesh_col)

    def local_shape(self, mesh_rank: int) -> tuple:
        mr, mc = self.mesh_coords(mesh_rank)
        return self.n_local_rows(mr), self.n_local_cols(mc)

    def rows_of_mesh_row(self, mesh_row: int) -> np.ndarray:
        """Global row indices owned by a mesh row, ascending."""
        return _cyclic_indices(self.n_rows, self.block, self.pr, mesh_row)

    def cols_of_mesh_col(self, mesh_col: int) -> np.ndarray:
        return _cyclic_indices(self.n_cols, self.block, self.pc, mesh_col)


def _cyclic_indices(total: int, block: int, stride: int, which: int) -> np.ndarray:
    starts = np.arange(which * block, total, stride * block, dtype=np.int64)
    parts = [
        np.arange(s, min(s + block, total), dtype=np.int64) for s in starts
    ]
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(parts)
