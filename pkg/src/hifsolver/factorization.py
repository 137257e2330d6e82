"""Multilevel sparse elimination with face compression.

The engine sweeps the level hierarchy from fine to coarse.  At each level it

1. eliminates every cell interior against the cell's surrounding faces
   (block Gaussian elimination, producing dense Schur updates on the face
   frame), then
2. compresses every face by an interpolative decomposition, splitting it
   into skeleton points that stay active and redundant points that are
   eliminated immediately.

What survives all levels is factored densely at the root.  The inverse of
the operator is then a product of thin block factors applied level by level
(a down sweep), a diagonal solve, and the transposed factors in reverse (an
up sweep).

Both phases of a level are bulk-synchronous: all cell eliminations read the
matrix as it stood at phase start and their updates merge afterwards in
deterministic batches ordered by cell index; all face decompositions read the
post-elimination matrix and their updates merge the same way.  Updates only
ever land on columns the rest of the phase never reads again (interior
columns are private to their cell, face columns are read once), so merging a
batch early changes no factor, and the batch boundaries depend only on the
update sizes in canonical order.  That ordering rule is what makes the
distributed variant reproduce this code bit for bit.

Levels interact through a single global active mask.  Face sets at a level
are pairwise disjoint open frames (see grid.py), so within a phase the dense
blocks never overlap.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import grid as g
from .dense import (
    _PIVOT_RTOL,
    IdResult,
    LdltFactor,
    _ldlt_unpivoted,
    apply_unit_lower_inverse_transpose,
    interpolative_decomposition,
    ldlt,
    mirror_lower,
    unit_lower_mul,
    unit_lower_solve,
    unit_lower_tmul,
)

# The engine realizes the symmetric sparse level matrix as a scipy CSC
# matrix over the full global index space plus the active mask; eliminated
# rows and columns linger until the end-of-level prune but every read goes
# through explicit active index lists, so stale entries are never observed.
SparseSymMatrix = sp.csc_matrix

_MAGIC = b"HIFC"
_FORMAT_VERSION = 1


@dataclass
class SchurUpdate:
    """Additive dense update on (ids x ids) produced by one elimination.

    Kept in block form (one sorted id list plus the dense square block)
    until the merge expands it band by band; that caps the peak size of the
    triplet scratch no matter how many cells a level has.  ``source`` is the
    canonical index of the producing cell or face within its level; merges
    sort by (row, col, source) so that contributions to a shared entry
    always sum in the same order no matter which rank produced them.
    """

    ids: np.ndarray
    block: np.ndarray
    source: int

    def triplet_count(self) -> int:
        return int(self.ids.size) * int(self.ids.size)


@dataclass
class ElimFactor:
    """One cell-interior elimination.

    coupling is X = A_II^{-1} A_FI^T; together with the unit lower factor
    and the diagonal it reproduces the block
    [[L^{-T}, -X], [0, I]] of the congruence transform.
    """

    cell: g.Cell
    interior: np.ndarray
    boundary: np.ndarray
    lower: np.ndarray
    diag: np.ndarray
    coupling: np.ndarray

    def nbytes(self) -> int:
        return (
            self.interior.nbytes
            + self.boundary.nbytes
            + self.lower.nbytes
            + self.diag.nbytes
            + self.coupling.nbytes
        )


@dataclass
class SkelFactor:
    """One face compression plus elimination of its redundant points.

    interp is the interpolation matrix T with
    M[:, redundant] ~= M[:, skeleton] @ T for the exterior coupling block M;
    back_coupling is Y = B_rr^{-1} B_sr^T of the post-interpolation face
    block.  skeleton and redundant are global DOF ids.
    """

    face: g.Face
    skeleton: np.ndarray
    redundant: np.ndarray
    interp: np.ndarray
    lower: np.ndarray
    diag: np.ndarray
    back_coupling: np.ndarray

    def nbytes(self) -> int:
        return (
            self.skeleton.nbytes
            + self.redundant.nbytes
            + self.interp.nbytes
            + self.lower.nbytes
            + self.diag.nbytes
            + self.back_coupling.nbytes
        )


@dataclass
class RootFactor:
    """Dense factorization of whatever stays active after the last level."""

    dofs: np.ndarray
    lower: np.ndarray

    def nbytes(self) -> int:
        return self.dofs.nbytes + self.lower.nbytes


@dataclass
class LevelFactors:
    elims: list
    skels: list


@dataclass
class HifFactorization:
    """The complete factored operator.

    diag_global holds every DOF's pivot: interior pivots, redundant-point
    pivots and root pivots each land exactly once, so the factored inverse
    is outer(down) * diag^{-1} * outer(up).
    """

    spec: g.GridSpec
    eps: float
    levels: list
    root: RootFactor
    diag_global: np.ndarray
    active_history: list = dc_field(default_factory=list)
    build_seconds: float = 0.0

    @property
    def root_size(self) -> int:
        return int(self.root.dofs.size)

    def factor_bytes(self) -> int:
        """Bytes held by the stored factors (arrays as stored)."""
        total = self.root.nbytes() + self.diag_global.nbytes
        for lf in self.levels:
            total += sum(f.nbytes() for f in lf.elims)
            total += sum(f.nbytes() for f in lf.skels)
        return total

    def factor_nonzeros(self) -> int:
        """Meaningful stored entries; triangular factors count one triangle."""

        def tri(k):
            return k * (k + 1) // 2

        total = tri(self.root.dofs.size) + self.diag_global.size
        for lf in self.levels:
            for f in lf.elims:
                total += tri(len(f.interior)) + f.coupling.size
            for f in lf.skels:
                total += (
                    tri(len(f.redundant)) + f.interp.size + f.back_coupling.size
                )
        return total


def _concat_ranges(starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Concatenation of arange(s, s+l) for each (s, l) pair."""
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    shifts = np.cumsum(lengths) - lengths
    return np.repeat(starts - shifts, lengths) + np.arange(total, dtype=np.int64)


def _column_entries(mat: sp.csc_matrix, cols: np.ndarray):
    """(row ids, values, local col ids) of all stored entries in ``cols``."""
    starts = mat.indptr[cols].astype(np.int64)
    lengths = (mat.indptr[cols + 1] - mat.indptr[cols]).astype(np.int64)
    idx = _concat_ranges(starts, lengths)
    local = np.repeat(np.arange(cols.size, dtype=np.int64), lengths)
    return mat.indices[idx], mat.data[idx], local


def extract_block(
    mat: sp.csc_matrix, rows: np.ndarray, cols: np.ndarray, pos: np.ndarray
) -> np.ndarray:
    """Dense copy of mat[rows, cols] using a reusable position buffer.

    ``pos`` is an int64 scratch array of length N primed with -1; it is
    restored before returning.  Stored entries outside ``rows`` are skipped,
    which is how stale eliminated rows stay invisible.
    """
    out = np.zeros((rows.size, cols.size))
    if rows.size == 0 or cols.size == 0:
        return out
    pos[rows] = np.arange(rows.size, dtype=np.int64)
    r, v, local = _column_entries(mat, cols)
    lr = pos[r]
    keep = lr >= 0
    out[lr[keep], local[keep]] = v[keep]
    pos[rows] = -1
    return out


def coupled_rows(
    mat: sp.csc_matrix,
    cols: np.ndarray,
    row_mask: np.ndarray,
    exclude: np.ndarray,
) -> np.ndarray:
    """Sorted active rows with a nonzero coupling to ``cols``, minus ``exclude``.

    Selection is by value, not by stored pattern: an explicit zero entry
    does not count as coupling.  This keeps the set identical whether the
    level matrix lives in a sparse container or (on the distributed side)
    in dense block storage, where pattern information does not exist.
    """
    r, v, _ = _column_entries(mat, cols)
    keep = np.zeros(mat.shape[0], dtype=bool)
    keep[r[v != 0.0]] = True
    keep &= row_mask
    keep[exclude] = False
    return np.nonzero(keep)[0]


_MERGE_BAND_TRIPLETS = 4_000_000

# Pending updates are merged into the level matrix whenever their expanded
# size passes this threshold, instead of all at once at the end of the
# elimination or skeletonization sweep.  The trigger is a pure function of
# the update sizes in production order, so any two runs over the same cells
# batch identically; small problems (n <= 32) never reach it and see a
# single merge per sweep.
_MERGE_BATCH_TRIPLETS = 16_000_000


def _reduce_triplets(rows, cols, vals, src):
    """Sort triplets by (col, row, source) and sum runs left to right.

    Column-major output so the reduced triplets drop straight into a CSC
    piece; the per-entry summation order (ascending source) is the same as
    any other sort that keeps sources ascending within an entry.
    """
    order = np.lexsort((src, rows, cols))
    rows, cols, vals = rows[order], cols[order], vals[order]
    first = np.ones(rows.size, dtype=bool)
    np.not_equal(cols[1:], cols[:-1], out=first[1:])
    first[1:] |= rows[1:] != rows[:-1]
    starts = np.nonzero(first)[0]
    sums = np.add.reduceat(vals, starts)
    return rows[starts], cols[starts], sums


def merge_schur_updates(
    mat: sp.csc_matrix, updates: list, col_filter: np.ndarray | None = None
) -> sp.csc_matrix:
    """Apply additive block updates in the canonical deterministic order.

    Triplets are expanded from the dense blocks, sorted by (row, col,
    source) and summed left to right per entry, then added to the matrix in
    a single sparse addition.  Expansion runs over bands of the column
    space so the triplet scratch stays bounded; each (row, col) pair falls
    in exactly one band, so banding cannot change any sum.  Band results
    are emitted directly as CSC pieces (bands ascend by column, so their
    concatenation is already in CSC order) and each update's block is
    released once every band covering it has run; the delta never exists
    in expanded triplet form all at once.  ``col_filter`` (a boolean mask)
    restricts the merge to owned columns; the distributed layer uses it,
    the sequential path passes None.
    """
    updates = [u for u in updates if u.ids.size]
    if not updates:
        return mat
    n = mat.shape[0]
    total = sum(u.triplet_count() for u in updates)
    n_bands = max(1, -(-total // _MERGE_BAND_TRIPLETS))
    if n_bands == 1:
        edges = np.array([0, n], dtype=np.int64)
    else:
        weight = np.zeros(n, dtype=np.int64)
        for u in updates:
            weight[u.ids] += u.ids.size
        cum = np.cumsum(weight)
        targets = (np.arange(1, n_bands, dtype=np.int64) * total) // n_bands
        inner = np.searchsorted(cum, targets, side="left") + 1
        edges = np.unique(np.concatenate(([0], inner, [n])))
    nnz_per_col = np.zeros(n, dtype=np.int64)
    out_rows, out_vals = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        rows_p, cols_p, vals_p, src_p = [], [], [], []
        for u in updates:
            if u.block is None:
                continue
            c0, c1 = np.searchsorted(u.ids, (lo, hi))
            if c0 != c1:
                k = u.ids.size
                cols_p.append(np.repeat(u.ids[c0:c1], k))
                rows_p.append(np.tile(u.ids, c1 - c0))
                vals_p.append(u.block[:, c0:c1].T.ravel())
                src_p.append(np.full((c1 - c0) * k, u.source, dtype=np.int64))
            if u.ids[-1] < hi:
                u.block = None
        if not rows_p:
            continue
        rows = np.concatenate(rows_p)
        cols = np.concatenate(cols_p)
        vals = np.concatenate(vals_p)
        src = np.concatenate(src_p)
        del rows_p, cols_p, vals_p, src_p
        if col_filter is not None:
            keep = col_filter[cols]
            rows, cols, vals, src = rows[keep], cols[keep], vals[keep], src[keep]
        if rows.size == 0:
            continue
        rr, cc, ss = _reduce_triplets(rows, cols, vals, src)
        del rows, cols, vals, src
        nnz_per_col[lo:hi] = np.bincount(cc - lo, minlength=hi - lo)
        out_rows.append(rr.astype(np.int32, copy=False))
        out_vals.append(ss)
    if not out_rows:
        return mat
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(nnz_per_col, out=indptr[1:])
    delta = sp.csc_matrix(
        (np.concatenate(out_vals), np.concatenate(out_rows), indptr),
        shape=mat.shape,
    )
    del out_rows, out_vals
    return (mat + delta).tocsc()


def prune_inactive(mat: sp.csc_matrix, active: np.ndarray) -> sp.csc_matrix:
    """Drop stored entries whose row or column has been eliminated.

    Values are carried over unchanged (no arithmetic), so pruning never
    perturbs later reads; it only controls memory.  Filters the CSC arrays
    directly; a COO round trip would transiently triple the footprint.
    """
    indptr = mat.indptr.astype(np.int64, copy=False)
    keep = active[mat.indices]
    keep &= np.repeat(active, np.diff(indptr))
    cum = np.zeros(indptr[-1] + 1, dtype=np.int64)
    np.cumsum(keep, out=cum[1:])
    new_indptr = cum[indptr]
    out = sp.csc_matrix(
        (mat.data[keep], mat.indices[keep], new_indptr), shape=mat.shape
    )
    return out


def eliminate_blocks(a_ii: np.ndarray, a_if: np.ndarray):
    """Dense elimination kernel shared by the sequential and parallel paths.

    a_ii is the interior block, a_if the (interior x boundary) coupling.
    Returns (LdltFactor, coupling X, schur) with
    X = A_II^{-1} A_IF and schur = -A_IF^T A_II^{-1} A_IF (symmetrized).
    a_ii may be destroyed; both callers extract it fresh.
    """
    ni, nf = a_if.shape
    fac = ldlt(a_ii, overwrite=True)
    w = unit_lower_solve(fac.lower, a_if)  # L^{-1} A_IF
    if w.ndim == 1:
        w = w.reshape(ni, nf)
    z = w / fac.diag[:, None]
    coupling = apply_unit_lower_inverse_transpose(fac.lower, z)  # X
    if coupling.ndim == 1:
        coupling = coupling.reshape(ni, nf)
    if nf:
        schur = -(w.T @ z)
        mirror_lower(schur)
    else:
        schur = np.zeros((0, 0))
    return fac, coupling, schur


def sparse_eliminate(
    a_level: sp.csc_matrix,
    interior: np.ndarray,
    boundary: np.ndarray,
    pos: np.ndarray | None = None,
    row_mask: np.ndarray | None = None,
    check: bool = True,
    source: int = 0,
    cell: g.Cell | None = None,
):
    """Eliminate ``interior`` against ``boundary`` in the level matrix.

    Parameters
    ----------
    a_level : csc matrix
        Current level matrix (full global shape).
    interior, boundary : sorted int arrays
        Global DOF ids.  ``boundary`` must cover every active DOF coupled
        to the interior; with the open-frame face geometry that is exactly
        the union of the six surrounding faces' active points.
    pos : optional int64 scratch array of length N primed with -1.
    row_mask : optional bool array
        Active mask; used only for the coupling-support check.
    check : bool
        Verify the A(rest, interior) = 0 precondition on active rows.

    Returns
    -------
    (ElimFactor, SchurUpdate)
        The update carries the dense -A_FI A_II^{-1} A_FI^T block on
        (boundary x boundary).
    """
    interior = np.asarray(interior, dtype=np.int64)
    boundary = np.asarray(boundary, dtype=np.int64)
    if pos is None:
        pos = np.full(a_level.shape[0], -1, dtype=np.int64)
    if interior.size == 0:
        fac = ElimFactor(
            cell=cell,
            interior=interior,
            boundary=boundary,
            lower=np.zeros((0, 0)),
            diag=np.zeros(0),
            coupling=np.zeros((0, boundary.size)),
        )
        return fac, SchurUpdate(
            ids=np.zeros(0, dtype=np.int64), block=np.zeros((0, 0)), source=source
        )

    if check:
        r, v, _ = _column_entries(a_level, interior)
        mark = np.zeros(a_level.shape[0], dtype=bool)
        mark[interior] = True
        mark[boundary] = True
        bad = ~mark[r] & (v != 0.0)
        if row_mask is not None:
            bad &= row_mask[r]
        if bad.any():
            where = np.unique(r[bad])[:8]
            raise ValueError(
                f"interior of cell {cell} couples outside its face set, "
                f"e.g. to DOFs {where.tolist()}"
            )

    a_ii = extract_block(a_level, interior, interior, pos)
    a_if = extract_block(a_level, boundary, interior, pos).T  # = A(I, F)
    try:
        fac, coupling, schur = eliminate_blocks(a_ii, a_if)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"interior block of cell {cell}: {err}") from err
    factor = ElimFactor(
        cell=cell,
        interior=interior,
        boundary=boundary,
        lower=fac.lower,
        diag=fac.diag,
        coupling=coupling,
    )
    update = SchurUpdate(ids=boundary, block=schur, source=source)
    return factor, update


def skeletonize_blocks(exterior: np.ndarray, a_ff: np.ndarray, eps: float):
    """Dense skeletonization kernel shared by both paths.

    exterior is M = A(R, F) for the active rows R coupled to the face
    outside itself; a_ff is the face block A(F, F).  Returns
    (s_loc, r_loc, coeffs, fac, back, schur) over local column positions;
    fac, back and schur are None when nothing is redundant.
    """
    idr = interpolative_decomposition(exterior, eps)
    s_loc = np.sort(idr.skeleton)
    r_loc = np.sort(idr.redundant)
    # Re-sort the split but keep coeffs consistent with it.
    if idr.redundant.size and (
        not np.array_equal(s_loc, idr.skeleton)
        or not np.array_equal(r_loc, idr.redundant)
    ):
        s_order = np.argsort(idr.skeleton, kind="stable")
        r_order = np.argsort(idr.redundant, kind="stable")
        coeffs = idr.coeffs[np.ix_(s_order, r_order)]
    else:
        coeffs = idr.coeffs
    if r_loc.size == 0:
        return s_loc, r_loc, coeffs, None, None, None

    a_ss = a_ff[np.ix_(s_loc, s_loc)]
    a_sr = a_ff[np.ix_(s_loc, r_loc)]
    a_rr = a_ff[np.ix_(r_loc, r_loc)]
    t = coeffs
    ts_r = t.T @ a_sr
    p = a_ss @ t
    cross = t.T @ p
    mirror_lower(cross)
    b_rr = a_rr - ts_r - ts_r.T + cross
    mirror_lower(b_rr)
    b_sr = a_sr - p
    fac = ldlt(b_rr, overwrite=True)
    w = unit_lower_solve(fac.lower, b_sr.T)  # L^{-1} B_rs
    if w.ndim == 1:
        w = w.reshape(r_loc.size, s_loc.size)
    z = w / fac.diag[:, None]
    back = apply_unit_lower_inverse_transpose(fac.lower, z)  # Y
    if back.ndim == 1:
        back = back.reshape(r_loc.size, s_loc.size)
    schur = -(w.T @ z)
    mirror_lower(schur)
    return s_loc, r_loc, t, fac, back, schur


def skeletonize_face(
    a_level: sp.csc_matrix,
    face_ids: np.ndarray,
    eps: float,
    pos: np.ndarray | None = None,
    row_mask: np.ndarray | None = None,
    source: int = 0,
    face: g.Face | None = None,
):
    """Compress one face frame and eliminate its redundant points.

    The exterior coupling block M = A(R, F), with R the active DOFs coupled
    to the face outside itself, is passed to the interpolative
    decomposition.  The redundant columns are then decoupled by the
    interpolation congruence and eliminated against the skeleton, producing
    a dense Schur update on (skeleton x skeleton) only.

    Returns (SkelFactor, SchurUpdate or None); the update is None when
    nothing is redundant (always the case at eps = 0).
    """
    face_ids = np.asarray(face_ids, dtype=np.int64)
    if pos is None:
        pos = np.full(a_level.shape[0], -1, dtype=np.int64)
    if row_mask is None:
        row_mask = np.ones(a_level.shape[0], dtype=bool)
    if face_ids.size == 0:
        raise ValueError(f"face {face} has no active DOFs to skeletonize")

    rest = coupled_rows(a_level, face_ids, row_mask, exclude=face_ids)
    exterior = extract_block(a_level, rest, face_ids, pos)
    a_ff = extract_block(a_level, face_ids, face_ids, pos)
    try:
        s_loc, r_loc, t, fac, back, schur = skeletonize_blocks(exterior, a_ff, eps)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"redundant block of face {face}: {err}") from err
    skeleton = face_ids[s_loc]
    redundant = face_ids[r_loc]

    if redundant.size == 0:
        factor = SkelFactor(
            face=face,
            skeleton=skeleton,
            redundant=redundant,
            interp=np.zeros((skeleton.size, 0)),
            lower=np.zeros((0, 0)),
            diag=np.zeros(0),
            back_coupling=np.zeros((0, skeleton.size)),
        )
        return factor, None

    factor = SkelFactor(
        face=face,
        skeleton=skeleton,
        redundant=redundant,
        interp=t,
        lower=fac.lower,
        diag=fac.diag,
        back_coupling=back,
    )
    update = SchurUpdate(ids=skeleton, block=schur, source=source)
    return factor, update


def factor_root_block(
    mat: sp.csc_matrix, root_ids: np.ndarray, pos: np.ndarray
) -> LdltFactor:
    """Dense-factor the final level block A(root, root) without a spare copy.

    The root block is the dense memory peak of a large build.  The happy
    path runs Cholesky inside the extracted buffer: the block is symmetric,
    so its transpose view holds the same matrix while being Fortran ordered,
    which LAPACK overwrites without copying.  Values match ``ldlt`` bit for
    bit.  If the block turns out indefinite the buffer is garbage, so it is
    extracted again for the in-place unpivoted sweep; keeping ``mat`` alive
    until this returns costs less than the dense copy it avoids.
    """
    a_rr = extract_block(mat, root_ids, root_ids, pos)
    k = a_rr.shape[0]
    if k == 0:
        return LdltFactor(lower=np.zeros((0, 0)), diag=np.zeros(0))
    scale = float(np.max(np.abs(np.diag(a_rr))))
    try:
        chol = sla.cholesky(a_rr.T, lower=True, overwrite_a=True, check_finite=False)
    except sla.LinAlgError:
        a_rr = extract_block(mat, root_ids, root_ids, pos)
        return _ldlt_unpivoted(a_rr, scale)
    root = np.diag(chol).copy()
    if np.min(root * root) < _PIVOT_RTOL * scale:
        raise np.linalg.LinAlgError(
            f"LDL^T pivot below {_PIVOT_RTOL} of the diagonal scale"
        )
    chol /= root[None, :]
    return LdltFactor(lower=chol, diag=root * root)


def factorize(
    a: sp.spmatrix,
    spec: g.GridSpec,
    eps: float,
    check: bool = True,
    progress=None,
) -> HifFactorization:
    """Factor the stencil matrix at relative precision eps.

    eps = 0 keeps every face point (no compression) and yields an exact
    factorization up to roundoff.

    Parameters
    ----------
    a : sparse symmetric matrix, shape (n^3, n^3)
    spec : GridSpec
    eps : float
    check : bool
        Keep the per-cell coupling-support verification on.
    progress : optional callable
        Called after each level with a dict of level, active count and
        level-matrix nonzeros; handy for long builds.

    Returns
    -------
    HifFactorization
    """
    t0 = time.perf_counter()
    n_dof = spec.ndof
    if a.shape != (n_dof, n_dof):
        raise ValueError(f"matrix shape {a.shape} does not match spec N={n_dof}")
    mat = sp.csc_matrix(a, copy=True)
    mat.sort_indices()
    active = np.ones(n_dof, dtype=bool)
    diag_global = np.zeros(n_dof)
    pos = np.full(n_dof, -1, dtype=np.int64)
    levels = []
    history = [n_dof]

    for level in range(spec.levels):
        elims = []
        updates = []
        pending = 0
        for cell in g.cells(spec, level):
            interior = g.interior_dofs(spec, cell, active)
            if interior.size == 0:
                continue
            boundary = _cell_boundary(spec, cell, active)
            factor, update = sparse_eliminate(
                mat,
                interior,
                boundary,
                pos=pos,
                row_mask=active,
                check=check,
                source=g.cell_index(spec, cell),
                cell=cell,
            )
            elims.append(factor)
            updates.append(update)
            diag_global[interior] = factor.diag
            pending += update.triplet_count()
            if pending > _MERGE_BATCH_TRIPLETS:
                mat = merge_schur_updates(mat, updates)
                updates = []
                pending = 0
        mat = merge_schur_updates(mat, updates)
        active &= ~g.interior_candidate_mask(spec, level)

        skels = []
        supdates = []
        pending = 0
        for face in g.faces(spec, level):
            fd = g.face_active_dofs(spec, face, active)
            if fd.size == 0:
                continue
            factor, update = skeletonize_face(
                mat,
                fd,
                eps,
                pos=pos,
                row_mask=active,
                source=g.face_index(spec, face),
                face=face,
            )
            if update is None:
                continue
            skels.append(factor)
            supdates.append(update)
            diag_global[factor.redundant] = factor.diag
            pending += update.triplet_count()
            if pending > _MERGE_BATCH_TRIPLETS:
                mat = merge_schur_updates(mat, supdates)
                supdates = []
                pending = 0
        mat = merge_schur_updates(mat, supdates)
        for factor in skels:
            active[factor.redundant] = False
        mat = prune_inactive(mat, active)
        levels.append(LevelFactors(elims=elims, skels=skels))
        history.append(int(active.sum()))
        if progress is not None:
            progress({"level": level, "active": history[-1], "nnz": int(mat.nnz)})

    root_ids = np.nonzero(active)[0]
    try:
        fac = factor_root_block(mat, root_ids, pos)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"root block: {err}") from err
    del mat
    diag_global[root_ids] = fac.diag
    root = RootFactor(dofs=root_ids, lower=fac.lower)
    return HifFactorization(
        spec=spec,
        eps=eps,
        levels=levels,
        root=root,
        diag_global=diag_global,
        active_history=history,
        build_seconds=time.perf_counter() - t0,
    )


def _cell_boundary(spec: g.GridSpec, cell: g.Cell, active: np.ndarray) -> np.ndarray:
    """Active DOFs on the six faces around a cell, deduplicated and sorted."""
    seen = set()
    parts = []
    for face in g.surrounding_faces(spec, cell):
        if face in seen:
            continue
        seen.add(face)
        parts.append(g.face_active_dofs(spec, face, active))
    ids = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    ids = np.unique(ids)
    return ids


def apply_inverse(fct: HifFactorization, x: np.ndarray) -> np.ndarray:
    """Apply the factored inverse to a vector."""
    u = np.array(x, dtype=np.float64, copy=True)
    for lf in fct.levels:
        for f in lf.elims:
            ui = u[f.interior]
            if f.boundary.size:
                u[f.boundary] -= f.coupling.T @ ui
            u[f.interior] = unit_lower_solve(f.lower, ui)
        for f in lf.skels:
            ur = u[f.redundant] - f.interp.T @ u[f.skeleton]
            u[f.skeleton] -= f.back_coupling.T @ ur
            u[f.redundant] = unit_lower_solve(f.lower, ur)
    ids = fct.root.dofs
    u[ids] = unit_lower_solve(fct.root.lower, u[ids])
    u /= fct.diag_global
    u[ids] = apply_unit_lower_inverse_transpose(fct.root.lower, u[ids])
    for lf in reversed(fct.levels):
        for f in reversed(lf.skels):
            ur = apply_unit_lower_inverse_transpose(f.lower, u[f.redundant])
            ur -= f.back_coupling @ u[f.skeleton]
            u[f.redundant] = ur
            u[f.skeleton] -= f.interp @ ur
        for f in reversed(lf.elims):
            ui = apply_unit_lower_inverse_transpose(f.lower, u[f.interior])
            if f.boundary.size:
                ui -= f.coupling @ u[f.boundary]
            u[f.interior] = ui
    return u


def apply_forward(fct: HifFactorization, x: np.ndarray) -> np.ndarray:
    """Apply the factored operator itself (approximates A @ x).

    Inverts each factor application of apply_inverse in the opposite order.
    """
    u = np.array(x, dtype=np.float64, copy=True)
    for lf in fct.levels:
        for f in lf.elims:
            ui = u[f.interior]
            if f.boundary.size:
                ui = ui + f.coupling @ u[f.boundary]
            u[f.interior] = unit_lower_tmul(f.lower, ui)
        for f in lf.skels:
            u[f.skeleton] += f.interp @ u[f.redundant]
            ur = u[f.redundant] + f.back_coupling @ u[f.skeleton]
            u[f.redundant] = unit_lower_tmul(f.lower, ur)
    ids = fct.root.dofs
    u[ids] = unit_lower_tmul(fct.root.lower, u[ids])
    u *= fct.diag_global
    u[ids] = unit_lower_mul(fct.root.lower, u[ids])
    for lf in reversed(fct.levels):
        for f in reversed(lf.skels):
            m = unit_lower_mul(f.lower, u[f.redundant])
            u[f.skeleton] += f.back_coupling.T @ m
            u[f.redundant] = m + f.interp.T @ u[f.skeleton]
        for f in reversed(lf.elims):
            ui = unit_lower_mul(f.lower, u[f.interior])
            u[f.interior] = ui
            if f.boundary.size:
                u[f.boundary] += f.coupling.T @ ui
    return u


def _write_array(fh, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(fh, count: int, dtype: str) -> np.ndarray:
    raw = fh.read(count * np.dtype(dtype).itemsize)
    return np.frombuffer(raw, dtype=dtype).copy()


def save_factorization(fct: HifFactorization, path) -> None:
    """Serialize a factorization to the versioned binary container.

    Layout: magic, format version, grid header (n, m, level count, eps),
    per-level factor counts, then the factors in application order
    (eliminations before compressions, fine levels first), the root factor
    and the global pivot vector.  Everything is little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<IIIId",
                _FORMAT_VERSION,
                fct.spec.n,
                fct.spec.m,
                fct.spec.levels,
                fct.eps,
            )
        )
        for lf in fct.levels:
            fh.write(struct.pack("<II", len(lf.elims), len(lf.skels)))
        for lf in fct.levels:
            for f in lf.elims:
                fh.write(struct.pack("<IIII", *f.cell))
                fh.write(struct.pack("<II", f.interior.size, f.boundary.size))
                _write_array(fh, f.interior, "<i8")
                _write_array(fh, f.boundary, "<i8")
                _write_array(fh, f.lower, "<f8")
                _write_array(fh, f.diag, "<f8")
                _write_array(fh, f.coupling, "<f8")
            for f in lf.skels:
                fh.write(struct.pack("<IIIII", *f.face))
                fh.write(struct.pack("<II", f.skeleton.size, f.redundant.size))
                _write_array(fh, f.skeleton, "<i8")
                _write_array(fh, f.redundant, "<i8")
                _write_array(fh, f.interp, "<f8")
                _write_array(fh, f.lower, "<f8")
                _write_array(fh, f.diag, "<f8")
                _write_array(fh, f.back_coupling, "<f8")
        fh.write(struct.pack("<Q", fct.root.dofs.size))
        _write_array(fh, fct.root.dofs, "<i8")
        _write_array(fh, fct.root.lower, "<f8")
        _write_array(fh, fct.diag_global, "<f8")
        fh.write(struct.pack("<I", len(fct.active_history)))
        _write_array(fh, np.asarray(fct.active_history), "<i8")


def load_factorization(path) -> HifFactorization:
    """Read a factorization written by save_factorization."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a factor container (magic {magic!r})")
        version, n, m, n_levels, eps = struct.unpack("<IIIId", fh.read(24))
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported container version {version}")
        spec = g.GridSpec(n=n, m=m, levels=n_levels)
        counts = [struct.unpack("<II", fh.read(8)) for _ in range(n_levels)]
        levels = []
        for n_elims, n_skels in counts:
            elims = []
            for _ in range(n_elims):
                cell = g.Cell(*struct.unpack("<IIII", fh.read(16)))
                ni, nb = struct.unpack("<II", fh.read(8))
                interior = _read_array(fh, ni, "<i8")
                boundary = _read_array(fh, nb, "<i8")
                lower = _read_array(fh, ni * ni, "<f8").reshape(ni, ni)
                diag = _read_array(fh, ni, "<f8")
                coupling = _read_array(fh, ni * nb, "<f8").reshape(ni, nb)
                elims.append(
                    ElimFactor(cell, interior, boundary, lower, diag, coupling)
                )
            skels = []
            for _ in range(n_skels):
                face = g.Face(*struct.unpack("<IIIII", fh.read(20)))
                ns, nr = struct.unpack("<II", fh.read(8))
                skeleton = _read_array(fh, ns, "<i8")
                redundant = _read_array(fh, nr, "<i8")
                interp = _read_array(fh, ns * nr, "<f8").reshape(ns, nr)
                lower = _read_array(fh, nr * nr, "<f8").reshape(nr, nr)
                diag = _read_array(fh, nr, "<f8")
                back = _read_array(fh, nr * ns, "<f8").reshape(nr, ns)
                skels.append(
                    SkelFactor(face, skeleton, redundant, interp, lower, diag, back)
                )
            levels.append(LevelFactors(elims=elims, skels=skels))
        (root_size,) = struct.unpack("<Q", fh.read(8))
        root_ids = _read_array(fh, root_size, "<i8")
        root_lower = _read_array(fh, root_size * root_size, "<f8").reshape(
            root_size, root_size
        )
        diag_global = _read_array(fh, spec.ndof, "<f8")
        (hist_len,) = struct.unpack("<I", fh.read(4))
        history = _read_array(fh, hist_len, "<i8").tolist()
    return HifFactorization(
        spec=spec,
        eps=eps,
        levels=levels,
        root=RootFactor(dofs=root_ids, lower=root_lower),
        diag_global=diag_global,
        active_history=history,
    )


def apply_congruence_transform(
    fct: HifFactorization, x: np.ndarray, transpose: bool = False
) -> np.ndarray:
    """Apply the accumulated outer congruence factor (or its transpose).

    With W the product of all per-level block transforms and the root
    triangular solve, the factored inverse is W diag^{-1} W^T; this helper
    exposes W for the dense congruence oracle W^T A W = diag.
    """
    u = np.array(x, dtype=np.float64, copy=True)
    ids = fct.root.dofs
    if transpose:
        for lf in fct.levels:
            for f in lf.elims:
                ui = u[f.interior]
                if f.boundary.size:
                    u[f.boundary] -= f.coupling.T @ ui
                u[f.interior] = unit_lower_solve(f.lower, ui)
            for f in lf.skels:
                ur = u[f.redundant] - f.interp.T @ u[f.skeleton]
                u[f.skeleton] -= f.back_coupling.T @ ur
                u[f.redundant] = unit_lower_solve(f.lower, ur)
        u[ids] = unit_lower_solve(fct.root.lower, u[ids])
    else:
        u[ids] = apply_unit_lower_inverse_transpose(fct.root.lower, u[ids])
        for lf in reversed(fct.levels):
            for f in reversed(lf.skels):
                ur = apply_unit_lower_inverse_transpose(f.lower, u[f.redundant])
                ur -= f.back_coupling @ u[f.skeleton]
                u[f.redundant] = ur
                u[f.skeleton] -= f.interp @ ur
            for f in reversed(lf.elims):
                ui = apply_unit_lower_inverse_transpose(f.lower, u[f.interior])
                if f.boundary.size:
                    ui -= f.coupling @ u[f.boundary]
                u[f.interior] = ui
    return u
