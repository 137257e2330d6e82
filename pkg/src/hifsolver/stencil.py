"""Seven-point finite-difference assembly on the periodic grid.

The operator -div(a grad u) + b u is discretized with the standard
flux-conservative stencil: for point j and axis i,

    diag(j)      = (1/h^2) * sum of the six incident edge conductivities + b_j
    offdiag(j,i) = -(1/h^2) * a on the edge from j to j + e_i  (periodic)

Row sums therefore equal b_j up to roundoff, and the matrix is symmetric
positive definite whenever b > 0.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .fields import CoefficientField
from .grid import GridSpec


def assemble_stencil(spec: GridSpec, field: CoefficientField) -> sp.csc_matrix:
    """Assemble the stencil matrix in CSC form.

    Parameters
    ----------
    spec : GridSpec
    field : CoefficientField
        Edge conductivities and zeroth-order term; shapes must match spec.n.

    Returns
    -------
    scipy.sparse.csc_matrix
        Symmetric N x N matrix with at most 7 nonzeros per row.
    """
    n = spec.n
    if field.n != n:
        raise ValueError(f"field is for n={field.n}, grid has n={n}")
    inv_h2 = float(n) * float(n)
    ids = np.arange(spec.ndof, dtype=np.int64).reshape(n, n, n)

    edge_arrays = (field.ax, field.ay, field.az)
    diag = field.b.astype(np.float64, copy=True)
    for axis, a_edge in enumerate(edge_arrays):
        # Each edge contributes to both of its endpoints' diagonals.
        diag += inv_h2 * a_edge
        diag += inv_h2 * np.roll(a_edge, 1, axis=axis)

    rows = [ids.ravel()]
    cols = [ids.ravel()]
    vals = [diag.ravel()]
    for axis, a_edge in enumerate(edge_arrays):
        fwd = np.roll(ids, -1, axis=axis)
        off = (-inv_h2) * a_edge
        # Emit both triangles explicitly so the matrix is symmetric
        # entry-for-entry, not just up to floating point.
        rows.append(ids.ravel())
        cols.append(fwd.ravel())
        vals.append(off.ravel())
        rows.append(fwd.ravel())
        cols.append(ids.ravel())
        vals.append(off.ravel())

    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(spec.ndof, spec.ndof),
    ).tocsc()
    # n=2 would fold the +axis and -axis neighbors onto one entry and sum
    # them; grid construction keeps n >= 4 so every row has 7 distinct slots.
    return mat


def export_matrix_market(matrix: sp.spmatrix, path: str) -> None:
    """Write the matrix in Matrix Market coordinate format, symmetric."""
    from scipy.io import mmwrite

    mmwrite(path, matrix, symmetry="symmetric")
