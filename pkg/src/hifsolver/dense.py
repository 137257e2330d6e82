"""Dense kernels: symmetric LDL^T and the interpolative decomposition.

These routines back the block eliminations in the multilevel engine.  Both
are deterministic: identical input bytes give identical output bytes, which
the distributed layer leans on for cross-process reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg import blas as _blas

_PIVOT_RTOL = 1e-14

# Safety margin on the a-posteriori Frobenius certificate of the ID.  The
# rank seed comes from the pivot-decay rule at the requested precision; the
# growth pass then certifies the trailing mass against this fraction of
# eps * ||M||_F.  The margin absorbs the error amplification through the
# operator's near-null constant mode (periodic domain, small zeroth-order
# term), which otherwise pushes the one-shot solve error to the same order
# as eps instead of comfortably below it.
_ID_CERT_MARGIN = 0.125


@dataclass
class LdltFactor:
    """Unit lower-triangular factor and diagonal with A = L diag(d) L^T."""

    lower: np.ndarray
    diag: np.ndarray


@dataclass
class IdResult:
    """Column subset selection M[:, redundant] ~= M[:, skeleton] @ coeffs.

    skeleton and redundant are disjoint position lists covering all columns
    of the input; coeffs has shape (len(skeleton), len(redundant)).
    """

    skeleton: np.ndarray
    redundant: np.ndarray
    coeffs: np.ndarray


def ldlt(a: np.ndarray, overwrite: bool = False) -> LdltFactor:
    """Factor a symmetric matrix as L diag(d) L^T with unit-diagonal L.

    Positive definite input goes through a Cholesky factorization and is
    rescaled; symmetric indefinite input falls back to an unpivoted
    outer-product sweep.  A pivot smaller than 1e-14 times the largest
    diagonal magnitude raises ``numpy.linalg.LinAlgError``.

    With ``overwrite=True`` the input array may be destroyed; freshly
    extracted interior and redundant blocks are handed over this way so
    that the fallback sweep runs in place instead of doubling the
    allocation.  (The happy path still copies; the root block has its own
    fully in-place routine in factorization.py.)
    """
    a = np.asarray(a, dtype=np.float64)
    k = a.shape[0]
    if k == 0:
        return LdltFactor(lower=np.zeros((0, 0)), diag=np.zeros(0))
    scale = float(np.max(np.abs(np.diag(a)))) if k else 0.0
    try:
        chol = sla.cholesky(a, lower=True, check_finite=False)
    except sla.LinAlgError:
        work = a if overwrite else np.array(a, dtype=np.float64, copy=True)
        return _ldlt_unpivoted(work, scale)
    root = np.diag(chol).copy()
    if np.min(root * root) < _PIVOT_RTOL * scale:
        raise np.linalg.LinAlgError(
            f"LDL^T pivot below {_PIVOT_RTOL} of the diagonal scale"
        )
    chol /= root[None, :]
    return LdltFactor(lower=chol, diag=root * root)


_LDLT_PANEL = 64


def _ldlt_unpivoted(work: np.ndarray, scale: float) -> LdltFactor:
    """Right-looking unpivoted LDL^T for symmetric indefinite blocks.

    Blocked: panel columns get the scalar sweep, the trailing matrix one
    GEMM per panel.  Only the lower triangle of the workspace is read, so
    last-bit asymmetry of the GEMM output cannot leak into the factors.
    Runs fully in place: the scaled factor columns overwrite the strictly
    lower triangle of ``work``, which is then cleaned up and returned as
    the unit lower factor.
    """
    k = work.shape[0]
    diag = np.zeros(k)
    colraw = np.zeros(k)
    for j0 in range(0, k, _LDLT_PANEL):
        j1 = min(j0 + _LDLT_PANEL, k)
        for j in range(j0, j1):
            d = work[j, j]
            if abs(d) < _PIVOT_RTOL * scale:
                raise np.linalg.LinAlgError(
                    f"LDL^T pivot {d!r} at column {j} below {_PIVOT_RTOL} of "
                    "the diagonal scale; the block is numerically singular"
                )
            diag[j] = d
            raw = colraw[: k - j - 1]
            raw[:] = work[j + 1 :, j]
            col = work[j + 1 :, j]
            col /= d
            work[j + 1 : j1, j + 1 : j1] -= np.outer(
                col[: j1 - j - 1], raw[: j1 - j - 1]
            )
            work[j1:, j + 1 : j1] -= np.outer(col[j1 - j - 1 :], raw[: j1 - j - 1])
        if j1 < k:
            panel = work[j1:, j0:j1]
            work[j1:, j1:] -= (panel * diag[j0:j1]) @ panel.T
    for i in range(k - 1):
        work[i, i + 1 :] = 0.0
    np.fill_diagonal(work, 1.0)
    return LdltFactor(lower=work, diag=diag)


def unit_lower_solve(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L x = rhs for unit lower-triangular L (vector or matrix rhs)."""
    if lower.shape[0] == 0 or rhs.size == 0:
        return np.array(rhs, dtype=np.float64, copy=True)
    if rhs.ndim == 1:
        return _blas.dtrsv(lower, rhs, lower=1, trans=0, diag=1)
    b = np.asfortranarray(rhs, dtype=np.float64)
    return _blas.dtrsm(1.0, lower, b, side=0, lower=1, trans_a=0, diag=1)


def apply_unit_lower_inverse_transpose(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L^T x = rhs for unit lower-triangular L (vector or matrix rhs)."""
    if lower.shape[0] == 0 or rhs.size == 0:
        return np.array(rhs, dtype=np.float64, copy=True)
    if rhs.ndim == 1:
        return _blas.dtrsv(lower, rhs, lower=1, trans=1, diag=1)
    b = np.asfortranarray(rhs, dtype=np.float64)
    return _blas.dtrsm(1.0, lower, b, side=0, lower=1, trans_a=1, diag=1)


def unit_lower_mul(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Compute L @ rhs for unit lower-triangular L (vector or matrix rhs)."""
    if lower.shape[0] == 0 or rhs.size == 0:
        return np.array(rhs, dtype=np.float64, copy=True)
    if rhs.ndim == 1:
        return _blas.dtrmv(lower, rhs, lower=1, trans=0, diag=1)
    b = np.asfortranarray(rhs, dtype=np.float64)
    return _blas.dtrmm(1.0, lower, b, side=0, lower=1, trans_a=0, diag=1)


def unit_lower_tmul(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Compute L^T @ rhs for unit lower-triangular L (vector or matrix rhs)."""
    if lower.shape[0] == 0 or rhs.size == 0:
        return np.array(rhs, dtype=np.float64, copy=True)
    if rhs.ndim == 1:
        return _blas.dtrmv(lower, rhs, lower=1, trans=1, diag=1)
    b = np.asfortranarray(rhs, dtype=np.float64)
    return _blas.dtrmm(1.0, lower, b, side=0, lower=1, trans_a=1, diag=1)


def solve_diagonal(diag: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve diag(d) x = rhs (vector or matrix rhs)."""
    if rhs.ndim == 1:
        return rhs / diag
    return rhs / diag[:, None]


def mirror_lower(a: np.ndarray) -> np.ndarray:
    """Copy the strict lower triangle onto the upper, in place.

    GEMM output of an algebraically symmetric product is not guaranteed
    symmetric to the last bit; the level matrices must be, so every Schur
    block goes through here.
    """
    il, jl = np.tril_indices_from(a, k=-1)
    a[jl, il] = a[il, jl]
    return a


def interpolative_decomposition(m: np.ndarray, eps: float) -> IdResult:
    """Column interpolative decomposition at relative precision eps.

    The rank is seeded from the pivoted-QR diagonal decay,
    |R(k+1,k+1)| <= eps * |R(1,1)|, then grown while the trailing block
    violates the margined Frobenius certificate
    ||R[k:, k:]||_F <= margin * eps * ||M||_F, so the returned result always
    satisfies ||M[:, redundant] - M[:, skeleton] @ coeffs||_F <= eps*||M||_F
    with room to spare.

    eps = 0 is the exact mode: every column is skeleton.

    Parameters
    ----------
    m : ndarray, shape (rows, cols)
    eps : float
        Relative precision in [0, 1).

    Returns
    -------
    IdResult
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected a 2-d array")
    cols = m.shape[1]
    if eps < 0.0 or eps >= 1.0:
        raise ValueError(f"relative precision must be in [0, 1), got {eps}")
    if cols == 0:
        return IdResult(
            skeleton=np.zeros(0, dtype=np.int64),
            redundant=np.zeros(0, dtype=np.int64),
            coeffs=np.zeros((0, 0)),
        )
    if eps == 0.0:
        return IdResult(
            skeleton=np.arange(cols, dtype=np.int64),
            redundant=np.zeros(0, dtype=np.int64),
            coeffs=np.zeros((cols, 0)),
        )
    norm_m = float(np.linalg.norm(m))
    if norm_m == 0.0 or m.shape[0] == 0:
        return IdResult(
            skeleton=np.zeros(0, dtype=np.int64),
            redundant=np.arange(cols, dtype=np.int64),
            coeffs=np.zeros((0, cols)),
        )

    r, perm = sla.qr(m, mode="r", pivoting=True, check_finite=False)
    rdiag = np.abs(np.diag(r))
    kmax = rdiag.size
    cutoff = eps * rdiag[0]
    below = np.nonzero(rdiag <= cutoff)[0]
    rank = int(below[0]) if below.size else kmax

    # Trailing Frobenius mass of R[k:, k:] for every k, via a 2-d suffix sum.
    sq = r * r
    suffix = np.cumsum(np.cumsum(sq[::-1, ::-1], axis=0), axis=1)[::-1, ::-1]
    budget = (_ID_CERT_MARGIN * eps * norm_m) ** 2
    while rank < kmax and suffix[rank, rank] > budget:
        rank += 1

    skeleton = perm[:rank].astype(np.int64)
    redundant = perm[rank:].astype(np.int64)
    if redundant.size == 0:
        coeffs = np.zeros((rank, 0))
    else:
        coeffs = sla.solve_triangular(
            r[:rank, :rank], r[:rank, rank:], lower=False, check_finite=False
        )
    return IdResult(skeleton=skeleton, redundant=redundant, coeffs=coeffs)
