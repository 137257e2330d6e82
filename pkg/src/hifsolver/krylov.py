"""Right-preconditioned GMRES and the one-shot solve-error metric.

The factored inverse is accurate enough to serve either as a direct solver
(exact mode) or as a preconditioner; right preconditioning keeps the
reported residual equal to the true residual of the original system.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .factorization import HifFactorization, apply_inverse


@dataclass
class SolveReport:
    """Outcome of one preconditioned solve."""

    n_iter: int
    relative_residual: float
    converged: bool
    residual_history: list = field(default_factory=list)
    solve_seconds: float = 0.0
    e_s: float | None = None
    basis: np.ndarray | None = None


def gmres(
    apply_a,
    apply_precond,
    f: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 200,
    collect_basis: bool = False,
):
    """Full-orthogonalization GMRES on A M z = f, returning u = M z.

    Parameters
    ----------
    apply_a : callable(vector) -> vector
    apply_precond : callable or None
        Right preconditioner M (an approximate inverse of A); None means
        the identity.
    f : right-hand side
    tol : float in (0, 1)
        Target relative residual ``norm(A u - f) / norm(f)``.
    max_iter : int
        No restarting; the Krylov basis grows to at most this size.
    collect_basis : bool
        Stash the orthonormal basis on the report (testing hook).

    Returns
    -------
    (u, SolveReport)
        On non-convergence the best iterate is returned with
        ``converged=False``.

    Notes
    -----
    Modified Gram-Schmidt with one unconditional reorthogonalization pass;
    the least-squares problem is carried by Givens rotations, so the
    residual norm is available at every step without forming the iterate.
    """
    if not 0.0 < tol < 1.0:
        raise ValueError(f"tol must be in (0, 1), got {tol}")
    t0 = time.perf_counter()
    f = np.asarray(f, dtype=np.float64)
    m = f.size
    if apply_precond is None:
        apply_precond = lambda v: v  # noqa: E731
    b_norm = np.linalg.norm(f)
    if b_norm == 0.0:
        report = SolveReport(
            n_iter=0,
            relative_residual=0.0,
            converged=True,
            residual_history=[],
            solve_seconds=time.perf_counter() - t0,
        )
        return np.zeros(m), report

    basis = [f / b_norm]
    h_cols = []
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter)
    g = np.zeros(max_iter + 1)
    g[0] = b_norm
    history = []
    k_done = 0
    converged = False

    for k in range(max_iter):
        w = apply_a(apply_precond(basis[k]))
        h = np.zeros(k + 2)
        for i in range(k + 1):
            h[i] = basis[i] @ w
            w = w - h[i] * basis[i]
        for i in range(k + 1):
            c = basis[i] @ w
            h[i] += c
            w = w - c * basis[i]
        h[k + 1] = np.linalg.norm(w)
        breakdown = h[k + 1] == 0.0
        if not breakdown:
            basis.append(w / h[k + 1])
        # Rotate the new column through the accumulated Givens rotations.
        for i in range(k):
            tmp = cs[i] * h[i] + sn[i] * h[i + 1]
            h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1]
            h[i] = tmp
        denom = np.hypot(h[k], h[k + 1])
        if denom == 0.0:
            cs[k], sn[k] = 1.0, 0.0
        else:
            cs[k], sn[k] = h[k] / denom, h[k + 1] / denom
        h[k] = denom
        h[k + 1] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        h_cols.append(h[: k + 1])
        k_done = k + 1
        res = abs(g[k + 1]) / b_norm
        history.append(res)
        if res <= tol:
            converged = True
            break
        if breakdown:
            break

    r = np.zeros((k_done, k_done))
    for j, col in enumerate(h_cols):
        r[: j + 1, j] = col
    y = np.zeros(k_done)
    for j in range(k_done - 1, -1, -1):
        y[j] = (g[j] - r[j, j + 1 :] @ y[j + 1 :]) / r[j, j]
    z = np.zeros(m)
    for j in range(k_done):
        z += y[j] * basis[j]
    u = apply_precond(z)

    report = SolveReport(
        n_iter=k_done,
        relative_residual=history[-1] if history else 0.0,
        converged=converged,
        residual_history=history,
        solve_seconds=time.perf_counter() - t0,
        basis=np.stack(basis, axis=1) if collect_basis else None,
    )
    return u, report


def solve_error(fct, a, seed: int = 0) -> float:
    """Relative error of one factored-inverse application.

    Draws x from a seeded standard normal, forms A x, applies the factored
    inverse once and reports ``norm(x - F(A x)) / norm(x)``.

    ``fct`` may be a HifFactorization or any callable applying the inverse.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(a.shape[0])
    if isinstance(fct, HifFactorization):
        y = apply_inverse(fct, a @ x)
    else:
        y = fct(a @ x)
    return float(np.linalg.norm(x - y) / np.linalg.norm(x))
