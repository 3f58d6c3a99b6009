"""Dense two-phase primal simplex for ``min c.w  s.t.  A w = b, w >= 0``.

Sized for the per-basis-function weight problems: tens of constraints and
up to a few hundred candidate nodes.  Bland's rule guarantees termination
under degeneracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class LPError(RuntimeError):
    pass


class Infeasible(LPError):
    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(f"no nonnegative solution (phase-1 residual {residual:.3e})")


class Unbounded(LPError):
    pass


class MaxIterations(LPError):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    basis: np.ndarray
    iterations: int
    residual: float  # max |A x - b| on the original rows


def independent_rows(A: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Indices of a maximal well-conditioned row subset (pivoted QR of ``A^T``)."""
    if A.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diag > tol * diag[0]))
    return np.sort(piv[:rank])


def _pivot(T: np.ndarray, r: int, c: int) -> None:
    T[r] /= T[r, c]
    col = T[:, c].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])


def _run(T: np.ndarray, basis: np.ndarray, ncols: int, max_iter: int, tol: float, rule: str) -> int:
    """Simplex iterations on tableau ``T`` (last row = reduced costs, last column = rhs).

    ``rule="bland"`` enters the lowest-index improving column.  ``"dantzig"``
    enters the most negative reduced cost but falls back to Bland's rule for
    good after a run of degenerate pivots, which keeps termination
    guaranteed.
    """
    it = 0
    stall = 0
    bland = rule == "bland"
    while True:
        red = T[-1, :ncols]
        if bland:
            enter = np.flatnonzero(red < -tol)
            if not len(enter):
                return it
            c = int(enter[0])
        else:
            c = int(np.argmin(red))
            if red[c] >= -tol:
                return it
        col = T[:-1, c]
        pos = col > tol
        if not pos.any():
            raise Unbounded("objective unbounded below")
        ratios = np.full(len(col), np.inf)
        ratios[pos] = T[:-1, -1][pos] / col[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
        r = int(ties[np.argmin(basis[ties])])  # smallest basic index leaves
        _pivot(T, r, c)
        basis[r] = c
        it += 1
        stall = stall + 1 if best <= tol else 0
        if stall > 50:
            bland = True
        if it > max_iter:
            raise MaxIterations(f"simplex exceeded {max_iter} pivots")


def lp_solve(c, A, b, max_iter: int | None = None, tol: float = 1e-11, row_tol: float = 1e-12, rule: str = "bland") -> LPResult:
    """Minimise ``c.w`` subject to ``A w = b``, ``w >= 0``.

    ``rule`` selects the entering column: ``"bland"`` (default) or
    ``"dantzig"`` with a Bland fallback on degenerate stalls.
    Rows are equilibrated and redundant rows removed by pivoted QR before a
    phase-1/phase-2 simplex.  The basic solution is finally recomputed by a
    direct solve with the basis columns for accuracy.

    Raises :class:`Infeasible`, :class:`Unbounded` or :class:`MaxIterations`.
    """
    c = np.asarray(c, dtype=float)
    A0 = np.atleast_2d(np.asarray(A, dtype=float))
    b0 = np.asarray(b, dtype=float).ravel()
    m0, N = A0.shape
    max_iter = max_iter or 50 * (m0 + N) + 100
    scale = np.abs(A0).max(axis=1)
    scale[scale == 0.0] = 1.0
    A = A0 / scale[:, None]
    b = b0 / scale
    # rows of zeros with nonzero rhs are immediately infeasible
    zero = np.abs(A).max(axis=1) == 0.0 if N else np.ones(m0, dtype=bool)
    if np.any(np.abs(b[zero]) > row_tol):
        raise Infeasible(float(np.abs(b[zero]).max()))
    keep = independent_rows(A, row_tol)
    A, b = A[keep], b[keep]
    flip = b < 0
    A[flip] *= -1.0
    b[flip] *= -1.0
    m = len(b)

    # phase 1: artificials m columns after the N originals
    T = np.zeros((m + 1, N + m + 1))
    T[:m, :N] = A
    T[:m, N : N + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :N] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = np.arange(N, N + m)
    it = _run(T, basis, N + m, max_iter, tol, rule)
    infeas = -T[-1, -1]
    if infeas > 1e-9 * max(1.0, float(np.abs(b).sum())):
        raise Infeasible(infeas)

    # drive remaining artificials out of the basis (they sit at level zero)
    rows = list(range(m))
    for r in range(m):
        if basis[r] >= N:
            cand = np.flatnonzero(np.abs(T[r, :N]) > tol)
            if len(cand):
                _pivot(T, r, int(cand[0]))
                basis[r] = int(cand[0])
            else:
                rows.remove(r)  # redundant row survived the QR filter
    T = np.vstack([T[rows][:, list(range(N)) + [N + m]], np.zeros((1, N + 1))])
    basis = basis[rows]

    # phase 2
    T[-1, :N] = c
    T[-1, -1] = 0.0
    for r, j in enumerate(basis):
        T[-1] -= c[j] * T[r]
    it += _run(T, basis, N, max_iter - it, tol, rule)

    x = np.zeros(N)
    B = A[rows][:, basis]
    try:
        xb = np.linalg.solve(B, b[rows])
    except np.linalg.LinAlgError:
        xb = T[:-1, -1]
    if np.any(xb < -1e-9 * max(1.0, np.abs(xb).max())):
        xb = T[:-1, -1]  # direct solve lost feasibility; keep the tableau values
    x[basis] = np.maximum(xb, 0.0)
    residual = float(np.abs(A0 @ x - b0).max()) if m0 else 0.0
    return LPResult(x, float(c @ x), basis.copy(), it, residual)
