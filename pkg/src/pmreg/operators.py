"""Restricted mass matrix, ghost penalty and the stabilized operator ``A + eps J``."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Callable

import numpy as np
import scipy.io
import scipy.sparse as sps

from .grid import FictitiousDomain, domain_rule
from .moments import MomentTable, full_cell_gram
from .splines import SplineField, SplineSpace, cell_gram_1d, scatter_basis


class NotConverged(RuntimeError):
    def __init__(self, report: "SolveReport"):
        self.report = report
        super().__init__(
            f"CG stopped after {report.iterations} iterations at relative residual {report.residual:.3e}"
        )


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    history: list = field(default_factory=list, repr=False)
    lambda_max: float | None = None
    lambda_min: float | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for i, r in enumerate(self.history):
                w.writerow([i, repr(float(r))])


def assemble_A(table: MomentTable) -> sps.csr_matrix:
    """``A[lam, mu] = int_Omega b_lam b_mu`` over the index set of the table."""
    return table.to_sparse()


def jump_weights(n: int) -> np.ndarray:
    """``D[j]``: jump of ``d^{n-1} b^n`` across its knot ``j`` (right minus left)."""
    return np.array([(-1) ** j * comb(n, j) for j in range(n + 1)], dtype=float)


def assemble_J(space: SplineSpace, fd: FictitiousDomain) -> sps.csr_matrix:
    """Ghost penalty ``sum_F sigma^{2n-1} int_F [d^{n-1} u / dn^{n-1}] [d^{n-1} v / dn^{n-1}]``.

    On face ``F`` with normal axis ``a`` between cells ``c`` and ``c + e_a``,
    ``b_lam`` with ``lam_a = c_a + 1 - j`` jumps by ``D[j] sigma^{1-n}`` times
    its tangential factors, whose products integrate to ``sigma * G`` per
    tangential axis.  Net scale: ``sigma^d``.
    """
    n, d, sigma = space.n, space.dim, space.sigma
    N = space.size
    faces = fd.ghost_faces
    if not len(faces):
        return sps.csr_matrix((N, N))
    D = jump_weights(n)
    G = cell_gram_1d(n)
    rows, cols, vals = [], [], []
    for a in range(d):
        F = faces[faces[:, 0] == a][:, 1:]
        if not len(F):
            continue
        tang = [b for b in range(d) if b != a]
        # local functions: normal offset j in 0..n, tangential offsets k_b in 0..n-1
        locs = list(itertools.product(range(n + 1), *[range(n)] * len(tang)))
        loc = np.array(locs)
        lam_off = np.zeros((len(locs), d), dtype=np.int64)
        lam_off[:, a] = 1 - loc[:, 0]
        for t, b in enumerate(tang):
            lam_off[:, b] = -loc[:, 1 + t]
        local = np.outer(D[loc[:, 0]], D[loc[:, 0]])
        for t in range(len(tang)):
            local = local * G[np.ix_(loc[:, 1 + t], loc[:, 1 + t])]
        local *= sigma**d
        ids = space.dense_ids(F[:, None, :] + lam_off[None, :, :])
        if np.any(ids < 0):
            raise RuntimeError("ghost face touches a function outside the index set")
        L = len(locs)
        rows.append(np.repeat(ids[:, :, None], L, axis=2).ravel())
        cols.append(np.repeat(ids[:, None, :], L, axis=1).ravel())
        vals.append(np.broadcast_to(local, (len(F), L, L)).ravel())
    J = sps.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)).tocsr()
    J.sum_duplicates()
    return ((J + J.T) * 0.5).tocsr()


@dataclass
class StabilizedOperator:
    """``A_eps = A + eps J`` on ``space`` with its Jacobi diagonal."""

    space: SplineSpace
    fd: FictitiousDomain
    A: sps.csr_matrix
    J: sps.csr_matrix
    eps: float = 1.0
    _matrix: sps.csr_matrix | None = field(default=None, repr=False)

    @classmethod
    def build(cls, space: SplineSpace, fd: FictitiousDomain, table: MomentTable, eps: float = 1.0) -> "StabilizedOperator":
        return cls(space, fd, assemble_A(table), assemble_J(space, fd), eps)

    @property
    def matrix(self) -> sps.csr_matrix:
        if self._matrix is None:
            self._matrix = (self.A + self.eps * self.J).tocsr() if self.eps else self.A.copy()
        return self._matrix

    @property
    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def with_eps(self, eps: float) -> "StabilizedOperator":
        return StabilizedOperator(self.space, self.fd, self.A, self.J, eps)

    def export_matrix_market(self, prefix) -> None:
        scipy.io.mmwrite(f"{prefix}_A.mtx", self.A, symmetry="symmetric")
        scipy.io.mmwrite(f"{prefix}_J.mtx", self.J, symmetry="symmetric")


def pcg(M: sps.spmatrix, b: np.ndarray, tol: float = 1e-12, max_iter: int | None = None, x0=None, precond=None):
    """Jacobi-preconditioned conjugate gradients on an SPD matrix.

    Stops on ``||b - M x|| <= tol ||b||``.  Returns ``(x, SolveReport)``.
    """
    b = np.asarray(b, dtype=float)
    N = len(b)
    max_iter = max_iter or 10 * N
    dinv = 1.0 / (M.diagonal() if precond is None else precond)
    x = np.zeros(N) if x0 is None else np.array(x0, dtype=float)
    r = b - M @ x if x0 is not None else b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(N), SolveReport(0, 0.0, True, [0.0])
    z = dinv * r
    p = z.copy()
    rz = r @ z
    hist = [np.linalg.norm(r) / bnorm]
    it = 0
    while it < max_iter:
        if hist[-1] <= tol:
            # the recursive residual can drift below the true one; replace and go on
            r = b - M @ x
            hist[-1] = np.linalg.norm(r) / bnorm
            if hist[-1] <= tol:
                break
            z = dinv * r
            p = z.copy()
            rz = r @ z
        q = M @ p
        pq = p @ q
        if not pq > 0.0:
            break  # loss of positive definiteness or breakdown
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        it += 1
        if it % 50 == 0:
            r = b - M @ x  # refresh against drift
        hist.append(np.linalg.norm(r) / bnorm)
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    true_res = np.linalg.norm(b - M @ x) / bnorm
    hist[-1] = true_res
    return x, SolveReport(it, float(true_res), bool(true_res <= tol), hist)


def solve(op: StabilizedOperator, rhs, tol: float = 1e-12, max_iter: int | None = None, x0=None, raise_on_fail: bool = True):
    """``A_eps c = rhs`` by Jacobi PCG; returns ``(SplineField, SolveReport)``.

    Raises :class:`NotConverged` when the true relative residual stays above
    ``tol`` unless ``raise_on_fail`` is False.
    """
    x, rep = pcg(op.matrix, rhs, tol, max_iter, x0)
    if not rep.converged and raise_on_fail:
        raise NotConverged(rep)
    return SplineField(op.space, x), rep


def load_vector(space: SplineSpace, fd: FictitiousDomain, u: Callable, points: int | None = None) -> np.ndarray:
    """``rhs_lam = int_Omega u b_lam`` by clipped-cell Gauss (``n+1`` points per direction)."""
    x, w = domain_rule(fd, points or space.n + 1, region="omega")
    return scatter_basis(space, x, w * np.asarray(u(x), dtype=float))


def approximate_extension(op: StabilizedOperator, u: Callable, tol: float = 1e-12, points: int | None = None):
    """``A_eps^{-1}`` applied to the functional ``v -> int_Omega u v``."""
    rhs = load_vector(op.space, op.fd, u, points)
    return solve(op, rhs, tol)


def riesz_representative(space: SplineSpace, fd: FictitiousDomain, values: np.ndarray, tol: float = 1e-13):
    """Spline ``f_sigma`` with ``int_{Omega_sigma} f_sigma b_lam = values[lam]``.

    Uses the full-cell Gram matrix on Omega_sigma, which is SPD and well
    conditioned.  Returns ``(SplineField, SolveReport)``.
    """
    G = full_cell_gram(space, fd)
    x, rep = pcg(G, values, tol)
    if not rep.converged:
        raise NotConverged(rep)
    return SplineField(space, x), rep


def dual_norm_proxy(space: SplineSpace, fd: FictitiousDomain, values: np.ndarray) -> float:
    """``||f_sigma||_{L2(Omega_sigma)}`` of the Riesz representative of ``values``."""
    f, _ = riesz_representative(space, fd, values)
    G = full_cell_gram(space, fd)
    return float(np.sqrt(max(f.coeffs @ (G @ f.coeffs), 0.0)))


@dataclass
class ConditionEstimate:
    lambda_max: float
    lambda_min: float
    cond: float
    cg_failed: bool = False


def estimate_condition(
    op: StabilizedOperator, eps: float | None = None, tol: float = 1e-6, max_iter: int = 500, seed: int = 0
) -> ConditionEstimate:
    """Extreme eigenvalues of ``sigma^{-d} (A + eps J)``.

    Power iteration for the largest, inverse iteration (PCG solves) for the
    smallest.  A failed inner solve yields ``cond = inf``.
    """
    opx = op if eps is None else op.with_eps(eps)
    M = opx.matrix * op.space.sigma ** (-op.space.dim)
    rng = np.random.default_rng(seed)
    N = M.shape[0]
    v = rng.standard_normal(N)
    v /= np.linalg.norm(v)
    lmax = 0.0
    for _ in range(max_iter):
        w = M @ v
        new = float(v @ w)
        v = w / np.linalg.norm(w)
        if abs(new - lmax) <= tol * abs(new):
            lmax = new
            break
        lmax = new
    v = rng.standard_normal(N)
    v /= np.linalg.norm(v)
    lmin = np.inf
    w = None
    for _ in range(max_iter):
        x0 = None if w is None else w / np.linalg.norm(w) / lmin  # M^{-1} v ~ v / lambda_min
        w, rep = pcg(M, v, tol=1e-10, max_iter=20 * N, x0=x0)
        if not rep.converged or not np.all(np.isfinite(w)):
            return ConditionEstimate(lmax, 0.0, np.inf, True)
        new = 1.0 / float(v @ w)
        v = w / np.linalg.norm(w)
        if abs(new - lmin) <= tol * abs(new):
            lmin = new
            break
        lmin = new
    rq = float(v @ (M @ v))  # Rayleigh quotient of the final iterate
    lmin = min(lmin, rq)
    if lmin <= 0.0:
        return ConditionEstimate(lmax, lmin, np.inf, False)
    return ConditionEstimate(lmax, lmin, lmax / lmin, False)
