"""Gram moments ``int_Omega b_lam b_mu`` on cut grids via boundary integrals.

On a cut cell the product ``b_lam b_mu`` is a tensor polynomial.  Writing it
as the divergence of ``(A_1(x_1) * prod_{a>1} B_a(x_a), 0, ...)`` with
``A_1`` the antiderivative of the axis-1 factor turns the area integral over
``Q ∩ Omega`` into a line integral over the edges of the clipped polygon.  The
edges consist of pieces of the boundary mesh and of the cell faces, so this
is the boundary reduction applied cell by cell; summing cells gives the
reduction over any union of cells.  Interior cells use the closed-form tensor
Gram.
"""

from __future__ import annotations

import hashlib
import itertools
import os
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sps

from .geometry import BoundaryMesh, ClippedCell, clip_cell, region_rule
from .grid import CUT, INTERIOR, FictitiousDomain
from .splines import (
    SplineSpace,
    cell_gram_1d,
    gauss_legendre_01,
    local_basis,
    piece_coefficients,
)

CACHE_VERSION = 1


@lru_cache(maxsize=None)
def _product_antiderivative(n: int) -> np.ndarray:
    """``P[k, l, j]``: ``int_0^t b(s+k) b(s+l) ds = sum_j P[k, l, j] t^j``."""
    C = piece_coefficients(n)
    P = np.zeros((n, n, 2 * n))
    for k in range(n):
        for l in range(n):
            prod = np.convolve(C[k], C[l])
            P[k, l, 1:] = prod / np.arange(1, 2 * n)
    return P


def _eval_product_antiderivative(n: int, t: np.ndarray) -> np.ndarray:
    P = _product_antiderivative(n)
    out = np.zeros(t.shape + (n, n))
    for j in range(2 * n - 1, -1, -1):
        out = out * t[..., None, None] + P[:, :, j]
    return out


def gram_1d(n: int, offset: int) -> float:
    """``int b^n(x) b^n(x - offset) dx`` (zero for ``|offset| >= n``)."""
    offset = abs(int(offset))
    if offset >= n:
        return 0.0
    G = cell_gram_1d(n)
    # cells where both live: b(t+k) and b(t+k-offset) with k-offset >= 0
    return float(sum(G[k, k - offset] for k in range(offset, n)))


def fullspace_moment(n: int, offset, sigma: float = 1.0) -> float:
    """``int_{R^d} b_lam b_{lam+offset}`` as a product of 1D Gram values."""
    offset = np.atleast_1d(offset)
    return float(np.prod([gram_1d(n, o) for o in offset])) * sigma ** len(offset)


def interior_cell_tensor(n: int, d: int, sigma: float) -> np.ndarray:
    """Local Gram ``(n**d, n**d)`` of a full cell, local order as ``cell_dofs``."""
    G = cell_gram_1d(n)
    T = np.ones((1, 1))
    for _ in range(d):
        T = np.kron(T, G)
    return T * sigma**d


def cut_cell_tensors(cells: list[ClippedCell], n: int, sigma: float, points_per_edge: int | None = None) -> np.ndarray:
    """Local Gram tensors ``(len(cells), n**d, n**d)`` of clipped cells.

    Uses the divergence identity on each clipped region with axis 1 as the
    antiderivative axis.  ``points_per_edge`` Gauss points per polygon edge
    (default ``2n-1``, exact for the degree ``4n-3`` edge integrand).
    """
    if not cells:
        return np.zeros((0,))
    d = len(cells[0].lo)
    q = points_per_edge or 2 * n - 1
    out = np.zeros((len(cells), n**d, n**d))
    if d == 1:
        for c, cc in enumerate(cells):
            if cc.measure <= 0.0:
                continue
            loc = cc.region[:, 0] / sigma - np.floor(cc.lo[0] / sigma + 0.5)
            A = _eval_product_antiderivative(n, loc)
            out[c] = (A[1] - A[0]) * sigma
        return out
    if d != 2:
        raise NotImplementedError("cut-cell moments are implemented for d <= 2")
    s, w = gauss_legendre_01(q)
    starts, ends, owner = [], [], []
    for c, cc in enumerate(cells):
        if cc.measure <= 0.0 or len(cc.region) < 3:
            continue
        origin = np.floor(cc.lo / sigma + 0.5)
        P = cc.region / sigma - origin
        starts.append(P)
        ends.append(np.roll(P, -1, axis=0))
        owner.append(np.full(len(P), c))
    if not starts:
        return out
    a, b, owner = np.concatenate(starts), np.concatenate(ends), np.concatenate(owner)
    chunk = 8192
    for e0 in range(0, len(a), chunk):
        pa, pb, ow = a[e0 : e0 + chunk], b[e0 : e0 + chunk], owner[e0 : e0 + chunk]
        t = pa[:, None, :] + s[None, :, None] * (pb - pa)[:, None, :]  # (E, q, 2)
        wt = w[None, :] * (pb[:, 1] - pa[:, 1])[:, None]  # n_1 ds = dt_2 on a ccw boundary
        A1 = _eval_product_antiderivative(n, t[..., 0])  # (E, q, n, n)
        B2 = local_basis(n, t[..., 1])  # (E, q, n)
        contrib = np.einsum("eq,eqik,eqj,eql->eijkl", wt, A1, B2, B2)
        np.add.at(out, ow, contrib.reshape(len(pa), n * n, n * n))
    return out * sigma**2


def _triangulated_tensor(cc: ClippedCell, n: int, sigma: float) -> np.ndarray:
    """Same tensor by Gauss quadrature on the fan triangulation (fallback path)."""
    d = len(cc.lo)
    pts, w = region_rule(cc, 2 * n - 1)
    origin = np.floor(cc.lo / sigma + 0.5)
    t = pts / sigma - origin
    B = local_basis(n, t[:, 0])
    for ax in range(1, d):
        B = (B[:, :, None] * local_basis(n, t[:, ax])[:, None, :]).reshape(len(t), -1)
    return np.einsum("q,qk,ql->kl", w, B, B)


def cut_moment(mesh: BoundaryMesh, n: int, lam, mu, h: float, facet_points: int | None = None) -> float:
    """``int_Omega b_{h,lam} b_{h,mu}`` for a single pair, from the mesh alone."""
    lam, mu = np.atleast_1d(lam).astype(np.int64), np.atleast_1d(mu).astype(np.int64)
    d = len(lam)
    lo = np.maximum(lam, mu)
    hi = np.minimum(lam, mu) + n
    if np.any(hi <= lo):
        return 0.0
    full = interior_cell_tensor(n, d, h)
    ks = list(itertools.product(range(n), repeat=d))
    total = 0.0
    for cell in itertools.product(*[range(l, u) for l, u in zip(lo, hi)]):
        cell = np.array(cell)
        cc = clip_cell(mesh, cell * h, (cell + 1) * h, index=tuple(cell))
        if cc.measure <= 0.0:
            continue
        T = full if cc.is_full else _checked_tensors([cc], n, h, facet_points)[0]
        i = ks.index(tuple(cell - lam))
        j = ks.index(tuple(cell - mu))
        total += T[i, j]
    return float(total)


def _checked_tensors(cells: list[ClippedCell], n: int, sigma: float, points_per_edge=None) -> np.ndarray:
    """Boundary-reduced tensors, with a triangulated fallback for slivers.

    Summing a tensor over all local pairs must give the clipped measure
    (partition of unity squared).  Cells failing it by more
    than ``1e-9`` relative are recomputed by area quadrature with a warning.
    """
    T = cut_cell_tensors(cells, n, sigma, points_per_edge)
    if not len(cells):
        return T
    meas = np.array([cc.measure for cc in cells])
    bad = np.abs(T.sum(axis=(1, 2)) - meas) > 1e-9 * meas + 1e-12 * sigma ** len(cells[0].lo)
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} sliver cell(s): moments recomputed by area quadrature", stacklevel=3)
        for c in np.flatnonzero(bad):
            T[c] = _triangulated_tensor(cells[c], n, sigma)
    return T


@dataclass
class MomentTable:
    """Sparse symmetric moment matrix over the index set of ``space``.

    Held cellwise: one local tensor per cut cell plus the shared interior
    tensor.  Rows and the assembled matrix are produced on demand.
    """

    space: SplineSpace
    fd: FictitiousDomain
    cut_cells: np.ndarray  # (m, d) multi-indices
    cut_tensors: np.ndarray  # (m, n^d, n^d)
    interior_tensor: np.ndarray
    fallbacks: int = 0
    _cut_lookup: dict = field(default_factory=dict, repr=False)
    _sparse: sps.csr_matrix | None = field(default=None, repr=False)
    _flags: sps.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self._cut_lookup = {tuple(int(v) for v in c): i for i, c in enumerate(self.cut_cells)}

    @property
    def n(self) -> int:
        return self.space.n

    def cell_tensor(self, cell) -> np.ndarray | None:
        key = tuple(int(v) for v in cell)
        i = self._cut_lookup.get(key)
        if i is not None:
            return self.cut_tensors[i]
        return self.interior_tensor if self.fd.cell_class(key) == INTERIOR else None

    def to_sparse(self) -> sps.csr_matrix:
        if self._sparse is None:
            self._assemble()
        return self._sparse

    def boundary_flags(self) -> sps.csr_matrix:
        """Pattern of the entries that receive a boundary-reduced contribution."""
        if self._flags is None:
            self._assemble()
        return self._flags

    def _assemble(self):
        sp, fd = self.space, self.fd
        N = sp.size
        rows, cols, vals = stencil_entries(sp, fd.grid.lo, fd.cls == INTERIOR, self.interior_tensor)
        rows, cols, vals = [rows], [cols], [vals]
        if len(self.cut_cells):
            ids = sp.cell_dofs(self.cut_cells)
            if np.any(ids < 0):
                raise RuntimeError("active cell touches a function outside the index set")
            I = np.repeat(ids[:, :, None], ids.shape[1], axis=2).ravel()
            J = np.repeat(ids[:, None, :], ids.shape[1], axis=1).ravel()
            rows.append(I)
            cols.append(J)
            vals.append(self.cut_tensors.ravel())
            F = sps.coo_matrix((np.ones(len(I), dtype=bool), (I, J)), shape=(N, N)).tocsr()
        else:
            F = sps.csr_matrix((N, N), dtype=bool)
        M = sps.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)).tocsr()
        M.sum_duplicates()
        # duplicates are summed in storage order; average with the transpose for exact symmetry
        self._sparse = ((M + M.T) * 0.5).tocsr()
        self._flags = F

    def row(self, lam) -> tuple[np.ndarray, np.ndarray]:
        """Dense ids ``mu`` and values ``M[lam, mu]`` of one row.

        Computed from the cell tensors of ``supp b_lam`` without assembling
        the matrix; ids are sorted.
        """
        sp, n, d = self.space, self.space.n, self.space.dim
        lam = sp.indices[lam] if np.isscalar(lam) else np.asarray(lam)
        ks = np.array(list(itertools.product(range(n), repeat=d)))
        cells = lam + ks  # cell lam + k holds lam at local position k
        ids = sp.cell_dofs(cells)
        acc: dict = {}
        for a, c in enumerate(cells):
            T = self.cell_tensor(c)
            if T is None:
                continue
            for j, v in zip(ids[a], T[a]):
                if j >= 0:
                    acc[j] = acc.get(j, 0.0) + v
        mus = np.array(sorted(acc), dtype=np.int64)
        return mus, np.array([acc[j] for j in mus])

    def entry(self, lam, mu) -> float:
        i, j = self.space.dense_id(lam), self.space.dense_id(mu)
        if i < 0 or j < 0:
            return 0.0
        mus, vals = self.row(lam)
        hit = np.flatnonzero(mus == j)
        return float(vals[hit[0]]) if len(hit) else 0.0

    def row_integrals(self) -> np.ndarray:
        """``int_Omega b_lam`` per row, via partition of unity on the row sums."""
        return np.asarray(self.to_sparse().sum(axis=1)).ravel()


def stencil_entries(space: SplineSpace, cell_lo, indicator: np.ndarray, local: np.ndarray):
    """COO triplets of ``sum_cells indicator(c) * local`` scattered to ``space``.

    Works offset by offset on window arrays instead of per cell, so memory
    stays ``O((2n-1)^d N)`` even for millions of cells.
    """
    n, d = space.n, space.dim
    ks = list(itertools.product(range(n), repeat=d))
    ind = indicator.astype(float)
    cell_off = np.asarray(cell_lo) - space.lam_lo  # window position of lam = cell
    if np.any(cell_off < n - 1) or np.any(cell_off + np.array(ind.shape) > np.array(space.shape)):
        raise ValueError("spline window does not cover the cell window")
    diag: dict = {}
    for a, ka in enumerate(ks):
        sl = tuple(slice(int(c) - k, int(c) - k + s) for c, k, s in zip(cell_off, ka, ind.shape))
        for b, kb in enumerate(ks):
            if local[a, b] == 0.0:
                continue
            o = tuple(x - y for x, y in zip(ka, kb))
            D = diag.get(o)
            if D is None:
                D = diag[o] = np.zeros(space.shape)
            D[sl] += local[a, b] * ind
    rows, cols, vals = [], [], []
    lam_w = np.argwhere(space.mask)
    for o, D in sorted(diag.items()):
        mu_w = lam_w + np.array(o)
        ok = np.all((mu_w >= 0) & (mu_w < np.array(space.shape)), axis=1)
        li, mw = lam_w[ok], mu_w[ok]
        v = D[tuple(li.T)]
        j = space.lookup[tuple(mw.T)]
        keep = (v != 0.0) & (j >= 0)
        rows.append(space.lookup[tuple(li[keep].T)])
        cols.append(j[keep])
        vals.append(v[keep])
    if not rows:
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def full_cell_gram(space: SplineSpace, fd: FictitiousDomain) -> sps.csr_matrix:
    """Gram matrix over Omega_sigma with every active cell taken whole."""
    r, c, v = stencil_entries(space, fd.grid.lo, fd.active, interior_cell_tensor(space.n, space.dim, space.sigma))
    M = sps.coo_matrix((v, (r, c)), shape=(space.size, space.size)).tocsr()
    M.sum_duplicates()
    return M


def build_table(space: SplineSpace, fd: FictitiousDomain, points_per_edge: int | None = None, cache_dir=None) -> MomentTable:
    """Moment table for all overlapping pairs of ``space`` on the domain of ``fd``."""
    n, d, h = space.n, space.dim, space.sigma
    key = None
    if cache_dir is not None:
        tag = f"{fd.mesh.digest()}|{h!r}|{n}|{points_per_edge}|{CACHE_VERSION}"
        key = os.path.join(cache_dir, "moments-" + hashlib.sha256(tag.encode()).hexdigest()[:20] + ".npz")
        if os.path.exists(key):
            with np.load(key) as z:
                if int(z["version"]) == CACHE_VERSION:
                    return MomentTable(space, fd, z["cells"], z["tensors"], interior_cell_tensor(n, d, h), int(z["fallbacks"]))
    keys = sorted(fd.clipped)
    cells = [fd.clipped[k] for k in keys]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        T = _checked_tensors(cells, n, h, points_per_edge)
    fallbacks = sum(int(str(w.message).split()[0]) for w in caught if "sliver" in str(w.message))
    if fallbacks:
        warnings.warn(f"moment table: {fallbacks} sliver cell(s) used area quadrature", stacklevel=2)
    cut = np.array(keys, dtype=np.int64).reshape(-1, d)
    if not len(cells):
        T = np.zeros((0, n**d, n**d))
    table = MomentTable(space, fd, cut, T, interior_cell_tensor(n, d, h), fallbacks)
    if key is not None:
        os.makedirs(cache_dir, exist_ok=True)
        np.savez(key, version=CACHE_VERSION, cells=cut, tensors=T, fallbacks=fallbacks)
    return table
