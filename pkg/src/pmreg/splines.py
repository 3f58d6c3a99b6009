"""Cardinal B-splines on the integer grid and tensor-product spline fields.

Conventions: ``b^n`` has order ``n`` (polynomial degree ``n-1``) and support
``[0, n]``.  On a grid of spacing ``sigma`` the basis function of multi-index
``lam`` is ``b_lam(x) = prod_d b^n((x_d - lam_d*sigma)/sigma)``.  A point in cell
``i`` (``x in [i*sigma, (i+1)*sigma)``) sees the ``n`` functions
``lam = i - k``, ``k = 0..n-1``; in local coordinates ``t = x/sigma - i`` their
values are ``b^n(t + k)``.
"""

from __future__ import annotations

import itertools
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from math import comb
from typing import Callable

import numpy as np

from .grid import FictitiousDomain, INTERIOR, CUT


def bspline(n: int, x, deriv: int = 0):
    """Value of ``d^r b^n / dx^r`` at ``x`` (scalar or array).

    Uses the Cox-de Boor recursion on the integer knots ``0..n`` and
    ``(b^n)' = b^{n-1}(x) - b^{n-1}(x-1)`` for derivatives.  Derivatives of
    order ``r >= n`` only have distributional parts; zero is returned with a
    warning.
    """
    if n < 1:
        raise ValueError("order n must be >= 1")
    x = np.asarray(x, dtype=float)
    if deriv >= n:
        warnings.warn(f"derivative order {deriv} >= n={n}: returning zero", stacklevel=2)
        return np.zeros_like(x)[()]
    return _bspline(n, x, deriv)[()]


def _bspline(n: int, x: np.ndarray, r: int) -> np.ndarray:
    if r > 0:
        return _bspline(n - 1, x, r - 1) - _bspline(n - 1, x - 1.0, r - 1)
    if n == 1:
        return ((x >= 0.0) & (x < 1.0)).astype(float)
    return (x * _bspline(n - 1, x, 0) + (n - x) * _bspline(n - 1, x - 1.0, 0)) / (n - 1)


def bspline_antiderivative(n: int, x):
    """``int_{-inf}^x b^n``; 0 for ``x <= 0`` and 1 for ``x >= n``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    # d/dx b^{n+1}(x - j) telescopes to b^n(x), so the sum over j >= 0 is the antiderivative
    for j in range(n + 1):
        out += _bspline(n + 1, np.minimum(x, n + 1.0) - j, 0)
    out = np.where(x >= n, 1.0, out)
    return out[()]


# --- local polynomial pieces -------------------------------------------------


@lru_cache(maxsize=None)
def _pieces_exact(n: int) -> tuple[tuple[Fraction, ...], ...]:
    """Power coefficients of b^n on [k, k+1), in the local variable t = x - k."""
    pieces = [(Fraction(1),)]
    for m in range(2, n + 1):
        new = []
        for k in range(m):
            # b^m(x) = (x b^{m-1}(x) + (m - x) b^{m-1}(x-1)) / (m-1), with x = t + k
            acc = [Fraction(0)] * m
            if k < m - 1:
                p = pieces[k]
                for j, c in enumerate(p):
                    acc[j] += c * k
                    acc[j + 1] += c
            if k >= 1:
                p = pieces[k - 1]
                for j, c in enumerate(p):
                    acc[j] += c * (m - k)
                    acc[j + 1] -= c
            new.append(tuple(a / (m - 1) for a in acc))
        pieces = new
    return tuple(pieces)


@lru_cache(maxsize=None)
def piece_coefficients(n: int) -> np.ndarray:
    """``C[k, j]``: ``b^n(t + k) = sum_j C[k, j] t^j`` for ``t in [0, 1)``."""
    return np.array([[float(c) for c in p] for p in _pieces_exact(n)])


def local_basis(n: int, t, deriv: int = 0) -> np.ndarray:
    """Values ``b^{n (r)}(t + k)`` for ``k = 0..n-1``; shape ``t.shape + (n,)``."""
    t = np.asarray(t, dtype=float)
    C = piece_coefficients(n)
    if deriv:
        if deriv >= n:
            return np.zeros(t.shape + (n,))
        j = np.arange(n)
        fac = np.ones(n)
        for s in range(deriv):
            fac = fac * np.maximum(j - s, 0)
        C = (C * fac)[:, deriv:]
    # Horner per piece
    out = np.zeros(t.shape + (n,))
    for j in range(C.shape[1] - 1, -1, -1):
        out = out * t[..., None] + C[:, j]
    return out


@lru_cache(maxsize=None)
def _cell_gram_1d(n: int) -> np.ndarray:
    """``G[k, l] = int_0^1 b^n(t+k) b^n(t+l) dt``."""
    s, w = gauss_legendre_01(n)
    B = local_basis(n, s)
    return np.einsum("q,qk,ql->kl", w, B, B)


def cell_gram_1d(n: int) -> np.ndarray:
    return _cell_gram_1d(n).copy()


@lru_cache(maxsize=None)
def gauss_legendre_01(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w


def tensor_gauss_01(m: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule on the unit cube: points ``(m**dim, dim)``, weights."""
    s, w = gauss_legendre_01(m)
    pts = np.array(list(itertools.product(s, repeat=dim)))
    wts = np.array([np.prod(c) for c in itertools.product(w, repeat=dim)])
    return pts.reshape(-1, dim), wts


# --- spaces and fields -------------------------------------------------------


@dataclass
class SplineSpace:
    """Tensor-product spline space ``V_sigma^n`` with index set Lambda.

    ``lam_lo`` and ``mask`` describe a dense box of multi-indices; ``mask``
    marks the members of Lambda.  Members are numbered 0..N-1 in C order.
    """

    n: int
    sigma: float
    lam_lo: np.ndarray
    mask: np.ndarray
    fd: FictitiousDomain | None = None
    lookup: np.ndarray = field(init=False, repr=False)
    indices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.lam_lo = np.asarray(self.lam_lo, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.lookup = np.full(self.mask.shape, -1, dtype=np.int64)
        self.lookup[self.mask] = np.arange(int(self.mask.sum()))
        self.indices = np.argwhere(self.mask) + self.lam_lo

    @property
    def dim(self) -> int:
        return self.mask.ndim

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    @classmethod
    def on_domain(cls, fd: FictitiousDomain, n: int) -> "SplineSpace":
        """Lambda_sigma^n(Omega_sigma): every basis function whose support holds a cell of Omega_sigma."""
        g = fd.grid
        inside = fd.active
        lam_lo = g.lo - (n - 1)
        mask = np.zeros(tuple(np.array(g.shape) + n - 1), dtype=bool)
        for k in itertools.product(range(n), repeat=g.dim):
            # cell c is in supp b_lam for lam = c - k; in window coords that is shift (n-1-k)
            sl = tuple(slice(n - 1 - kd, n - 1 - kd + s) for kd, s in zip(k, g.shape))
            mask[sl] |= inside
        return cls(n, g.sigma, lam_lo, mask, fd)

    @classmethod
    def full_window(cls, n: int, sigma: float, cell_lo, cell_hi) -> "SplineSpace":
        """All basis functions touching the cell box ``[cell_lo, cell_hi)``."""
        cell_lo = np.asarray(cell_lo)
        shape = tuple(np.asarray(cell_hi) - cell_lo + n - 1)
        return cls(n, sigma, cell_lo - (n - 1), np.ones(shape, dtype=bool))

    def dense_id(self, lam) -> int:
        """Dense number of multi-index ``lam`` or -1 if not in Lambda."""
        idx = np.asarray(lam) - self.lam_lo
        if np.any(idx < 0) or np.any(idx >= self.shape):
            return -1
        return int(self.lookup[tuple(idx)])

    def dense_ids(self, lams: np.ndarray) -> np.ndarray:
        lams = np.asarray(lams) - self.lam_lo
        ok = np.all((lams >= 0) & (lams < np.array(self.shape)), axis=-1)
        out = np.full(lams.shape[:-1], -1, dtype=np.int64)
        out[ok] = self.lookup[tuple(lams[ok].T)]
        return out

    def to_window(self, coeffs: np.ndarray) -> np.ndarray:
        W = np.zeros(self.shape)
        W[self.mask] = coeffs
        return W

    def from_window(self, W: np.ndarray) -> np.ndarray:
        return W[self.mask].copy()

    def cell_dofs(self, cells: np.ndarray) -> np.ndarray:
        """Dense ids of the ``n**d`` functions active on each cell, ``(m, n**d)``.

        Local ordering is C order over ``k`` with ``lam = cell - k``; -1 where absent.
        """
        cells = np.asarray(cells).reshape(-1, self.dim)
        ks = np.array(list(itertools.product(range(self.n), repeat=self.dim)))
        lams = cells[:, None, :] - ks[None, :, :]
        return self.dense_ids(lams)


@dataclass
class SplineField:
    space: SplineSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.size,):
            raise ValueError(f"expected {self.space.size} coefficients, got {self.coeffs.shape}")

    def __call__(self, x, deriv=None):
        return eval_field(self, x, deriv)


def eval_field(f: SplineField, x, deriv=None, return_flag: bool = False):
    """Evaluate ``sum_lam u_lam d^alpha b_lam(x)`` at points ``x`` of shape ``(m, d)``.

    Only the ``n**d`` active functions per point are visited.  Points outside
    the index window evaluate to 0; with ``return_flag`` a boolean
    out-of-window mask is returned as well.
    """
    sp = f.space
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if sp.dim == 1 and x.shape[-1] != 1:
        x = x.reshape(-1, 1)
    deriv = (0,) * sp.dim if deriv is None else tuple(deriv)
    W = sp.to_window(f.coeffs)
    out = np.empty(len(x))
    flag = np.zeros(len(x), dtype=bool)
    chunk = 1 << 18
    for s in range(0, len(x), chunk):
        v, fl = _eval_window(W, sp.lam_lo, sp.n, sp.sigma, x[s : s + chunk], deriv)
        out[s : s + chunk] = v
        flag[s : s + chunk] = fl
    return (out, flag) if return_flag else out


def _eval_window(W, lam_lo, n, sigma, x, deriv):
    d = x.shape[1]
    y = x / sigma
    cell = np.floor(y).astype(np.int64)
    t = y - cell
    base = cell - lam_lo - (n - 1)  # window index of lam = cell - (n-1)
    ok = np.all((base >= 0) & (base + n <= np.array(W.shape)), axis=1)
    base = np.where(ok[:, None], base, 0)
    vals = np.zeros(len(x))
    # lam = cell - k  ->  window index base + (n-1-k)
    B = [local_basis(n, t[:, a], deriv[a])[:, ::-1] * sigma ** (-deriv[a]) for a in range(d)]
    if d == 1:
        idx = base[:, 0:1] + np.arange(n)
        vals = np.einsum("mi,mi->m", W[idx], B[0])
    elif d == 2:
        i0 = base[:, 0, None, None] + np.arange(n)[None, :, None]
        i1 = base[:, 1, None, None] + np.arange(n)[None, None, :]
        vals = np.einsum("mij,mi,mj->m", W[i0, i1], B[0], B[1])
    else:
        for k in itertools.product(range(n), repeat=d):
            idx = tuple(base[:, a] + k[a] for a in range(d))
            term = W[idx]
            for a in range(d):
                term = term * B[a][:, k[a]]
            vals = vals + term
    vals = np.where(ok, vals, 0.0)
    return vals, ~ok


def basis_values(space: SplineSpace, x: np.ndarray, deriv=None):
    """Active basis data at points: dense ids ``(m, n**d)`` and values ``(m, n**d)``.

    Ids are -1 for functions outside Lambda (their values are still returned).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d, sigma = space.n, space.dim, space.sigma
    deriv = (0,) * d if deriv is None else tuple(deriv)
    y = x / sigma
    cell = np.floor(y).astype(np.int64)
    t = y - cell
    B = [local_basis(n, t[:, a], deriv[a]) * sigma ** (-deriv[a]) for a in range(d)]
    vals = B[0]
    for a in range(1, d):
        vals = (vals[:, :, None] * B[a][:, None, :]).reshape(len(x), n ** (a + 1))
    ids = space.cell_dofs(cell)
    return ids, vals


def scatter_basis(space: SplineSpace, x: np.ndarray, weights: np.ndarray, chunk: int = 1 << 17) -> np.ndarray:
    """``r_mu = sum_i weights_i b_mu(x_i)`` over the dense index of ``space``.

    Accumulation proceeds chunk by chunk in index order, so the result does not
    depend on how the caller batches points.
    """
    out = np.zeros(space.size)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    for s in range(0, len(x), chunk):
        ids, vals = basis_values(space, x[s : s + chunk])
        contrib = vals * np.asarray(weights[s : s + chunk])[:, None]
        keep = ids >= 0
        out += np.bincount(ids[keep], weights=contrib[keep], minlength=space.size)
    return out


# --- quasi-interpolation -----------------------------------------------------


@lru_cache(maxsize=None)
def _dual_weights_1d(n: int, q: int) -> np.ndarray:
    """``W[k, s]``: weight of Gauss point ``s`` of cell ``lam + k`` in coefficient ``lam``.

    The coefficient is the ``lam`` component of the L2 projection onto the
    functions alive on ``supp b_lam`` (``2n-1`` of them), restricted to
    ``supp b_lam``; its dual function is ``psi = sum_mu a_mu b_mu``.
    """
    G1 = _cell_gram_1d(n)
    m = 2 * n - 1
    # functions mu = lam + j - (n-1), j = 0..2n-2; cell lam + k sees mu = lam + k - kk
    G = np.zeros((m, m))
    for k in range(n):
        for a in range(n):
            for b in range(n):
                G[k - a + n - 1, k - b + n - 1] += G1[a, b]
    e = np.zeros(m)
    e[n - 1] = 1.0
    coef = np.linalg.solve(G, e)
    s, w = gauss_legendre_01(q)
    B = local_basis(n, s)  # (q, n): b(s + a) for a
    W = np.zeros((n, q))
    for k in range(n):
        for a in range(n):
            W[k] += coef[k - a + n - 1] * B[:, a]
        W[k] *= w
    return W


def quasi_interpolate(f: Callable[[np.ndarray], np.ndarray], space: SplineSpace, points_per_axis: int | None = None) -> SplineField:
    """Local L2-type quasi-interpolant ``P_sigma^n f``.

    Coefficient ``lam`` only uses values of ``f`` on ``supp b_lam``; splines and
    ``Q_{n-1}`` polynomials are reproduced exactly.  ``f`` must be evaluable
    on the whole support of every basis function (pass a global extension).
    """
    n, d, sigma = space.n, space.dim, space.sigma
    q = points_per_axis or n + 1
    W1 = _dual_weights_1d(n, q)
    s, _ = gauss_legendre_01(q)
    # cells needed: lam + k for lam in mask, k in 0..n-1 -> window shape + n - 1
    cshape = tuple(np.array(space.shape) + n - 1)
    need = np.zeros(cshape, dtype=bool)
    for k in itertools.product(range(n), repeat=d):
        sl = tuple(slice(kd, kd + sd) for kd, sd in zip(k, space.shape))
        need[sl] |= space.mask
    cells = np.argwhere(need) + space.lam_lo
    loc = np.array(list(itertools.product(s, repeat=d)))  # (q^d, d)
    pts = (cells[:, None, :] + loc[None, :, :]) * sigma
    vals = np.asarray(f(pts.reshape(-1, d)), dtype=float).reshape(len(cells), *([q] * d))
    F = np.zeros(cshape + (q,) * d)
    F[need] = vals
    # separable filtering, one axis at a time; the leading Gauss-point axis
    # (position d) always belongs to the current spatial axis
    for a in range(d):
        L = space.shape[a]
        acc = 0.0
        for k in range(n):
            sl = [slice(None)] * F.ndim
            sl[a] = slice(k, k + L)
            acc = acc + np.tensordot(F[tuple(sl)], W1[k], axes=([d], [0]))
        F = acc
    coeffs = F[space.mask]
    return SplineField(space, coeffs)


# --- norms -------------------------------------------------------------------


def _multi_indices(d: int, order: int, exact: bool):
    for a in itertools.product(range(order + 1), repeat=d):
        s = sum(a)
        if s == order or (not exact and s < order):
            yield a


def field_norm(f: SplineField, cells=None, p=2, l: int = 0, seminorm: bool = False) -> float:
    """``W^{l,p}`` norm (or seminorm) of a spline field over a set of cells.

    Cellwise tensor Gauss with ``n`` points per axis integrates the squared
    piecewise polynomials exactly.  For ``p = inf`` the maximum is taken over
    the Gauss points and the cell corners.  ``cells`` defaults to the active
    cells of the space's fictitious domain.
    """
    sp = f.space
    n, d, sigma = sp.n, sp.dim, sp.sigma
    if l > n - 1:
        raise ValueError("Sobolev order must be <= n-1")
    if cells is None:
        if sp.fd is None:
            raise ValueError("cells required for a space without fictitious domain")
        cells = sp.fd.cells()
    cells = np.asarray(cells).reshape(-1, d)
    ref, w = tensor_gauss_01(n, d)
    alphas = list(_multi_indices(d, l, exact=True)) if seminorm else [
        a for o in range(l + 1) for a in _multi_indices(d, o, exact=True)
    ]
    if p == np.inf or p == "inf":
        corners = np.array(list(itertools.product([0.0, 1.0 - 1e-14], repeat=d)))
        ref = np.vstack([ref, corners])
    total = 0.0
    for alpha in alphas:
        for s in range(0, len(cells), 1 << 14):
            c = cells[s : s + (1 << 14)]
            pts = ((c[:, None, :] + ref[None]) * sigma).reshape(-1, d)
            v = eval_field(f, pts, alpha).reshape(len(c), -1)
            if p == np.inf or p == "inf":
                total = max(total, float(np.abs(v).max(initial=0.0)))
            else:
                total += float(np.sum(np.abs(v) ** p @ w)) * sigma**d
    if p == np.inf or p == "inf":
        return total
    return total ** (1.0 / p)


# --- two-scale refinement ------------------------------------------------------


def two_scale_mask(n: int) -> np.ndarray:
    """``a_k = 2^{1-n} C(n, k)``: ``b^n(x) = sum_k a_k b^n(2x - k)``."""
    return np.array([comb(n, k) for k in range(n + 1)], dtype=float) * 2.0 ** (1 - n)


def refine(f: SplineField, target: SplineSpace) -> SplineField:
    """Express ``f`` exactly in the finer nested space ``target``.

    ``target.sigma`` must be ``f.space.sigma / 2**k``.  Coefficients are
    subdivided with the two-scale relation one level at a time; fine
    functions outside ``target`` are dropped, and target functions not
    produced by the subdivision get 0 (they do not meet the coarse support).
    """
    sp = f.space
    ratio = sp.sigma / target.sigma
    k = int(round(np.log2(ratio)))
    if k < 0 or abs(2.0**k - ratio) > 1e-9 * ratio or target.n != sp.n or target.dim != sp.dim:
        raise ValueError("target space is not a dyadic refinement of the source space")
    a = two_scale_mask(sp.n)
    W = sp.to_window(f.coeffs)
    lo = sp.lam_lo.copy()
    for _ in range(k):
        for ax in range(sp.dim):
            L = W.shape[ax]
            shape = list(W.shape)
            shape[ax] = 2 * L + sp.n - 1
            out = np.zeros(shape)
            for j, aj in enumerate(a):
                sl = [slice(None)] * W.ndim
                sl[ax] = slice(j, j + 2 * L - 1, 2)
                out[tuple(sl)] += aj * W
            W = out
        lo = 2 * lo
    # copy the overlap of the subdivided window into the target window
    T = np.zeros(target.shape)
    src, dst = [], []
    for ax in range(sp.dim):
        s0 = max(lo[ax], target.lam_lo[ax])
        s1 = min(lo[ax] + W.shape[ax], target.lam_lo[ax] + target.shape[ax])
        if s1 <= s0:
            return SplineField(target, np.zeros(target.size))
        src.append(slice(s0 - lo[ax], s1 - lo[ax]))
        dst.append(slice(s0 - target.lam_lo[ax], s1 - target.lam_lo[ax]))
    T[tuple(dst)] = W[tuple(src)]
    return SplineField(target, target.from_window(T))


# --- serialization -------------------------------------------------------------

_MAGIC = b"PMRGSPL1"


def save_field(f: SplineField, path) -> None:
    """Binary layout (little endian): magic, ``u32 d, u32 n, f64 sigma``,
    ``i64 lam_lo[d], i64 shape[d]``, ``u8 mask[prod(shape)]``, ``f64 coeffs[N]``."""
    sp = f.space
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IId", sp.dim, sp.n, sp.sigma))
        fh.write(np.asarray(sp.lam_lo, dtype="<i8").tobytes())
        fh.write(np.asarray(sp.shape, dtype="<i8").tobytes())
        fh.write(sp.mask.astype(np.uint8).tobytes())
        fh.write(np.asarray(f.coeffs, dtype="<f8").tobytes())


def load_field(path) -> SplineField:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a spline field file")
    d, n, sigma = struct.unpack_from("<IId", data, 8)
    off = 8 + struct.calcsize("<IId")
    lam_lo = np.frombuffer(data, "<i8", d, off)
    off += 8 * d
    shape = tuple(int(s) for s in np.frombuffer(data, "<i8", d, off))
    off += 8 * d
    size = int(np.prod(shape))
    mask = np.frombuffer(data, np.uint8, size, off).reshape(shape).astype(bool)
    off += size
    space = SplineSpace(n, sigma, lam_lo.astype(np.int64), mask)
    coeffs = np.frombuffer(data, "<f8", space.size, off).astype(float)
    return SplineField(space, coeffs)


def export_samples_csv(f: SplineField, points, path) -> None:
    """Write ``x1..xd,value`` rows for plotting."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    vals = eval_field(f, points)
    header = ",".join([f"x{i + 1}" for i in range(points.shape[1])] + ["value"])
    np.savetxt(path, np.column_stack([points, vals]), delimiter=",", header=header, comments="", fmt="%.17g")
