"""Domains described only by their boundary: polygons in 2D, intervals in 1D.

Everything downstream (cell classification, moments, quadrature) sees the
domain through the queries in this module: :func:`point_in_domain`,
:func:`clip_cell` and :func:`boundary_rule`.  Points on the boundary count
as inside (closed domain).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BoundaryMesh:
    """Oriented boundary of a bounded domain.

    In 2D ``vertices`` is an ``(m, 2)`` array in counterclockwise order and
    facet ``i`` runs from vertex ``i`` to vertex ``i+1`` (closed).  In 1D it is
    ``[[a], [b]]`` with the two endpoint facets carrying normals -1 and +1.
    """

    dim: int
    vertices: np.ndarray
    starts: np.ndarray = field(init=False, repr=False)
    ends: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if self.dim == 1:
            v = v.reshape(2, 1)
            if not v[0, 0] < v[1, 0]:
                raise GeometryError("interval needs a < b")
        elif self.dim == 2:
            if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
                raise GeometryError("a polygon needs at least three 2D vertices")
            if _signed_area(v) <= 0:
                raise GeometryError("polygon must be counterclockwise with positive area")
        else:
            raise GeometryError(f"unsupported dimension {self.dim}")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        if self.dim == 2:
            e = np.roll(v, -1, axis=0)
            e.setflags(write=False)
            object.__setattr__(self, "starts", v)
            object.__setattr__(self, "ends", e)
        else:
            object.__setattr__(self, "starts", v)
            object.__setattr__(self, "ends", v)

    # --- constructors -------------------------------------------------

    @classmethod
    def polygon(cls, vertices, check: bool = True) -> "BoundaryMesh":
        mesh = cls(2, np.asarray(vertices, dtype=float))
        if check and self_intersects(mesh.vertices):
            raise GeometryError("polygon boundary intersects itself")
        return mesh

    @classmethod
    def interval(cls, a: float, b: float) -> "BoundaryMesh":
        return cls(1, np.array([[a], [b]], dtype=float))

    @classmethod
    def disk(cls, m: int, radius: float = 1.0, center=(0.0, 0.0), phase: float = 0.0) -> "BoundaryMesh":
        """Regular ``m``-gon inscribed in the circle (vertex 0 at angle ``phase``)."""
        th = phase + 2 * np.pi * np.arange(m) / m
        v = np.column_stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)])
        return cls(2, v)

    @classmethod
    def rectangle(cls, lo, hi) -> "BoundaryMesh":
        (x0, y0), (x1, y1) = lo, hi
        return cls(2, np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))

    @classmethod
    def load(cls, path) -> "BoundaryMesh":
        return parse_mesh_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(format_mesh_text(self))

    # --- derived data -------------------------------------------------

    @property
    def num_facets(self) -> int:
        return len(self.starts) if self.dim == 2 else 2

    @property
    def tangents(self) -> np.ndarray:
        return self.ends - self.starts

    @property
    def lengths(self) -> np.ndarray:
        if self.dim == 1:
            return np.ones(2)
        return np.hypot(*self.tangents.T)

    @property
    def normals(self) -> np.ndarray:
        """Outward unit normals: the tangent rotated by -90 degrees."""
        if self.dim == 1:
            return np.array([[-1.0], [1.0]])
        t = self.tangents / self.lengths[:, None]
        return np.column_stack([t[:, 1], -t[:, 0]])

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def measure(self) -> float:
        if self.dim == 1:
            return float(self.vertices[1, 0] - self.vertices[0, 0])
        return _signed_area(self.vertices)

    def translated(self, shift) -> "BoundaryMesh":
        shift = np.asarray(shift, dtype=float).reshape(1, self.dim)
        return BoundaryMesh(self.dim, self.vertices + shift)

    def digest(self) -> str:
        h = hashlib.sha1()
        h.update(str(self.dim).encode())
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        return h.hexdigest()[:16]


def _signed_area(v: np.ndarray) -> float:
    # shift to the first vertex so small polygons far from the origin keep their digits
    x, y = v[:, 0] - v[0, 0], v[:, 1] - v[0, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def self_intersects(v: np.ndarray) -> bool:
    """True if two non-adjacent edges of the closed polygon ``v`` meet."""
    m = len(v)
    a, b = v, np.roll(v, -1, axis=0)
    for s in range(0, m, 256):
        i = np.arange(s, min(s + 256, m))[:, None]
        j = np.arange(m)[None, :]
        adjacent = (i == j) | ((i + 1) % m == j) | ((j + 1) % m == i)
        p, r = a[i], b[i] - a[i]
        q, u = a[j], b[j] - a[j]
        o1 = _orient(p, p + r, q)
        o2 = _orient(p, p + r, q + u)
        o3 = _orient(q, q + u, p)
        o4 = _orient(q, q + u, p + r)
        proper = (o1 * o2 < 0) & (o3 * o4 < 0)
        touch = (
            ((o1 == 0) & _on_seg(p, p + r, q))
            | ((o2 == 0) & _on_seg(p, p + r, q + u))
            | ((o3 == 0) & _on_seg(q, q + u, p))
            | ((o4 == 0) & _on_seg(q, q + u, p + r))
        )
        if np.any((proper | touch) & ~adjacent):
            return True
    return False


def _orient(p, q, r):
    return np.sign((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))


def _on_seg(p, q, r):
    return (
        (np.minimum(p[..., 0], q[..., 0]) <= r[..., 0])
        & (r[..., 0] <= np.maximum(p[..., 0], q[..., 0]))
        & (np.minimum(p[..., 1], q[..., 1]) <= r[..., 1])
        & (r[..., 1] <= np.maximum(p[..., 1], q[..., 1]))
    )


# --- mesh file format -------------------------------------------------------


def parse_mesh_text(text: str) -> BoundaryMesh:
    """Parse the plain-text boundary format (``dim d`` then ``v x y`` or ``interval a b``)."""
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith("dim"):
        raise GeometryError("mesh file must start with 'dim d'")
    dim = int(lines[0].split()[1])
    if dim == 1:
        parts = [ln.split() for ln in lines[1:]]
        if len(parts) != 1 or parts[0][0] != "interval" or len(parts[0]) != 3:
            raise GeometryError("1D mesh needs exactly one 'interval a b' line")
        return BoundaryMesh.interval(float(parts[0][1]), float(parts[0][2]))
    if dim != 2:
        raise GeometryError(f"unsupported dimension {dim}")
    verts = []
    for ln in lines[1:]:
        tok = ln.split()
        if tok[0] != "v" or len(tok) != 3:
            raise GeometryError(f"bad vertex line: {ln!r}")
        verts.append((float(tok[1]), float(tok[2])))
    return BoundaryMesh.polygon(verts)


def format_mesh_text(mesh: BoundaryMesh) -> str:
    if mesh.dim == 1:
        a, b = mesh.vertices[:, 0]
        return f"dim 1\ninterval {float(a)!r} {float(b)!r}\n"
    return "dim 2\n" + "".join(f"v {float(x)!r} {float(y)!r}\n" for x, y in mesh.vertices)


# --- point classification ---------------------------------------------------


def point_in_domain(mesh: BoundaryMesh, x, tol: float | None = None):
    """Inside/outside test; points within ``tol`` of the boundary count as inside.

    ``x`` is one point or an ``(m, d)`` array; returns a bool or bool array.
    The default ``tol`` is ``1e-12`` times the bounding-box diameter.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1 and (mesh.dim == 2 or x.shape == (1,))
    if mesh.dim == 1 and x.ndim <= 1 and not single:
        x = x.reshape(-1, 1)
    pts = np.atleast_2d(x).reshape(-1, mesh.dim)
    lo, hi = mesh.bbox
    if tol is None:
        tol = 1e-12 * max(1.0, float(np.max(hi - lo)))
    if mesh.dim == 1:
        a, b = mesh.vertices[:, 0]
        res = (pts[:, 0] >= a - tol) & (pts[:, 0] <= b + tol)
    else:
        res = np.zeros(len(pts), dtype=bool)
        for s in range(0, len(pts), 1 << 16):
            res[s : s + (1 << 16)] = _pip_2d(mesh, pts[s : s + (1 << 16)], tol)
    return bool(res[0]) if single else res


def _pip_2d(mesh: BoundaryMesh, p: np.ndarray, tol: float) -> np.ndarray:
    """Crossing number plus boundary-distance test, bucketed by horizontal bands.

    Only facets whose y-extent (widened by ``tol``) meets a band can affect
    points in that band, so each point sees a handful of facets.
    """
    lo, hi = mesh.bbox
    res = np.zeros(len(p), dtype=bool)
    cand = np.flatnonzero(np.all((p >= lo - tol) & (p <= hi + tol), axis=1))
    if not len(cand):
        return res
    a, b = mesh.starts, mesh.ends
    fy0 = np.minimum(a[:, 1], b[:, 1]) - tol
    fy1 = np.maximum(a[:, 1], b[:, 1]) + tol
    nb = max(1, min(int(np.sqrt(mesh.num_facets)) * 2, 512))
    edges = np.linspace(lo[1] - tol, hi[1] + tol, nb + 1)
    band = np.clip(np.searchsorted(edges, p[cand, 1], side="right") - 1, 0, nb - 1)
    order = np.argsort(band, kind="stable")
    starts = np.searchsorted(band[order], np.arange(nb + 1))
    for k in range(nb):
        sel = cand[order[starts[k] : starts[k + 1]]]
        if not len(sel):
            continue
        f = np.flatnonzero((fy1 >= edges[k]) & (fy0 <= edges[k + 1]))
        q = p[sel]
        if not len(f):
            continue
        fa, fb = a[f], b[f]
        px, py = q[:, 0:1], q[:, 1:2]
        ay, by = fa[None, :, 1], fb[None, :, 1]
        ax, bx = fa[None, :, 0], fb[None, :, 0]
        straddle = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (py - ay) * (bx - ax) / (by - ay)
        crossings = np.count_nonzero(straddle & (px < xint), axis=1)
        inside = (crossings % 2) == 1
        inside |= _dist_to_segments(q, fa, fb).min(axis=1) <= tol
        res[sel] = inside
    return res


def _dist_to_segments(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    L2 = np.einsum("ij,ij->i", d, d)
    rel = p[:, None, :] - a[None, :, :]
    s = np.clip(np.einsum("pmi,mi->pm", rel, d) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    diff = rel - s[..., None] * d[None]
    return np.sqrt(np.einsum("pmi,pmi->pm", diff, diff))


def project_to_boundary(mesh: BoundaryMesh, x: np.ndarray) -> np.ndarray:
    """Nearest boundary point for each row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if mesh.dim == 1:
        a, b = mesh.vertices[:, 0]
        return np.where(np.abs(x - a) <= np.abs(x - b), a, b)
    out = np.empty_like(x)
    a, b = mesh.starts, mesh.ends
    d = b - a
    L2 = np.einsum("ij,ij->i", d, d)
    for s in range(0, len(x), 2048):
        p = x[s : s + 2048]
        rel = p[:, None, :] - a[None]
        t = np.clip(np.einsum("pmi,mi->pm", rel, d) / L2, 0.0, 1.0)
        proj = a[None] + t[..., None] * d[None]
        dist = np.einsum("pmi,pmi->pm", p[:, None] - proj, p[:, None] - proj)
        k = np.argmin(dist, axis=1)
        out[s : s + 2048] = proj[np.arange(len(p)), k]
    return out


# --- cell clipping ------------------------------------------------------------


@dataclass
class ClippedCell:
    """``Q ∩ Omega`` for an axis-aligned box ``Q = [lo, hi]``.

    ``region`` is the clipped polygon (2D, counterclockwise, possibly with
    zero-width bridges along the box boundary for non-convex domains) or the
    interval ``[[a], [b]]`` (1D).  ``triangles`` is a signed fan
    triangulation about the vertex average, which lies inside the box; the
    signed areas in ``tri_areas`` sum to ``measure``.
    """

    lo: np.ndarray
    hi: np.ndarray
    region: np.ndarray
    measure: float
    degenerate: bool = False
    index: tuple | None = None
    triangles: np.ndarray = field(default=None, repr=False)
    tri_areas: np.ndarray = field(default=None, repr=False)

    @property
    def cell_measure(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @property
    def is_full(self) -> bool:
        return self.measure >= self.cell_measure * (1.0 - 1e-12)


def clip_cell(mesh: BoundaryMesh, lo, hi, index=None, eps: float = 1e-12) -> ClippedCell:
    """Intersect the box ``[lo, hi]`` with the domain.

    Intersections with measure below ``eps * |Q|`` are reported as measure 0
    with ``degenerate=True``.
    """
    lo = np.asarray(lo, dtype=float).reshape(mesh.dim)
    hi = np.asarray(hi, dtype=float).reshape(mesh.dim)
    vol = float(np.prod(hi - lo))
    if mesh.dim == 1:
        a, b = mesh.vertices[:, 0]
        l, r = max(lo[0], a), min(hi[0], b)
        meas = max(r - l, 0.0)
        region = np.array([[l], [max(r, l)]])
        cc = ClippedCell(lo, hi, region, meas, index=index)
        cc.triangles = region[None]
        cc.tri_areas = np.array([meas])
    else:
        P = mesh.vertices
        for axis in range(2):
            P = _clip_half(P, axis, lo[axis], keep_below=False)
            if len(P) < 3:
                break
            P = _clip_half(P, axis, hi[axis], keep_below=True)
            if len(P) < 3:
                break
        if len(P) >= 3:
            meas = _signed_area(P)
            tris, areas = _fan(P)
        else:
            P = np.zeros((0, 2))
            meas = 0.0
            tris, areas = np.zeros((0, 3, 2)), np.zeros(0)
        cc = ClippedCell(lo, hi, P, max(meas, 0.0), index=index, triangles=tris, tri_areas=areas)
    if 0.0 < cc.measure < eps * vol:
        cc.measure = 0.0
        cc.degenerate = True
    return cc


def _clip_half(P: np.ndarray, axis: int, value: float, keep_below: bool) -> np.ndarray:
    """One Sutherland-Hodgman stage against an axis-aligned half plane."""
    s = P[:, axis] - value if keep_below else value - P[:, axis]
    inside = s <= 0.0
    if inside.all():
        return P
    if not inside.any():
        return P[:0]
    prev = np.roll(P, 1, axis=0)
    sp = np.roll(s, 1)
    crossing = inside != np.roll(inside, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tpar = np.where(crossing, sp / (sp - s), 0.0)
    inter = prev + tpar[:, None] * (P - prev)
    inter[:, axis] = np.where(crossing, value, inter[:, axis])
    out = np.stack([inter, P], axis=1)
    keep = np.stack([crossing, inside], axis=1)
    Q = out[keep]
    if len(Q) > 1:
        dup = np.all(Q == np.roll(Q, 1, axis=0), axis=1)
        Q = Q[~dup]
    return Q


def _fan(P: np.ndarray):
    c = P.mean(axis=0)
    a, b = P, np.roll(P, -1, axis=0)
    areas = 0.5 * ((a[:, 0] - c[0]) * (b[:, 1] - c[1]) - (a[:, 1] - c[1]) * (b[:, 0] - c[0]))
    keep = areas != 0.0
    tris = np.stack([np.broadcast_to(c, a.shape), a, b], axis=1)[keep]
    return tris, areas[keep]


# --- quadrature rules -----------------------------------------------------------


@lru_cache(maxsize=None)
def triangle_rule(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed (Duffy) Gauss rule on the reference triangle (0,0),(1,0),(0,1).

    ``k`` points per direction; exact for total degree ``2k - 2``.  Weights
    sum to 1/2.
    """
    x, w = np.polynomial.legendre.leggauss(k)
    s, ws = 0.5 * (x + 1), 0.5 * w
    u, v = np.meshgrid(s, s, indexing="ij")
    wu, wv = np.meshgrid(ws, ws, indexing="ij")
    # (u, v) in unit square -> (u (1 - v), v); Jacobian (1 - v)
    pts = np.column_stack([(u * (1 - v)).ravel(), v.ravel()])
    wts = (wu * wv * (1 - v)).ravel()
    return pts, wts


def region_rule(cc: ClippedCell, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Points and (signed) weights integrating over ``Q ∩ Omega``.

    2D: collapsed Gauss with ``k`` points per direction on each fan triangle
    (exact for total degree ``2k - 2``).  1D: ``k``-point Gauss on the interval.
    """
    if cc.measure == 0.0:
        d = len(cc.lo)
        return np.zeros((0, d)), np.zeros(0)
    if len(cc.lo) == 1:
        x, w = np.polynomial.legendre.leggauss(k)
        l, r = cc.region[0, 0], cc.region[1, 0]
        return (l + 0.5 * (x + 1) * (r - l))[:, None], 0.5 * w * (r - l)
    ref, rw = triangle_rule(k)
    T = cc.triangles
    e1 = T[:, 1] - T[:, 0]
    e2 = T[:, 2] - T[:, 0]
    pts = T[:, None, 0] + ref[None, :, 0:1] * e1[:, None] + ref[None, :, 1:2] * e2[:, None]
    wts = 2.0 * cc.tri_areas[:, None] * rw[None, :]
    return pts.reshape(-1, 2), wts.ravel()


@dataclass
class BoundaryRule:
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)


def boundary_rule(mesh: BoundaryMesh, lo, hi, points_per_facet: int) -> BoundaryRule:
    """Gauss-Legendre rule on the part of the boundary inside the box ``[lo, hi]``.

    Each facet piece gets ``points_per_facet`` nodes (exact for degree
    ``2*points_per_facet - 1`` along the facet); weights carry the piece
    length.  In 1D the rule holds the endpoints in the box with weight 1 and
    normal -1/+1.
    """
    if points_per_facet < 1:
        raise ValueError("points_per_facet must be >= 1")
    lo = np.asarray(lo, dtype=float).reshape(mesh.dim)
    hi = np.asarray(hi, dtype=float).reshape(mesh.dim)
    if mesh.dim == 1:
        v = mesh.vertices[:, 0]
        keep = (v >= lo[0]) & (v <= hi[0])
        return BoundaryRule(v[keep][:, None], mesh.normals[keep], np.ones(int(keep.sum())))
    t0, t1 = _liang_barsky(mesh.starts, mesh.ends, lo, hi)
    keep = t1 > t0
    a, d = mesh.starts[keep], mesh.tangents[keep]
    t0, t1 = t0[keep], t1[keep]
    if not len(a):
        return BoundaryRule(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    x, w = np.polynomial.legendre.leggauss(points_per_facet)
    s = 0.5 * (x + 1)
    tt = t0[:, None] + (t1 - t0)[:, None] * s[None]
    pts = a[:, None, :] + tt[..., None] * d[:, None, :]
    L = np.hypot(d[:, 0], d[:, 1]) * (t1 - t0)
    wts = L[:, None] * 0.5 * w[None]
    nrm = mesh.normals[keep][:, None, :].repeat(points_per_facet, axis=1)
    return BoundaryRule(pts.reshape(-1, 2), nrm.reshape(-1, 2), wts.ravel())


def _liang_barsky(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Parameter range ``[t0, t1]`` of each segment ``a + t (b - a)`` inside the box."""
    d = b - a
    t0 = np.zeros(len(a))
    t1 = np.ones(len(a))
    for ax in range(a.shape[1]):
        for p, q in ((-d[:, ax], a[:, ax] - lo[..., ax]), (d[:, ax], hi[..., ax] - a[:, ax])):
            par = p == 0
            with np.errstate(divide="ignore", invalid="ignore"):
                r = q / p
            t0 = np.where(~par & (p < 0), np.maximum(t0, r), t0)
            t1 = np.where(~par & (p > 0), np.minimum(t1, r), t1)
            t1 = np.where(par & (q < 0), -1.0, t1)
    return t0, t1


def segments_hit_box(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Whether each segment meets the closed box (vectorised over segments and boxes)."""
    t0, t1 = _liang_barsky(a, b, lo, hi)
    return t1 >= t0
