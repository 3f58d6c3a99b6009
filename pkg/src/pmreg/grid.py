"""Unfitted Cartesian grid, cell classification and ghost-penalty faces.

Cell ``i`` is ``prod_d [i_d*sigma, (i_d+1)*sigma]`` with the grid anchored at
the origin.  Experiments that move the boundary relative to the grid shift the
mesh, never the grid.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BoundaryMesh, ClippedCell, clip_cell, region_rule, segments_hit_box

OUTSIDE, CUT, INTERIOR = 0, 1, 2


class NoInteriorCell(RuntimeError):
    pass


class Unreachable(RuntimeError):
    def __init__(self, cell):
        self.cell = tuple(int(c) for c in cell)
        super().__init__(f"cut cell {self.cell} cannot reach any interior cell through ghost faces")


@dataclass(frozen=True)
class CartesianGrid:
    """Window of cells ``lo <= i < hi`` on the grid of spacing ``sigma``."""

    sigma: float
    lo: np.ndarray
    hi: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.hi - self.lo)

    @classmethod
    def covering(cls, mesh: BoundaryMesh, sigma: float, pad: int = 3) -> "CartesianGrid":
        """Window around the mesh bounding box, padded by ``pad`` cells."""
        blo, bhi = mesh.bbox
        lo = np.floor(blo / sigma).astype(np.int64) - pad
        hi = np.floor(bhi / sigma).astype(np.int64) + 1 + pad
        return cls(float(sigma), lo, hi)

    def cell_box(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        return idx * self.sigma, (idx + 1) * self.sigma

    def cell_centers(self) -> list[np.ndarray]:
        return [(np.arange(l, h) + 0.5) * self.sigma for l, h in zip(self.lo, self.hi)]


@dataclass
class FictitiousDomain:
    """Classification of the grid window against the domain.

    ``cls`` holds OUTSIDE/CUT/INTERIOR per cell (window coordinates).
    ``ghost_faces`` rows are ``(axis, i_1, ..., i_d)`` naming the face between
    cell ``i`` and ``i + e_axis``; they are stored once, sorted
    lexicographically.  ``K`` is the largest number of ghost faces a cut cell
    must cross to reach an interior cell.
    """

    grid: CartesianGrid
    mesh: BoundaryMesh
    cls: np.ndarray
    clipped: dict = field(repr=False)
    ghost_faces: np.ndarray = field(repr=False)
    K: int = 0
    degenerate: list = field(default_factory=list, repr=False)
    reclassified: list = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def active(self) -> np.ndarray:
        return self.cls != OUTSIDE

    def cells(self, kind: int | None = None) -> np.ndarray:
        """Multi-indices of the cells of one class (or all active cells)."""
        sel = self.active if kind is None else self.cls == kind
        return np.argwhere(sel) + self.grid.lo

    @property
    def cut_cells(self) -> np.ndarray:
        return self.cells(CUT)

    @property
    def interior_cells(self) -> np.ndarray:
        return self.cells(INTERIOR)

    def cell_class(self, idx) -> int:
        w = np.asarray(idx) - self.grid.lo
        if np.any(w < 0) or np.any(w >= self.grid.shape):
            return OUTSIDE
        return int(self.cls[tuple(w)])

    def cell_measure(self, idx) -> float:
        """``meas(Q_i ∩ Omega)`` from the classification (no clipping for uncut cells)."""
        key = tuple(int(i) for i in idx)
        cc = self.clipped.get(key)
        if cc is not None:
            return cc.measure
        return self.grid.sigma**self.dim if self.cell_class(key) == INTERIOR else 0.0

    def clip(self, idx) -> ClippedCell:
        """Clipped region of a cell (cached for cut cells)."""
        key = tuple(int(i) for i in idx)
        cc = self.clipped.get(key)
        if cc is None:
            lo, hi = self.grid.cell_box(key)
            cc = clip_cell(self.mesh, lo, hi, index=key)
            if self.cell_class(key) == INTERIOR:
                cc.region = _box_polygon(lo, hi) if self.dim == 2 else np.array([[lo[0]], [hi[0]]])
        return cc

    def dump_csv(self, cells_path, faces_path) -> None:
        with open(cells_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"cell_{a}" for a in "ijk"[: self.dim]] + ["class"])
            names = {OUTSIDE: "outside", CUT: "cut", INTERIOR: "interior"}
            for idx in np.argwhere(self.active):
                w.writerow(list(idx + self.grid.lo) + [names[int(self.cls[tuple(idx)])]])
        with open(faces_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["face_axis"] + [f"face_{a}" for a in "ijk"[: self.dim]])
            for row in self.ghost_faces:
                w.writerow(list(row))


def _box_polygon(lo, hi) -> np.ndarray:
    return np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])


def classify(grid: CartesianGrid, mesh: BoundaryMesh, eps: float = 1e-12, require_interior: bool = True) -> FictitiousDomain:
    """Split the window into interior, cut and outside cells and collect F_sigma.

    Only cells touched by the boundary are clipped; all others are decided by
    their centre.  A clip below ``eps * sigma**d`` counts as outside.
    """
    if grid.dim != mesh.dim:
        raise ValueError("grid and mesh dimensions differ")
    sigma = grid.sigma
    cls = _classify_centers(grid, mesh)
    clipped = {}
    degenerate = []
    for idx in _touched_cells(grid, mesh):
        lo, hi = grid.cell_box(idx)
        cc = clip_cell(mesh, lo, hi, index=tuple(int(i) for i in idx), eps=eps)
        w = tuple(idx - grid.lo)
        if cc.degenerate:
            degenerate.append(cc.index)
        if cc.measure <= 0.0:
            cls[w] = OUTSIDE
        elif cc.is_full:
            cls[w] = INTERIOR
        else:
            cls[w] = CUT
            clipped[cc.index] = cc
    if require_interior and not np.any(cls == INTERIOR):
        lo, hi = mesh.bbox
        raise NoInteriorCell(
            f"no interior cell at sigma={sigma}; try sigma <= {float(np.min(hi - lo)) / 4:.4g}"
        )
    fd = FictitiousDomain(grid, mesh, cls, clipped, _ghost_faces(grid, cls), degenerate=degenerate)
    fd.K = _max_distance(fd, strict=False)
    return fd


def _classify_centers(grid: CartesianGrid, mesh: BoundaryMesh) -> np.ndarray:
    centers = grid.cell_centers()
    if grid.dim == 1:
        a, b = mesh.vertices[:, 0]
        inside = (centers[0] > a) & (centers[0] < b)
        return np.where(inside, INTERIOR, OUTSIDE).astype(np.int8)
    cls = np.zeros(grid.shape, dtype=np.int8)
    ax, ay = mesh.starts[:, 0], mesh.starts[:, 1]
    bx, by = mesh.ends[:, 0], mesh.ends[:, 1]
    xc = centers[0]
    for j, y in enumerate(centers[1]):
        straddle = (ay > y) != (by > y)
        if not np.any(straddle):
            continue
        xs = ax[straddle] + (y - ay[straddle]) * (bx[straddle] - ax[straddle]) / (by[straddle] - ay[straddle])
        xs.sort()
        inside = (np.searchsorted(xs, xc) % 2) == 1
        cls[:, j] = np.where(inside, INTERIOR, OUTSIDE)
    return cls


def _touched_cells(grid: CartesianGrid, mesh: BoundaryMesh) -> np.ndarray:
    """Cells whose closed box meets the boundary."""
    sigma = grid.sigma
    tol = 1e-12 * sigma
    if grid.dim == 1:
        out = set()
        for v in mesh.vertices[:, 0]:
            for c in range(int(np.floor((v - tol) / sigma)), int(np.floor((v + tol) / sigma)) + 1):
                out.add((c,))
        cells = np.array(sorted(out), dtype=np.int64).reshape(-1, 1)
    else:
        chunks = []
        a, b = mesh.starts, mesh.ends
        lo = np.floor((np.minimum(a, b) - tol) / sigma).astype(np.int64)
        hi = np.floor((np.maximum(a, b) + tol) / sigma).astype(np.int64)
        for f in range(len(a)):
            ii, jj = np.meshgrid(np.arange(lo[f, 0], hi[f, 0] + 1), np.arange(lo[f, 1], hi[f, 1] + 1), indexing="ij")
            c = np.column_stack([ii.ravel(), jj.ravel()])
            blo = c * sigma - tol
            bhi = (c + 1) * sigma + tol
            hit = segments_hit_box(np.repeat(a[f : f + 1], len(c), 0), np.repeat(b[f : f + 1], len(c), 0), blo, bhi)
            chunks.append(c[hit])
        cells = np.unique(np.concatenate(chunks), axis=0)
    inwin = np.all((cells >= grid.lo) & (cells < grid.hi), axis=1)
    if not np.all(inwin):
        raise ValueError("grid window does not cover the boundary")
    return cells


def _ghost_faces(grid: CartesianGrid, cls: np.ndarray) -> np.ndarray:
    active = cls != OUTSIDE
    cut = cls == CUT
    rows = []
    for a in range(grid.dim):
        lower = [slice(None)] * grid.dim
        upper = [slice(None)] * grid.dim
        lower[a] = slice(0, -1)
        upper[a] = slice(1, None)
        lower, upper = tuple(lower), tuple(upper)
        both = active[lower] & active[upper]
        sel = both & (cut[lower] | cut[upper])
        idx = np.argwhere(sel) + grid.lo
        rows.append(np.column_stack([np.full(len(idx), a), idx]))
    faces = np.concatenate(rows) if rows else np.zeros((0, grid.dim + 1), dtype=np.int64)
    return faces.astype(np.int64)


def faces_of(fd: FictitiousDomain, cells) -> np.ndarray:
    """All faces of the given cells, deduplicated, sorted by (axis, index)."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, fd.dim)
    if not len(cells):
        return np.zeros((0, fd.dim + 1), dtype=np.int64)
    rows = []
    for a in range(fd.dim):
        e = np.zeros(fd.dim, dtype=np.int64)
        e[a] = 1
        for lower in (cells - e, cells):
            rows.append(np.column_stack([np.full(len(cells), a), lower]))
    return np.unique(np.concatenate(rows), axis=0)


def _adjacency(fd: FictitiousDomain) -> dict:
    adj: dict = {}
    for row in fd.ghost_faces:
        a, c = int(row[0]), tuple(int(v) for v in row[1:])
        c2 = list(c)
        c2[a] += 1
        c2 = tuple(c2)
        adj.setdefault(c, []).append(c2)
        adj.setdefault(c2, []).append(c)
    return adj


def reachability(fd: FictitiousDomain) -> dict:
    """Number of ghost faces from each cut cell to the nearest interior cell (BFS)."""
    adj = _adjacency(fd)
    dist: dict = {}
    queue = deque()
    for c in map(tuple, fd.interior_cells.tolist()):
        if c in adj:
            dist[c] = 0
            queue.append(c)
    while queue:
        c = queue.popleft()
        for nb in adj.get(c, ()):
            if nb not in dist:
                dist[nb] = dist[c] + 1
                queue.append(nb)
    return {c: dist.get(c, np.inf) for c in map(tuple, fd.cut_cells.tolist())}


def _max_distance(fd: FictitiousDomain, strict: bool = True) -> int:
    dist = reachability(fd)
    if not dist:
        return 0
    worst = max(dist, key=lambda c: dist[c])
    if np.isinf(dist[worst]):
        if strict:
            raise Unreachable(worst)
        return -1
    return int(dist[worst])


def enforce_reachability(fd: FictitiousDomain, K_max: int = 3) -> FictitiousDomain:
    """Check the face-chain assumption and record the achieved ``K``.

    When some cut cell needs more than ``K_max`` faces, the interior cells
    that terminate its chain are moved to the cut set, which enlarges
    F_sigma.  That widens the penalised band but cannot shorten a chain, so
    a warning reports the achieved ``K`` if it still exceeds ``K_max``.
    Raises :class:`Unreachable` for a cut cell with no chain at all.
    """
    dist = reachability(fd)
    for c, dc in dist.items():
        if np.isinf(dc):
            raise Unreachable(c)
    K = int(max(dist.values(), default=0))
    if K <= K_max:
        return replace(fd, K=K)
    far = [c for c, dc in dist.items() if dc > K_max]
    adj = _adjacency(fd)
    # walk each far cell's BFS chain down to the interior cell that ends it
    bridges = set()
    interior = set(map(tuple, fd.interior_cells.tolist()))
    for c in far:
        cur = c
        while cur not in interior:
            cur = min((nb for nb in adj[cur]), key=lambda nb: (0 if nb in interior else dist.get(nb, np.inf), nb))
        bridges.add(cur)
    cls = fd.cls.copy()
    clipped = dict(fd.clipped)
    for b in sorted(bridges):
        cls[tuple(np.asarray(b) - fd.grid.lo)] = CUT
        lo, hi = fd.grid.cell_box(b)
        clipped[b] = clip_cell(fd.mesh, lo, hi, index=b)
    out = replace(fd, cls=cls, clipped=clipped, ghost_faces=_ghost_faces(fd.grid, cls))
    out.reclassified = list(fd.reclassified) + sorted(bridges)
    out.K = _max_distance(out)
    if out.K > K_max:
        warnings.warn(f"face-chain length {out.K} exceeds K_max={K_max} after reclassification", stacklevel=2)
    return out


def domain_rule(fd: FictitiousDomain, k: int, region: str = "omega") -> tuple[np.ndarray, np.ndarray]:
    """Quadrature over Omega (``region="omega"``) or the whole of Omega_sigma.

    Interior (or all active) cells use ``k``-point tensor Gauss; cut cells use
    the clipped-region rule with ``k`` points per direction.
    """
    from .splines import tensor_gauss_01

    sigma, d = fd.grid.sigma, fd.dim
    ref, rw = tensor_gauss_01(k, d)
    full = fd.interior_cells if region == "omega" else fd.cells()
    pts = [((full[:, None, :] + ref[None]) * sigma).reshape(-1, d)]
    wts = [np.tile(rw * sigma**d, len(full))]
    if region == "omega":
        for cc in fd.clipped.values():
            p, w = region_rule(cc, k)
            pts.append(p)
            wts.append(w)
    return np.concatenate(pts), np.concatenate(wts)
