"""Nonnegative per-basis-function quadrature rules and particle fields.

Each basis function ``b_lam`` gets a rule ``{(x_i, w_i)}`` on ``supp b_lam ∩ Omega``
with ``w_i >= 0`` that integrates ``b_lam b_mu`` exactly for every
overlapping ``mu``.  Functions whose support meets no cut cell use tensor
Gauss; the others solve a small linear program over scattered candidate
nodes.  A spline ``sum c_lam b_lam`` then becomes the particle field
``sum_lam sum_i w_i c_lam b_lam(x_i) delta_{x_i}``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import point_in_domain, region_rule
from .grid import CUT, INTERIOR, OUTSIDE, FictitiousDomain
from .lp import LPError, lp_solve
from .moments import MomentTable
from .splines import SplineField, SplineSpace, basis_values, eval_field, tensor_gauss_01


class ConstructionFailed(RuntimeError):
    def __init__(self, lam, constraints: int, cut_measure: float, rounds: int, last_error: str):
        self.lam = tuple(int(v) for v in lam)
        self.constraints = constraints
        self.cut_measure = cut_measure
        self.rounds = rounds
        super().__init__(
            f"no admissible rule for lambda={self.lam} after {rounds} rounds "
            f"({constraints} constraints, support measure in Omega {cut_measure:.3e}; last: {last_error}); "
            "increase scatter_batch or C_Stab"
        )


class MissingRule(KeyError):
    pass


@dataclass
class QuadRule:
    lam: tuple
    nodes: np.ndarray
    weights: np.ndarray
    residual: float  # max_mu |sum_i w_i b_lam b_mu (x_i) - M[lam, mu]|
    kind: str = "interior"
    rounds: int = 0

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


def _support_cells(lam, n: int) -> np.ndarray:
    d = len(lam)
    return np.asarray(lam) + np.array(list(itertools.product(range(n), repeat=d)))


def interior_rule(lam, space: SplineSpace, fd: FictitiousDomain) -> QuadRule:
    """Tensor Gauss rule, ``n`` points per axis on every support cell in Omega.

    Valid when no cell of the support is cut: support cells are then either
    interior or carry no part of Omega.
    """
    n, d, h = space.n, space.dim, space.sigma
    lam = tuple(int(v) for v in lam)
    cells = _support_cells(lam, n)
    cls = np.array([fd.cell_class(c) for c in cells])
    if np.any(cls == CUT):
        raise ValueError(f"interior_rule called on lambda={lam} whose support is cut")
    cells = cells[cls == INTERIOR]
    ref, rw = tensor_gauss_01(n, d)
    nodes = ((cells[:, None, :] + ref[None]) * h).reshape(-1, d)
    weights = np.tile(rw, len(cells)) * h**d
    return QuadRule(lam, nodes, weights, 0.0, "interior")


def _lam_rng(seed: int, lam) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFF] + [(int(v) + (1 << 31)) & 0xFFFFFFFF for v in lam]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _sample_cell(fd: FictitiousDomain, cell, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` points in ``cell ∩ Omega`` (fewer only if the region is a sliver)."""
    h, d = fd.grid.sigma, fd.dim
    if fd.cell_class(cell) == INTERIOR and tuple(int(v) for v in cell) not in fd.clipped:
        return (np.asarray(cell) + rng.random((count, d))) * h
    cc = fd.clipped.get(tuple(int(v) for v in cell)) or fd.clip(cell)
    if d == 1:
        l, r = cc.region[:, 0]
        return (l + (r - l) * rng.random(count))[:, None]
    if not len(cc.triangles):
        return np.zeros((0, d))
    p = np.abs(cc.tri_areas) / np.abs(cc.tri_areas).sum()
    out = []
    got = 0
    for _ in range(8):
        tri = rng.choice(len(p), size=count, p=p)
        u = rng.random((count, 2))
        flip = u.sum(axis=1) > 1.0
        u[flip] = 1.0 - u[flip]
        T = cc.triangles[tri]
        pts = T[:, 0] + u[:, :1] * (T[:, 1] - T[:, 0]) + u[:, 1:] * (T[:, 2] - T[:, 0])
        ok = np.all((pts >= cc.lo) & (pts <= cc.hi), axis=1) & point_in_domain(fd.mesh, pts)
        out.append(pts[ok])
        got += int(ok.sum())
        if got >= count:
            break
    return np.concatenate(out)[:count]


def _moment_matrix(space: SplineSpace, lam_id: int, mus: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``A[j, i] = b_lam(x_i) b_{mu_j}(x_i)`` for sorted ``mus``."""
    ids, vals = basis_values(space, x)
    blam = np.where(ids == lam_id, vals, 0.0).sum(axis=1)
    A = np.zeros((len(mus), len(x)))
    if not len(mus):
        return A
    J = np.searchsorted(mus, ids)
    Jc = np.minimum(J, len(mus) - 1)
    ok = mus[Jc] == ids
    pt = np.broadcast_to(np.arange(len(x))[:, None], ids.shape)
    np.add.at(A, (Jc[ok], pt[ok]), vals[ok])
    return A * blam[None, :]


def cut_rule(
    lam,
    space: SplineSpace,
    fd: FictitiousDomain,
    moments: MomentTable,
    C_stab: float = 2.0,
    scatter_batch: int | None = None,
    seed: int = 0,
    max_rounds: int = 20,
    lp_rule: str = "dantzig",
) -> QuadRule:
    """Moment-fitting rule with nonnegative weights from a minimum-sum LP.

    Candidates are the Gauss nodes of the interior cells of the support plus
    random points scattered in the cut part; each failed round (infeasible LP
    or total weight above ``C_stab (n h)^d``) adds another batch.
    """
    n, d, h = space.n, space.dim, space.sigma
    lam = tuple(int(v) for v in lam)
    lam_id = space.dense_id(lam)
    mus, rhs = moments.row(lam)
    m = len(mus)
    batch = scatter_batch or 2 * m
    budget = C_stab * (n * h) ** d
    tol = 1e-10 * (n * h) ** d
    cells = _support_cells(lam, n)
    cls = np.array([fd.cell_class(c) for c in cells])
    active = cells[cls != OUTSIDE]
    ref, _ = tensor_gauss_01(n, d)
    inner = cells[cls == INTERIOR]
    inner = inner[[tuple(c) not in fd.clipped for c in map(tuple, inner.tolist())]] if len(inner) else inner
    pts = [((inner[:, None, :] + ref[None]) * h).reshape(-1, d)]
    # Gauss nodes of the clipped cut regions cover thin slivers from the start
    for c in active:
        cc = fd.clipped.get(tuple(int(v) for v in c))
        if cc is not None:
            p = region_rule(cc, n)[0]
            # a signed fan on a non-convex cut can place nodes outside Omega
            pts.append(p[point_in_domain(fd.mesh, p)] if len(p) else p)
    pts = np.vstack(pts)
    rng = _lam_rng(seed, lam)
    per_cell = max(1, -(-batch // max(len(active), 1)))
    scale = h**-d
    last = ""
    measure = float(sum(fd.cell_measure(c) for c in active))
    for rounds in range(1, max_rounds + 1):
        new = [_sample_cell(fd, c, per_cell, rng) for c in active]
        pts = np.vstack([pts] + new)
        A = _moment_matrix(space, lam_id, mus, pts)
        # a row that any within-budget rule meets to half the tolerance is
        # left out of the LP (corner slivers where b_lam is ~1e-10)
        live = np.abs(A).max(axis=1, initial=0.0) * budget + np.abs(rhs) > 0.5 * tol
        if not live.any():
            w = np.zeros(len(pts))
        else:
            try:
                res = lp_solve(np.ones(len(pts)), A[live], rhs[live] * scale, rule=lp_rule)
            except LPError as e:
                last = type(e).__name__
                continue
            w = res.x / scale
        keep = w > 0.0
        residual = float(np.abs(A[:, keep] @ w[keep] - rhs).max(initial=0.0))
        if w.sum() <= budget and residual <= tol:
            return QuadRule(lam, pts[keep], w[keep], residual, "cut", rounds)
        last = f"sum(w)={w.sum():.3e} vs budget {budget:.3e}, residual {residual:.1e}"
    raise ConstructionFailed(lam, m, measure, max_rounds, last)


@dataclass
class QuadratureTable:
    """Rules for every function of ``space``.

    Cut rules are stored; interior rules are regenerated on request (they
    are translates of one another).  ``interior_mask`` is over dense ids.
    """

    space: SplineSpace
    fd: FictitiousDomain
    interior_mask: np.ndarray
    cut: dict = field(default_factory=dict)  # dense id -> QuadRule
    seed: int = 0
    C_stab: float = 2.0

    def rule(self, i: int) -> QuadRule:
        if i in self.cut:
            return self.cut[i]
        if 0 <= i < self.space.size and self.interior_mask[i]:
            return interior_rule(self.space.indices[i], self.space, self.fd)
        raise MissingRule(f"no rule for lambda={tuple(self.space.indices[i])}")

    def __iter__(self):
        for i in range(self.space.size):
            yield i, self.rule(i)

    def node_count(self) -> int:
        """Total particles of the uncompressed construction."""
        n, d = self.space.n, self.space.dim
        ni = 0
        ids = np.flatnonzero(self.interior_mask)
        if len(ids):
            cls = _interior_cells_per_lambda(self.space, self.fd)
            ni = int(cls[ids].sum()) * n**d
        return ni + sum(len(r.weights) for r in self.cut.values())

    def dump_csv(self, path) -> None:
        d = self.space.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda"] + [f"x{a + 1}" for a in range(d)] + ["w"])
            for i, r in self:
                for x, wt in zip(r.nodes, r.weights):
                    w.writerow([i] + [repr(float(v)) for v in x] + [repr(float(wt))])


def _window_any(space: SplineSpace, fd: FictitiousDomain, cell_flag: np.ndarray) -> np.ndarray:
    """Per dense id: does any support cell carry ``cell_flag``?"""
    n = space.n
    out = np.zeros(space.shape, dtype=bool)
    off = fd.grid.lo - space.lam_lo
    for k in itertools.product(range(n), repeat=space.dim):
        # lam = cell - k  ->  lam window index = cell window index + off - k
        src, dst = [], []
        for a in range(space.dim):
            shift = int(off[a]) - k[a]
            L = cell_flag.shape[a]
            lo_d = max(shift, 0)
            hi_d = min(shift + L, out.shape[a])
            dst.append(slice(lo_d, hi_d))
            src.append(slice(lo_d - shift, hi_d - shift))
        out[tuple(dst)] |= cell_flag[tuple(src)]
    return out[space.mask]


def _interior_cells_per_lambda(space: SplineSpace, fd: FictitiousDomain) -> np.ndarray:
    n = space.n
    out = np.zeros(space.shape, dtype=np.int64)
    flag = (fd.cls == INTERIOR).astype(np.int64)
    off = fd.grid.lo - space.lam_lo
    for k in itertools.product(range(n), repeat=space.dim):
        src, dst = [], []
        for a in range(space.dim):
            shift = int(off[a]) - k[a]
            lo_d = max(shift, 0)
            hi_d = min(shift + flag.shape[a], out.shape[a])
            dst.append(slice(lo_d, hi_d))
            src.append(slice(lo_d - shift, hi_d - shift))
        out[tuple(dst)] += flag[tuple(src)]
    return out[space.mask]


def build_rules(
    space: SplineSpace,
    fd: FictitiousDomain,
    moments: MomentTable,
    C_stab: float = 2.0,
    scatter_batch: int | None = None,
    seed: int = 0,
    max_rounds: int = 20,
) -> QuadratureTable:
    """Rules for all of ``space``: interior rules implicitly, LP rules for cut supports."""
    cut_flag = _window_any(space, fd, fd.cls == CUT)
    table = QuadratureTable(space, fd, ~cut_flag, seed=seed, C_stab=C_stab)
    for i in np.flatnonzero(cut_flag):
        table.cut[int(i)] = cut_rule(
            space.indices[i], space, fd, moments, C_stab, scatter_batch, seed, max_rounds
        )
    return table


# --- particle fields -----------------------------------------------------------


@dataclass
class ParticleField:
    """Weighted point masses ``sum_i U_i delta_{x_i}``.

    ``source`` is the dense id of the generating basis function (-1 for
    merged interior nodes) and ``node`` the node number within its rule.
    """

    x: np.ndarray
    U: np.ndarray
    source: np.ndarray
    node: np.ndarray
    escaped: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(len(self.U), -1) if len(self.U) else np.asarray(self.x, dtype=float)
        if self.escaped is None:
            self.escaped = np.zeros(len(self.U), dtype=bool)

    def __len__(self) -> int:
        return len(self.U)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def total_weight(self) -> float:
        return float(np.sum(self.U))

    def pair(self, phi) -> float:
        """``<u_h, phi> = sum_i U_i phi(x_i)``."""
        if not len(self.U):
            return 0.0
        return float(np.dot(self.U, np.asarray(phi(self.x), dtype=float)))

    def with_positions(self, x: np.ndarray, escaped: np.ndarray | None = None) -> "ParticleField":
        return ParticleField(x, self.U, self.source, self.node, escaped)

    def dump_csv(self, path) -> None:
        header = ",".join([f"x{a + 1}" for a in range(self.dim)] + ["U"])
        np.savetxt(path, np.column_stack([self.x, self.U]), delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def empty(cls, d: int) -> "ParticleField":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, d)), np.zeros(0), z, z)


def particles_from_spline(f: SplineField, rules: QuadratureTable, compact: bool = False) -> ParticleField:
    """Particles ``(x_{lam,i}, w_{lam,i} c_lam b_lam(x_{lam,i}))`` for every lam and node.

    With ``compact=True`` the coincident Gauss nodes of interior rules are
    merged: each interior-cell node carries ``w * sum_{lam interior} c_lam
    b_lam(x)``.  Pairings with any test function are unchanged; per-lam
    provenance of those nodes is lost (``source = -1``).
    """
    sp = rules.space
    if f.space is not sp and (f.space.size != sp.size or f.space.sigma != sp.sigma):
        raise ValueError("field and rules live on different spaces")
    n, d, h = sp.n, sp.dim, sp.sigma
    xs, Us, src, nid = [], [], [], []
    interior_ids = np.flatnonzero(rules.interior_mask)
    if len(interior_ids):
        if compact:
            masked = SplineField(sp, np.where(rules.interior_mask, f.coeffs, 0.0))
            ref, rw = tensor_gauss_01(n, d)
            cells = rules.fd.interior_cells
            for s in range(0, len(cells), 1 << 16):
                c = cells[s : s + (1 << 16)]
                pts = ((c[:, None, :] + ref[None]) * h).reshape(-1, d)
                vals = eval_field(masked, pts)
                xs.append(pts)
                Us.append(np.tile(rw * h**d, len(c)) * vals)
                src.append(np.full(len(pts), -1, dtype=np.int64))
                nid.append(np.tile(np.arange(len(rw)), len(c)))
        else:
            for i in interior_ids:
                r = interior_rule(sp.indices[i], sp, rules.fd)
                xs.append(r.nodes)
                Us.append(r.weights * f.coeffs[i] * _blam(sp, i, r.nodes))
                src.append(np.full(len(r.weights), i, dtype=np.int64))
                nid.append(np.arange(len(r.weights)))
    missing = [i for i in np.flatnonzero(~rules.interior_mask) if int(i) not in rules.cut]
    if missing:
        raise MissingRule("missing rules for lambda " + ", ".join(str(tuple(sp.indices[i])) for i in missing[:10]))
    for i in sorted(rules.cut):
        r = rules.cut[i]
        xs.append(r.nodes)
        Us.append(r.weights * f.coeffs[i] * _blam(sp, i, r.nodes))
        src.append(np.full(len(r.weights), i, dtype=np.int64))
        nid.append(np.arange(len(r.weights)))
    if not xs:
        return ParticleField.empty(d)
    return ParticleField(np.vstack(xs), np.concatenate(Us), np.concatenate(src), np.concatenate(nid))


def _blam(space: SplineSpace, i: int, x: np.ndarray) -> np.ndarray:
    ids, vals = basis_values(space, x)
    return np.where(ids == i, vals, 0.0).sum(axis=1)


def rule_residuals(rules: QuadratureTable, moments: MomentTable, ids=None) -> np.ndarray:
    """``max_mu |sum_i w_i b_lam b_mu(x_i) - M[lam, mu]|`` per dense id."""
    sp = rules.space
    ids = range(sp.size) if ids is None else ids
    out = []
    for i in ids:
        r = rules.rule(int(i))
        mus, rhs = moments.row(int(i))
        A = _moment_matrix(sp, int(i), mus, r.nodes)
        out.append(float(np.abs(A @ r.weights - rhs).max()) if len(mus) else 0.0)
    return np.array(out)
