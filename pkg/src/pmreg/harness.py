"""Convergence and conditioning studies with CSV reports."""

from __future__ import annotations

import csv
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .fieldexpr import FieldExpr, parse
from .geometry import BoundaryMesh
from .grid import CartesianGrid, classify, domain_rule, enforce_reachability
from .moments import build_table
from .operators import NotConverged, StabilizedOperator, approximate_extension, estimate_condition, load_vector, solve
from .particles import AdvectionConfig, VelocityField, advect, regularize, remesh, rk4_positions
from .quadrature import build_rules, particles_from_spline, rule_residuals
from .splines import SplineSpace, quasi_interpolate, refine, save_field

STUDIES = ("extend", "condition", "quadrature", "advect")

DEFAULT_U0 = {
    "extend": "exp(x1 + x2/2)",
    "condition": "exp(x1 + x2/2)",
    "quadrature": "exp(x1 + x2/2)",
    "advect": "exp(-10*((x1 - 0.3)^2 + x2^2))",
}
DEFAULT_PHI = ("exp(x1 + x2)", "sin(x1)*sin(x2)")
DEFAULT_1D = {"u0": "exp(x1)", "phi": ("exp(2*x1)", "sin(3*x1)")}


@dataclass
class StudyConfig:
    study: str
    geom: str = "disk"
    n: int = 3
    sigmas: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    eps: float = 1.0
    cstab: float = 2.0
    k: int | None = None  # h = 2^-k sigma; None: 0, or h <= sigma^2 for advect
    dt: float | None = None
    T: float = math.pi / 2
    u0_expr: str | None = None
    vel_exprs: list | None = None
    phi_exprs: list | None = None
    offsets: list = field(default_factory=lambda: [0.0, 1e-2, 1e-4, 1e-6])
    seed: int = 42
    out: str | None = None
    disk_facets: int = 64
    refine_disk: bool | None = None  # default: on for advect
    K_max: int = 3
    remesh_every: int = 0
    compact: bool = True

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ValueError(f"unknown study {self.study!r}; choose from {', '.join(STUDIES)}")
        s = list(map(float, self.sigmas))
        if any(b >= a for a, b in zip(s, s[1:])):
            raise ValueError("sigma list must be strictly decreasing")
        self.sigmas = s
        if self.u0_expr is None:
            self.u0_expr = DEFAULT_1D["u0"] if self.dim == 1 else DEFAULT_U0[self.study]
        if self.phi_exprs is None:
            self.phi_exprs = list(DEFAULT_1D["phi"] if self.dim == 1 else DEFAULT_PHI)
        if self.refine_disk is None:
            self.refine_disk = self.study == "advect"
        if self.study == "advect" and self.n <= self.dim:
            raise ValueError("the advection pipeline needs n > d")

    @property
    def dim(self) -> int:
        return 1 if self.geom == "interval" else 2

    def mesh(self, sigma: float) -> BoundaryMesh:
        g = self.geom
        if g == "disk":
            m = self.disk_facets
            if self.refine_disk:
                m = int(math.ceil(self.disk_facets * self.sigmas[0] / sigma / 4.0)) * 4
            return BoundaryMesh.disk(m)
        if g == "rect":
            return BoundaryMesh.rectangle((-0.93, -0.61), (0.87, 0.74))
        if g == "interval":
            return BoundaryMesh.interval(-0.93, 1.07)
        if g.startswith("mesh:"):
            return BoundaryMesh.load(g[5:])
        raise ValueError(f"unknown geometry {g!r}")

    def level_k(self, sigma: float) -> int:
        if self.k is not None:
            return int(self.k)
        if self.study == "advect":
            return max(0, int(math.ceil(math.log2(1.0 / sigma) - 1e-12)))
        return 0


@dataclass
class OrderFit:
    quantity: str
    order: float | None
    r2: float
    levels: int
    slope: float

    @property
    def printable(self) -> bool:
        return self.order is not None


def fit_order(hs, errs, quantity: str = "", min_r2: float = 0.95) -> OrderFit:
    """Least-squares slope of ``log err`` against ``log h`` with its R^2.

    ``order`` is None with fewer than three levels, non-positive errors or
    ``R^2 < min_r2``.
    """
    hs, errs = np.asarray(hs, dtype=float), np.asarray(errs, dtype=float)
    ok = (errs > 0) & np.isfinite(errs)
    if ok.sum() < 3:
        return OrderFit(quantity, None, float("nan"), int(ok.sum()), float("nan"))
    x, y = np.log(hs[ok]), np.log(errs[ok])
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    slope = float(coef[0])
    return OrderFit(quantity, slope if r2 >= min_r2 else None, r2, int(ok.sum()), slope)


@dataclass
class StudyReport:
    config: StudyConfig
    rows: list = field(default_factory=list)
    orders: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)

    def order(self, quantity: str) -> OrderFit | None:
        for o in self.orders:
            if o.quantity == quantity:
                return o
        return None

    def write(self, outdir) -> None:
        os.makedirs(outdir, exist_ok=True)
        keys: list = []
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        with open(os.path.join(outdir, "report.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})
        with open(os.path.join(outdir, "orders.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "order", "r2", "levels", "note"])
            for o in self.orders:
                if o.printable:
                    w.writerow([o.quantity, f"{o.order:.4f}", f"{o.r2:.4f}", o.levels, ""])
                else:
                    w.writerow([o.quantity, "", _fmt(o.r2), o.levels, "no order: R^2 below 0.95 or < 3 levels; see report.csv"])
        with open(os.path.join(outdir, "manifest.txt"), "w") as fh:
            fh.write(f"pmreg {__version__} python {platform.python_version()} numpy {np.__version__}\n")
            for k, v in asdict(self.config).items():
                fh.write(f"{k} = {v!r}\n")
            for note in self.notes:
                fh.write(f"note: {note}\n")

    def summary(self) -> str:
        lines = []
        for o in self.orders:
            if o.printable:
                lines.append(f"{o.quantity}: order {o.order:.3f} (R^2 {o.r2:.4f}, {o.levels} levels)")
            else:
                vals = ", ".join(f"{v:.3e}" for v in self.column(o.quantity))
                lines.append(f"{o.quantity}: no reliable order (R^2 {o.r2:.3f}); errors {vals}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _u(expr: str):
    e = parse(expr)
    return lambda x: np.asarray(e(x), dtype=float) * np.ones(len(x))


def _setup(cfg: StudyConfig, sigma: float, mesh: BoundaryMesh | None = None):
    mesh = mesh if mesh is not None else cfg.mesh(sigma)
    grid = CartesianGrid.covering(mesh, sigma, pad=cfg.n)
    fd = enforce_reachability(classify(grid, mesh), cfg.K_max)
    space = SplineSpace.on_domain(fd, cfg.n)
    return mesh, fd, space


def _l2(fd, f, u, region="omega", k=None):
    x, w = domain_rule(fd, k or fd_points(f), region)
    diff = f(x) - u(x)
    return float(np.sqrt(np.sum(w * diff**2))), float(np.abs(diff).max(initial=0.0))


def fd_points(f) -> int:
    return f.space.n + 2


def _artifact_dir(cfg: StudyConfig, label: str):
    if cfg.out is None:
        return None
    d = os.path.join(cfg.out, label)
    os.makedirs(d, exist_ok=True)
    return d


def run_extend(cfg: StudyConfig) -> StudyReport:
    """Approximate extension of ``u0`` per level: errors on Omega and Omega_sigma."""
    rep = StudyReport(cfg)
    u = _u(cfg.u0_expr)
    phi = _u(cfg.phi_exprs[0]) if cfg.phi_exprs else None
    for sigma in cfg.sigmas:
        t0 = time.perf_counter()
        mesh, fd, space = _setup(cfg, sigma)
        table = build_table(space, fd)
        op = StabilizedOperator.build(space, fd, table, cfg.eps)
        f, sr = approximate_extension(op, u)
        e2, einf = _l2(fd, f, u)
        e2s, _ = _l2(fd, f, u, "omega_sigma")
        row = dict(
            sigma=sigma, N=space.size, cut_cells=len(fd.clipped), ghost_faces=len(fd.ghost_faces), K=fd.K,
            iterations=sr.iterations, residual=sr.residual, err_L2=e2, err_Linf=einf, err_L2_sigma=e2s,
        )
        if phi is not None:
            x, w = domain_rule(fd, cfg.n + 2)
            row["err_functional"] = float(abs(np.sum(w * (u(x) - f(x)) * phi(x))))
        row.update(time=time.perf_counter() - t0, seed=cfg.seed)
        rep.rows.append(row)
        art = _artifact_dir(cfg, f"level_{len(rep.rows) - 1}")
        if art:
            save_field(f, os.path.join(art, "extension.bin"))
    hs = rep.column("sigma")
    for q in ("err_L2", "err_Linf", "err_L2_sigma", "err_functional"):
        if q in rep.rows[0]:
            rep.orders.append(fit_order(hs, rep.column(q), q))
    return rep


def run_condition(cfg: StudyConfig) -> StudyReport:
    """Boundary-offset sweep at the first sigma: cond_2 and CG iterations for eps=0 and eps."""
    rep = StudyReport(cfg)
    sigma = cfg.sigmas[0]
    base = cfg.mesh(sigma)
    u = _u(cfg.u0_expr)
    for off in cfg.offsets:
        t0 = time.perf_counter()
        shift = off * sigma * np.ones(base.dim)
        mesh, fd, space = _setup(cfg, sigma, base.translated(shift))
        table = build_table(space, fd)
        op = StabilizedOperator.build(space, fd, table, cfg.eps)
        rhs = load_vector(space, fd, u)
        row = dict(offset=off, sigma=sigma, N=space.size, K=fd.K)
        for label, eps in (("eps0", 0.0), ("eps", cfg.eps)):
            ce = estimate_condition(op, eps=eps, seed=cfg.seed)
            _, sr = solve(op.with_eps(eps), rhs, raise_on_fail=False)
            row.update({
                f"cond_{label}": ce.cond, f"lmin_{label}": ce.lambda_min, f"lmax_{label}": ce.lambda_max,
                f"cg_iters_{label}": sr.iterations, f"cg_converged_{label}": sr.converged,
            })
        row.update(time=time.perf_counter() - t0, seed=cfg.seed)
        rep.rows.append(row)
    c = rep.column("cond_eps")
    it = rep.column("cg_iters_eps")
    rep.notes.append(f"cond ratio (eps={cfg.eps}) max/min = {np.max(c) / np.min(c):.3f}")
    rep.notes.append(f"CG iteration ratio (eps={cfg.eps}) max/min = {np.max(it) / max(np.min(it), 1):.3f}")
    rep.notes.append(f"max cond (eps=0) = {np.max(rep.column('cond_eps0')):.3e}")
    return rep


def run_quadrature(cfg: StudyConfig) -> StudyReport:
    """Rules at each h (the sigma list): exactness, stability and particle functional error."""
    rep = StudyReport(cfg)
    u = _u(cfg.u0_expr)
    phis = [(e, _u(e)) for e in cfg.phi_exprs]
    for h in cfg.sigmas:
        t0 = time.perf_counter()
        mesh, fd, space = _setup(cfg, h)
        table = build_table(space, fd)
        rules = build_rules(space, fd, table, cfg.cstab, seed=cfg.seed)
        cut_ids = sorted(rules.cut)
        res = rule_residuals(rules, table)
        scale = (cfg.n * h) ** space.dim
        total = np.array([rules.rule(i).total_weight for i in range(space.size)])
        ut = quasi_interpolate(u, space)
        P = particles_from_spline(ut, rules)
        x, w = domain_rule(fd, cfg.n + 3)
        row = dict(
            h=h, N=space.size, cut_rules=len(cut_ids), particles=len(P),
            max_residual_scaled=float(res.max() / scale), max_stability_ratio=float(total.max() / (cfg.cstab * scale)),
            max_rounds=max([rules.cut[i].rounds for i in cut_ids], default=0),
        )
        for j, (_, phi) in enumerate(phis):
            exact = float(np.sum(w * ut(x) * phi(x)))
            row[f"err_functional_{j}"] = abs(exact - P.pair(phi))
        row.update(time=time.perf_counter() - t0, seed=cfg.seed)
        rep.rows.append(row)
        art = _artifact_dir(cfg, f"level_{len(rep.rows) - 1}")
        if art:
            rules.dump_csv(os.path.join(art, "rules.csv"))
    hs = rep.column("h")
    for j in range(len(phis)):
        rep.orders.append(fit_order(hs, rep.column(f"err_functional_{j}"), f"err_functional_{j}"))
    for j, (e, _) in enumerate(phis):
        rep.notes.append(f"err_functional_{j}: phi = {e}")
    return rep


def _velocity(cfg: StudyConfig) -> VelocityField:
    if cfg.vel_exprs:
        return VelocityField.from_exprs([parse(e) for e in cfg.vel_exprs])
    return VelocityField.rotation()


def run_advect(cfg: StudyConfig) -> StudyReport:
    """Full pipeline per sigma: extend, particles at h, RK4 to T, regularize, compare."""
    rep = StudyReport(cfg)
    u0 = _u(cfg.u0_expr)
    v = _velocity(cfg)
    steps = 0 if cfg.T == 0 else (int(round(cfg.T / cfg.dt)) if cfg.dt else 32)
    dt = cfg.T / steps if steps else 0.0
    for sigma in cfg.sigmas:
        t0 = time.perf_counter()
        mesh, fd, space = _setup(cfg, sigma)
        v.check_tangential(mesh)
        table = build_table(space, fd)
        op = StabilizedOperator.build(space, fd, table, cfg.eps)
        f0, _ = approximate_extension(op, u0)
        k = cfg.level_k(sigma)
        h = sigma / 2**k
        _, fdh, spaceh = _setup(cfg, h, mesh)
        tableh = build_table(spaceh, fdh)
        rules = build_rules(spaceh, fdh, tableh, cfg.cstab, seed=cfg.seed)
        P = particles_from_spline(refine(f0, spaceh), rules, compact=cfg.compact)
        t_init = time.perf_counter() - t0
        total0 = np.sum(P.U)
        conserved = True
        escaped = 0
        t = 0.0
        for step in range(steps):
            P = advect(P, v, AdvectionConfig(t, t + dt, dt), mesh=mesh if step == steps - 1 else None)
            t += dt
            if cfg.remesh_every and (step + 1) % cfg.remesh_every == 0 and step + 1 < steps:
                P = remesh(P, op, rules, compact=cfg.compact)
                total0 = np.sum(P.U)
            conserved &= bool(np.sum(P.U) == total0)
        escaped = int(P.escaped.sum())
        fT, sr = regularize(P, op)
        x, w = domain_rule(fd, cfg.n + 2)
        xr = v.flow(x, cfg.T, 0.0) if v.flow is not None else rk4_positions(x, v, cfg.T, -dt / 4, 4 * steps)
        diff = fT(x) - u0(xr)
        e0, _ = _l2(fd, f0, u0)
        row = dict(
            sigma=sigma, k=k, h=h, N_sigma=space.size, N_h=spaceh.size, particles=len(P), cut_rules=len(rules.cut),
            steps=steps, dt=dt, err_L2=float(np.sqrt(np.sum(w * diff**2))), err_Linf=float(np.abs(diff).max()),
            err_init_L2=e0, weight_sum_conserved=conserved, escaped=escaped, cg_iterations=sr.iterations if sr else 0,
            time_init=t_init, time=time.perf_counter() - t0, seed=cfg.seed,
        )
        rep.rows.append(row)
        art = _artifact_dir(cfg, f"level_{len(rep.rows) - 1}")
        if art:
            save_field(fT, os.path.join(art, "regularized_T.bin"))
            save_field(f0, os.path.join(art, "initial.bin"))
    hs = rep.column("sigma")
    rep.orders.append(fit_order(hs, rep.column("err_L2"), "err_L2"))
    rep.orders.append(fit_order(hs, rep.column("err_init_L2"), "err_init_L2"))
    return rep


RUNNERS = {"extend": run_extend, "condition": run_condition, "quadrature": run_quadrature, "advect": run_advect}


def run_study(cfg: StudyConfig) -> StudyReport:
    rep = RUNNERS[cfg.study](cfg)
    if cfg.out:
        rep.write(cfg.out)
    return rep
