"""Particle advection, regularization and remeshing."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fieldexpr import FieldExpr
from .geometry import BoundaryMesh, point_in_domain, project_to_boundary
from .operators import StabilizedOperator, solve
from .quadrature import ParticleField, QuadratureTable, particles_from_spline
from .splines import SplineField, SplineSpace, refine, save_field, scatter_basis


@dataclass
class VelocityField:
    """``a(x, t)`` evaluated on point arrays ``(m, d)``.

    ``flow(x0, t0, t1)`` is the exact flow map when known (used for the
    analytic reference solution).
    """

    func: Callable[[np.ndarray, float], np.ndarray]
    smooth: bool = True
    flow: Callable[[np.ndarray, float, float], np.ndarray] | None = None

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.func(x, t)

    @classmethod
    def rotation(cls, omega: float = 1.0, center=(0.0, 0.0)) -> "VelocityField":
        c = np.asarray(center, dtype=float)

        def func(x, t):
            y = x - c
            return omega * np.column_stack([-y[:, 1], y[:, 0]])

        def flow(x, t0, t1):
            a = omega * (t1 - t0)
            y = x - c
            ca, sa = np.cos(a), np.sin(a)
            return c + np.column_stack([ca * y[:, 0] - sa * y[:, 1], sa * y[:, 0] + ca * y[:, 1]])

        return cls(func, True, flow)

    @classmethod
    def zero(cls, d: int) -> "VelocityField":
        return cls(lambda x, t: np.zeros_like(x), True, lambda x, t0, t1: x.copy())

    @classmethod
    def from_exprs(cls, exprs: list[FieldExpr]) -> "VelocityField":
        def func(x, t):
            cols = [np.broadcast_to(np.asarray(e(x, t), dtype=float), (len(x),)) for e in exprs]
            return np.column_stack(cols)

        return cls(func, True, None)

    def normal_flux(self, mesh: BoundaryMesh, t: float = 0.0) -> float:
        """``max |a . n|`` at facet midpoints."""
        if mesh.dim == 1:
            x = mesh.vertices
            return float(np.abs(self.func(x, t)[:, 0]).max())
        mid = 0.5 * (mesh.starts + mesh.ends)
        return float(np.abs(np.sum(self.func(mid, t) * mesh.normals, axis=1)).max())

    def check_tangential(self, mesh: BoundaryMesh, t: float = 0.0, tol: float = 1e-10) -> bool:
        flux = self.normal_flux(mesh, t)
        if flux > tol:
            warnings.warn(f"velocity is not tangential on the boundary: max |a.n| = {flux:.3e}", stacklevel=2)
            return False
        return True


@dataclass
class AdvectionConfig:
    t0: float
    t1: float
    dt: float
    integrator: str = "rk4"
    escape_policy: str = "keep"  # "keep" or "project"

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        steps = (self.t1 - self.t0) / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, abs(steps)):
            raise ValueError(f"(t1 - t0)/dt = {steps} is not an integer")
        if self.integrator != "rk4":
            raise ValueError("only the classical RK4 integrator is provided")
        if self.escape_policy not in ("keep", "project"):
            raise ValueError("escape_policy must be 'keep' or 'project'")

    @property
    def steps(self) -> int:
        return int(round((self.t1 - self.t0) / self.dt))


def rk4_positions(x: np.ndarray, v: VelocityField, t0: float, dt: float, steps: int) -> np.ndarray:
    x = np.array(x, dtype=float)
    for i in range(steps):
        t = t0 + i * dt
        k1 = v(x, t)
        k2 = v(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = v(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = v(x + dt * k3, t + dt)
        x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def advect(field: ParticleField, v: VelocityField, cfg: AdvectionConfig, mesh: BoundaryMesh | None = None, chunk: int = 1 << 20) -> ParticleField:
    """Move the particles along ``v`` with fixed-step RK4; weights are untouched.

    With a mesh, particles ending outside the closed domain are flagged and,
    for ``escape_policy="project"``, moved to the nearest boundary point.
    """
    x = np.empty_like(field.x)
    for s in range(0, len(field), chunk):
        x[s : s + chunk] = rk4_positions(field.x[s : s + chunk], v, cfg.t0, cfg.dt, cfg.steps)
    escaped = np.zeros(len(field), dtype=bool)
    if mesh is not None and len(field):
        for s in range(0, len(field), chunk):
            escaped[s : s + chunk] = ~point_in_domain(mesh, x[s : s + chunk])
        if cfg.escape_policy == "project" and escaped.any():
            x[escaped] = project_to_boundary(mesh, x[escaped])
    return field.with_positions(x, escaped)


def regularize(field: ParticleField, op: StabilizedOperator, tol: float = 1e-12) -> tuple[SplineField, object]:
    """``A_eps^{-1}`` of the particle functional: ``rhs_mu = sum_i U_i b_mu(x_i)``."""
    if not len(field):
        return SplineField(op.space, np.zeros(op.space.size)), None
    rhs = scatter_basis(op.space, field.x, field.U)
    return solve(op, rhs, tol)


def remesh(field: ParticleField, op: StabilizedOperator, rules: QuadratureTable, compact: bool = False) -> ParticleField:
    """Regularize at ``sigma``, refine exactly to ``h``, rebuild particles from the rules."""
    coarse, _ = regularize(field, op)
    fine = refine(coarse, rules.space)
    return particles_from_spline(fine, rules, compact=compact)


def write_snapshot(outdir, step: int, t: float, field: ParticleField, spline: SplineField | None, manifest: list) -> None:
    """Particle CSV plus optional spline file; appends a line to ``manifest``."""
    os.makedirs(outdir, exist_ok=True)
    pname = f"particles_{step:05d}.csv"
    field.dump_csv(os.path.join(outdir, pname))
    sname = ""
    if spline is not None:
        sname = f"spline_{step:05d}.bin"
        save_field(spline, os.path.join(outdir, sname))
    manifest.append(f"t={t!r} particles={pname} spline={sname}")
