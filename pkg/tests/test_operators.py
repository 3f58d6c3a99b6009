from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sps

from pmreg.geometry import BoundaryMesh
from pmreg.grid import CartesianGrid, classify, domain_rule, enforce_reachability
from pmreg.moments import build_table, full_cell_gram
from pmreg.operators import (
    StabilizedOperator,
    approximate_extension,
    assemble_J,
    estimate_condition,
    jump_weights,
    load_vector,
    pcg,
    riesz_representative,
    solve,
)
from pmreg.splines import SplineField, SplineSpace, bspline, quasi_interpolate, scatter_basis


def build(mesh, sigma, n=3, eps=1.0):
    fd = classify(CartesianGrid.covering(mesh, sigma), mesh)
    sp = SplineSpace.on_domain(fd, n)
    return StabilizedOperator.build(sp, fd, build_table(sp, fd), eps)


@pytest.fixture(scope="module")
def disk_op():
    return build(BoundaryMesh.disk(64), 0.1)


def random_poly(n, d, seed):
    C = np.random.default_rng(seed).standard_normal((n,) * d)
    if d == 1:
        return lambda x: np.polynomial.polynomial.polyval(x[:, 0], C)
    return lambda x: np.einsum("ij,mi,mj->m", C, x[:, :1] ** np.arange(n), x[:, 1:] ** np.arange(n))


def test_aligned_square_A_is_tensor_gram():
    op = build(BoundaryMesh.rectangle((0.0, 0.0), (1.0, 1.0)), 0.125)
    G = full_cell_gram(op.space, op.fd)
    assert abs(op.A - G).max() <= 1e-17


def test_A_integrates_area_and_is_symmetric(disk_op):
    one = np.ones(disk_op.space.size)
    assert one @ (disk_op.A @ one) == pytest.approx(disk_op.fd.mesh.measure, rel=1e-12)
    assert abs(disk_op.A - disk_op.A.T).max() == 0.0
    assert abs(disk_op.J - disk_op.J.T).max() == 0.0


def test_jump_weights():
    assert jump_weights(2).tolist() == [1, -2, 1]
    assert jump_weights(3).tolist() == [1, -3, 3, -1]


@pytest.mark.parametrize("n,d", [(2, 1), (3, 1), (3, 2), (4, 2)])
def test_J_annihilates_polynomials(n, d):
    mesh = BoundaryMesh.disk(64) if d == 2 else BoundaryMesh.interval(-0.93, 1.07)
    op = build(mesh, 0.1, n)
    c = quasi_interpolate(random_poly(n, d, n), op.space).coeffs
    assert np.abs(op.J @ c).max() <= 1e-12 * max(1.0, np.abs(c).max())


def test_J_one_dimensional_hand_values():
    s = 0.25
    op = build(BoundaryMesh.interval(-0.1, 1.1), s, n=2)
    sp = op.space
    ref = np.zeros((sp.size, sp.size))
    for axis, c in op.fd.ghost_faces:
        x = (c + 1) * s
        jump = np.array([(bspline(2, (x + 1e-9) / s - lam, 1) - bspline(2, (x - 1e-9) / s - lam, 1)) / s for (lam,) in sp.indices])
        ref += s**3 * np.outer(jump, jump)
    assert np.abs(op.J.toarray() - ref).max() <= 1e-14


def test_J_is_positive_semidefinite(disk_op):
    U = np.random.default_rng(0).standard_normal((1000, disk_op.space.size))
    q = np.einsum("ij,ij->i", U, (disk_op.J @ U.T).T)
    assert q.min() >= -1e-14 * np.abs(q).max()


def test_solve_recovers_known_coefficients(disk_op):
    c = np.random.default_rng(1).standard_normal(disk_op.space.size)
    f, rep = solve(disk_op, disk_op.matrix @ c, tol=1e-13)
    assert rep.converged
    assert np.abs(f.coeffs - c).max() <= 1e-8


def test_constant_reproduction(disk_op):
    f, _ = approximate_extension(disk_op, lambda x: np.ones(len(x)))
    assert np.abs(f.coeffs - 1.0).max() <= 1e-8


@pytest.mark.parametrize("n", [3, 4])
def test_polynomial_reproduction(n):
    op = build(BoundaryMesh.disk(64), 0.1, n)
    p = random_poly(n, 2, 10 + n)
    f, _ = approximate_extension(op, p)
    x, _ = domain_rule(op.fd, n + 1, "omega_sigma")
    assert np.abs(f(x) - p(x)).max() <= 1e-7


def test_riesz_of_spline_functional_is_the_spline(disk_op):
    sp, fd = disk_op.space, disk_op.fd
    g = SplineField(sp, np.random.default_rng(2).standard_normal(sp.size))
    values = full_cell_gram(sp, fd) @ g.coeffs
    f, _ = riesz_representative(sp, fd, values)
    assert np.abs(f.coeffs - g.coeffs).max() <= 1e-10


def test_riesz_of_point_evaluation(disk_op):
    sp, fd = disk_op.space, disk_op.fd
    x = np.array([[0.123, -0.456]])
    values = scatter_basis(sp, x, np.ones(1))
    f, _ = riesz_representative(sp, fd, values)
    assert np.abs(full_cell_gram(sp, fd) @ f.coeffs - values).max() <= 1e-10 * np.abs(values).max()


def test_dual_norm_proxy_bracket():
    op = build(BoundaryMesh.disk(64), 0.2)
    sp, fd = op.space, op.fd
    G = full_cell_gram(sp, fd)
    values = scatter_basis(sp, np.array([[0.3, 0.1], [-0.2, 0.5]]), np.array([1.0, -0.5]))
    f, _ = riesz_representative(sp, fd, values)
    norm = np.sqrt(f.coeffs @ (G @ f.coeffs))
    rng = np.random.default_rng(3)
    V = rng.standard_normal((200, sp.size))
    sups = np.abs(V @ values) / np.sqrt(np.einsum("ij,ij->i", V, (G @ V.T).T))
    assert sups.max() <= norm * (1 + 1e-10)
    assert sups.max() >= norm / (3 * np.sqrt(sp.size))
    # the representative itself attains the supremum
    assert abs(f.coeffs @ values) / norm == pytest.approx(norm, rel=1e-10)


def test_condition_of_aligned_square_is_scale_free():
    conds = []
    for s in (0.25, 0.125, 0.0625):
        op = build(BoundaryMesh.rectangle((0.0, 0.0), (1.0, 1.0)), s)
        ce = estimate_condition(op, eps=0.0)
        ev = np.linalg.eigvalsh(op.A.toarray())
        assert ce.cond == pytest.approx(ev[-1] / ev[0], rel=1e-3)
        conds.append(ce.cond)
    assert max(conds) / min(conds) <= 1.05


def test_condition_matches_dense_oracle(disk_op):
    ce = estimate_condition(disk_op)
    ev = np.linalg.eigvalsh(disk_op.matrix.toarray())
    assert ce.cond == pytest.approx(ev[-1] / ev[0], rel=1e-2)


def test_unstabilized_operator_is_ill_conditioned():
    mesh = BoundaryMesh.disk(64).translated(1e-6 * 0.1 * np.ones(2))
    op = build(mesh, 0.1)
    assert estimate_condition(op, eps=0.0).cond >= 1e4


def test_coercivity_and_norm_equivalence():
    lows, highs = [], []
    rng = np.random.default_rng(4)
    for s in (0.2, 0.1, 0.05):
        op = build(BoundaryMesh.disk(64), s)
        M = op.matrix / s**2
        for _ in range(20):
            u = rng.standard_normal(op.space.size)
            lows.append(u @ (M @ u) / (u @ u))
            for p in (1, 2, np.inf):
                highs.append(np.linalg.norm(M @ u, p) / np.linalg.norm(u, p))
    # regression brackets for n=3, d=2, eps=1 on the disk
    assert min(lows) >= 1e-3
    assert max(highs) <= 40.0


def test_ghost_penalty_consistency():
    vals = []
    sigmas = [0.2, 0.1, 0.05]
    for s in sigmas:
        op = build(BoundaryMesh.disk(64), s)
        P = quasi_interpolate(lambda x: np.exp(x[:, 0]), op.space)
        values = op.J @ P.coeffs
        f, _ = riesz_representative(op.space, op.fd, values)
        vals.append(np.sqrt(f.coeffs @ (full_cell_gram(op.space, op.fd) @ f.coeffs)))
    assert np.polyfit(np.log(sigmas), np.log(vals), 1)[0] >= 3 - 0.5


def test_superconvergence_gain():
    sigmas = [0.2, 0.1, 0.05]
    l2, fun = [], []
    u = lambda x: np.exp(x[:, 0] + x[:, 1] / 2)
    phi = lambda x: np.exp(x[:, 0] + x[:, 1])
    for s in sigmas:
        op = build(BoundaryMesh.disk(64), s)
        f, _ = approximate_extension(op, u)
        x, w = domain_rule(op.fd, 5)
        e = u(x) - f(x)
        l2.append(np.sqrt(np.sum(w * e**2)))
        fun.append(abs(np.sum(w * e * phi(x))))
    o_l2 = np.polyfit(np.log(sigmas), np.log(l2), 1)[0]
    o_fun = np.polyfit(np.log(sigmas), np.log(fun), 1)[0]
    assert o_fun >= o_l2 + 2


def test_load_vector_constant_is_row_integrals(disk_op):
    rhs = load_vector(disk_op.space, disk_op.fd, lambda x: np.ones(len(x)))
    table_rows = np.asarray(disk_op.A.sum(axis=1)).ravel()
    assert np.abs(rhs - table_rows).max() <= 1e-15


def test_matrix_market_export(disk_op, tmp_path):
    import scipy.io

    disk_op.export_matrix_market(tmp_path / "op")
    A = scipy.io.mmread(tmp_path / "op_A.mtx")
    assert abs(A - disk_op.A).max() <= 1e-15


def test_condition_estimate_with_clustered_small_eigenvalues():
    # two nearly equal smallest eigenvalues make inverse iteration slow
    mesh = BoundaryMesh.disk(64).translated(1e-5 * np.ones(2))
    fd = enforce_reachability(classify(CartesianGrid.covering(mesh, 0.1, pad=3), mesh), 3)
    sp = SplineSpace.on_domain(fd, 3)
    op = StabilizedOperator.build(sp, fd, build_table(sp, fd), 1.0)
    ce = estimate_condition(op, seed=42)
    ev = np.linalg.eigvalsh(op.matrix.toarray())
    assert not ce.cg_failed
    assert ce.cond == pytest.approx(ev[-1] / ev[0], rel=1e-3)


def test_pcg_reports_true_residual():
    rng = np.random.default_rng(5)
    Q = rng.standard_normal((40, 40))
    M = sps.csr_matrix(Q @ Q.T + 1e-3 * np.eye(40))
    b = rng.standard_normal(40)
    x, rep = pcg(M, b, tol=1e-10)
    assert rep.converged
    assert np.linalg.norm(b - M @ x) / np.linalg.norm(b) <= 1e-10
