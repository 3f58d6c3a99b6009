from __future__ import annotations

import numpy as np
import pytest

from oracles import moment_1d, moment_polygon
from pmreg.geometry import BoundaryMesh
from pmreg.grid import CartesianGrid, classify, domain_rule
from pmreg.moments import build_table, cut_moment, fullspace_moment, gram_1d
from pmreg.splines import SplineSpace, basis_values


def disk_setup(h=0.1, n=3, m=64):
    mesh = BoundaryMesh.disk(m)
    fd = classify(CartesianGrid.covering(mesh, h), mesh)
    sp = SplineSpace.on_domain(fd, n)
    return mesh, fd, sp


def random_cut_pairs(fd, sp, count, seed):
    rng = np.random.default_rng(seed)
    n = sp.n
    cut = fd.cut_cells
    pairs = []
    while len(pairs) < count:
        c = cut[rng.integers(len(cut))]
        lam = c - rng.integers(0, n, 2)
        mu = c - rng.integers(0, n, 2)
        pairs.append((lam, mu))
    return pairs


def test_fullspace_values():
    assert fullspace_moment(3, 0) == pytest.approx(0.55, abs=1e-15)
    assert moment_1d(-10, 10, 3, 0, 0, 1.0) == pytest.approx(0.55, abs=1e-13)
    for n in (2, 3, 4):
        assert fullspace_moment(n, n) == 0.0 and fullspace_moment(n, [0, -n - 1]) == 0.0
    assert fullspace_moment(3, [1, 2], 0.5) == pytest.approx(gram_1d(3, 1) * gram_1d(3, 2) * 0.25, rel=1e-15)


def test_uncut_support_equals_fullspace():
    mesh = BoundaryMesh.disk(64)
    assert cut_moment(mesh, 3, [-1, 0], [0, -1], 0.1) == pytest.approx(fullspace_moment(3, [1, -1], 0.1), rel=1e-13)


def test_one_dimensional_cut_moments():
    half_line = BoundaryMesh.interval(0.0, 100.0)
    assert cut_moment(half_line, 3, [0], [0], 1.0) == pytest.approx(0.55, rel=1e-14)
    ref = moment_1d(0.0, 100.0, 3, -1, -1, 1.0)
    assert cut_moment(half_line, 3, [-1], [-1], 1.0) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("c", [0.137, 0.5, -0.0731])
def test_half_plane_separability(c):
    h = 0.1
    mesh = BoundaryMesh.rectangle((-100.0, -100.0), (c, 100.0))
    line = BoundaryMesh.interval(-100.0, c)
    for lam, mu in [((-1, 0), (-1, 0)), ((-2, 1), (-1, 2)), ((0, -3), (-1, -2))]:
        got = cut_moment(mesh, 3, lam, mu, h)
        ref = cut_moment(line, 3, [lam[0]], [mu[0]], h) * gram_1d(3, mu[1] - lam[1]) * h
        assert got == pytest.approx(ref, abs=1e-10 * h * h)


def test_aligned_square_is_tensor_product():
    h = 0.25
    mesh = BoundaryMesh.rectangle((0.0, 0.0), (1.0, 1.0))
    fd = classify(CartesianGrid.covering(mesh, h), mesh)
    assert len(fd.cut_cells) == 0
    sp = SplineSpace.on_domain(fd, 3)
    table = build_table(sp, fd)
    M = table.to_sparse()
    line = BoundaryMesh.interval(0.0, 1.0)
    one = {(l, m): cut_moment(line, 3, [l], [m], h) for l in range(-2, 4) for m in range(-2, 4)}
    for i, lam in enumerate(sp.indices):
        for j in M[i].indices:
            mu = sp.indices[j]
            assert M[i, j] == pytest.approx(one[lam[0], mu[0]] * one[lam[1], mu[1]], abs=1e-15)
            if np.all(lam >= 0) and np.all(lam + 3 <= 4) and np.all(mu >= 0) and np.all(mu + 3 <= 4):
                assert M[i, j] == pytest.approx(fullspace_moment(3, mu - lam, h), abs=1e-15)


def test_moment_entries_match_riemann_oracle():
    mesh, fd, sp = disk_setup()
    table = build_table(sp, fd)
    for lam, mu in random_cut_pairs(fd, sp, 20, seed=0):
        ref = moment_polygon(mesh.vertices, 3, lam, mu, 0.1)
        got = table.entry(lam, mu)
        assert abs(got - ref) <= 1e-8 * abs(ref) + 1e-14
        assert cut_moment(mesh, 3, lam, mu, 0.1) == pytest.approx(got, rel=1e-12, abs=1e-16)


def test_non_convex_entries_match_oracle():
    verts = np.array([[0, 0], [2, 0], [2, 2], [1, 0.7], [0, 2]], dtype=float) * 0.5 - 0.013
    mesh = BoundaryMesh.polygon(verts)
    fd = classify(CartesianGrid.covering(mesh, 0.1), mesh)
    sp = SplineSpace.on_domain(fd, 3)
    table = build_table(sp, fd)
    for lam, mu in random_cut_pairs(fd, sp, 8, seed=1):
        ref = moment_polygon(verts, 3, lam, mu, 0.1)
        assert abs(table.entry(lam, mu) - ref) <= 1e-8 * abs(ref) + 1e-14


@pytest.mark.parametrize("n", [2, 3, 4])
def test_row_sums_are_basis_integrals(n):
    mesh, fd, sp = disk_setup(n=n)
    table = build_table(sp, fd)
    x, w = domain_rule(fd, n + 1)
    ids, vals = basis_values(sp, x)
    ref = np.bincount(ids[ids >= 0], weights=(vals * w[:, None])[ids >= 0], minlength=sp.size)
    assert np.abs(table.row_integrals() - ref).max() <= 1e-9 * 0.1**2
    assert table.row_integrals().sum() == pytest.approx(mesh.measure, rel=1e-12)


def test_symmetric_and_positive_semidefinite():
    mesh, fd, sp = disk_setup()
    M = build_table(sp, fd).to_sparse()
    assert abs(M - M.T).max() == 0.0
    rng = np.random.default_rng(2)
    for _ in range(10):
        ids = rng.choice(sp.size, 40, replace=False)
        sub = M[ids][:, ids].toarray()
        assert np.linalg.eigvalsh(sub).min() >= -1e-15 * np.abs(sub).max()


def test_facet_quadrature_is_exact():
    mesh, fd, sp = disk_setup()
    for n in (2, 3, 4):
        pairs = random_cut_pairs(fd, sp, 5, seed=n)
        for lam, mu in pairs:
            a = cut_moment(mesh, n, lam, mu, 0.1, facet_points=2 * n - 1)
            b = cut_moment(mesh, n, lam, mu, 0.1, facet_points=4 * n - 2)
            assert abs(a - b) <= 1e-12 * 0.1**2


def test_boundary_refinement_convergence():
    pairs = random_cut_pairs(*disk_setup()[1:], 6, seed=3)
    ms = [32, 64, 128, 256, 512]
    vals = np.array([[cut_moment(BoundaryMesh.disk(m), 3, l, u, 0.1) for l, u in pairs] for m in ms])
    diffs = np.abs(np.diff(vals, axis=0)).max(axis=1)
    slope = -np.polyfit(np.log(ms[:-1]), np.log(diffs), 1)[0]
    assert slope >= 1.8


def test_cache_round_trip(tmp_path):
    mesh, fd, sp = disk_setup(h=0.2)
    a = build_table(sp, fd, cache_dir=tmp_path)
    b = build_table(sp, fd, cache_dir=tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    assert np.array_equal(a.cut_tensors, b.cut_tensors)


def test_interval_table():
    mesh = BoundaryMesh.interval(-0.93, 1.07)
    fd = classify(CartesianGrid.covering(mesh, 0.1), mesh)
    sp = SplineSpace.on_domain(fd, 3)
    table = build_table(sp, fd)
    for lam in sp.indices[:6]:
        for off in (-2, 0, 1):
            ref = moment_1d(-0.93, 1.07, 3, lam[0], lam[0] + off, 0.1)
            assert table.entry(lam, lam + off) == pytest.approx(ref, rel=1e-10, abs=1e-16)
