from __future__ import annotations

import itertools

import numpy as np
import pytest

from pmreg.geometry import BoundaryMesh, clip_cell
from pmreg.grid import (
    CUT,
    INTERIOR,
    OUTSIDE,
    CartesianGrid,
    NoInteriorCell,
    classify,
    domain_rule,
    enforce_reachability,
    faces_of,
    reachability,
)


def brute_force(grid: CartesianGrid, mesh: BoundaryMesh):
    """Classes from clipping every cell, ghost faces straight from the definition."""
    cls = np.zeros(grid.shape, dtype=int)
    for w in itertools.product(*[range(s) for s in grid.shape]):
        idx = np.array(w) + grid.lo
        lo, hi = grid.cell_box(idx)
        cc = clip_cell(mesh, lo, hi)
        cls[w] = OUTSIDE if cc.measure == 0 else (INTERIOR if cc.is_full else CUT)
    faces = []
    for a in range(grid.dim):
        for w in itertools.product(*[range(s) for s in grid.shape]):
            w2 = list(w)
            w2[a] += 1
            if w2[a] >= grid.shape[a]:
                continue
            c1, c2 = cls[w], cls[tuple(w2)]
            if c1 != OUTSIDE and c2 != OUTSIDE and CUT in (c1, c2):
                faces.append([a, *(np.array(w) + grid.lo)])
    return cls, np.array(sorted(faces)).reshape(-1, grid.dim + 1)


def test_aligned_interval_has_no_cut_cells():
    fd = classify(CartesianGrid(0.25, np.array([-2]), np.array([6])), BoundaryMesh.interval(0.0, 1.0))
    assert len(fd.interior_cells) == 4 and len(fd.cut_cells) == 0 and len(fd.ghost_faces) == 0


def test_unaligned_interval():
    fd = classify(CartesianGrid(0.25, np.array([-3]), np.array([8])), BoundaryMesh.interval(-0.1, 1.1))
    assert fd.cut_cells[:, 0].tolist() == [-1, 4]
    assert len(fd.interior_cells) == 4
    # faces between cells -1|0 and 3|4, i.e. at x = 0 and x = 1.0
    assert fd.ghost_faces.tolist() == [[0, -1], [0, 3]]


def test_half_plane_column():
    s = 0.125
    mesh = BoundaryMesh.rectangle((-2 * s, -2 * s), (0.5 * s, 2 * s))
    grid = CartesianGrid(s, np.array([-3, -3]), np.array([2, 3]))
    fd = classify(grid, mesh)
    assert fd.cut_cells.tolist() == [[0, -2], [0, -1], [0, 0], [0, 1]]
    vertical = [[0, -1, j] for j in range(-2, 2)]
    horizontal = [[1, 0, j] for j in range(-2, 1)]
    assert fd.ghost_faces.tolist() == sorted(vertical + horizontal)
    cls, faces = brute_force(grid, mesh)
    assert np.array_equal(fd.cls, cls) and np.array_equal(fd.ghost_faces, faces)


@pytest.mark.parametrize("mesh", [BoundaryMesh.disk(64), BoundaryMesh.polygon([[0, 0], [2, 0], [2, 2], [1, 0.7], [0, 2]])])
def test_classification_matches_brute_force(mesh):
    grid = CartesianGrid.covering(mesh, 0.17)
    fd = classify(grid, mesh)
    cls, faces = brute_force(grid, mesh)
    assert np.array_equal(fd.cls, cls)
    assert np.array_equal(fd.ghost_faces, faces)


def test_grid_shift_equivariance():
    s = 0.125
    mesh = BoundaryMesh.disk(64, 0.9, (0.031, -0.017))
    grid = CartesianGrid.covering(mesh, s)
    fd = classify(grid, mesh)
    for axis in range(2):
        e = np.eye(2, dtype=np.int64)[axis]
        fd2 = classify(CartesianGrid(s, grid.lo + e, grid.hi + e), mesh.translated(s * e))
        assert np.array_equal(fd.cls, fd2.cls)
        shifted = fd.ghost_faces.copy()
        shifted[:, 1:] += e
        assert np.array_equal(shifted, fd2.ghost_faces)


def test_ghost_face_count_grows_as_sigma_shrinks():
    mesh = BoundaryMesh.disk(128)
    counts = [len(classify(CartesianGrid.covering(mesh, s), mesh).ghost_faces) for s in (0.2, 0.1, 0.05, 0.025)]
    assert all(b > a for a, b in zip(counts, counts[1:]))
    # roughly doubles per halving in 2D
    assert all(1.5 < b / a < 2.5 for a, b in zip(counts, counts[1:]))


def spike(length: float) -> BoundaryMesh:
    """Unit square with a thin horizontal spike leaving its right side at height 0.52."""
    return BoundaryMesh.polygon(
        [[0, 0], [1, 0], [1, 0.52], [1 + length, 0.52], [1 + length, 0.53], [1, 0.53], [1, 1], [0, 1]]
    )


def test_reachability_unchanged_when_within_budget():
    mesh = BoundaryMesh.disk(64)
    fd = classify(CartesianGrid.covering(mesh, 0.1), mesh)
    out = enforce_reachability(fd, 3)
    assert np.array_equal(out.cls, fd.cls) and out.K == fd.K <= 3


def test_touching_cut_cells_have_distance_one():
    mesh = BoundaryMesh.interval(-0.51, 0.47)
    fd = enforce_reachability(classify(CartesianGrid.covering(mesh, 0.1), mesh), 3)
    assert fd.K == 1


def test_rectangle_corner_cells_need_two_faces():
    # corner cut cells meet the interior only diagonally
    mesh = BoundaryMesh.rectangle((-0.51, -0.51), (0.51, 0.51))
    fd = enforce_reachability(classify(CartesianGrid.covering(mesh, 0.1), mesh), 3)
    assert fd.K == 2


def test_spike_needs_two_hops():
    mesh = spike(0.15)
    fd = classify(CartesianGrid.covering(mesh, 0.1), mesh)
    out = enforce_reachability(fd, 2)
    assert out.K == 2 and np.array_equal(out.cls, fd.cls)


def test_spike_with_tight_budget_reclassifies():
    mesh = spike(0.15)
    fd = classify(CartesianGrid.covering(mesh, 0.1), mesh)
    with pytest.warns(UserWarning):
        out = enforce_reachability(fd, 1)
    assert len(out.reclassified) >= 1
    assert len(out.ghost_faces) > len(fd.ghost_faces)


@pytest.mark.parametrize("K_max", [2, 3])
def test_distances_bounded_after_enforcement(K_max):
    mesh = spike(0.15)
    out = enforce_reachability(classify(CartesianGrid.covering(mesh, 0.1), mesh), K_max)
    assert max(reachability(out).values()) <= K_max


def test_faces_of():
    mesh = BoundaryMesh.disk(64)
    fd = classify(CartesianGrid.covering(mesh, 0.1), mesh)
    assert len(faces_of(fd, [[0, 0]])) == 4
    assert len(faces_of(fd, [[0, 0], [1, 0]])) == 7
    assert faces_of(fd, np.zeros((0, 2))).shape == (0, 3)


def test_no_interior_cell():
    mesh = BoundaryMesh.disk(16, 0.01, (0.05, 0.05))
    with pytest.raises(NoInteriorCell):
        classify(CartesianGrid.covering(mesh, 0.1), mesh)


@pytest.mark.parametrize("mesh", [BoundaryMesh.disk(64), BoundaryMesh.interval(-0.33, 0.71)])
def test_domain_rule_measures(mesh):
    fd = classify(CartesianGrid.covering(mesh, 0.1), mesh)
    _, w = domain_rule(fd, 3)
    assert w.sum() == pytest.approx(mesh.measure, rel=1e-13)
    _, w = domain_rule(fd, 3, "omega_sigma")
    assert w.sum() == pytest.approx(len(fd.cells()) * 0.1**mesh.dim, rel=1e-13)


def test_dump_csv(tmp_path):
    mesh = BoundaryMesh.disk(64)
    fd = classify(CartesianGrid.covering(mesh, 0.2), mesh)
    fd.dump_csv(tmp_path / "cells.csv", tmp_path / "faces.csv")
    lines = (tmp_path / "cells.csv").read_text().splitlines()
    assert len(lines) == 1 + len(fd.cells())
    assert len((tmp_path / "faces.csv").read_text().splitlines()) == 1 + len(fd.ghost_faces)
