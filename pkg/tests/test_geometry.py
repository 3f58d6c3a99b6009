from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmreg.geometry import (
    BoundaryMesh,
    GeometryError,
    boundary_rule,
    clip_cell,
    format_mesh_text,
    parse_mesh_text,
    point_in_domain,
    project_to_boundary,
    region_rule,
    triangle_rule,
)

STAR = np.array([[0, 0], [2, 0], [2, 2], [1, 0.7], [0, 2]], dtype=float)


def half_plane(c: float) -> BoundaryMesh:
    """Large rectangle standing in for ``x1 < c``."""
    return BoundaryMesh.rectangle((-50.0, -50.0), (c, 50.0))


def test_disk_center_inside_far_point_outside():
    disk = BoundaryMesh.disk(64)
    assert point_in_domain(disk, np.array([0.0, 0.0]))
    assert not point_in_domain(disk, np.array([2.0, 0.0]))


def test_interval_endpoint_convention():
    iv = BoundaryMesh.interval(0.0, 2.0)
    assert point_in_domain(iv, np.array([1.0]))
    assert point_in_domain(iv, np.array([2.0]))
    assert not point_in_domain(iv, np.array([2.1]))


def test_polygon_boundary_points_are_inside():
    m = BoundaryMesh.polygon(STAR)
    assert point_in_domain(m, STAR).all()
    assert point_in_domain(m, np.array([1.0, 0.0]))
    assert not point_in_domain(m, np.array([1.0, 1.5]))


def test_point_in_domain_matches_winding_number():
    m = BoundaryMesh.polygon(STAR)
    x = np.random.default_rng(1).uniform(-0.5, 2.5, (4000, 2))
    assert np.array_equal(point_in_domain(m, x), winding(STAR, x) == 1)


def test_polygon_validation():
    with pytest.raises(GeometryError):
        BoundaryMesh.polygon(STAR[::-1])
    with pytest.raises(GeometryError):
        BoundaryMesh.polygon([[0, 0], [1, 1], [1, 0], [0, 1]])
    with pytest.raises(GeometryError):
        BoundaryMesh.interval(1.0, 0.0)


def test_mesh_text_round_trip(tmp_path):
    m = BoundaryMesh.polygon(STAR)
    assert np.array_equal(parse_mesh_text(format_mesh_text(m)).vertices, m.vertices)
    p = tmp_path / "iv.txt"
    BoundaryMesh.interval(-0.5, 1.25).save(p)
    assert np.array_equal(BoundaryMesh.load(p).vertices, [[-0.5], [1.25]])


def test_clip_inside_outside_and_half():
    disk = BoundaryMesh.disk(64)
    s = 0.1
    cc = clip_cell(disk, (0.0, 0.0), (s, s))
    assert cc.measure == pytest.approx(s * s, rel=1e-14) and cc.is_full
    assert clip_cell(disk, (3.0, 3.0), (3.1, 3.1)).measure == 0.0
    cc = clip_cell(half_plane(0.5 * s), (0.0, 0.0), (s, s))
    assert cc.measure == pytest.approx(0.5 * s * s, rel=1e-13)


def test_clip_sliver_is_degenerate():
    cc = clip_cell(half_plane(1e-15), (0.0, 0.0), (1.0, 1.0))
    assert cc.measure == 0.0 and cc.degenerate


def test_clip_1d():
    iv = BoundaryMesh.interval(0.3, 2.0)
    cc = clip_cell(iv, (0.0,), (1.0,))
    assert cc.measure == pytest.approx(0.7)


@pytest.mark.parametrize("verts", [STAR, BoundaryMesh.disk(37, 0.8, (0.13, -0.07)).vertices])
def test_clipped_measures_sum_to_area(verts):
    m = BoundaryMesh.polygon(verts)
    x, y = verts[:, 0], verts[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))
    s = 0.137
    lo, hi = np.floor(verts.min(0) / s), np.ceil(verts.max(0) / s)
    total = sum(
        clip_cell(m, np.array([i, j]) * s, np.array([i + 1, j + 1]) * s).measure
        for i in range(int(lo[0]), int(hi[0]))
        for j in range(int(lo[1]), int(hi[1]))
    )
    assert total == pytest.approx(area, rel=1e-10)


def winding(poly: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Winding number of a closed polygon around each point (zero-width bridges cancel)."""
    ang = np.zeros(len(x))
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        pa, pb = a - x, b - x
        ang += np.arctan2(pa[:, 0] * pb[:, 1] - pa[:, 1] * pb[:, 0], np.einsum("ij,ij->i", pa, pb))
    return np.rint(ang / (2 * np.pi)).astype(int)


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.4, 2.2), st.floats(-0.4, 2.2), st.floats(0.05, 0.6), st.integers(0, 2**31))
def test_clipped_region_agrees_with_point_in_domain(x0, y0, s, seed):
    m = BoundaryMesh.polygon(STAR)
    lo, hi = np.array([x0, y0]), np.array([x0 + s, y0 + s])
    cc = clip_cell(m, lo, hi)
    x = np.random.default_rng(seed).uniform(lo, hi, (200, 2))
    inside = point_in_domain(m, x)
    if cc.measure == 0.0:
        assert not inside.any() or cc.degenerate
        return
    assert np.array_equal(winding(cc.region, x) == 1, inside)


def test_signed_fan_sums_to_measure_on_non_convex_cut():
    cc = clip_cell(BoundaryMesh.polygon(STAR), (0.75, 1.0), (1.25, 1.5))
    assert np.sum(cc.tri_areas) == pytest.approx(cc.measure, rel=1e-13)
    _, w = region_rule(cc, 3)
    assert w.sum() == pytest.approx(cc.measure, rel=1e-13)


def test_region_rule_integrates_polynomials():
    m = BoundaryMesh.polygon(STAR)
    cc = clip_cell(m, (0.5, 0.2), (1.7, 1.4))
    pts, w = region_rule(cc, 4)
    assert w.sum() == pytest.approx(cc.measure, rel=1e-13)
    # divergence oracle: int x1^2 x2 dA = closed-line integral of x1^3 x2 / 3 n1 ds
    poly = cc.region
    a, b = poly, np.roll(poly, -1, axis=0)
    g, gw = np.polynomial.legendre.leggauss(6)
    s = 0.5 * (g + 1)
    p = a[:, None] + s[None, :, None] * (b - a)[:, None]
    line = np.sum(0.5 * gw * (p[..., 0] ** 3 * p[..., 1] / 3.0), axis=1) * (b - a)[:, 1]
    assert np.sum(w * pts[:, 0] ** 2 * pts[:, 1]) == pytest.approx(line.sum(), rel=1e-12)


def test_triangle_rule_weights():
    _, w = triangle_rule(5)
    assert w.sum() == pytest.approx(0.5, rel=1e-15)


def test_boundary_rule_1d():
    r = boundary_rule(BoundaryMesh.interval(0.0, 2.0), (0.0,), (1.0,), 3)
    assert len(r) == 1 and r.points[0, 0] == 0.0 and r.normals[0, 0] == -1.0 and r.weights[0] == 1.0


def test_boundary_rule_single_facet():
    m = BoundaryMesh.polygon([[0, 0], [1, 0], [1, 1], [0, 1]])
    r = boundary_rule(m, (-0.1, -0.1), (1.1, 0.0), 1)
    assert np.allclose(r.points, [[0.5, 0.0]]) and np.allclose(r.normals, [[0, -1]]) and r.weights[0] == 1.0
    r2 = boundary_rule(m, (-0.1, -0.1), (1.1, 0.0), 2)
    assert np.sum(r2.weights * r2.points[:, 0] ** 2) == pytest.approx(1.0 / 3.0, rel=1e-15)


@pytest.mark.parametrize("verts", [STAR, BoundaryMesh.disk(64).vertices])
def test_boundary_rule_divergence_gives_area(verts):
    m = BoundaryMesh.polygon(verts)
    lo, hi = m.bbox
    r = boundary_rule(m, lo - 1, hi + 1, 2)
    assert np.sum(r.weights * r.points[:, 0] * r.normals[:, 0]) == pytest.approx(m.measure, rel=1e-10)


def test_boundary_rule_restricted_to_box_matches_clip():
    m = BoundaryMesh.polygon(STAR)
    lo, hi = np.array([0.6, 0.3]), np.array([1.5, 1.2])
    cc = clip_cell(m, lo, hi)
    # divergence of (x1, 0) over Q cap Omega: boundary part plus the box sides inside Omega
    r = boundary_rule(m, lo, hi, 2)
    inner = np.sum(r.weights * r.points[:, 0] * r.normals[:, 0])
    ys = np.linspace(lo[1], hi[1], 200001)
    mid = 0.5 * (ys[1:] + ys[:-1])
    dy = np.diff(ys)
    left = np.sum(dy * point_in_domain(m, np.column_stack([np.full_like(mid, lo[0]), mid])))
    right = np.sum(dy * point_in_domain(m, np.column_stack([np.full_like(mid, hi[0]), mid])))
    assert inner + hi[0] * right - lo[0] * left == pytest.approx(cc.measure, abs=1e-5)


def test_projection_lands_on_boundary():
    m = BoundaryMesh.disk(64)
    x = np.array([[1.5, 0.0], [0.0, -2.0]])
    p = project_to_boundary(m, x)
    assert np.allclose(p, [[1.0, 0.0], [0.0, -1.0]])
    assert point_in_domain(m, p).all()
