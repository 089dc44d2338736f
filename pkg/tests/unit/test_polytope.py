import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sls_adapt.exceptions import DimensionMismatchError
from sls_adapt.polytope import (
    DimensionTooLargeError,
    EmptyPolytopeError,
    HalfspacePolytope,
    LinearConstraintSet,
    UnboundedPolytopeError,
    bounding_box,
    chebyshev_center,
    contains_polytope,
    enumerate_vertices,
    intersect,
    membership,
    remove_redundant,
    sample_interior,
)


def _subset_oracle(p: HalfspacePolytope) -> np.ndarray:
    """Vertices from every d-subset of rows, feasibility filtered."""
    found = []
    for rows in itertools.combinations(range(p.n_rows), p.dim):
        a = p.normals[list(rows)]
        if abs(np.linalg.det(a)) < 1e-10:
            continue
        v = np.linalg.solve(a, p.offsets[list(rows)])
        if np.all(p.normals @ v <= p.offsets + 1e-9):
            if all(np.linalg.norm(v - w) > 1e-8 for w in found):
                found.append(v)
    return np.asarray(found)


def _same_points(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape != b.shape:
        return False
    return all(np.min(np.linalg.norm(b - v, axis=1)) < 1e-7 for v in a)


def _ball_polytope(seed: int, n_rows: int = 20) -> HalfspacePolytope:
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n_rows, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    box = HalfspacePolytope.box([-3.0] * 3, [3.0] * 3)
    return HalfspacePolytope(
        np.vstack([normals, box.normals]),
        np.concatenate([np.ones(n_rows), box.offsets]),
    )


def test_box_has_all_corners():
    """A 3-box has its eight corners as vertices."""
    p = HalfspacePolytope.box([0.0, -1.0, 2.0], [1.0, 1.0, 3.0])
    vertices = enumerate_vertices(p)
    assert vertices.shape == (8, 3)
    corners = np.array(list(itertools.product([0.0, 1.0], [-1.0, 1.0], [2.0, 3.0])))
    assert _same_points(vertices, corners)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_vertex_backends_match_subset_oracle(seed):
    """Both backends agree with brute-force enumeration for random halfspaces."""
    p = _ball_polytope(seed)
    expected = _subset_oracle(p)
    for backend in ("combinatorial", "qhull"):
        fresh = HalfspacePolytope(p.normals, p.offsets)
        assert _same_points(enumerate_vertices(fresh, backend), expected)


def test_intersect_keeps_only_the_tighter_parallel_row():
    """A looser parallel row is dropped and a tighter one replaces the old."""
    p = HalfspacePolytope.box([0.0, 0.0], [1.0, 1.0])
    looser = intersect(p, LinearConstraintSet([[2.0, 0.0]], [4.0]))
    assert looser.n_rows == p.n_rows
    tighter = intersect(p, LinearConstraintSet([[1.0, 0.0]], [0.5]))
    assert tighter.n_rows == p.n_rows
    assert not membership(tighter, [0.75, 0.5])
    assert tighter.stamp == p.stamp + 1


def test_intersect_rejects_wrong_dimension():
    """Constraint columns must match the polytope dimension."""
    p = HalfspacePolytope.box([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(DimensionMismatchError):
        intersect(p, LinearConstraintSet([[1.0, 0.0, 0.0]], [1.0]))


def test_intersect_reduces_periodically():
    """Every reduce_every intersections, redundant rows are removed."""
    p = HalfspacePolytope.box([0.0, 0.0], [1.0, 1.0])
    for k in range(3):
        p = intersect(p, LinearConstraintSet([[1.0, 1.0 + k]], [10.0]), reduce_every=3)
    assert p.since_reduce == 0
    assert p.n_rows == 4


def test_remove_redundant_preserves_membership():
    """Redundancy removal leaves membership unchanged on sampled points."""
    base = _ball_polytope(3, n_rows=30)
    far = np.random.default_rng(2).normal(size=(5, 3))
    far /= np.linalg.norm(far, axis=1, keepdims=True)
    p = HalfspacePolytope(
        np.vstack([base.normals, far]), np.concatenate([base.offsets, [6.0] * 5])
    )
    reduced = remove_redundant(p)
    assert reduced.n_rows < p.n_rows
    points = np.random.default_rng(1).uniform(-3.5, 3.5, size=(1000, 3))
    assert all(membership(p, x) == membership(reduced, x) for x in points)


def test_empty_intersection_is_reported():
    """Contradictory rows make vertex enumeration raise EmptyPolytopeError."""
    p = HalfspacePolytope.box([0.0, 0.0], [1.0, 1.0])
    p = intersect(p, LinearConstraintSet([[1.0, 0.0]], [-0.5]))
    with pytest.raises(EmptyPolytopeError):
        enumerate_vertices(p)


def test_unbounded_and_oversized_polytopes_are_rejected():
    """Open sets and dimensions above 12 cannot be enumerated."""
    with pytest.raises(UnboundedPolytopeError):
        enumerate_vertices(HalfspacePolytope([[1.0, 0.0]], [1.0]))
    with pytest.raises(DimensionTooLargeError):
        enumerate_vertices(HalfspacePolytope.box([0.0] * 13, [1.0] * 13))


def test_bounding_box_of_a_triangle():
    """The bounding box spans the extreme coordinates of the vertices."""
    p = HalfspacePolytope([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]], [0.0, 0.0, 2.0])
    lower, upper = bounding_box(p)
    np.testing.assert_allclose(lower, [0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(upper, [2.0, 2.0], atol=1e-9)


def test_chebyshev_center_of_square_segment_and_point():
    """Centers of a square, a segment and a single point lie where expected."""
    square = HalfspacePolytope.box([0.0, 0.0], [2.0, 2.0])
    np.testing.assert_allclose(chebyshev_center(square), [1.0, 1.0], atol=1e-7)
    segment = HalfspacePolytope.box([0.0, 1.0], [2.0, 1.0])
    np.testing.assert_allclose(chebyshev_center(segment), [1.0, 1.0], atol=1e-7)
    point = HalfspacePolytope.box([0.3, 0.6], [0.3, 0.6])
    np.testing.assert_allclose(chebyshev_center(point), [0.3, 0.6], atol=1e-7)


def test_point_polytope_has_one_vertex():
    """A degenerate box collapses to a single vertex."""
    point = HalfspacePolytope.box([0.3, 0.6, 0.2], [0.3, 0.6, 0.2])
    np.testing.assert_allclose(enumerate_vertices(point), [[0.3, 0.6, 0.2]])


def test_contains_polytope_and_samples():
    """Nested boxes are detected and samples stay inside."""
    outer = HalfspacePolytope.box([0.0, 0.0], [2.0, 2.0])
    inner = HalfspacePolytope.box([0.5, 0.5], [1.0, 1.5])
    assert contains_polytope(outer, inner)
    assert not contains_polytope(inner, outer)
    samples = sample_interior(inner, 50, np.random.default_rng(0))
    assert all(membership(inner, x) for x in samples)


def test_json_form_preserves_rows():
    """to_json and from_json give the same halfspaces."""
    p = _ball_polytope(5, n_rows=6)
    again = HalfspacePolytope.from_json(p.to_json())
    np.testing.assert_array_equal(again.normals, p.normals)
    np.testing.assert_array_equal(again.offsets, p.offsets)


def test_constraint_set_validation():
    """Row and offset counts must agree and values must be finite."""
    with pytest.raises(DimensionMismatchError):
        LinearConstraintSet([[1.0, 0.0]], [1.0, 2.0])
    with pytest.raises(ValueError):
        LinearConstraintSet([[np.inf, 0.0]], [1.0])
    assert LinearConstraintSet([[1.0]], [1.0], 2, 7).key == (2, 7)
