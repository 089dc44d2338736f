"""
Halfspace-representation polytopes over the parameter space.

Rows are kept with unit-length normals, so the 1e-9 feasibility tolerance is
a Euclidean distance to each facet.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import null_space

from sls_adapt import lpcore
from sls_adapt.exceptions import DimensionMismatchError, SlsAdaptError

logger = logging.getLogger(__name__)

ABS_TOL = 1e-9
DEDUP_TOL = 1e-8
PARALLEL_TOL = 1e-8
MAX_DIM = 12
REDUCE_EVERY = 25
COMBINATORIAL_LIMIT = 50_000
_CHUNK = 20_000


class EmptyPolytopeError(SlsAdaptError):
    """Raised when the constraints admit no point."""

    pass


class UnboundedPolytopeError(SlsAdaptError):
    """Raised when a coordinate direction is unbounded."""

    pass


class DimensionTooLargeError(SlsAdaptError):
    """Raised when vertex enumeration is requested above the supported dimension."""

    pass


def _normalize(normals: np.ndarray, offsets: np.ndarray):
    norms = np.linalg.norm(normals, axis=1)
    zero = norms <= ABS_TOL
    scale = np.where(zero, 1.0, norms)
    return normals / scale[:, None], offsets / scale, zero


@dataclass(frozen=True)
class LinearConstraintSet:
    """Rows normals·α ≤ offsets, tagged with where and when they were observed."""

    normals: np.ndarray
    offsets: np.ndarray
    origin_node: int = -1
    origin_time: int = -1

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = np.asarray(self.offsets, dtype=float).ravel()
        if normals.shape[0] < 1:
            raise ValueError("A constraint set needs at least one row.")
        if normals.shape[0] != offsets.size:
            raise DimensionMismatchError(
                f"{normals.shape[0]} normals but {offsets.size} offsets."
            )
        if not (np.all(np.isfinite(normals)) and np.all(np.isfinite(offsets))):
            raise ValueError("Constraint rows must be finite.")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)

    @property
    def key(self):
        return (self.origin_node, self.origin_time)

    def to_json(self) -> dict:
        return {
            "normals": self.normals.tolist(),
            "offsets": self.offsets.tolist(),
            "origin_node": self.origin_node,
            "origin_time": self.origin_time,
        }


@dataclass(frozen=True, eq=False)
class HalfspacePolytope:
    """
    {α : normals·α ≤ offsets}.

    Values are immutable; only the vertex cache is filled lazily, once.
    """

    normals: np.ndarray
    offsets: np.ndarray
    stamp: int = 0
    since_reduce: int = 0
    _vertices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = np.asarray(self.offsets, dtype=float).ravel()
        if normals.shape[0] != offsets.size:
            raise DimensionMismatchError(
                f"{normals.shape[0]} normals but {offsets.size} offsets."
            )
        if normals.shape[1] < 1:
            raise DimensionMismatchError("A polytope needs dimension at least 1.")
        normals, offsets, zero = _normalize(normals, offsets)
        # 0·α ≤ h rows are either vacuous or make the set empty; keep only the latter
        keep = ~zero | (offsets < -ABS_TOL)
        object.__setattr__(self, "normals", normals[keep])
        object.__setattr__(self, "offsets", offsets[keep])

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> HalfspacePolytope:
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        if lower.size != upper.size:
            raise DimensionMismatchError("Box bounds differ in length.")
        eye = np.eye(lower.size)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def n_rows(self) -> int:
        return self.offsets.size

    def contains(self, alpha) -> bool:
        return membership(self, alpha)

    def vertices(self) -> np.ndarray:
        return enumerate_vertices(self)

    def to_json(self) -> dict:
        return {"normals": self.normals.tolist(), "offsets": self.offsets.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> HalfspacePolytope:
        try:
            return cls(np.asarray(data["normals"], float), np.asarray(data["offsets"]))
        except KeyError as e:
            raise ValueError(f"Polytope JSON is missing {e}.") from e


def membership(p: HalfspacePolytope, alpha) -> bool:
    """True iff normals·α ≤ offsets + 1e-9 componentwise."""
    alpha = np.asarray(alpha, dtype=float).ravel()
    if alpha.size != p.dim:
        raise DimensionMismatchError(
            f"Point of length {alpha.size} tested against a {p.dim}-dim polytope."
        )
    if p.n_rows == 0:
        return True
    return bool(np.all(p.normals @ alpha <= p.offsets + ABS_TOL))


def intersect(
    p: HalfspacePolytope,
    c: LinearConstraintSet,
    reduce_every: Optional[int] = REDUCE_EVERY,
) -> HalfspacePolytope:
    """
    Returns {α ∈ p : c holds}.

    A new row is dropped when an existing row has the same unit normal (dot
    product above 1 - 1e-8) and the new offset is not tighter by more than
    1e-9; a strictly tighter new row replaces the old ones. Every
    `reduce_every` intersections the result is passed through
    `remove_redundant`.

    Raises:
        DimensionMismatchError: If c has the wrong number of columns.
        EmptyPolytopeError: If the periodic reduction finds the set empty.
    """
    if c.normals.shape[1] != p.dim:
        raise DimensionMismatchError(
            f"Constraint has {c.normals.shape[1]} columns, polytope has dim {p.dim}."
        )
    normals = [row for row in p.normals]
    offsets = list(p.offsets)
    new_normals, new_offsets, zero = _normalize(c.normals, c.offsets)
    for a, h, is_zero in zip(new_normals, new_offsets, zero):
        if is_zero:
            if h < -ABS_TOL:
                normals.append(a)
                offsets.append(h)
            continue
        if normals:
            dots = np.asarray(normals) @ a
            parallel = np.flatnonzero(dots > 1.0 - PARALLEL_TOL)
        else:
            parallel = np.zeros(0, dtype=int)
        if parallel.size:
            tightest = min(offsets[i] for i in parallel)
            if h >= tightest - ABS_TOL:
                continue
            for i in sorted(parallel, reverse=True):
                del normals[i]
                del offsets[i]
        normals.append(a)
        offsets.append(h)
    result = HalfspacePolytope(
        np.asarray(normals).reshape(-1, p.dim),
        np.asarray(offsets),
        stamp=p.stamp + 1,
        since_reduce=p.since_reduce + 1,
    )
    if reduce_every and result.since_reduce >= reduce_every:
        result = remove_redundant(result)
    return result


def _box_lp(p: HalfspacePolytope, direction: np.ndarray) -> lpcore.LpSolution:
    lp = lpcore.LinearProgram(
        objective=-direction,
        inequality_normals=p.normals,
        inequality_offsets=p.offsets,
        variable_bounds=tuple((-math.inf, math.inf) for _ in range(p.dim)),
    )
    return lpcore.solve(lp)


def bounding_box(p: HalfspacePolytope):
    """
    Per-coordinate lower and upper bounds of p.

    Raises:
        EmptyPolytopeError: If p is infeasible.
        UnboundedPolytopeError: If some coordinate is unbounded.
    """
    lower = np.zeros(p.dim)
    upper = np.zeros(p.dim)
    for i in range(p.dim):
        for sign in (1.0, -1.0):
            direction = np.zeros(p.dim)
            direction[i] = sign
            sol = _box_lp(p, direction)
            if sol.status is lpcore.LpStatus.INFEASIBLE:
                raise EmptyPolytopeError("Polytope is empty.")
            if sol.status is lpcore.LpStatus.UNBOUNDED:
                raise UnboundedPolytopeError(f"Coordinate {i} is unbounded.")
            if sign > 0:
                upper[i] = sol.point[i]
            else:
                lower[i] = sol.point[i]
    return lower, upper


def _dedup(points: np.ndarray) -> np.ndarray:
    if points.shape[0] == 0:
        return points
    grid = np.round(points / (DEDUP_TOL / 10.0))
    _, first = np.unique(grid, axis=0, return_index=True)
    candidates = points[np.sort(first)]
    kept: List[np.ndarray] = []
    for v in candidates:
        if all(np.linalg.norm(v - k) > DEDUP_TOL for k in kept):
            kept.append(v)
    out = np.asarray(kept)
    return out[np.lexsort(out.T[::-1])]


def _vertices_combinatorial(p: HalfspacePolytope) -> np.ndarray:
    m, d = p.normals.shape
    found = []
    combos = itertools.combinations(range(m), d)
    while True:
        chunk = np.asarray(list(itertools.islice(combos, _CHUNK)), dtype=np.int64)
        if chunk.size == 0:
            break
        chunk = chunk.reshape(-1, d)
        a = p.normals[chunk]
        b = p.offsets[chunk]
        regular = np.abs(np.linalg.det(a)) > 1e-10
        if not np.any(regular):
            continue
        v = np.linalg.solve(a[regular], b[regular][..., None])[..., 0]
        feasible = np.all(v @ p.normals.T <= p.offsets + ABS_TOL, axis=1)
        found.append(v[feasible])
    if not found:
        return np.zeros((0, d))
    return _dedup(np.vstack(found))


def _vertices_qhull(p: HalfspacePolytope, center: np.ndarray) -> np.ndarray:
    from scipy.spatial import HalfspaceIntersection

    halfspaces = np.hstack([p.normals, -p.offsets[:, None]])
    hs = HalfspaceIntersection(halfspaces, center)
    points = np.asarray(hs.intersections)
    feasible = np.all(points @ p.normals.T <= p.offsets + ABS_TOL, axis=1)
    return _dedup(points[feasible])


def enumerate_vertices(p: HalfspacePolytope, backend: str = "auto") -> np.ndarray:
    """
    All extreme points of a bounded polytope, deduplicated and sorted.

    Args:
        p: The polytope.
        backend: "combinatorial" solves every p×p system of active rows;
            "qhull" uses scipy's halfspace intersection around the Chebyshev
            center; "auto" uses the former unless the subset count is large
            and the set is full-dimensional.

    Returns:
        An array of shape (n_vertices, p.dim). The result is cached on p.

    Raises:
        DimensionTooLargeError: If p.dim exceeds 12.
        EmptyPolytopeError: If p has no points.
        UnboundedPolytopeError: If p is unbounded.
    """
    if p._vertices is not None:
        return p._vertices
    if p.dim > MAX_DIM:
        raise DimensionTooLargeError(
            f"Vertex enumeration supports dim <= {MAX_DIM}, got {p.dim}."
        )
    bounding_box(p)
    subsets = math.comb(p.n_rows, p.dim)
    vertices = None
    if backend == "qhull" or (backend == "auto" and subsets > COMBINATORIAL_LIMIT):
        center, radius = _chebyshev_lp(p)
        if radius > 1e-7:
            from scipy.spatial import QhullError

            try:
                vertices = _vertices_qhull(p, center)
            except (QhullError, ValueError) as e:
                logger.warning("qhull failed (%s); using combinatorial enumeration", e)
        elif backend == "qhull":
            logger.warning("Polytope is thin; qhull needs an interior point")
    if vertices is None:
        if subsets > COMBINATORIAL_LIMIT:
            p_small = remove_redundant(p)
            vertices = _vertices_combinatorial(p_small)
        else:
            vertices = _vertices_combinatorial(p)
    if vertices.shape[0] == 0:
        raise EmptyPolytopeError("No vertex found for a nonempty bounded polytope.")
    logger.debug("Enumerated %d vertices from %d rows", vertices.shape[0], p.n_rows)
    object.__setattr__(p, "_vertices", vertices)
    return vertices


def _max_row(p_normals, p_offsets, keep, i, dim):
    lp = lpcore.LinearProgram(
        objective=-p_normals[i],
        inequality_normals=p_normals[keep],
        inequality_offsets=p_offsets[keep],
        variable_bounds=tuple((-math.inf, math.inf) for _ in range(dim)),
    )
    return lpcore.solve(lp)


def remove_redundant(p: HalfspacePolytope) -> HalfspacePolytope:
    """
    Drops every row whose maximum over the remaining rows is within 1e-9 of
    its offset. Membership is unchanged.

    Raises:
        EmptyPolytopeError: If p is empty.
    """
    try:
        _chebyshev_lp(p)
    except UnboundedPolytopeError:
        pass
    keep = np.ones(p.n_rows, dtype=bool)
    for i in range(p.n_rows):
        keep[i] = False
        if not np.any(keep):
            keep[i] = True
            continue
        sol = _max_row(p.normals, p.offsets, keep, i, p.dim)
        redundant = (
            sol.status is lpcore.LpStatus.OPTIMAL
            and -sol.objective_value <= p.offsets[i] + ABS_TOL
        )
        keep[i] = not redundant
    logger.debug("Redundancy removal kept %d of %d rows", keep.sum(), p.n_rows)
    result = HalfspacePolytope(
        p.normals[keep], p.offsets[keep], stamp=p.stamp, since_reduce=0
    )
    if p._vertices is not None:
        object.__setattr__(result, "_vertices", p._vertices)
    return result


def _chebyshev_lp(p: HalfspacePolytope):
    """Largest ball center and radius; raises on empty or unbounded sets."""
    d = p.dim
    norms = np.linalg.norm(p.normals, axis=1)
    lp = lpcore.LinearProgram(
        objective=np.concatenate([np.zeros(d), [-1.0]]),
        inequality_normals=np.hstack([p.normals, norms[:, None]]),
        inequality_offsets=p.offsets,
        variable_bounds=tuple([(-math.inf, math.inf)] * d + [(0.0, math.inf)]),
    )
    sol = lpcore.solve(lp)
    if sol.status is lpcore.LpStatus.INFEASIBLE:
        raise EmptyPolytopeError("Polytope is empty.")
    if sol.status is lpcore.LpStatus.UNBOUNDED:
        raise UnboundedPolytopeError("Polytope is unbounded.")
    return sol.point[:d], float(sol.point[d])


def _implicit_equalities(p: HalfspacePolytope) -> np.ndarray:
    """Rows that hold with equality everywhere on p."""
    tight = np.zeros(p.n_rows, dtype=bool)
    for i in range(p.n_rows):
        lp = lpcore.LinearProgram(
            objective=p.normals[i],
            inequality_normals=p.normals,
            inequality_offsets=p.offsets,
            variable_bounds=tuple((-math.inf, math.inf) for _ in range(p.dim)),
        )
        sol = lpcore.solve(lp)
        if sol.is_optimal and p.offsets[i] - sol.objective_value <= 1e-7:
            tight[i] = True
    return tight


def chebyshev_center(p: HalfspacePolytope) -> np.ndarray:
    """
    Center of the largest inscribed ball.

    For sets without interior the ball is taken inside the affine hull: rows
    that hold with equality everywhere define the hull, and the center is
    computed over the remaining rows in hull coordinates.

    Raises:
        EmptyPolytopeError: If p is empty.
        UnboundedPolytopeError: If the ball radius is unbounded.
    """
    center, radius = _chebyshev_lp(p)
    if radius > 1e-7:
        return center
    bounding_box(p)
    tight = _implicit_equalities(p)
    a_eq, b_eq = p.normals[tight], p.offsets[tight]
    base = np.linalg.lstsq(a_eq, b_eq, rcond=None)[0]
    basis = null_space(a_eq)
    if basis.shape[1] == 0:
        return base
    rest_a = p.normals[~tight] @ basis
    rest_b = p.offsets[~tight] - p.normals[~tight] @ base
    norms = np.linalg.norm(rest_a, axis=1)
    usable = norms > 1e-9
    sub = HalfspacePolytope(rest_a[usable], rest_b[usable])
    z, _ = _chebyshev_lp(sub)
    return base + basis @ z


def contains_polytope(outer: HalfspacePolytope, inner: HalfspacePolytope) -> bool:
    """True iff every vertex of inner is a member of outer."""
    return all(membership(outer, v) for v in enumerate_vertices(inner))


def sample_interior(p: HalfspacePolytope, count: int, rng: np.random.Generator):
    """Random convex combinations of the vertices of p."""
    vertices = enumerate_vertices(p)
    weights = rng.dirichlet(np.ones(vertices.shape[0]), size=count)
    return weights @ vertices
