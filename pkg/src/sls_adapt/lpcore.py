"""
Linear programming for the synthesis layer.

`solve` accepts one carrier type, `LinearProgram`, and dispatches to either the
built-in two-phase tableau simplex or scipy's HiGHS interface. `LpBuilder` and
`AffineVec` assemble programs from affine expressions in the decision
variables, and the two norm encoders turn polytopic norm bounds into rows.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from sls_adapt import config
from sls_adapt.exceptions import DimensionMismatchError, SlsAdaptError

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-7
PIVOT_TOL = 1e-10
COST_TOL = 1e-9

Bound = Tuple[float, float]


class NumericalBreakdownError(SlsAdaptError):
    """Raised when a solver cannot make progress on an ill-conditioned basis."""

    pass


class UnsupportedNormError(SlsAdaptError, ValueError):
    """Raised when a norm outside the polytopic family is requested."""

    pass


class NormKind(enum.Enum):
    """Polytopic norms: the unit ball of each is a polytope."""

    MAX_ABS = "linf"
    SUM_ABS = "l1"

    @classmethod
    def parse(cls, value: Union[str, NormKind]) -> NormKind:
        if isinstance(value, NormKind):
            return value
        aliases = {"linf": cls.MAX_ABS, "inf": cls.MAX_ABS, "max_abs": cls.MAX_ABS,
                   "l1": cls.SUM_ABS, "sum_abs": cls.SUM_ABS}
        try:
            return aliases[str(value).lower()]
        except KeyError as e:
            raise UnsupportedNormError(f"Unsupported norm {value!r}.") from e

    def vector_norm(self, v: np.ndarray) -> float:
        v = np.asarray(v, dtype=float).ravel()
        if v.size == 0:
            return 0.0
        if self is NormKind.MAX_ABS:
            return float(np.max(np.abs(v)))
        return float(np.sum(np.abs(v)))

    def induced_norm(self, m: np.ndarray) -> float:
        """Operator norm: max row sum for ℓ∞, max column sum for ℓ1."""
        m = np.atleast_2d(np.asarray(m, dtype=float))
        if m.size == 0:
            return 0.0
        axis = 1 if self is NormKind.MAX_ABS else 0
        return float(np.max(np.sum(np.abs(m), axis=axis)))


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


def _as_csr(matrix, n_cols: int) -> sp.csr_matrix:
    if matrix is None:
        return sp.csr_matrix((0, n_cols))
    if sp.issparse(matrix):
        return sp.csr_matrix(matrix, dtype=float)
    dense = np.asarray(matrix, dtype=float)
    if dense.size == 0:
        return sp.csr_matrix((0, n_cols))
    return sp.csr_matrix(np.atleast_2d(dense))


@dataclass(frozen=True)
class LinearProgram:
    """
    minimize objective·x subject to
    inequality_normals·x ≤ inequality_offsets,
    equality_normals·x = equality_offsets,
    lower_j ≤ x_j ≤ upper_j.

    Row matrices are stored sparse; dense inputs are converted on construction.
    """

    objective: np.ndarray
    inequality_normals: sp.csr_matrix = None
    inequality_offsets: np.ndarray = None
    equality_normals: sp.csr_matrix = None
    equality_offsets: np.ndarray = None
    variable_bounds: Tuple[Bound, ...] = None

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float).ravel()
        n = c.size
        a_ub = _as_csr(self.inequality_normals, n)
        a_eq = _as_csr(self.equality_normals, n)
        b_ub = np.asarray(
            [] if self.inequality_offsets is None else self.inequality_offsets,
            dtype=float,
        ).ravel()
        b_eq = np.asarray(
            [] if self.equality_offsets is None else self.equality_offsets,
            dtype=float,
        ).ravel()
        bounds = (
            tuple((0.0, math.inf) for _ in range(n))
            if self.variable_bounds is None
            else tuple((float(lo), float(hi)) for lo, hi in self.variable_bounds)
        )
        if a_ub.shape[1] != n or a_eq.shape[1] != n:
            raise DimensionMismatchError(
                f"Constraint matrices must have {n} columns, "
                f"got {a_ub.shape[1]} and {a_eq.shape[1]}."
            )
        if a_ub.shape[0] != b_ub.size or a_eq.shape[0] != b_eq.size:
            raise DimensionMismatchError("Row counts and offset lengths disagree.")
        if len(bounds) != n:
            raise DimensionMismatchError(
                f"Expected {n} variable bounds, got {len(bounds)}."
            )
        for arr in (c, b_ub, b_eq, a_ub.data, a_eq.data):
            if not np.all(np.isfinite(arr)):
                raise ValueError("Linear program data must be finite.")
        for lo, hi in bounds:
            if math.isnan(lo) or math.isnan(hi) or lo > hi or lo == math.inf:
                raise ValueError(f"Invalid variable bound ({lo}, {hi}).")
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "inequality_normals", a_ub)
        object.__setattr__(self, "inequality_offsets", b_ub)
        object.__setattr__(self, "equality_normals", a_eq)
        object.__setattr__(self, "equality_offsets", b_eq)
        object.__setattr__(self, "variable_bounds", bounds)

    @property
    def n_variables(self) -> int:
        return self.objective.size

    @property
    def n_constraints(self) -> int:
        return self.inequality_offsets.size + self.equality_offsets.size


@dataclass(frozen=True)
class LpSolution:
    status: LpStatus
    point: np.ndarray
    objective_value: float

    @property
    def is_optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def max_violation(lp: LinearProgram, point: np.ndarray) -> float:
    """Largest absolute violation of any constraint or bound at `point`."""
    x = np.asarray(point, dtype=float).ravel()
    if x.size != lp.n_variables:
        raise DimensionMismatchError(
            f"Point has {x.size} entries, program has {lp.n_variables} variables."
        )
    worst = 0.0
    if lp.inequality_offsets.size:
        worst = max(worst, float(np.max(lp.inequality_normals @ x
                                        - lp.inequality_offsets)))
    if lp.equality_offsets.size:
        worst = max(worst, float(np.max(np.abs(lp.equality_normals @ x
                                               - lp.equality_offsets))))
    lower = np.array([b[0] for b in lp.variable_bounds])
    upper = np.array([b[1] for b in lp.variable_bounds])
    if x.size:
        worst = max(worst, float(np.max(lower - x)), float(np.max(x - upper)))
    return max(worst, 0.0)


class TwoPhaseSimplex:
    """
    Dense tableau simplex with an artificial-variable phase 1.

    Entering columns follow Dantzig's rule until the number of degenerate
    pivots exceeds 10·(rows+cols); from then on Bland's smallest-index rule
    is used on both the entering and leaving side, which cannot cycle.
    """

    def __init__(self, max_iterations: Optional[int] = None):
        self.max_iterations = max_iterations

    @staticmethod
    def _pivot(T: np.ndarray, row: int, col: int):
        piv = T[row, col]
        if abs(piv) < PIVOT_TOL:
            raise NumericalBreakdownError(f"Pivot element {piv:.3e} is too small.")
        T[row, :] /= piv
        column = T[:, col].copy()
        column[row] = 0.0
        T -= np.outer(column, T[row, :])

    @staticmethod
    def _enter(d: np.ndarray, bland: bool) -> int:
        candidates = np.flatnonzero(d < -COST_TOL)
        if candidates.size == 0:
            return -1
        if bland:
            return int(candidates[0])
        return int(candidates[np.argmin(d[candidates])])

    @staticmethod
    def _leave(T: np.ndarray, col: int, basis: list) -> int:
        column = T[:-1, col]
        rows = np.flatnonzero(column > PIVOT_TOL)
        if rows.size == 0:
            return -1
        ratios = T[rows, -1] / column[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
        return int(min(ties, key=lambda r: basis[r]))

    def _iterate(self, T: np.ndarray, basis: list) -> str:
        m, width = T.shape[0] - 1, T.shape[1] - 1
        limit = self.max_iterations or 50 * (m + width) + 1000
        degenerate_budget = 10 * (m + width)
        degenerate = 0
        for _ in range(limit):
            col = self._enter(T[-1, :-1], bland=degenerate > degenerate_budget)
            if col < 0:
                return "optimal"
            row = self._leave(T, col, basis)
            if row < 0:
                return "unbounded"
            if T[row, -1] <= PIVOT_TOL:
                degenerate += 1
            self._pivot(T, row, col)
            basis[row] = col
            if not np.all(np.isfinite(T)):
                raise NumericalBreakdownError("Tableau contains non-finite values.")
        raise NumericalBreakdownError(f"Simplex exceeded {limit} iterations.")

    def solve(self, lp: LinearProgram) -> LpSolution:
        n = lp.n_variables
        shift, transform, extra_rows, extra_rhs = _standardize_bounds(
            lp.variable_bounds
        )
        ny = transform.shape[1]
        a_ub = lp.inequality_normals.toarray() @ transform
        b_ub = lp.inequality_offsets - lp.inequality_normals @ shift
        a_eq = lp.equality_normals.toarray() @ transform
        b_eq = lp.equality_offsets - lp.equality_normals @ shift
        if extra_rows.shape[0]:
            a_ub = np.vstack([a_ub, extra_rows])
            b_ub = np.concatenate([b_ub, extra_rhs])
        cost = lp.objective @ transform

        m_ub, m_eq = a_ub.shape[0], a_eq.shape[0]
        m = m_ub + m_eq
        flip_ub = b_ub < 0
        flip_eq = b_eq < 0
        n_art = int(flip_ub.sum()) + m_eq
        width = ny + m_ub + n_art
        T = np.zeros((m + 1, width + 1))
        basis = [0] * m
        art = ny + m_ub
        for i in range(m_ub):
            sign = -1.0 if flip_ub[i] else 1.0
            T[i, :ny] = sign * a_ub[i]
            T[i, ny + i] = sign
            T[i, -1] = sign * b_ub[i]
            if flip_ub[i]:
                T[i, art] = 1.0
                basis[i] = art
                art += 1
            else:
                basis[i] = ny + i
        for r in range(m_eq):
            i = m_ub + r
            sign = -1.0 if flip_eq[r] else 1.0
            T[i, :ny] = sign * a_eq[r]
            T[i, -1] = sign * b_eq[r]
            T[i, art] = 1.0
            basis[i] = art
            art += 1

        first_art = ny + m_ub
        if n_art:
            T[-1, first_art:width] = 1.0
            for i, b in enumerate(basis):
                if b >= first_art:
                    T[-1, :] -= T[i, :]
            self._iterate(T, basis)
            if -T[-1, -1] > 1e-9 * max(1.0, float(np.max(np.abs(T[:-1, -1])))):
                return LpSolution(LpStatus.INFEASIBLE, np.full(n, np.nan), math.nan)
            T, basis = self._drop_artificials(T, basis, first_art)

        T[-1, :] = 0.0
        T[-1, :ny] = cost
        for i, b in enumerate(basis):
            if b < ny and cost[b] != 0.0:
                T[-1, :] -= cost[b] * T[i, :]
        if self._iterate(T, basis) == "unbounded":
            return LpSolution(LpStatus.UNBOUNDED, np.full(n, np.nan), -math.inf)

        y = np.zeros(T.shape[1] - 1)
        for i, b in enumerate(basis):
            y[b] = T[i, -1]
        x = shift + transform @ y[:ny]
        return LpSolution(LpStatus.OPTIMAL, x, float(lp.objective @ x))

    def _drop_artificials(self, T: np.ndarray, basis: list, first_art: int):
        keep_rows = []
        for i in range(len(basis)):
            if basis[i] >= first_art:
                candidates = np.flatnonzero(np.abs(T[i, :first_art]) > 1e-9)
                if candidates.size == 0:
                    # redundant equality
                    continue
                self._pivot(T, i, int(candidates[0]))
                basis[i] = int(candidates[0])
            keep_rows.append(i)
        rows = keep_rows + [T.shape[0] - 1]
        cols = list(range(first_art)) + [T.shape[1] - 1]
        return T[np.ix_(rows, cols)].copy(), [basis[i] for i in keep_rows]


def _standardize_bounds(bounds: Sequence[Bound]):
    """Substitute x = shift + transform·y with y ≥ 0 plus upper-bound rows."""
    n = len(bounds)
    columns = []
    shift = np.zeros(n)
    upper_rows = []
    for j, (lo, hi) in enumerate(bounds):
        if lo > -math.inf:
            shift[j] = lo
            columns.append((j, 1.0))
            if hi < math.inf:
                upper_rows.append((len(columns) - 1, hi - lo))
        elif hi < math.inf:
            shift[j] = hi
            columns.append((j, -1.0))
        else:
            columns.append((j, 1.0))
            columns.append((j, -1.0))
    transform = np.zeros((n, len(columns)))
    for col, (j, sign) in enumerate(columns):
        transform[j, col] = sign
    extra = np.zeros((len(upper_rows), len(columns)))
    rhs = np.zeros(len(upper_rows))
    for r, (col, value) in enumerate(upper_rows):
        extra[r, col] = 1.0
        rhs[r] = value
    return shift, transform, extra, rhs


def _solve_highs(lp: LinearProgram) -> LpSolution:
    n = lp.n_variables
    bounds = [
        (None if lo == -math.inf else lo, None if hi == math.inf else hi)
        for lo, hi in lp.variable_bounds
    ]
    has_ub = lp.inequality_offsets.size > 0
    has_eq = lp.equality_offsets.size > 0
    res = linprog(
        lp.objective,
        A_ub=lp.inequality_normals if has_ub else None,
        b_ub=lp.inequality_offsets if has_ub else None,
        A_eq=lp.equality_normals if has_eq else None,
        b_eq=lp.equality_offsets if has_eq else None,
        bounds=bounds,
        method="highs",
        options={
            "presolve": True,
            "primal_feasibility_tolerance": 1e-9,
            "dual_feasibility_tolerance": 1e-9,
        },
    )
    if res.status == 0:
        x = np.asarray(res.x, dtype=float)
        return LpSolution(LpStatus.OPTIMAL, x, float(lp.objective @ x))
    if res.status == 2:
        return LpSolution(LpStatus.INFEASIBLE, np.full(n, np.nan), math.nan)
    if res.status == 3:
        return LpSolution(LpStatus.UNBOUNDED, np.full(n, np.nan), -math.inf)
    raise NumericalBreakdownError(f"HiGHS failed: {res.message}")


def solve(lp: LinearProgram, method: Optional[str] = None) -> LpSolution:
    """
    Solves a linear program.

    Args:
        lp: The program to solve.
        method: "simplex" for the built-in two-phase solver, "highs" for scipy's
            HiGHS interface. Defaults to `config.get_lp_method()`.

    Returns:
        An LpSolution. Infeasible and unbounded programs are reported through
        the status, not raised.

    Raises:
        NumericalBreakdownError: If the backend cannot finish reliably.
    """
    method = method or config.get_lp_method()
    if method == "simplex":
        solution = TwoPhaseSimplex().solve(lp)
    elif method == "highs":
        solution = _solve_highs(lp)
    else:
        raise ValueError(f"Unknown LP method {method!r}.")
    if solution.is_optimal:
        scale = 1.0 + max(
            float(np.max(np.abs(lp.inequality_offsets), initial=0.0)),
            float(np.max(np.abs(lp.equality_offsets), initial=0.0)),
        )
        violation = max_violation(lp, solution.point)
        if violation > FEAS_TOL * scale:
            logger.warning(
                "LP solution violates constraints by %.3e (%s)", violation, method
            )
    logger.debug(
        "LP %s: %d vars, %d rows -> %s",
        method,
        lp.n_variables,
        lp.n_constraints,
        solution.status.value,
    )
    return solution


@dataclass
class AffineVec:
    """
    A vector of affine functions coef·x[cols] + const.

    Only the columns an expression touches are stored, so products with
    small plant matrices stay small even when the program is large.
    """

    cols: np.ndarray
    coef: np.ndarray
    const: np.ndarray

    def __post_init__(self):
        self.cols = np.asarray(self.cols, dtype=np.int64).ravel()
        self.const = np.asarray(self.const, dtype=float).ravel()
        self.coef = np.asarray(self.coef, dtype=float).reshape(
            self.const.size, self.cols.size
        )

    @classmethod
    def constant(cls, values) -> AffineVec:
        values = np.asarray(values, dtype=float).ravel()
        return cls(np.zeros(0, dtype=np.int64), np.zeros((values.size, 0)), values)

    @classmethod
    def of(cls, index, fixed=None) -> AffineVec:
        """
        Expression selecting variables by index; entries with index < 0 are
        constants taken from `fixed` (zero when omitted).
        """
        index = np.asarray(index, dtype=np.int64).ravel()
        const = (
            np.zeros(index.size)
            if fixed is None
            else np.where(index < 0, np.asarray(fixed, dtype=float).ravel(), 0.0)
        )
        free = np.flatnonzero(index >= 0)
        cols = index[free]
        order = np.argsort(cols)
        coef = np.zeros((index.size, cols.size))
        coef[free[order], np.arange(cols.size)] = 1.0
        return cls(cols[order], coef, const)

    @property
    def size(self) -> int:
        return self.const.size

    def _aligned(self, other: AffineVec):
        cols = np.union1d(self.cols, other.cols)
        a = np.zeros((self.size, cols.size))
        b = np.zeros((other.size, cols.size))
        a[:, np.searchsorted(cols, self.cols)] = self.coef
        b[:, np.searchsorted(cols, other.cols)] = other.coef
        return cols, a, b

    def __add__(self, other) -> AffineVec:
        if not isinstance(other, AffineVec):
            other = AffineVec.constant(np.broadcast_to(other, (self.size,)))
        if other.size != self.size:
            raise DimensionMismatchError(
                f"Cannot add expressions of size {self.size} and {other.size}."
            )
        cols, a, b = self._aligned(other)
        return AffineVec(cols, a + b, self.const + other.const)

    def __neg__(self) -> AffineVec:
        return AffineVec(self.cols, -self.coef, -self.const)

    def __sub__(self, other) -> AffineVec:
        if not isinstance(other, AffineVec):
            other = AffineVec.constant(np.broadcast_to(other, (self.size,)))
        return self + (-other)

    def __mul__(self, scalar: float) -> AffineVec:
        return AffineVec(self.cols, self.coef * scalar, self.const * scalar)

    __rmul__ = __mul__

    def __getitem__(self, index) -> AffineVec:
        return AffineVec(self.cols, self.coef[index], self.const[index])

    def left_mul(self, matrix: np.ndarray) -> AffineVec:
        """matrix @ self, treating self as a flat vector."""
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if matrix.shape[1] != self.size:
            raise DimensionMismatchError(
                f"Matrix with {matrix.shape[1]} columns applied to size {self.size}."
            )
        return AffineVec(self.cols, matrix @ self.coef, matrix @ self.const)

    def matmul(self, left: np.ndarray, shape: Tuple[int, int]) -> AffineVec:
        """left @ X for a matrix-valued X stored row-major with `shape`."""
        _, n_cols = shape
        return self.left_mul(np.kron(np.atleast_2d(left), np.eye(n_cols)))

    def times_vector(self, vector: np.ndarray, shape: Tuple[int, int]) -> AffineVec:
        """X @ vector for a matrix-valued X stored row-major with `shape`."""
        n_rows, _ = shape
        vector = np.asarray(vector, dtype=float).ravel()
        return self.left_mul(np.kron(np.eye(n_rows), vector[None, :]))

    def total(self) -> AffineVec:
        return AffineVec(
            self.cols, self.coef.sum(axis=0, keepdims=True), [self.const.sum()]
        )

    def repeat(self, count: int) -> AffineVec:
        if self.size != 1:
            raise DimensionMismatchError("Only scalar expressions can be repeated.")
        return AffineVec(
            self.cols, np.repeat(self.coef, count, axis=0), np.repeat(self.const, count)
        )

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.coef @ x[self.cols] + self.const

    @staticmethod
    def stack(parts: Iterable[AffineVec]) -> AffineVec:
        parts = list(parts)
        if not parts:
            return AffineVec.constant([])
        cols = np.unique(np.concatenate([p.cols for p in parts]))
        coef = np.zeros((sum(p.size for p in parts), cols.size))
        row = 0
        for p in parts:
            coef[row:row + p.size, np.searchsorted(cols, p.cols)] = p.coef
            row += p.size
        return AffineVec(cols, coef, np.concatenate([p.const for p in parts]))


ScalarLike = Union[float, AffineVec]


def _as_scalar_expr(bound: ScalarLike) -> AffineVec:
    if isinstance(bound, AffineVec):
        if bound.size != 1:
            raise DimensionMismatchError("A norm bound must be a scalar expression.")
        return bound
    return AffineVec.constant([float(bound)])


@dataclass
class LpBuilder:
    """Accumulates variables and rows, then freezes them into a LinearProgram."""

    lower: list = field(default_factory=list)
    upper: list = field(default_factory=list)
    names: dict = field(default_factory=dict)
    _le: list = field(default_factory=list)
    _eq: list = field(default_factory=list)
    _objective: Optional[AffineVec] = None
    _n_le: int = 0
    _n_eq: int = 0

    @property
    def n_variables(self) -> int:
        return len(self.lower)

    @property
    def n_constraints(self) -> int:
        return self._n_le + self._n_eq

    def add_variables(
        self,
        shape: Union[int, Tuple[int, ...]],
        lower: float = -math.inf,
        upper: float = math.inf,
        name: Optional[str] = None,
    ) -> np.ndarray:
        count = int(np.prod(shape))
        start = self.n_variables
        self.lower.extend([lower] * count)
        self.upper.extend([upper] * count)
        index = np.arange(start, start + count).reshape(shape)
        if name is not None:
            self.names[name] = index
        return index

    def add_le(self, expr: AffineVec):
        """Adds the rows expr ≤ 0."""
        if expr.size:
            self._le.append(expr)
            self._n_le += expr.size

    def add_eq(self, expr: AffineVec):
        """Adds the rows expr = 0."""
        if expr.size:
            self._eq.append(expr)
            self._n_eq += expr.size

    def minimize(self, expr: AffineVec):
        self._objective = _as_scalar_expr(expr)

    def _rows(self, exprs: list, n: int):
        if not exprs:
            return sp.csr_matrix((0, n)), np.zeros(0)
        rows, cols, vals, rhs = [], [], [], []
        offset = 0
        for e in exprs:
            r, c = np.nonzero(e.coef)
            rows.append(r + offset)
            cols.append(e.cols[c])
            vals.append(e.coef[r, c])
            rhs.append(-e.const)
            offset += e.size
        matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(offset, n),
        ).tocsr()
        return matrix, np.concatenate(rhs)

    def build(self) -> LinearProgram:
        n = self.n_variables
        c = np.zeros(n)
        if self._objective is not None:
            c[self._objective.cols] = self._objective.coef[0]
        a_ub, b_ub = self._rows(self._le, n)
        a_eq, b_eq = self._rows(self._eq, n)
        return LinearProgram(
            objective=c,
            inequality_normals=a_ub,
            inequality_offsets=b_ub,
            equality_normals=a_eq,
            equality_offsets=b_eq,
            variable_bounds=tuple(zip(self.lower, self.upper)),
        )

    def objective_offset(self) -> float:
        return 0.0 if self._objective is None else float(self._objective.const[0])


def encode_vector_norm_bound(
    builder: LpBuilder,
    norm: Union[NormKind, str],
    expr: AffineVec,
    bound: ScalarLike,
) -> np.ndarray:
    """
    Adds rows that hold iff ‖expr‖ ≤ bound.

    ℓ∞ uses ±v_i ≤ b directly. ℓ1 introduces one slack per entry with
    s_i ≥ ±v_i and Σ s_i ≤ b.

    Returns:
        Indices of the auxiliary variables (empty for ℓ∞).
    """
    norm = NormKind.parse(norm)
    b = _as_scalar_expr(bound)
    if norm is NormKind.MAX_ABS:
        rep = b.repeat(expr.size)
        builder.add_le(expr - rep)
        builder.add_le(-expr - rep)
        return np.zeros(0, dtype=np.int64)
    slack = builder.add_variables(expr.size, lower=0.0)
    s = AffineVec.of(slack)
    builder.add_le(expr - s)
    builder.add_le(-expr - s)
    builder.add_le(s.total() - b)
    return slack


def encode_matrix_norm_bound(
    builder: LpBuilder,
    norm: Union[NormKind, str],
    expr: AffineVec,
    shape: Tuple[int, int],
    bound: ScalarLike,
) -> np.ndarray:
    """
    Adds rows that hold iff the induced norm of the matrix expression is at
    most `bound`. `expr` stores the matrix row-major.

    For ℓ∞ every row's absolute sum is bounded; for ℓ1 every column's.
    One slack per entry carries the absolute values, except when each sum
    has a single term (a column under ℓ∞, a row under ℓ1), where ±x ≤ b
    is used directly.

    Returns:
        Indices of the auxiliary variables.
    """
    norm = NormKind.parse(norm)
    n_rows, n_cols = shape
    if n_rows * n_cols != expr.size:
        raise DimensionMismatchError(
            f"Shape {shape} does not match expression of size {expr.size}."
        )
    b = _as_scalar_expr(bound)
    if (norm is NormKind.MAX_ABS and n_cols == 1) or (
        norm is NormKind.SUM_ABS and n_rows == 1
    ):
        return encode_vector_norm_bound(builder, NormKind.MAX_ABS, expr, b)
    slack = builder.add_variables((n_rows, n_cols), lower=0.0)
    s = AffineVec.of(slack)
    builder.add_le(expr - s)
    builder.add_le(-expr - s)
    if norm is NormKind.MAX_ABS:
        groups = [slack[r, :] for r in range(n_rows)]
    else:
        groups = [slack[:, c] for c in range(n_cols)]
    sums = AffineVec.stack(AffineVec.of(g).total() for g in groups)
    builder.add_le(sums - b.repeat(len(groups)))
    return slack.ravel()


def epigraph(
    builder: LpBuilder,
    norm: Union[NormKind, str],
    expr: AffineVec,
    shape: Tuple[int, int],
) -> AffineVec:
    """Returns a fresh scalar variable τ ≥ 0 constrained by ‖expr‖ ≤ τ."""
    tau = builder.add_variables(1, lower=0.0)
    bound = AffineVec.of(tau)
    encode_matrix_norm_bound(builder, norm, expr, shape, bound)
    return bound


def dump_lp(lp: LinearProgram, path: Union[str, Path]) -> Path:
    """
    Writes a program in a fixed ascii format: a `vars` header, the
    `objective` line, then one `le`/`eq` line per row (rhs, then j:value
    pairs), then one `bound` line per variable.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"vars {lp.n_variables}"]

    def _terms(values: np.ndarray) -> str:
        idx = np.flatnonzero(values)
        return " ".join(f"{j}:{float(values[j])!r}" for j in idx)

    lines.append(f"objective {_terms(lp.objective)}".rstrip())
    for kind, matrix, rhs in (
        ("le", lp.inequality_normals, lp.inequality_offsets),
        ("eq", lp.equality_normals, lp.equality_offsets),
    ):
        for r in range(matrix.shape[0]):
            row = matrix.getrow(r)
            terms = " ".join(
                f"{j}:{float(v)!r}" for j, v in zip(row.indices, row.data) if v != 0
            )
            lines.append(f"{kind} {float(rhs[r])!r} {terms}".rstrip())
    for j, (lo, hi) in enumerate(lp.variable_bounds):
        lines.append(f"bound {j} {lo!r} {hi!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_lp(path: Union[str, Path]) -> LinearProgram:
    """Reads a program written by `dump_lp`."""
    n = None
    objective = None
    rows = {"le": ([], []), "eq": ([], [])}
    bounds = {}

    def _parse_terms(tokens: Sequence[str]) -> np.ndarray:
        values = np.zeros(n)
        for token in tokens:
            j, v = token.split(":")
            values[int(j)] = float(v)
        return values

    for line in Path(path).read_text().splitlines():
        tokens = line.split()
        if not tokens:
            continue
        head = tokens[0]
        if head == "vars":
            n = int(tokens[1])
            objective = np.zeros(n)
        elif head == "objective":
            objective = _parse_terms(tokens[1:])
        elif head in rows:
            rows[head][0].append(_parse_terms(tokens[2:]))
            rows[head][1].append(float(tokens[1]))
        elif head == "bound":
            bounds[int(tokens[1])] = (float(tokens[2]), float(tokens[3]))
        else:
            raise ValueError(f"Unknown LP line {line!r}.")
    if n is None:
        raise ValueError("LP file has no 'vars' header.")

    def _matrix(kind: str):
        data, rhs = rows[kind]
        return (np.array(data) if data else np.zeros((0, n))), np.array(rhs)

    a_ub, b_ub = _matrix("le")
    a_eq, b_eq = _matrix("eq")
    return LinearProgram(
        objective=objective,
        inequality_normals=a_ub,
        inequality_offsets=b_ub,
        equality_normals=a_eq,
        equality_offsets=b_eq,
        variable_bounds=tuple(bounds.get(j, (0.0, math.inf)) for j in range(n)),
    )
