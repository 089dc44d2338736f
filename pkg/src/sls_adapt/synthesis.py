"""
Robust synthesis linear programs.

Both problems are assembled through `LpBuilder` from affine expressions in
the free entries of R and M. The central program bounds Σ_k ‖Δ_k‖ at every
vertex by λ; the node program bounds the column-i residuals of node i by a
geometric profile c_i ρ^{k-1} and adds the two adaptation budgets.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from sls_adapt.exceptions import DimensionMismatchError, SlsAdaptError
from sls_adapt.lpcore import (
    AffineVec,
    LinearProgram,
    LpBuilder,
    NormKind,
    dump_lp,
    encode_vector_norm_bound,
    epigraph,
    solve,
)
from sls_adapt.model import AssumptionViolationError, StructuredModel, Topology
from sls_adapt.slscontrol import (
    BlockResponse,
    column_bound_ratio,
    column_residuals,
    support_mask,
    verify_distributed_conditions,
)

logger = logging.getLogger(__name__)

LAMBDA_TOL = 1e-7
SLOW_SOLVE_SECONDS = 10.0


class InfeasibleSynthesisError(SlsAdaptError):
    """Raised when the robustness program has no solution."""

    pass


class Objective(enum.Enum):
    LAMBDA = "lambda"
    COST = "cost"


class Phase(enum.Enum):
    ROBUSTNESS = "robustness"
    PERFORMANCE = "performance"


class SynthesisStatus(enum.Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"


def geometric_gain(rho: float, horizon: int) -> float:
    """Σ_{k=1}^T ρ^{k-1}, so that λ_i = c_i · gain."""
    return (1.0 - rho**horizon) / (1.0 - rho)


@dataclass(frozen=True, eq=False)
class SynthesisRequest:
    """
    One synthesis problem at time t.

    Central requests carry the previous response and the rows
    δ̂_{t-1}, ..., δ̂_{t-T+1}. Node requests carry node i's own column
    solutions for s = 0..t-1 in `columns` and its δ̂^i_0..δ̂^i_{t-1} in
    `delta_history`; t is the number of stored columns.
    """

    model: StructuredModel
    vertices: np.ndarray
    horizon: int
    norm: NormKind
    lambda_star: float
    cost: Tuple[np.ndarray, np.ndarray]
    node: Optional[int] = None
    topology: Optional[Topology] = None
    rho: float = 0.7
    m_a: float = math.inf
    m1: float = math.inf
    m2: float = math.inf
    previous: Optional[BlockResponse] = None
    delta_history: Optional[np.ndarray] = None
    columns: Tuple = ()
    t: int = 0
    plants: Tuple = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        if vertices.shape[0] < 1:
            raise ValueError("A synthesis request needs at least one vertex.")
        if vertices.shape[1] != self.model.p:
            raise DimensionMismatchError(
                f"Vertices have {vertices.shape[1]} coordinates, "
                f"model has p={self.model.p}."
            )
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1.")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "norm", NormKind.parse(self.norm))
        object.__setattr__(
            self, "plants", tuple(self.model.global_at(v) for v in vertices)
        )
        if self.node is not None:
            if self.topology is None:
                raise ValueError("Node requests need a topology.")
            if not 0 <= self.node < self.model.n_nodes:
                raise ValueError(f"Unknown node {self.node}.")
            self.topology.validate(self.model)
            object.__setattr__(self, "t", len(self.columns))
            history = self.delta_history
            if history is None:
                history = np.zeros((0, self.model.state_dims[self.node]))
            history = np.asarray(history, dtype=float).reshape(
                -1, self.model.state_dims[self.node]
            )
            if history.shape[0] < self.t:
                raise ValueError(
                    f"Node {self.node} at t={self.t} needs {self.t} past δ̂ values."
                )
            object.__setattr__(self, "delta_history", history)

    @property
    def is_central(self) -> bool:
        return self.node is None

    @property
    def label(self) -> str:
        return "central" if self.is_central else f"node{self.node}"

    @classmethod
    def central(
        cls,
        scenario,
        vertices: np.ndarray,
        previous: Optional[BlockResponse] = None,
        delta_history: Optional[np.ndarray] = None,
        t: int = 0,
    ) -> SynthesisRequest:
        return cls(
            model=scenario.model,
            vertices=vertices,
            horizon=scenario.horizon_T,
            norm=scenario.norm,
            lambda_star=scenario.lambda_star,
            cost=scenario.cost,
            m_a=scenario.m_a,
            previous=previous,
            delta_history=delta_history,
            t=t,
        )

    @classmethod
    def for_node(
        cls,
        scenario,
        node: int,
        vertices: np.ndarray,
        columns: Sequence = (),
        delta_history: Optional[np.ndarray] = None,
    ) -> SynthesisRequest:
        return cls(
            model=scenario.model,
            vertices=vertices,
            horizon=scenario.horizon_T,
            norm=scenario.norm,
            lambda_star=scenario.lambda_star,
            cost=scenario.cost,
            node=node,
            topology=scenario.topology,
            rho=scenario.rho,
            m1=scenario.m1[node],
            m2=scenario.m2[node],
            columns=tuple(columns),
            delta_history=delta_history,
        )


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    """
    A solved request. For central requests `r`/`m` are the full families;
    for node requests they are column i, shapes (T, n, n_i) and (T, m, n_i).
    `lambda_` is the margin the returned blocks certify over the vertices;
    `robust_lambda` is the phase-1 optimum.
    """

    status: SynthesisStatus
    lambda_: float
    phase: Phase
    objective_value: float
    r: np.ndarray
    m: np.ndarray
    node: Optional[int] = None
    c: float = math.nan
    robust_lambda: float = math.nan
    n_variables: int = 0
    n_constraints: int = 0
    solve_seconds: float = 0.0

    @property
    def response(self) -> BlockResponse:
        if self.node is not None:
            raise ValueError("Node results hold a single column; use .column.")
        return BlockResponse(self.r, self.m)

    @property
    def column(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.r, self.m


@dataclass
class _Assembly:
    builder: LpBuilder
    r_index: np.ndarray
    r_fixed: np.ndarray
    m_index: np.ndarray
    margin_var: int
    margin_scale: float
    cost_vars: np.ndarray

    @property
    def n_free(self) -> int:
        return int((self.r_index >= 0).sum() + (self.m_index >= 0).sum())


def _column_setup(req: SynthesisRequest):
    model = req.model
    mask_r, mask_m = support_mask(model, req.topology if req.node is not None else None,
                                  req.horizon)
    r_fixed = np.zeros_like(mask_r, dtype=float)
    r_fixed[0] = np.eye(model.n_states)
    if req.node is not None:
        cols = model.state_slice(req.node)
        mask_r, mask_m = mask_r[:, :, cols], mask_m[:, :, cols]
        r_fixed = r_fixed[:, :, cols]
    return mask_r, mask_m, r_fixed


def _free(builder: LpBuilder, mask: np.ndarray, name: str) -> np.ndarray:
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[mask] = builder.add_variables(int(mask.sum()), name=name)
    return index


def _sum(exprs: List[AffineVec]) -> AffineVec:
    return AffineVec.stack(exprs).total()


def _residual_exprs(r_exprs, m_exprs, a, b, shape_r, shape_m) -> List[AffineVec]:
    horizon = len(r_exprs)
    out = []
    for k in range(horizon):
        nxt = (
            r_exprs[k + 1]
            if k + 1 < horizon
            else AffineVec.constant(np.zeros(r_exprs[k].size))
        )
        out.append(nxt - r_exprs[k].matmul(a, shape_r) - m_exprs[k].matmul(b, shape_m))
    return out


def _rows(model: StructuredModel, j: int, width: int) -> slice:
    rows = model.state_slice(j)
    return slice(rows.start * width, rows.stop * width)


def _assemble(req: SynthesisRequest) -> _Assembly:
    model = req.model
    n, m = model.n_states, model.n_inputs
    mask_r, mask_m, r_fixed = _column_setup(req)
    width = mask_r.shape[2]
    builder = LpBuilder()
    r_index = _free(builder, mask_r, "R")
    m_index = _free(builder, mask_m, "M")
    margin_name = "c" if req.node is not None else "lambda"
    margin = builder.add_variables(1, lower=0.0, name=margin_name)
    margin_expr = AffineVec.of(margin)
    r_exprs = [
        AffineVec.of(r_index[k].ravel(), r_fixed[k].ravel()) for k in range(req.horizon)
    ]
    m_exprs = [AffineVec.of(m_index[k].ravel()) for k in range(req.horizon)]
    shape_r, shape_m = (n, width), (m, width)

    if req.is_central:
        for a, b in req.plants:
            residuals = _residual_exprs(r_exprs, m_exprs, a, b, shape_r, shape_m)
            taus = [epigraph(builder, req.norm, d, shape_r) for d in residuals]
            builder.add_le(_sum(taus) - margin_expr)
        _central_adaptation(req, builder, r_exprs)
        scale = 1.0
    else:
        region = req.topology.extended_region(model, req.node)
        for a, b in req.plants:
            residuals = _residual_exprs(r_exprs, m_exprs, a, b, shape_r, shape_m)
            for k, d in enumerate(residuals):
                taus = [
                    epigraph(
                        builder,
                        req.norm,
                        d[_rows(model, j, width)],
                        (model.state_dims[j], width),
                    )
                    for j in region
                ]
                builder.add_le(_sum(taus) - margin_expr * req.rho**k)
            if req.t > 0:
                _node_transition_budget(req, builder, residuals, a, b, region, width)
        if req.t > 0:
            _node_rate_budget(req, builder, r_exprs, region, width)
        scale = geometric_gain(req.rho, req.horizon)

    c_mat, d_mat = req.cost
    q = c_mat.shape[0]
    cost_taus = [
        epigraph(
            builder,
            req.norm,
            r_exprs[k].matmul(c_mat, shape_r) + m_exprs[k].matmul(d_mat, shape_m),
            (q, width),
        )
        for k in range(req.horizon)
    ]
    cost_vars = np.concatenate([t.cols for t in cost_taus])
    return _Assembly(
        builder, r_index, r_fixed, m_index, int(margin[0]), scale, cost_vars
    )


def _central_adaptation(req: SynthesisRequest, builder: LpBuilder, r_exprs):
    """‖Σ_{k=1}^{T-1} (R_{t-1} - R_t)(k+1) δ̂_{t-k}‖ ≤ m_a."""
    if req.previous is None or req.delta_history is None or math.isinf(req.m_a):
        return
    history = np.asarray(req.delta_history, dtype=float)
    n = req.model.n_states
    terms = []
    for k in range(1, min(req.horizon, history.shape[0] + 1)):
        delta = history[k - 1]
        if not np.any(delta):
            continue
        change = AffineVec.constant(req.previous.R[k] @ delta)
        change = change - r_exprs[k].times_vector(delta, (n, n))
        terms.append(change)
    if terms:
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        encode_vector_norm_bound(builder, req.norm, total, req.m_a)


def _past_column(req: SynthesisRequest, s: int):
    return req.columns[max(s, 0)]


def _node_transition_budget(req, builder, residuals, a, b, region, width):
    """
    For every h ∈ [0, d̄_i - 1]:
    Σ_{j: d_{j←i} ≥ h+1} ‖Σ_{k=d+1}^{T} Δ^j_k(R_t - R_{t+h-d}) δ̂^i_{t+h+1-k}‖ ≤ m1.
    """
    model, topology, node, t = req.model, req.topology, req.node, req.t
    d_bar = topology.max_delay(model, node)
    for h in range(d_bar):
        taus = []
        for j in region:
            d = topology.delay(j, node)
            if d < h + 1:
                continue
            r_s, m_s = _past_column(req, t + h - d)
            past = column_residuals(a, b, r_s, m_s)[:, model.state_slice(j), :]
            rows = _rows(model, j, width)
            shape = (model.state_dims[j], width)
            total = None
            for k in range(d + 1, req.horizon + 1):
                s = t + h + 1 - k
                if s < 0:
                    continue
                delta = req.delta_history[s]
                if not np.any(delta):
                    continue
                term = (residuals[k - 1][rows] - past[k - 1].ravel()).times_vector(
                    delta, shape
                )
                total = term if total is None else total + term
            if total is None:
                continue
            tau = builder.add_variables(1, lower=0.0)
            encode_vector_norm_bound(builder, req.norm, total, AffineVec.of(tau))
            taus.append(AffineVec.of(tau))
        if taus and not math.isinf(req.m1):
            builder.add_le(_sum(taus) - req.m1)


def _node_rate_budget(req, builder, r_exprs, region, width):
    """
    For every h ∈ [0, d̄_i - 1]:
    Σ_{j: d_{j←i} = h+1}
        ‖Σ_{k=h+2}^{T-1} (R_t - R_{t-1})^{j←i}(k+1) δ̂^i_{t+h+1-k}‖ ≤ m2.
    """
    model, topology, node, t = req.model, req.topology, req.node, req.t
    r_prev, _ = _past_column(req, t - 1)
    for h in range(topology.max_delay(model, node)):
        taus = []
        for j in region:
            if topology.delay(j, node) != h + 1:
                continue
            rows = _rows(model, j, width)
            shape = (model.state_dims[j], width)
            total = None
            for k in range(h + 2, req.horizon):
                s = t + h + 1 - k
                if s < 0:
                    continue
                delta = req.delta_history[s]
                if not np.any(delta):
                    continue
                term = (r_exprs[k][rows] - r_prev[k, model.state_slice(j), :].ravel()
                        ).times_vector(delta, shape)
                total = term if total is None else total + term
            if total is None:
                continue
            tau = builder.add_variables(1, lower=0.0)
            encode_vector_norm_bound(builder, req.norm, total, AffineVec.of(tau))
            taus.append(AffineVec.of(tau))
        if taus and not math.isinf(req.m2):
            builder.add_le(_sum(taus) - req.m2)


def _program(assembly: _Assembly, objective: Objective, cap: Optional[float] = None):
    lp = assembly.builder.build()
    c = np.zeros(lp.n_variables)
    bounds = list(lp.variable_bounds)
    if objective is Objective.LAMBDA:
        c[assembly.margin_var] = assembly.margin_scale
    else:
        c[assembly.cost_vars] = 1.0
        if cap is not None:
            bounds[assembly.margin_var] = (0.0, cap / assembly.margin_scale)
    return dataclasses.replace(lp, objective=c, variable_bounds=tuple(bounds))


def build_central(
    req: SynthesisRequest, objective: Objective = Objective.LAMBDA
) -> LinearProgram:
    """
    The central robust program. Phase 2 (`Objective.COST`) caps λ at λ*.

    Raises:
        ValueError: If the request is a node request.
    """
    if not req.is_central:
        raise ValueError("build_central needs a central request.")
    return _program(_assemble(req), objective, req.lambda_star)


def build_node(
    req: SynthesisRequest, objective: Objective = Objective.LAMBDA
) -> LinearProgram:
    """
    The localized program of node i over its column.

    Raises:
        ValueError: If the request is central.
        AssumptionViolationError: If the topology breaks the delay assumption.
    """
    if req.is_central:
        raise ValueError("build_node needs a node request.")
    req.topology.validate(req.model)
    return _program(_assemble(req), objective, req.lambda_star)


def free_variable_count(req: SynthesisRequest) -> int:
    """Number of free R and M entries after the support constraints."""
    mask_r, mask_m, _ = _column_setup(req)
    return int(mask_r.sum() + mask_m.sum())


def _decode(assembly: _Assembly, point: np.ndarray):
    r = assembly.r_fixed.copy()
    free = assembly.r_index >= 0
    r[free] = point[assembly.r_index[free]]
    m = np.zeros(assembly.m_index.shape)
    free = assembly.m_index >= 0
    m[free] = point[assembly.m_index[free]]
    return r, m


def certified_margin(req: SynthesisRequest, r: np.ndarray, m: np.ndarray):
    """
    (λ, c) the blocks certify over the request's vertices; c is NaN for
    central requests.
    """
    if req.is_central:
        lam = max(
            sum(req.norm.induced_norm(d) for d in column_residuals(a, b, r, m))
            for a, b in req.plants
        )
        return float(lam), math.nan
    c = max(
        column_bound_ratio(
            req.model, req.topology, req.node, a, b, r, m, req.rho, req.norm
        )
        for a, b in req.plants
    )
    return float(c * geometric_gain(req.rho, req.horizon)), float(c)


def _solve_logged(lp, method, dump_dir, req, phase):
    start = time.perf_counter()
    solution = solve(lp, method)
    elapsed = time.perf_counter() - start
    if dump_dir is not None:
        dump_lp(lp, Path(dump_dir) / f"lp_{req.label}_t{req.t}_{phase.value}.txt")
    if elapsed > SLOW_SOLVE_SECONDS:
        logger.warning(
            "%s LP at t=%d took %.1fs (%d vars, %d rows)",
            req.label, req.t, elapsed, lp.n_variables, lp.n_constraints,
        )
    return solution


def two_phase_solve(
    req: SynthesisRequest,
    method: Optional[str] = None,
    dump_dir: Optional[Path] = None,
) -> SynthesisResult:
    """
    Minimizes λ; if the optimum is at most λ*, re-solves for the cost
    Σ_k ‖C R(k) + D M(k)‖ with λ capped at λ*.

    Raises:
        InfeasibleSynthesisError: If the robustness program is infeasible.
    """
    start = time.perf_counter()
    assembly = _assemble(req)
    lp = _program(assembly, Objective.LAMBDA)
    first = _solve_logged(lp, method, dump_dir, req, Phase.ROBUSTNESS)
    if not first.is_optimal:
        raise InfeasibleSynthesisError(
            f"{req.label} robustness program at t={req.t} is {first.status.value}."
        )
    lam_lp = float(first.point[assembly.margin_var] * assembly.margin_scale)
    chosen, phase, objective = first, Phase.ROBUSTNESS, first.objective_value
    if lam_lp <= req.lambda_star + LAMBDA_TOL:
        cap = max(req.lambda_star, lam_lp)
        second = _solve_logged(
            _program(assembly, Objective.COST, cap), method, dump_dir, req,
            Phase.PERFORMANCE,
        )
        if second.is_optimal:
            chosen, phase, objective = second, Phase.PERFORMANCE, second.objective_value
        else:
            logger.warning(
                "%s performance program at t=%d is %s; keeping the robust solution",
                req.label, req.t, second.status.value,
            )
    r, m = _decode(assembly, chosen.point)
    lam, c = certified_margin(req, r, m)
    elapsed = time.perf_counter() - start
    logger.debug(
        "%s t=%d: λ=%.4f (phase-1 %.4f), %s, %d vars, %d rows, %.3fs",
        req.label, req.t, lam, lam_lp, phase.value, lp.n_variables,
        lp.n_constraints, elapsed,
    )
    return SynthesisResult(
        status=SynthesisStatus.FEASIBLE,
        lambda_=lam,
        phase=phase,
        objective_value=float(objective),
        r=r,
        m=m,
        node=req.node,
        c=c,
        robust_lambda=lam_lp,
        n_variables=lp.n_variables,
        n_constraints=lp.n_constraints,
        solve_seconds=elapsed,
    )


def previous_is_feasible(req: SynthesisRequest, previous: SynthesisResult) -> float:
    """
    Largest constraint violation of the previous solution inside the new
    request (0 when it is feasible).
    """
    if req.is_central:
        lam, _ = certified_margin(req, previous.r, previous.m)
        return max(0.0, lam - previous.lambda_)
    _, slack = verify_distributed_conditions(
        req.model,
        req.topology,
        req.node,
        list(req.columns) + [previous.column],
        req.delta_history,
        req.plants,
        req.rho,
        previous.c,
        req.m1,
        req.m2,
        req.norm,
    )
    return max(0.0, -slack)


def split_columns(
    result: SynthesisResult, model: StructuredModel
) -> List[SynthesisResult]:
    """
    Per-node column results cut from a central solution; every node carries
    the central margin and the solve time is booked on node 0.
    """
    if result.node is not None:
        raise ValueError("split_columns needs a central result.")
    out = []
    for i in range(model.n_nodes):
        cols = model.state_slice(i)
        out.append(
            dataclasses.replace(
                result,
                r=result.r[:, :, cols].copy(),
                m=result.m[:, :, cols].copy(),
                node=i,
                solve_seconds=result.solve_seconds if i == 0 else 0.0,
            )
        )
    return out


def synthesize_nodes(
    requests: Sequence[SynthesisRequest],
    workers: int = 1,
    method: Optional[str] = None,
    dump_dir: Optional[Path] = None,
) -> List[SynthesisResult]:
    """Solves independent node problems, returning results in request order."""

    def _one(req: SynthesisRequest) -> SynthesisResult:
        return two_phase_solve(req, method, dump_dir)

    if workers > 1 and len(requests) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_one, requests))
    return [_one(req) for req in requests]


__all__ = [
    "AssumptionViolationError",
    "InfeasibleSynthesisError",
    "Objective",
    "Phase",
    "SynthesisRequest",
    "SynthesisResult",
    "SynthesisStatus",
    "build_central",
    "build_node",
    "certified_margin",
    "free_variable_count",
    "geometric_gain",
    "previous_is_feasible",
    "split_columns",
    "synthesize_nodes",
    "two_phase_solve",
]
