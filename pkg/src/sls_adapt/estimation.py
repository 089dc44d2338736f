"""
Set-membership estimation: every observed transition x_{k-1} → x_k of node j
yields linear rows on α, and the consistent set is the running intersection.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from sls_adapt.exceptions import DimensionMismatchError, SlsAdaptError
from sls_adapt.lpcore import NormKind
from sls_adapt.model import StructuredModel, assemble
from sls_adapt.polytope import (
    REDUCE_EVERY,
    EmptyPolytopeError,
    HalfspacePolytope,
    LinearConstraintSet,
    enumerate_vertices,
    intersect,
)

logger = logging.getLogger(__name__)

MAX_SIGN_PATTERN_DIM = 3


class UnknownNodeError(SlsAdaptError, ValueError):
    """Raised when a node index is outside the model."""

    pass


class UnsupportedNormForDimError(SlsAdaptError, ValueError):
    """Raised when an ℓ1 observation is requested for a node above dimension 3."""

    pass


@dataclass(frozen=True, eq=False)
class RegressorBundle:
    """
    Regressors ŷ_s (rows of `regressors`, shape (p, n_j)) so that
    x^j_k = Σ_s α_s ŷ_s + w^j_{k-1}.
    """

    node: int
    time: int
    regressors: np.ndarray
    observed_next: np.ndarray

    def predict(self, alpha) -> np.ndarray:
        return np.asarray(alpha, dtype=float) @ self.regressors


def _check_node(model: StructuredModel, node: int):
    if not 0 <= node < model.n_nodes:
        raise UnknownNodeError(f"Node {node} is not in a {model.n_nodes}-node model.")


def build_regressors(
    model: StructuredModel,
    x_prev: np.ndarray,
    u_prev: np.ndarray,
    node: int,
    observed_next: Optional[np.ndarray] = None,
    time: int = -1,
) -> RegressorBundle:
    """
    ŷ^j_s = Σ_{i∈𝒩(j)} 𝒜_s^{j←i} x^i_{k-1} + ℬ_s^j u^j_{k-1}.

    Raises:
        UnknownNodeError: If `node` is outside the model.
        DimensionMismatchError: If x or u has the wrong size.
    """
    _check_node(model, node)
    x_prev = np.asarray(x_prev, dtype=float).ravel()
    u_prev = np.asarray(u_prev, dtype=float).ravel()
    if x_prev.size != model.n_states or u_prev.size != model.n_inputs:
        raise DimensionMismatchError(
            f"Expected state {model.n_states} and input {model.n_inputs}, "
            f"got {x_prev.size} and {u_prev.size}."
        )
    n_j = model.state_dims[node]
    regressors = np.zeros((model.p, n_j))
    for i in model.neighbors(node):
        regressors += model.basis_A[(node, i)] @ x_prev[model.state_slice(i)]
    regressors += model.basis_B[node] @ u_prev[model.input_slice(node)]
    observed = np.zeros(n_j) if observed_next is None else observed_next
    observed = np.asarray(observed, dtype=float).ravel()
    if observed.size != n_j:
        raise DimensionMismatchError(f"Node {node} has {n_j} states.")
    return RegressorBundle(node, time, regressors, observed)


def constraint_from_observation(
    bundle: RegressorBundle, eta: float, norm=NormKind.MAX_ABS
) -> LinearConstraintSet:
    """
    Rows encoding ‖x^j_k - Σ_s α_s ŷ_s‖ ≤ η.

    ℓ∞ gives 2·n_j rows. ℓ1 expands over all 2^{n_j} sign patterns
    s·(x - Yᵀα) ≤ η, which is exact but only offered up to n_j = 3.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative.")
    norm = NormKind.parse(norm)
    y_t = bundle.regressors.T
    x = bundle.observed_next
    if norm is NormKind.MAX_ABS:
        normals = np.vstack([y_t, -y_t])
        offsets = np.concatenate([eta + x, eta - x])
    else:
        if x.size > MAX_SIGN_PATTERN_DIM:
            raise UnsupportedNormForDimError(
                f"ℓ1 observations need node dimension <= {MAX_SIGN_PATTERN_DIM}, "
                f"node {bundle.node} has {x.size}."
            )
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=x.size)))
        normals = -signs @ y_t
        offsets = eta - signs @ x
    return LinearConstraintSet(normals, offsets, bundle.node, bundle.time)


def a_norm_bound(model: StructuredModel, vertices: np.ndarray, norm=NormKind.MAX_ABS):
    """max over vertices and nodes j of Σ_i ‖A^{j←i}‖, a per-node gain of A."""
    norm = NormKind.parse(norm)
    worst = 0.0
    for alpha in np.atleast_2d(vertices):
        a_blocks, _ = assemble(model, alpha)
        for j in range(model.n_nodes):
            gain = sum(
                norm.induced_norm(a_blocks[(j, i)]) for i in model.neighbors(j)
            )
            worst = max(worst, gain)
    return worst


def observation_radius(eta: float, noise_bound: float, a_gain: float) -> float:
    """
    Widened per-node radius for noisy measurements: y_k - A y_{k-1} - B u
    equals w + v_k - A v_{k-1}, whose node-j part is within this bound.
    """
    return eta + (1.0 + a_gain) * noise_bound


def observe_all(
    model: StructuredModel,
    y_prev: np.ndarray,
    u_prev: np.ndarray,
    y_now: np.ndarray,
    time: int,
    radius: float,
    norm=NormKind.MAX_ABS,
) -> List[LinearConstraintSet]:
    """One constraint set per node for the transition into `time`."""
    y_now = np.asarray(y_now, dtype=float).ravel()
    return [
        constraint_from_observation(
            build_regressors(
                model, y_prev, u_prev, j, y_now[model.state_slice(j)], time
            ),
            radius,
            norm,
        )
        for j in range(model.n_nodes)
    ]


def _intersect_all(
    p: HalfspacePolytope,
    constraints: Iterable[LinearConstraintSet],
    reduce_every: Optional[int],
    node: Optional[int],
    time: Optional[int],
) -> HalfspacePolytope:
    ordered = sorted(constraints, key=lambda c: c.key)
    if not ordered:
        return p
    try:
        for c in ordered:
            p = intersect(p, c, reduce_every)
        # emptiness surfaces here rather than in a later synthesis
        enumerate_vertices(p)
    except EmptyPolytopeError as e:
        where = "central estimate" if node is None else f"node {node}"
        raise EmptyPolytopeError(
            f"Observations are inconsistent at {where}, t={time}, "
            f"after {p.n_rows} rows: {e}"
        ) from e
    return p


def update_central(
    p: HalfspacePolytope,
    constraints: Sequence[LinearConstraintSet],
    reduce_every: Optional[int] = REDUCE_EVERY,
    time: Optional[int] = None,
) -> HalfspacePolytope:
    """𝒫_t = 𝒫_{t-1} ∩ every node's constraint set at t."""
    result = _intersect_all(p, constraints, reduce_every, None, time)
    if constraints:
        logger.debug("central polytope t=%s: %d rows", time, result.n_rows)
    return result


@dataclass
class ConstraintLog:
    """Keys (origin_node, origin_time) a node has already intersected."""

    seen: set = field(default_factory=set)
    by_origin: Dict[int, List[int]] = field(default_factory=dict)

    def admit(self, constraint: LinearConstraintSet) -> bool:
        if constraint.key in self.seen:
            return False
        self.seen.add(constraint.key)
        self.by_origin.setdefault(constraint.origin_node, []).append(
            constraint.origin_time
        )
        return True


def update_node(
    node: int,
    p_prev: HalfspacePolytope,
    mailbox: Sequence[LinearConstraintSet],
    log: Optional[ConstraintLog] = None,
    reduce_every: Optional[int] = REDUCE_EVERY,
    time: Optional[int] = None,
) -> HalfspacePolytope:
    """
    𝒫^i_t = 𝒫^i_{t-1} ∩ the constraint sets that arrived this step.

    Duplicates (same origin node and time) are ignored when a log is given.
    """
    if node < 0:
        raise UnknownNodeError(f"Node {node} is not a valid node index.")
    fresh = [c for c in mailbox if log is None or log.admit(c)]
    result = _intersect_all(p_prev, fresh, reduce_every, node, time)
    if fresh:
        logger.debug(
            "node %d polytope t=%s: %d new sets, %d rows",
            node,
            time,
            len(fresh),
            result.n_rows,
        )
    return result
