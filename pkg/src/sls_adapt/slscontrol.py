"""
The time-varying SLS controller and the residual calculus behind its
robustness certificates.

A `BlockResponse` holds the closed-loop maps as global arrays: `R[k-1]` is
R(k) with shape (n, n) and `M[k-1]` is M(k) with shape (m, n). Column i
(the state slice of node i) is the part node i computes in the distributed
scheme.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from sls_adapt.exceptions import DimensionMismatchError, SlsAdaptError
from sls_adapt.lpcore import NormKind
from sls_adapt.model import StructuredModel, Topology

logger = logging.getLogger(__name__)

IDENTITY_TOL = 1e-9
CONDITION_TOL = 1e-7


class NonPositiveLambdaError(SlsAdaptError, ValueError):
    """Raised when a margin bound is requested for λ ≤ 0."""

    pass


class InsufficientHistoryError(SlsAdaptError):
    """Raised when a check needs more stored history than was provided."""

    pass


class CausalityViolationError(SlsAdaptError):
    """Raised when a node reads a value before its communication delay elapsed."""

    pass


@dataclass(frozen=True, eq=False)
class BlockResponse:
    """FIR closed-loop maps R(1..T) and M(1..T) with R(1) = I."""

    R: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.R, dtype=float)
        m = np.asarray(self.M, dtype=float)
        if r.ndim != 3 or r.shape[1] != r.shape[2]:
            raise DimensionMismatchError(f"R must have shape (T, n, n), got {r.shape}.")
        if m.ndim != 3 or m.shape[0] != r.shape[0] or m.shape[2] != r.shape[1]:
            raise DimensionMismatchError(
                f"M must have shape ({r.shape[0]}, m, {r.shape[1]}), got {m.shape}."
            )
        if r.shape[0] < 1:
            raise DimensionMismatchError("A response needs horizon T >= 1.")
        if np.max(np.abs(r[0] - np.eye(r.shape[1])), initial=0.0) > IDENTITY_TOL:
            raise ValueError("R(1) must be the identity.")
        object.__setattr__(self, "R", r)
        object.__setattr__(self, "M", m)

    @classmethod
    def identity_start(
        cls, n_states: int, n_inputs: int, horizon: int
    ) -> BlockResponse:
        r = np.zeros((horizon, n_states, n_states))
        r[0] = np.eye(n_states)
        return cls(r, np.zeros((horizon, n_inputs, n_states)))

    @property
    def horizon(self) -> int:
        return self.R.shape[0]

    @property
    def n_states(self) -> int:
        return self.R.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.M.shape[1]

    def column(self, model: StructuredModel, i: int) -> Tuple[np.ndarray, np.ndarray]:
        """(R^{·←i}, M^{·←i}) with shapes (T, n, n_i) and (T, m, n_i)."""
        cols = model.state_slice(i)
        return self.R[:, :, cols].copy(), self.M[:, :, cols].copy()

    def block(self, model: StructuredModel, j: int, i: int):
        """(R^{j←i}(1..T), M^{j←i}(1..T))."""
        cols = model.state_slice(i)
        return (
            self.R[:, model.state_slice(j), cols],
            self.M[:, model.input_slice(j), cols],
        )

    @classmethod
    def from_columns(
        cls, model: StructuredModel, columns: Sequence[Tuple[np.ndarray, np.ndarray]]
    ) -> BlockResponse:
        """Assembles a global response from one (R, M) column per node."""
        horizon = columns[0][0].shape[0]
        r = np.zeros((horizon, model.n_states, model.n_states))
        m = np.zeros((horizon, model.n_inputs, model.n_states))
        for i, (r_col, m_col) in enumerate(columns):
            cols = model.state_slice(i)
            r[:, :, cols] = r_col
            m[:, :, cols] = m_col
        return cls(r, m)

    def to_json(self) -> dict:
        return {"R": self.R.tolist(), "M": self.M.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> BlockResponse:
        return cls(
            np.asarray(data["R"], dtype=float), np.asarray(data["M"], dtype=float)
        )


def support_mask(
    model: StructuredModel, topology: Optional[Topology], horizon: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Free entries of R and M under the localization and delay constraints.

    R^{j←i}(k) is free for j ∈ 𝓛(i), k ≥ 2 and k ≥ d_{j←i} + 1; M^{j←i}(k) is
    free for j ∈ 𝓛(i) and k ≥ d_{j←i} + 1. R(1) is never free. Without a
    topology every entry except R(1) is free.
    """
    n, m = model.n_states, model.n_inputs
    mask_r = np.zeros((horizon, n, n), dtype=bool)
    mask_m = np.zeros((horizon, m, n), dtype=bool)
    if topology is None:
        mask_r[1:] = True
        mask_m[:] = True
        return mask_r, mask_m
    ks = np.arange(1, horizon + 1)
    for i in range(model.n_nodes):
        cols = model.state_slice(i)
        for j in topology.local_regions[i]:
            allowed = ks >= topology.delay(j, i) + 1
            rows = model.state_slice(j)
            mask_r[allowed & (ks >= 2), rows, cols] = True
            mask_m[allowed, model.input_slice(j), cols] = True
    return mask_r, mask_m


def delta_residuals(a: np.ndarray, b: np.ndarray, resp: BlockResponse) -> np.ndarray:
    """
    Δ_k = R(k+1) - A R(k) - B M(k) for k < T and Δ_T = -A R(T) - B M(T).

    Returns:
        Array of shape (T, n, n). The (j, i) block of Δ_k is the per-edge
        residual Δ^{j←i}_k.
    """
    return column_residuals(a, b, resp.R, resp.M)


def column_residuals(
    a: np.ndarray, b: np.ndarray, r: np.ndarray, m: np.ndarray
) -> np.ndarray:
    """Residuals of a (possibly partial) column family R (T, n, c), M (T, m, c)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (r.shape[1], r.shape[1]) or b.shape != (r.shape[1], m.shape[1]):
        raise DimensionMismatchError(
            f"Plant ({a.shape}, {b.shape}) does not match response {r.shape}."
        )
    shifted = np.concatenate([r[1:], np.zeros_like(r[:1])])
    return shifted - np.einsum("ab,kbc->kac", a, r) - np.einsum("ab,kbc->kac", b, m)


def edge_residual(
    model: StructuredModel, residuals: np.ndarray, j: int, i: int
) -> np.ndarray:
    """Δ^{j←i}_k for k = 1..T from a global residual family."""
    return residuals[:, model.state_slice(j), model.state_slice(i)]


def margin_of(
    a: np.ndarray, b: np.ndarray, resp: BlockResponse, norm=NormKind.MAX_ABS
) -> float:
    """Σ_k ‖Δ_k‖ in the induced norm."""
    norm = NormKind.parse(norm)
    return float(sum(norm.induced_norm(d) for d in delta_residuals(a, b, resp)))


def block_margin(
    model: StructuredModel,
    a: np.ndarray,
    b: np.ndarray,
    resp: BlockResponse,
    norm=NormKind.MAX_ABS,
) -> float:
    """
    Σ_k max_i Σ_j ‖Δ^{j←i}_k‖, the margin the distributed certificates bound.
    For scalar nodes it equals Σ_k ‖Δ_k‖₁.
    """
    norm = NormKind.parse(norm)
    residuals = delta_residuals(a, b, resp)
    total = 0.0
    for d in residuals:
        per_column = [
            sum(
                norm.induced_norm(d[model.state_slice(j), model.state_slice(i)])
                for j in range(model.n_nodes)
            )
            for i in range(model.n_nodes)
        ]
        total += max(per_column)
    return float(total)


def lemma1_bound(lam: float, horizon: int, z0: float, eta: float, t: int) -> float:
    """
    Bound γ_t on any positive sequence with z_t ≤ λ·max of the last T values + η.

    λ < 1:  (λ^{1/T})^t z0 + (1 - λ^t)/(1 - λ)·η
    λ ≥ 1:  λ^t z0 + (1 - λ^t)/(1 - λ)·η, with the limit z0 + tη at λ = 1.

    Raises:
        NonPositiveLambdaError: If λ ≤ 0.
    """
    if lam <= 0:
        raise NonPositiveLambdaError(f"λ must be positive, got {lam}.")
    if t < 0:
        raise ValueError("t must be nonnegative.")
    if math.isclose(lam, 1.0, rel_tol=0.0, abs_tol=1e-12):
        return z0 + t * eta
    # expm1 keeps the geometric sum accurate for λ close to 1
    growth = math.expm1(t * math.log(lam)) / (lam - 1.0)
    if lam < 1.0:
        return lam ** (t / horizon) * z0 + growth * eta
    return lam**t * z0 + growth * eta


def eta_hat(eta: float, noise_bound: float, a_norm_bound: float) -> float:
    """Bound on ŵ_t = (v_t - A v_{t-1}) + w_{t-1}."""
    return eta + (1.0 + a_norm_bound) * noise_bound


def theorem1_bounds(
    responses,
    lam: float,
    m_a: float,
    eta_hat_value: float,
    x0_norm: float,
    t: int,
    norm=NormKind.MAX_ABS,
) -> Tuple[float, float, float]:
    """
    (γ_t, bound on ‖x_t‖, bound on ‖u_t‖) for a controller whose margin is at
    most λ at every step and whose adaptation residual is at most m_a.

    x_t = Σ_{k=0}^{T-1} R_t(k+1) δ̂_{t-k} (noise-free), so the state bound
    uses the γ values of the last T steps.

    Args:
        responses: One BlockResponse, or a sequence indexed by time (the
            last one is used past its end).
    """
    norm = NormKind.parse(norm)
    if isinstance(responses, BlockResponse):
        resp = responses
    else:
        resp = responses[min(t, len(responses) - 1)]
    horizon = resp.horizon
    drive = eta_hat_value + m_a
    window = range(max(0, t - horizon + 1), t + 1)
    gamma_max = max(lemma1_bound(lam, horizon, x0_norm, drive, s) for s in window)
    x_bound = sum(norm.induced_norm(r) for r in resp.R) * gamma_max
    u_bound = sum(norm.induced_norm(m) for m in resp.M) * gamma_max
    return lemma1_bound(lam, horizon, x0_norm, drive, t), x_bound, u_bound


def adaptation_residual(
    prev: BlockResponse, cur: BlockResponse, history: np.ndarray
) -> np.ndarray:
    """
    Σ_{k=1}^{T-1} (R_{t-1} - R_t)(k+1) δ̂_{t-k}.

    Args:
        history: Rows δ̂_{t-1}, δ̂_{t-2}, ... (at least T - 1 of them).
    """
    horizon = cur.horizon
    history = np.asarray(history, dtype=float)
    if history.shape[0] < horizon - 1:
        raise InsufficientHistoryError(
            f"Need {horizon - 1} past values, got {history.shape[0]}."
        )
    diff = prev.R[1:] - cur.R[1:]
    return np.einsum("kab,kb->a", diff, history[: horizon - 1])


def delta_dynamics_rhs(
    a_prev: np.ndarray,
    b_prev: np.ndarray,
    resp_prev: BlockResponse,
    resp_cur: BlockResponse,
    history: np.ndarray,
    w_hat: np.ndarray,
) -> np.ndarray:
    """
    δ̂_t = -Σ_{k=1}^T Δ_k(A_{t-1}, B_{t-1}, R_{t-1}, M_{t-1}) δ̂_{t-k}
          + Σ_{k=1}^{T-1} (R_{t-1} - R_t)(k+1) δ̂_{t-k} + ŵ_t

    `resp_prev` and `resp_cur` are the responses actually applied at t-1 and
    t; `history` holds δ̂_{t-1}, ..., δ̂_{t-T}.
    """
    horizon = resp_cur.horizon
    history = np.asarray(history, dtype=float)
    if history.shape[0] < horizon:
        raise InsufficientHistoryError(f"Need {horizon} past values.")
    residuals = delta_residuals(a_prev, b_prev, resp_prev)
    driven = -np.einsum("kab,kb->a", residuals, history[:horizon])
    return driven + adaptation_residual(resp_prev, resp_cur, history) + w_hat


@dataclass
class ControllerState:
    """
    δ̂ ring of the central controller: after an update, `history[k]` holds
    δ̂_{t-k}; entries before the start are zero.
    """

    horizon: int
    n_states: int
    history: np.ndarray = None

    def __post_init__(self):
        if self.history is None:
            self.history = np.zeros((self.horizon, self.n_states))

    def push(self, delta: np.ndarray):
        self.history = np.vstack([np.asarray(delta, float)[None, :], self.history[:-1]])

    @property
    def latest(self) -> np.ndarray:
        return self.history[0]


def delta_update(
    state: ControllerState, resp: BlockResponse, y: np.ndarray
) -> np.ndarray:
    """
    δ̂_t = y_t - Σ_{k=1}^{T-1} R(k+1) δ̂_{t-k}; rotates the history.

    At t = 0 the history is zero, so δ̂_0 = y_0.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size != state.n_states or resp.n_states != state.n_states:
        raise DimensionMismatchError(
            f"Measurement of size {y.size} for a controller of size {state.n_states}."
        )
    horizon = resp.horizon
    delta = y - np.einsum("kab,kb->a", resp.R[1:], state.history[: horizon - 1])
    state.push(delta)
    return delta


def control_output(state: ControllerState, resp: BlockResponse) -> np.ndarray:
    """u_t = Σ_{k=0}^{T-1} M(k+1) δ̂_{t-k}, with δ̂_t already in the history."""
    if resp.n_states != state.n_states:
        raise DimensionMismatchError("Response and controller sizes differ.")
    return np.einsum("kab,kb->a", resp.M, state.history[: resp.horizon])


@dataclass
class NodeView:
    """
    What node j knows: the δ̂ values other nodes shared with it and the
    delayed blocks (R̂^{j←i}, M̂^{j←i}) installed from their broadcasts.
    """

    node: int
    model: StructuredModel
    horizon: int
    blocks: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    deltas: Dict[int, Dict[int, np.ndarray]] = field(default_factory=dict)
    reads: int = 0

    def install_blocks(self, i: int, r_block: np.ndarray, m_block: np.ndarray):
        self.blocks[i] = (np.asarray(r_block, float), np.asarray(m_block, float))

    def receive_delta(self, i: int, time: int, value: np.ndarray):
        self.deltas.setdefault(i, {})[time] = np.asarray(value, float)

    def _delta(self, i: int, time: int) -> np.ndarray:
        if time < 0:
            return np.zeros(self.model.state_dims[i])
        try:
            value = self.deltas[i][time]
        except KeyError as e:
            raise CausalityViolationError(
                f"Node {self.node} read δ̂^{i}_{time} before it arrived."
            ) from e
        self.reads += 1
        return value

    def _sum(self, family: int, t: int, start: int) -> np.ndarray:
        size = (
            self.model.state_dims[self.node]
            if family == 0
            else self.model.input_dims[self.node]
        )
        total = np.zeros(size)
        for i, pair in sorted(self.blocks.items()):
            coeffs = pair[family]
            for k in range(start, self.horizon):
                if np.any(coeffs[k]):
                    total += coeffs[k] @ self._delta(i, t - k)
        return total

    def delta_update(self, t: int, y: np.ndarray) -> np.ndarray:
        """δ̂^j_t = y^j_t - Σ_i Σ_{k=1}^{T-1} R̂^{j←i}(k+1) δ̂^i_{t-k}."""
        delta = np.asarray(y, float) - self._sum(0, t, 1)
        self.receive_delta(self.node, t, delta)
        return delta

    def control_output(self, t: int) -> np.ndarray:
        """u^j_t = Σ_i Σ_{k=0}^{T-1} M̂^{j←i}(k+1) δ̂^i_{t-k}."""
        return self._sum(1, t, 0)

    def forget_before(self, time: int):
        for values in self.deltas.values():
            for s in [s for s in values if s < time]:
                del values[s]


def _column_condition_terms(
    model: StructuredModel,
    topology: Topology,
    node: int,
    a: np.ndarray,
    b: np.ndarray,
    columns: Sequence[Tuple[np.ndarray, np.ndarray]],
    deltas: np.ndarray,
    t: int,
    norm: NormKind,
):
    """Yields (kind, value) for the adaptation conditions of one vertex."""
    r_t, m_t = columns[t]
    region = topology.extended_region(model, node)
    d_bar = topology.max_delay(model, node)
    horizon = r_t.shape[0]

    def past(s: int):
        return columns[max(s, 0)]

    def delta_at(s: int) -> np.ndarray:
        if s < 0:
            return np.zeros(model.state_dims[node])
        return deltas[s]

    for h in range(d_bar):
        total = 0.0
        for j in region:
            d = topology.delay(j, node)
            if d < h + 1:
                continue
            r_s, m_s = past(t + h - d)
            res = column_residuals(a, b, r_t - r_s, m_t - m_s)[
                :, model.state_slice(j), :
            ]
            vec = sum(
                res[k - 1] @ delta_at(t + h + 1 - k) for k in range(d + 1, horizon + 1)
            )
            total += norm.vector_norm(vec)
        yield "m1", total
    r_prev, _ = past(t - 1)
    for h in range(d_bar):
        total = 0.0
        for j in region:
            if topology.delay(j, node) != h + 1:
                continue
            diff = (r_t - r_prev)[:, model.state_slice(j), :]
            vec = sum(
                diff[k] @ delta_at(t + h + 1 - k) for k in range(h + 2, horizon)
            )
            total += norm.vector_norm(np.asarray(vec, float))
        yield "m2", total


def column_bound_ratio(
    model: StructuredModel,
    topology: Topology,
    node: int,
    a: np.ndarray,
    b: np.ndarray,
    r_col: np.ndarray,
    m_col: np.ndarray,
    rho: float,
    norm: NormKind,
) -> float:
    """max_k Σ_{j∈𝓛⁺(i)} ‖Δ^{j←i}_k‖ / ρ^{k-1}: the smallest feasible c_i."""
    res = column_residuals(a, b, r_col, m_col)
    region = topology.extended_region(model, node)
    worst = 0.0
    for k in range(res.shape[0]):
        total = sum(norm.induced_norm(res[k, model.state_slice(j), :]) for j in region)
        worst = max(worst, total / rho**k)
    return worst


def verify_distributed_conditions(
    model: StructuredModel,
    topology: Topology,
    node: int,
    columns: Sequence[Tuple[np.ndarray, np.ndarray]],
    deltas: np.ndarray,
    vertices: Sequence[Tuple[np.ndarray, np.ndarray]],
    rho: float,
    c: float,
    m1: float,
    m2: float,
    norm=NormKind.MAX_ABS,
    lam: Optional[float] = None,
) -> Tuple[bool, float]:
    """
    Checks the localized robustness and adaptation conditions of node i at
    every vertex for the newest column in `columns`.

    Per-step residual bound: Σ_{j∈𝓛⁺(i)} ‖Δ^{j←i}_k‖ ≤ c ρ^{k-1}; margin:
    c·(1-ρ^T)/(1-ρ) ≤ λ when `lam` is given; the two adaptation conditions
    with budgets m1 and m2 for every h in [0, d̄_i - 1].

    Args:
        columns: Column solutions (R^{·←i}_s, M^{·←i}_s) for s = 0..t;
            the last entry is the one checked.
        deltas: δ̂^i_s for s = 0..t-1 (rows).
        vertices: Global (A, B) pairs.

    Returns:
        (passed, worst slack); the slack is negative when a condition fails.

    Raises:
        InsufficientHistoryError: If fewer than t past δ̂ values are given.
    """
    norm = NormKind.parse(norm)
    t = len(columns) - 1
    deltas = np.asarray(deltas, dtype=float).reshape(-1, model.state_dims[node])
    if t < 0 or deltas.shape[0] < t:
        raise InsufficientHistoryError(
            f"Node {node} at t={t} needs {t} past δ̂ values, got {deltas.shape[0]}."
        )
    r_t, m_t = columns[t]
    slack = math.inf
    horizon = r_t.shape[0]
    if lam is not None:
        slack = min(slack, lam - c * (1.0 - rho**horizon) / (1.0 - rho))
    for a, b in vertices:
        ratio = column_bound_ratio(model, topology, node, a, b, r_t, m_t, rho, norm)
        slack = min(slack, c - ratio)
        for kind, value in _column_condition_terms(
            model, topology, node, a, b, columns, deltas, t, norm
        ):
            slack = min(slack, (m1 if kind == "m1" else m2) - value)
    return slack >= -CONDITION_TOL, float(slack)
