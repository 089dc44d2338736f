"""
Closed-loop engine for the central and the distributed scheme.

A tick at time t runs in fixed phases, each ending at a delivery barrier:

1. every node turns its latest transition into a constraint set and sends it
   to its send region;
2. constraint sets are delivered and the polytopes updated;
3. the controllers are synthesized and node i sends the blocks of its column
   to its local region;
4. δ̂ is computed from the delivered blocks and node i shares δ̂^i_t;
5. u is computed and the plant steps.

A message sent at t over an edge with delay d is delivered at exactly t + d.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Tuple

import numpy as np

from sls_adapt import config
from sls_adapt.estimation import (
    ConstraintLog,
    a_norm_bound,
    observation_radius,
    observe_all,
    update_central,
    update_node,
)
from sls_adapt.exceptions import SlsAdaptError
from sls_adapt.lpcore import NormKind
from sls_adapt.model import StructuredModel, assemble
from sls_adapt.polytope import enumerate_vertices
from sls_adapt.scenario import (
    DisturbanceKind,
    Scenario,
    scenario_hash,
    scenario_to_json,
)
from sls_adapt.slscontrol import (
    BlockResponse,
    CausalityViolationError,
    ControllerState,
    NodeView,
    adaptation_residual,
    block_margin,
    control_output,
    delta_update,
    margin_of,
)
from sls_adapt.synthesis import (
    InfeasibleSynthesisError,
    SynthesisRequest,
    SynthesisResult,
    previous_is_feasible,
    split_columns,
    synthesize_nodes,
    two_phase_solve,
)
from sls_adapt.trace import SimulationTrace

logger = logging.getLogger(__name__)

RECURSIVE_TOL = 1e-7
BOUND_SLACK = 1e-12


class DisturbanceBoundViolatedError(SlsAdaptError):
    """Raised when a disturbance handed to the plant exceeds its bound."""

    pass


class RecursiveFeasibilityError(SlsAdaptError):
    """Raised when the previous controller is infeasible for the new problem."""

    pass


class MessageKind(enum.Enum):
    CONSTRAINT = "constraint"
    BLOCK = "block"
    DELTA = "delta"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: int
    receiver: int
    sent_at: int
    deliver_at: int
    payload: Any


@dataclass
class MessageBus:
    """FIFO queue per (sender, receiver, kind) with fixed edge delays."""

    delays: np.ndarray
    queues: Dict[Tuple[int, int, str], Deque[Message]] = field(default_factory=dict)
    sent: int = 0
    delivered: int = 0
    early_reads: int = 0

    def send(
        self, kind: MessageKind, sender: int, receiver: int, t: int, payload: Any
    ) -> Message:
        delay = int(self.delays[receiver, sender])
        message = Message(kind, sender, receiver, t, t + delay, payload)
        self.queues.setdefault((sender, receiver, kind.value), deque()).append(message)
        self.sent += 1
        return message

    def deliver(self, t: int, kind: MessageKind) -> List[Message]:
        """
        Pops every message of `kind` that becomes visible at t, in
        (sender, receiver) order.

        Raises:
            CausalityViolationError: If a message should have been delivered
                at an earlier tick.
        """
        out = []
        for key in sorted(k for k in self.queues if k[2] == kind.value):
            queue = self.queues[key]
            while queue and queue[0].deliver_at <= t:
                message = queue.popleft()
                if message.deliver_at < t:
                    raise CausalityViolationError(
                        f"{kind.value} message {message.sender}->{message.receiver} "
                        f"due at {message.deliver_at} was still queued at {t}."
                    )
                out.append(message)
        self.delivered += len(out)
        return out

    @property
    def in_flight(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def counters(self) -> Dict[str, int]:
        return {
            "sent": self.sent,
            "delivered": self.delivered,
            "in_flight": self.in_flight,
            "early_reads": self.early_reads,
        }


def step_plant(
    model: StructuredModel,
    a_blocks: dict,
    b_blocks: dict,
    x: np.ndarray,
    u: np.ndarray,
    w: np.ndarray,
    eta: Optional[float] = None,
    norm=NormKind.MAX_ABS,
) -> np.ndarray:
    """
    x^j_{t+1} = Σ_{i∈𝒩(j)} A^{j←i} x^i_t + B^j u^j_t + w^j_t.

    Raises:
        DisturbanceBoundViolatedError: If `eta` is given and some ‖w^j‖ > η.
    """
    norm = NormKind.parse(norm)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    nxt = np.zeros(model.n_states)
    for j in range(model.n_nodes):
        rows = model.state_slice(j)
        w_j = w[rows]
        if eta is not None and norm.vector_norm(w_j) > eta + BOUND_SLACK:
            raise DisturbanceBoundViolatedError(
                f"‖w^{j}‖ = {norm.vector_norm(w_j):.6g} exceeds η = {eta}."
            )
        total = b_blocks[j] @ u[model.input_slice(j)] + w_j
        for i in model.neighbors(j):
            total = total + a_blocks[(j, i)] @ x[model.state_slice(i)]
        nxt[rows] = total
    return nxt


def _ball_sample(norm: NormKind, radius: float, size: int, rng) -> np.ndarray:
    if norm is NormKind.MAX_ABS:
        return rng.uniform(-radius, radius, size)
    # uniform in the ℓ1 ball: simplex weights with random signs
    weights = rng.exponential(1.0, size + 1)
    signs = rng.choice((-1.0, 1.0), size)
    return radius * signs * weights[:size] / weights.sum()


def gen_disturbance(
    kind: DisturbanceKind,
    eta: float,
    norm,
    rng: np.random.Generator,
    model: StructuredModel,
    reference: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Per-node disturbances inside the η-ball of `norm`.

    The adversarial kind puts each w^j on the ball vertex best aligned with
    `reference` (typically the latest δ̂); ties and zeros are broken with
    the rng.
    """
    norm = NormKind.parse(norm)
    kind = DisturbanceKind(kind)
    w = np.zeros(model.n_states)
    if kind is DisturbanceKind.ZERO or eta == 0:
        return w
    for j in range(model.n_nodes):
        rows = model.state_slice(j)
        size = model.state_dims[j]
        if kind is DisturbanceKind.UNIFORM_BOX:
            w[rows] = _ball_sample(norm, eta, size, rng)
            continue
        ref = np.zeros(size) if reference is None else np.asarray(reference)[rows]
        coin = rng.choice((-1.0, 1.0), size)
        signs = np.where(ref > 0, 1.0, np.where(ref < 0, -1.0, coin))
        if norm is NormKind.MAX_ABS:
            w[rows] = eta * signs
        else:
            k = int(np.argmax(np.abs(ref))) if np.any(ref) else int(rng.integers(size))
            w[rows.start + k] = eta * signs[k]
    return w


def _noise(scenario: Scenario, rng) -> np.ndarray:
    if scenario.noise_bound <= 0:
        return np.zeros(scenario.model.n_states)
    return gen_disturbance(
        DisturbanceKind.UNIFORM_BOX,
        scenario.noise_bound,
        scenario.norm,
        rng,
        scenario.model,
    )


def _radius(scenario: Scenario) -> float:
    vertices = enumerate_vertices(scenario.prior)
    gain = a_norm_bound(scenario.model, vertices, scenario.norm)
    return observation_radius(scenario.eta, scenario.noise_bound, gain)


@dataclass
class _Recorder:
    """Preallocated trace arrays filled one tick at a time."""

    scenario: Scenario
    n_margins: int
    algorithm: str
    keep_responses: bool = False

    def __post_init__(self):
        s = self.scenario
        rows = s.steps + 1
        n, m = s.model.n_states, s.model.n_inputs
        self.trace = SimulationTrace(
            algorithm=self.algorithm,
            seed=s.seed,
            x=np.zeros((rows, n)),
            u=np.zeros((rows, m)),
            w=np.zeros((rows, n)),
            v=np.zeros((rows, n)),
            delta=np.zeros((rows, n)),
            w_hat=np.zeros((rows, n)),
            lambdas=np.zeros((rows, self.n_margins)),
            phases=[],
            mu=np.zeros(rows),
            mu_applied=np.zeros(rows),
            adapt=np.zeros(rows),
            r_sum=np.zeros(rows),
            synth_seconds=np.zeros(rows),
            scenario=scenario_to_json(s),
            scenario_hash=scenario_hash(s),
            applied=[] if self.keep_responses else None,
        )

    def record(self, t: int, applied: BlockResponse, **values):
        tr = self.trace
        for name in ("x", "u", "w", "v", "delta", "w_hat", "lambdas"):
            getattr(tr, name)[t] = values[name]
        for name in ("mu", "mu_applied", "adapt", "synth_seconds"):
            getattr(tr, name)[t] = values[name]
        tr.r_sum[t] = sum(self.scenario.norm.induced_norm(r) for r in applied.R)
        tr.phases.append(list(values["phases"]))
        tr.recursive_feasibility.append(float(values["violation"]))
        if tr.applied is not None:
            tr.applied.append(applied)

    def snapshot(self, t: int, node: int, polytope):
        period = self.scenario.snapshot_period
        if t % period == 0 or t == self.scenario.steps:
            self.trace.snapshots.append(
                {"t": t, "node": node, "polytope": polytope.to_json()}
            )


def summarize(trace: SimulationTrace) -> dict:
    """Run summary derived from the trace arrays."""
    below = np.flatnonzero(trace.mu < 1.0)
    return {
        "steps": trace.steps,
        "initial_lambda": float(np.max(trace.lambdas[0])),
        "final_lambda": [float(v) for v in trace.lambdas[-1]],
        "final_mu": float(trace.mu[-1]),
        "first_stable_step": int(below[0]) if below.size else None,
        "max_state_norm": float(np.max(np.abs(trace.x))),
        "max_recursive_violation": float(max(trace.recursive_feasibility, default=0.0)),
    }


def _finish(rec: _Recorder, responses: dict, bus: Optional[MessageBus] = None):
    trace = rec.trace
    trace.responses = responses
    trace.bus = bus.counters() if bus is not None else {}
    trace.summary = summarize(trace)
    logger.info(
        "%s run finished: final μ=%.4f, first step with μ<1: %s",
        trace.algorithm,
        trace.summary["final_mu"],
        trace.summary["first_stable_step"],
    )
    return trace


def _w_hat(a_prev, v, v_prev, w_prev, t: int, n: int) -> np.ndarray:
    if t == 0:
        return np.zeros(n)
    return v - a_prev @ v_prev + w_prev


def _central_synthesis(
    scenario: Scenario,
    polytope,
    previous: Optional[SynthesisResult],
    history: np.ndarray,
    t: int,
    method: Optional[str],
    dump_dir: Optional[Path],
) -> Tuple[SynthesisResult, float]:
    """
    One central solve at t over the vertices of `polytope`. A previous
    solution is checked against the new program first.

    Returns:
        The result and the recursive-feasibility gap of `previous`.
    """
    req = SynthesisRequest.central(
        scenario,
        enumerate_vertices(polytope),
        previous=None if previous is None else previous.response,
        delta_history=history,
        t=t,
    )
    violation = 0.0
    if previous is not None:
        violation = previous_is_feasible(req, previous)
        if violation > RECURSIVE_TOL:
            raise RecursiveFeasibilityError(
                f"Previous central controller violates t={t} by {violation:.3e}."
            )
    try:
        result = two_phase_solve(req, method, dump_dir)
    except InfeasibleSynthesisError as e:
        if previous is None:
            raise
        raise RecursiveFeasibilityError(f"Central synthesis failed at t={t}.") from e
    return result, violation


def run_algorithm1(
    scenario: Scenario,
    method: Optional[str] = None,
    dump_dir: Optional[Path] = None,
    keep_responses: bool = False,
) -> SimulationTrace:
    """
    Central adaptive robust control: one polytope from every node's
    observations and one global synthesis per step. Delays and regions of
    the topology are ignored.

    Raises:
        InfeasibleSynthesisError: If the initial synthesis fails.
        EmptyPolytopeError: If the observations become inconsistent.
        RecursiveFeasibilityError: If a later synthesis fails.
    """
    model, horizon, norm = scenario.model, scenario.horizon_T, scenario.norm
    n, steps = model.n_states, scenario.steps
    rng = np.random.default_rng(scenario.seed)
    a_true, b_true = model.global_at(scenario.true_alpha)
    a_blocks, b_blocks = assemble(model, scenario.true_alpha)
    radius = _radius(scenario)
    rec = _Recorder(scenario, 1, "central", keep_responses)
    polytope = scenario.prior
    state = ControllerState(horizon, n)
    result: Optional[SynthesisResult] = None
    prev_resp = None
    x = scenario.x0.copy()
    v = _noise(scenario, rng)
    y = x + v
    y_prev = u_prev = v_prev = w_prev = None

    for t in range(steps + 1):
        if t > 0:
            constraints = observe_all(model, y_prev, u_prev, y, t, radius, norm)
            polytope = update_central(polytope, constraints, scenario.reduce_every, t)
        violation, seconds = 0.0, 0.0
        if result is None or t % scenario.resynth_period == 0:
            result, violation = _central_synthesis(
                scenario,
                polytope,
                result,
                state.history[: horizon - 1],
                t,
                method,
                dump_dir,
            )
            seconds = result.solve_seconds
            if t == 0:
                logger.info(
                    "Initial central λ = %.4f (%s)", result.lambda_, result.phase.value
                )
        resp = result.response
        history_prev = state.history.copy()
        delta = delta_update(state, resp, y)
        u = control_output(state, resp)
        adapt = 0.0
        if prev_resp is not None:
            adapt = norm.vector_norm(adaptation_residual(prev_resp, resp, history_prev))
        mu = margin_of(a_true, b_true, resp, norm)
        w = np.zeros(n)
        if t < steps:
            w = gen_disturbance(
                scenario.disturbance_kind, scenario.eta, norm, rng, model, delta
            )
        rec.record(
            t,
            resp,
            x=x,
            u=u,
            w=w,
            v=v,
            delta=delta,
            w_hat=_w_hat(a_true, v, v_prev, w_prev, t, n),
            lambdas=[result.lambda_],
            phases=[result.phase.value],
            mu=mu,
            mu_applied=mu,
            adapt=adapt,
            synth_seconds=seconds,
            violation=violation,
        )
        rec.snapshot(t, -1, polytope)
        logger.debug(
            "t=%d λ=%.4f μ=%.4f rows=%d", t, result.lambda_, mu, polytope.n_rows
        )
        prev_resp = resp
        if t < steps:
            x_next = step_plant(model, a_blocks, b_blocks, x, u, w, scenario.eta, norm)
            y_prev, u_prev, v_prev, w_prev = y, u, v, w
            x, v = x_next, _noise(scenario, rng)
            y = x + v
    return _finish(rec, resp.to_json())


def _block_payload(model: StructuredModel, result: SynthesisResult, j: int):
    r, m = result.column
    return r[:, model.state_slice(j), :].copy(), m[:, model.input_slice(j), :].copy()


def _applied_response(model: StructuredModel, views: List[NodeView], horizon: int):
    r = np.zeros((horizon, model.n_states, model.n_states))
    m = np.zeros((horizon, model.n_inputs, model.n_states))
    for view in views:
        rows, inputs = model.state_slice(view.node), model.input_slice(view.node)
        for i, (r_block, m_block) in view.blocks.items():
            cols = model.state_slice(i)
            r[:, rows, cols] = r_block
            m[:, inputs, cols] = m_block
    return BlockResponse(r, m)


def run_algorithm2(
    scenario: Scenario,
    method: Optional[str] = None,
    dump_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    keep_responses: bool = False,
) -> SimulationTrace:
    """
    Distributed localized adaptive robust control over the message bus.

    Every node keeps its own polytope from the constraint sets that reached
    it, synthesizes its own column, and runs its share of the controller
    with the delayed blocks and δ̂ values it has received. The t = 0
    solutions are installed everywhere before the first tick.

    With zero delays and global regions every node holds the same polytope
    and sees every block and δ̂ value as soon as it exists, so the node
    programs collapse into the central one: it is solved once per step,
    each node takes its column, and δ̂ follows the central recursion. The
    trajectory then equals `run_algorithm1` on the same seed.

    Raises:
        AssumptionViolationError: If the topology breaks the delay assumption.
        InfeasibleSynthesisError: If an initial node synthesis fails.
        EmptyPolytopeError: If a node's observations become inconsistent.
        RecursiveFeasibilityError: If a later node synthesis fails.
        CausalityViolationError: If a node reads data before it arrived.
    """
    model, topology, norm = scenario.model, scenario.topology, scenario.norm
    topology.validate(model)
    horizon, steps = scenario.horizon_T, scenario.steps
    n_nodes, n = model.n_nodes, model.n_states
    workers = workers or config.get_workers()
    rng = np.random.default_rng(scenario.seed)
    a_true, b_true = model.global_at(scenario.true_alpha)
    a_blocks, b_blocks = assemble(model, scenario.true_alpha)
    radius = _radius(scenario)
    rec = _Recorder(scenario, n_nodes, "dlar", keep_responses)
    bus = MessageBus(topology.delays)
    polytopes = [scenario.prior] * n_nodes
    logs = [ConstraintLog() for _ in range(n_nodes)]
    views = [NodeView(j, model, horizon) for j in range(n_nodes)]
    columns: List[list] = [[] for _ in range(n_nodes)]
    own: List[list] = [[] for _ in range(n_nodes)]
    ring = ControllerState(horizon, n)
    shared = topology.is_global
    central: Optional[SynthesisResult] = None

    if shared:
        central, _ = _central_synthesis(
            scenario, scenario.prior, None, ring.history[: horizon - 1], 0,
            method, dump_dir,
        )
        results = split_columns(central, model)
    else:
        prior_vertices = enumerate_vertices(scenario.prior)
        results = synthesize_nodes(
            [
                SynthesisRequest.for_node(scenario, i, prior_vertices)
                for i in range(n_nodes)
            ],
            workers,
            method,
            dump_dir,
        )
    initial_seconds = sum(r.solve_seconds for r in results)
    logger.info(
        "Initial node margins: %s", ", ".join(f"{r.lambda_:.4f}" for r in results)
    )
    for i, result in enumerate(results):
        for j in topology.local_regions[i]:
            views[j].install_blocks(i, *_block_payload(model, result, j))

    prev_applied = None
    x = scenario.x0.copy()
    v = _noise(scenario, rng)
    y = x + v
    y_prev = u_prev = v_prev = w_prev = None

    for t in range(steps + 1):
        mailboxes: List[list] = [[] for _ in range(n_nodes)]
        if t > 0:
            for c in observe_all(model, y_prev, u_prev, y, t, radius, norm):
                for r in sorted(topology.send_regions[c.origin_node]):
                    bus.send(MessageKind.CONSTRAINT, c.origin_node, r, t, c)
        for message in bus.deliver(t, MessageKind.CONSTRAINT):
            mailboxes[message.receiver].append(message.payload)
        for i in range(n_nodes):
            polytopes[i] = update_node(
                i, polytopes[i], mailboxes[i], logs[i], scenario.reduce_every, t
            )

        violation, seconds = 0.0, initial_seconds if t == 0 else 0.0
        if shared and t > 0 and t % scenario.resynth_period == 0:
            central, violation = _central_synthesis(
                scenario,
                polytopes[0],
                central,
                ring.history[: horizon - 1],
                t,
                method,
                dump_dir,
            )
            results = split_columns(central, model)
            seconds = central.solve_seconds
        elif t > 0 and t % scenario.resynth_period == 0:
            requests = [
                SynthesisRequest.for_node(
                    scenario,
                    i,
                    enumerate_vertices(polytopes[i]),
                    columns[i],
                    np.asarray(own[i]),
                )
                for i in range(n_nodes)
            ]
            for i, req in enumerate(requests):
                gap = previous_is_feasible(req, results[i])
                violation = max(violation, gap)
                if gap > RECURSIVE_TOL:
                    raise RecursiveFeasibilityError(
                        f"Previous controller of node {i} violates t={t} by {gap:.3e}."
                    )
            try:
                results = synthesize_nodes(requests, workers, method, dump_dir)
            except InfeasibleSynthesisError as e:
                raise RecursiveFeasibilityError(
                    f"Node synthesis failed at t={t}."
                ) from e
            seconds = sum(r.solve_seconds for r in results)
        for i, result in enumerate(results):
            columns[i].append(result.column)
            if t > 0:
                for j in sorted(topology.local_regions[i]):
                    bus.send(
                        MessageKind.BLOCK, i, j, t, _block_payload(model, result, j)
                    )
        for message in bus.deliver(t, MessageKind.BLOCK):
            views[message.receiver].install_blocks(message.sender, *message.payload)

        for message in bus.deliver(t, MessageKind.DELTA):
            views[message.receiver].receive_delta(message.sender, *message.payload)
        applied = _applied_response(model, views, horizon)
        history_prev = ring.history.copy()
        try:
            if shared:
                delta = delta_update(ring, applied, y)
            else:
                delta = np.zeros(n)
                for j in range(n_nodes):
                    delta[model.state_slice(j)] = views[j].delta_update(
                        t, y[model.state_slice(j)]
                    )
                ring.push(delta)
            for i in range(n_nodes):
                share = delta[model.state_slice(i)].copy()
                own[i].append(share)
                for j in sorted(topology.local_regions[i] - {i}):
                    bus.send(MessageKind.DELTA, i, j, t, (t, share))
            for message in bus.deliver(t, MessageKind.DELTA):
                views[message.receiver].receive_delta(message.sender, *message.payload)
            if shared:
                u = control_output(ring, applied)
            else:
                u = np.zeros(model.n_inputs)
                for j in range(n_nodes):
                    u[model.input_slice(j)] = views[j].control_output(t)
        except CausalityViolationError:
            bus.early_reads += 1
            raise
        for view in views:
            view.forget_before(t - horizon)

        latest = BlockResponse.from_columns(model, [r.column for r in results])
        adapt = 0.0
        if prev_applied is not None:
            residual = adaptation_residual(prev_applied, applied, history_prev)
            adapt = norm.vector_norm(residual)
        w = np.zeros(n)
        if t < steps:
            w = gen_disturbance(
                scenario.disturbance_kind, scenario.eta, norm, rng, model, delta
            )
        mu = block_margin(model, a_true, b_true, latest, norm)
        rec.record(
            t,
            applied,
            x=x,
            u=u,
            w=w,
            v=v,
            delta=delta,
            w_hat=_w_hat(a_true, v, v_prev, w_prev, t, n),
            lambdas=[r.lambda_ for r in results],
            phases=[r.phase.value for r in results],
            mu=mu,
            mu_applied=margin_of(a_true, b_true, applied, norm),
            adapt=adapt,
            synth_seconds=seconds,
            violation=violation,
        )
        for i in range(n_nodes):
            rec.snapshot(t, i, polytopes[i])
        logger.debug(
            "t=%d max λ=%.4f μ=%.4f", t, max(r.lambda_ for r in results), mu
        )
        prev_applied = applied
        if t < steps:
            x_next = step_plant(model, a_blocks, b_blocks, x, u, w, scenario.eta, norm)
            y_prev, u_prev, v_prev, w_prev = y, u, v, w
            x, v = x_next, _noise(scenario, rng)
            y = x + v
    return _finish(rec, latest.to_json(), bus)


def run_fixed_controller(
    scenario: Scenario,
    response: BlockResponse,
    plant: str = "switching",
    keep_responses: bool = False,
) -> SimulationTrace:
    """
    Holds one response fixed while the plant either stays at the true
    parameters ("true") or jumps to a random vertex of the prior every step
    ("switching").
    """
    if plant not in ("switching", "true"):
        raise ValueError(f"Unknown plant mode {plant!r}.")
    model, horizon, norm = scenario.model, scenario.horizon_T, scenario.norm
    n, steps = model.n_states, scenario.steps
    rng = np.random.default_rng(scenario.seed)
    vertices = enumerate_vertices(scenario.prior)
    certified = max(margin_of(*model.global_at(v), response, norm) for v in vertices)
    rec = _Recorder(scenario, 1, f"fixed-{plant}", keep_responses)
    state = ControllerState(horizon, n)
    schedule = []
    x = scenario.x0.copy()
    v = _noise(scenario, rng)
    y = x + v
    a_prev = v_prev = w_prev = None
    for t in range(steps + 1):
        if plant == "switching":
            alpha = vertices[int(rng.integers(len(vertices)))]
        else:
            alpha = scenario.true_alpha
        a_t, b_t = model.global_at(alpha)
        delta = delta_update(state, response, y)
        u = control_output(state, response)
        mu = margin_of(a_t, b_t, response, norm)
        w = np.zeros(n)
        if t < steps:
            w = gen_disturbance(
                scenario.disturbance_kind, scenario.eta, norm, rng, model, delta
            )
        rec.record(
            t,
            response,
            x=x,
            u=u,
            w=w,
            v=v,
            delta=delta,
            w_hat=_w_hat(a_prev, v, v_prev, w_prev, t, n),
            lambdas=[certified],
            phases=["fixed"],
            mu=mu,
            mu_applied=mu,
            adapt=0.0,
            synth_seconds=0.0,
            violation=0.0,
        )
        if t < steps:
            schedule.append([float(a) for a in alpha])
            a_blocks, b_blocks = assemble(model, alpha)
            x_next = step_plant(model, a_blocks, b_blocks, x, u, w, scenario.eta, norm)
            a_prev, v_prev, w_prev = a_t, v, w
            x, v = x_next, _noise(scenario, rng)
            y = x + v
    rec.trace.plant_schedule = schedule
    return _finish(rec, response.to_json())


def replay(trace: SimulationTrace, scenario: Scenario) -> np.ndarray:
    """Re-simulates the states from x_0 and the recorded inputs and disturbances."""
    model = scenario.model
    x = np.zeros_like(trace.x)
    x[0] = trace.x[0]
    for t in range(trace.steps):
        alpha = (
            scenario.true_alpha
            if trace.plant_schedule is None
            else np.asarray(trace.plant_schedule[t])
        )
        a_blocks, b_blocks = assemble(model, alpha)
        x[t + 1] = step_plant(model, a_blocks, b_blocks, x[t], trace.u[t], trace.w[t])
    return x


def plant_residuals(trace: SimulationTrace, scenario: Scenario) -> np.ndarray:
    """Per-step ‖x_{t+1} - (A x_t + B u_t + w_t)‖∞ from the recorded rows."""
    model = scenario.model
    out = np.zeros(trace.steps)
    for t in range(trace.steps):
        alpha = (
            scenario.true_alpha
            if trace.plant_schedule is None
            else np.asarray(trace.plant_schedule[t])
        )
        a_blocks, b_blocks = assemble(model, alpha)
        predicted = step_plant(
            model, a_blocks, b_blocks, trace.x[t], trace.u[t], trace.w[t]
        )
        out[t] = float(np.max(np.abs(trace.x[t + 1] - predicted), initial=0.0))
    return out
