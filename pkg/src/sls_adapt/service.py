"""
Orchestration behind the command line: running a scenario to a trace,
one-shot synthesis reports, and the offline trace audit.

These functions do no console output; the CLI renders what they return.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from sls_adapt import config
from sls_adapt.lpcore import NormKind
from sls_adapt.model import StructuredModel
from sls_adapt.polytope import (
    HalfspacePolytope,
    contains_polytope,
    enumerate_vertices,
    membership,
)
from sls_adapt.scenario import (
    DisturbanceKind,
    Scenario,
    ScenarioError,
    load_scenario,
    point_prior,
    scenario_from_json,
)
from sls_adapt.simulator import plant_residuals, run_algorithm1, run_algorithm2
from sls_adapt.slscontrol import lemma1_bound
from sls_adapt.synthesis import SynthesisRequest, synthesize_nodes, two_phase_solve
from sls_adapt.trace import SimulationTrace, read_trace, write_trace

logger = logging.getLogger(__name__)

PLANT_TOL = 1e-9
MONOTONE_TOL = 1e-6
RECURSIVE_TOL = 1e-7
ROBUST_TOL = 1e-7
SETTLE_TOL = 1e-6
BOUND_TOL = 1e-7
SUMMARY_NAME = "summary.json"


class Algorithm(str, enum.Enum):
    CENTRAL = "central"
    DLAR = "dlar"


class SynthesisPoint(str, enum.Enum):
    PRIOR = "prior"
    POINT = "point"


@dataclass(frozen=True)
class RunConfig:
    """
    Everything `run` needs. `scenario` is a builtin name or a JSON path;
    unset overrides keep the scenario's own values.
    """

    scenario: str
    output_dir: Optional[Path] = None
    algorithm: Algorithm = Algorithm.DLAR
    seed: Optional[int] = None
    steps: Optional[int] = None
    snapshot_period: Optional[int] = None
    exact_prior: bool = False
    debug_lp: bool = False
    lp_method: Optional[str] = None
    workers: Optional[int] = None

    def __post_init__(self):
        if not str(self.scenario).strip():
            raise ScenarioError("A scenario path or builtin name is required.")
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))


@dataclass
class RunOutcome:
    directory: Path
    trace: SimulationTrace
    scenario: Scenario

    @property
    def summary(self) -> dict:
        return self.trace.summary


def prepare_scenario(
    source: str,
    seed: Optional[int] = None,
    steps: Optional[int] = None,
    snapshot_period: Optional[int] = None,
    exact_prior: bool = False,
) -> Scenario:
    """Loads a scenario and applies command-line overrides."""
    scenario = load_scenario(source)
    changes = {
        key: value
        for key, value in (
            ("seed", seed),
            ("steps", steps),
            ("snapshot_period", snapshot_period),
        )
        if value is not None
    }
    if changes:
        try:
            scenario = scenario.replace(**changes)
        except (TypeError, ValueError) as e:
            raise ScenarioError(str(e)) from e
    return point_prior(scenario) if exact_prior else scenario


def execute_run(run: RunConfig) -> RunOutcome:
    """
    Simulates the configured scenario and writes trace.csv, trace.json and
    summary.json.

    Raises:
        ScenarioError: For an unreadable or invalid scenario.
        AssumptionViolationError: If the topology breaks the delay assumption.
        InfeasibleSynthesisError: If the initial synthesis fails.
        RecursiveFeasibilityError: If a later synthesis fails.
        EmptyPolytopeError: If observations contradict each other.
    """
    scenario = prepare_scenario(
        run.scenario, run.seed, run.steps, run.snapshot_period, run.exact_prior
    )
    directory = run.output_dir or (
        config.get_output_dir() / f"{run.algorithm.value}-seed{scenario.seed}"
    )
    directory = Path(directory)
    method = run.lp_method or config.get_lp_method()
    dump_dir = directory / "lp" if run.debug_lp else None
    logger.info(
        "Running %s for %d steps (seed %d, LP %s)",
        run.algorithm.value,
        scenario.steps,
        scenario.seed,
        method,
    )
    if run.algorithm is Algorithm.CENTRAL:
        trace = run_algorithm1(scenario, method, dump_dir)
    else:
        trace = run_algorithm2(scenario, method, dump_dir, run.workers)
    write_trace(trace, directory)
    (directory / SUMMARY_NAME).write_text(json.dumps(trace.summary, indent=2))
    first = trace.summary.get("first_stable_step")
    if first is not None:
        logger.info("First step with μ < 1: %d", first)
    return RunOutcome(directory, trace, scenario)


@dataclass(frozen=True)
class SynthesisRow:
    label: str
    lambda_: float
    robust_lambda: float
    phase: str
    n_variables: int
    n_constraints: int
    seconds: float


def execute_synth(
    source: str,
    algorithm: Algorithm = Algorithm.DLAR,
    at: SynthesisPoint = SynthesisPoint.PRIOR,
    lp_method: Optional[str] = None,
    workers: Optional[int] = None,
) -> List[SynthesisRow]:
    """One synthesis at the prior (or at the true parameters), one row per problem."""
    scenario = load_scenario(source)
    if SynthesisPoint(at) is SynthesisPoint.POINT:
        scenario = point_prior(scenario)
    method = lp_method or config.get_lp_method()
    vertices = enumerate_vertices(scenario.prior)
    if Algorithm(algorithm) is Algorithm.CENTRAL:
        request = SynthesisRequest.central(scenario, vertices)
        results = [two_phase_solve(request, method)]
    else:
        requests = [
            SynthesisRequest.for_node(scenario, i, vertices)
            for i in range(scenario.model.n_nodes)
        ]
        results = synthesize_nodes(requests, workers or config.get_workers(), method)
    return [
        SynthesisRow(
            label="central" if r.node is None else f"node {r.node + 1}",
            lambda_=r.lambda_,
            robust_lambda=r.robust_lambda,
            phase=r.phase.value,
            n_variables=r.n_variables,
            n_constraints=r.n_constraints,
            seconds=r.solve_seconds,
        )
        for r in results
    ]


# --- audit ----------------------------------------------------------------


class Verdict(str, enum.Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    WARN = "WARN"
    SKIP = "SKIP"


@dataclass(frozen=True)
class PropertyResult:
    name: str
    verdict: Verdict
    required: bool
    detail: str = ""


@dataclass
class AuditReport:
    directory: Optional[Path]
    properties: List[PropertyResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(
            p.verdict is not Verdict.FAIL for p in self.properties if p.required
        )

    def get(self, name: str) -> PropertyResult:
        return next(p for p in self.properties if p.name == name)


def _required(name: str, bad_step: Optional[int], what: str) -> PropertyResult:
    if bad_step is None:
        return PropertyResult(name, Verdict.PASS, True)
    return PropertyResult(name, Verdict.FAIL, True, f"{what} at step {bad_step}")


def _first(flags) -> Optional[int]:
    hits = np.flatnonzero(np.asarray(flags, dtype=bool))
    return int(hits[0]) if hits.size else None


def check_plant_recursion(trace, scenario) -> PropertyResult:
    residuals = plant_residuals(trace, scenario)
    scale = 1.0 + np.max(np.abs(trace.x[1:]), axis=1, initial=0.0)
    bad = _first(residuals > PLANT_TOL * scale)
    # a bad row t + 1 is reported as the step that produced it
    return _required(
        "plant recursion",
        None if bad is None else bad + 1,
        "x does not follow the recorded u and w",
    )


def _snapshots_by_node(trace):
    out = {}
    for snap in sorted(trace.snapshots, key=lambda s: (s["node"], s["t"])):
        out.setdefault(snap["node"], []).append(
            (snap["t"], HalfspacePolytope.from_json(snap["polytope"]))
        )
    return out


def check_membership(trace, scenario) -> PropertyResult:
    for node, snaps in _snapshots_by_node(trace).items():
        for t, polytope in snaps:
            if not membership(polytope, scenario.true_alpha):
                return PropertyResult(
                    "ground-truth membership",
                    Verdict.FAIL,
                    True,
                    f"true α outside node {node} polytope at step {t}",
                )
    return PropertyResult("ground-truth membership", Verdict.PASS, True)


def check_nesting(trace, scenario) -> PropertyResult:
    for node, snaps in _snapshots_by_node(trace).items():
        for (_, outer), (t, inner) in zip(snaps, snaps[1:]):
            if not contains_polytope(outer, inner):
                return PropertyResult(
                    "snapshot nesting",
                    Verdict.FAIL,
                    True,
                    f"node {node} polytope grew at step {t}",
                )
    return PropertyResult("snapshot nesting", Verdict.PASS, True)


def check_monotone_margins(trace, scenario) -> PropertyResult:
    lam = trace.lambdas
    allowed = np.maximum(lam[:-1], scenario.lambda_star) + MONOTONE_TOL
    bad = _first(np.any(lam[1:] > allowed, axis=1))
    return _required(
        "margin monotonicity",
        None if bad is None else bad + 1,
        "λ rose above max(previous λ, λ*)",
    )


def check_recursive_feasibility(trace, scenario) -> PropertyResult:
    bad = _first(np.asarray(trace.recursive_feasibility) > RECURSIVE_TOL)
    return _required(
        "recursive feasibility", bad, "previous controller infeasible"
    )


def check_causality(trace, scenario) -> PropertyResult:
    bus = trace.bus
    if not bus:
        return PropertyResult("causality", Verdict.PASS, True, "no message bus")
    if bus.get("early_reads", 0):
        return PropertyResult(
            "causality", Verdict.FAIL, True, f"{bus['early_reads']} early reads"
        )
    if bus.get("sent", 0) != bus.get("delivered", 0) + bus.get("in_flight", 0):
        return PropertyResult(
            "causality", Verdict.FAIL, True, "message counters do not add up"
        )
    return PropertyResult("causality", Verdict.PASS, True)


def global_eta_hat(scenario: Scenario) -> float:
    """
    Bound on ‖ŵ_t‖ = ‖w_{t-1} + v_t - A v_{t-1}‖ in the global norm, with
    the gain of A taken over the prior vertices.
    """
    model, norm = scenario.model, scenario.norm
    factor = 1.0 if norm is NormKind.MAX_ABS else float(model.n_nodes)
    gain = max(
        norm.induced_norm(model.global_at(alpha)[0])
        for alpha in enumerate_vertices(scenario.prior)
    )
    return factor * (scenario.eta + (1.0 + gain) * scenario.noise_bound)


def state_envelope(trace: SimulationTrace, scenario: Scenario) -> np.ndarray:
    """
    Upper bound on ‖x_t‖ for every recorded step.

    δ̂ obeys ‖δ̂_t‖ ≤ λ·max of its last T values + drive, with λ the largest
    applied margin so far and drive the ŵ bound plus the largest adaptation
    residual so far. y_t = Σ_k R̂_t(k+1) δ̂_{t-k} turns the δ̂ bound into a
    state bound.
    """
    norm, horizon = scenario.norm, scenario.horizon_T
    z0 = norm.vector_norm(trace.x[0]) + norm.vector_norm(trace.v[0])
    base = global_eta_hat(scenario)
    gammas = np.zeros(trace.steps + 1)
    for t in range(trace.steps + 1):
        lam = max(float(np.max(trace.mu_applied[:t], initial=0.0)), 1e-12)
        drive = base + float(np.max(trace.adapt[: t + 1], initial=0.0))
        gammas[t] = lemma1_bound(lam, horizon, z0, drive, t)
    bounds = np.zeros(trace.steps + 1)
    for t in range(trace.steps + 1):
        window = gammas[max(0, t - horizon + 1) : t + 1]
        bounds[t] = trace.r_sum[t] * np.max(window) + norm.vector_norm(trace.v[t])
    return bounds


def check_envelope(trace, scenario) -> PropertyResult:
    norm = scenario.norm
    bounds = state_envelope(trace, scenario)
    states = np.array([norm.vector_norm(x) for x in trace.x])
    bad = _first(states > bounds * (1.0 + 1e-9) + 1e-9)
    result = _required("state envelope", bad, "‖x‖ above the envelope")
    if bad is None:
        return PropertyResult(
            result.name, result.verdict, True, f"max ‖x‖ = {states.max():.4g}"
        )
    return result


def check_robustness(trace, scenario) -> PropertyResult:
    bad = _first(trace.mu > np.max(trace.lambdas, axis=1) + ROBUST_TOL)
    return _required("robustness", bad, "true margin above the certified λ")


def check_delta_settling(trace, scenario) -> PropertyResult:
    exact = np.allclose(enumerate_vertices(scenario.prior), scenario.true_alpha)
    quiet = (
        scenario.disturbance_kind is DisturbanceKind.ZERO
        and scenario.noise_bound == 0
    )
    if not (exact and quiet) or trace.steps < scenario.horizon_T:
        return PropertyResult(
            "δ̂ settling", Verdict.SKIP, False, "needs an exact, noise-free run"
        )
    norm = scenario.norm
    tail = trace.delta[-scenario.horizon_T :]
    worst = max(norm.vector_norm(d) for d in tail)
    scale = 1.0 + norm.vector_norm(trace.delta[0])
    verdict = Verdict.PASS if worst <= SETTLE_TOL * scale else Verdict.WARN
    detail = f"final ‖δ̂‖ = {worst:.3g}"
    return PropertyResult("δ̂ settling", verdict, False, detail)


def _max_delays(model: StructuredModel, scenario: Scenario) -> List[int]:
    return [scenario.topology.max_delay(model, i) for i in range(model.n_nodes)]


def aggregate_bound_slack(trace: SimulationTrace, scenario: Scenario) -> np.ndarray:
    """
    Slack of the one-step δ̂ bound at every recorded step (row 0 is +inf).

    Distributed runs with delays or local regions bound per-node sums,

        Σ_j‖δ̂^j_t‖ ≤ λ·max_{1≤k≤T} Σ_j‖δ̂^j_{t-k}‖ + Σ_i(m1_i + d̄_i m2_i + ‖ŵ^i_t‖).

    Central runs, and distributed runs that reduce to the central program,
    use the global norm and the adaptation budget m_a instead; fixed
    controllers have no budget. λ is the largest margin recorded up to t.
    """
    model, norm, horizon = scenario.model, scenario.norm, scenario.horizon_T
    per_node = trace.algorithm == "dlar" and not scenario.topology.is_global
    if per_node:

        def size(vec: np.ndarray) -> float:
            return sum(
                norm.vector_norm(vec[model.state_slice(j)])
                for j in range(model.n_nodes)
            )

        delays = _max_delays(model, scenario)
        budget = sum(
            m1 + d * m2 for m1, m2, d in zip(scenario.m1, scenario.m2, delays)
        )
    else:
        size = norm.vector_norm
        budget = 0.0 if trace.algorithm.startswith("fixed") else scenario.m_a
    sizes = np.array([size(d) for d in trace.delta])
    slack = np.full(trace.steps + 1, np.inf)
    for t in range(1, trace.steps + 1):
        lam = float(np.max(trace.lambdas[: t + 1]))
        past = float(np.max(sizes[max(0, t - horizon) : t]))
        slack[t] = lam * past + budget + size(trace.w_hat[t]) - sizes[t]
    return slack


def check_aggregate_bound(trace, scenario) -> PropertyResult:
    slack = aggregate_bound_slack(trace, scenario)
    scale = 1.0 + np.max(np.abs(trace.delta), axis=1)
    bad = _first(slack < -BOUND_TOL * scale)
    return _required("aggregate δ̂ bound", bad, "‖δ̂‖ above the one-step bound")


CHECKS = (
    check_plant_recursion,
    check_membership,
    check_nesting,
    check_monotone_margins,
    check_recursive_feasibility,
    check_causality,
    check_envelope,
    check_robustness,
    check_delta_settling,
    check_aggregate_bound,
)


def audit(
    trace: SimulationTrace, scenario: Scenario, directory: Optional[Path] = None
) -> AuditReport:
    """Runs every property check on an in-memory trace."""
    report = AuditReport(directory)
    for check in CHECKS:
        report.properties.append(check(trace, scenario))
    return report


def audit_trace(directory: Union[str, Path]) -> AuditReport:
    """
    Re-validates a written trace using only its files.

    Raises:
        CorruptTraceError: If the trace cannot be read.
        ScenarioError: If the embedded scenario is invalid.
    """
    directory = Path(directory)
    trace = read_trace(directory)
    if trace.scenario is None:
        raise ScenarioError("The trace sidecar has no scenario.")
    report = audit(trace, scenario_from_json(trace.scenario), directory)
    failed = [p.name for p in report.properties if p.verdict is Verdict.FAIL]
    logger.info("Audit of %s: %s", directory, "ok" if not failed else failed)
    return report
