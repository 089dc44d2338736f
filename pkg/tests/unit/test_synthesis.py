import math

import numpy as np
import pytest

from sls_adapt import synthesis
from sls_adapt.lpcore import LpSolution, LpStatus
from sls_adapt.model import StructuredModel, Topology
from sls_adapt.polytope import HalfspacePolytope, enumerate_vertices
from sls_adapt.scenario import Scenario, chain5_scenario, point_prior, scalar_scenario
from sls_adapt.slscontrol import (
    BlockResponse,
    margin_of,
    verify_distributed_conditions,
)
from sls_adapt.synthesis import (
    InfeasibleSynthesisError,
    Objective,
    Phase,
    SynthesisRequest,
    build_central,
    build_node,
    free_variable_count,
    geometric_gain,
    previous_is_feasible,
    split_columns,
    synthesize_nodes,
    two_phase_solve,
)


def _coupled_pair() -> Scenario:
    """Two fully coupled scalar nodes, each with its own actuator, known exactly."""
    values = {(0, 0): 0.9, (0, 1): 0.5, (1, 0): 0.5, (1, 1): 0.9}
    basis_A = {edge: np.full((1, 1, 1), v) for edge, v in values.items()}
    basis_B = {j: np.ones((1, 1, 1)) for j in range(2)}
    model = StructuredModel((1, 1), (1, 1), frozenset(basis_A), basis_A, basis_B, 1)
    return Scenario(
        model=model,
        topology=Topology.full(2),
        prior=HalfspacePolytope.box([1.0], [1.0]),
        eta=0.1,
        true_alpha=np.array([1.0]),
        x0=np.array([1.0, -1.0]),
        horizon_T=3,
        lambda_star=0.0,
    )


def _central(scenario, **kwargs) -> SynthesisRequest:
    return SynthesisRequest.central(
        scenario, enumerate_vertices(scenario.prior), **kwargs
    )


def test_scalar_interval_optimum():
    """For a ∈ [0.4, 0.6] and b = 1 the smallest robust margin is 0.1."""
    s = scalar_scenario(a_range=(0.4, 0.6))
    result = two_phase_solve(_central(s), "highs")
    assert result.robust_lambda == pytest.approx(0.1, abs=1e-7)
    assert result.phase is Phase.PERFORMANCE
    assert result.lambda_ <= s.lambda_star + 1e-7
    assert result.response.horizon == s.horizon_T


def test_robust_solution_kept_above_lambda_star():
    """When λ* is out of reach the robust solution is returned as is."""
    s = scalar_scenario(a_range=(0.4, 0.6), lambda_star=0.05)
    result = two_phase_solve(_central(s), "simplex")
    assert result.phase is Phase.ROBUSTNESS
    assert result.lambda_ == pytest.approx(0.1, abs=1e-7)


def test_exact_scalar_knowledge_gives_deadbeat():
    """A point prior admits a response with no residual at all."""
    result = two_phase_solve(_central(scalar_scenario()), "highs")
    assert result.robust_lambda == pytest.approx(0.0, abs=1e-8)


def test_certified_margin_matches_vertex_residuals():
    """The reported λ is the worst Σ‖Δ_k‖ of the returned blocks over the vertices."""
    s = scalar_scenario(a=1.2, a_range=(1.0, 1.5), b_range=(0.5, 1.5))
    req = _central(s)
    result = two_phase_solve(req, "highs")
    worst = max(margin_of(a, b, result.response) for a, b in req.plants)
    assert result.lambda_ == pytest.approx(worst, abs=1e-9)


def test_node_margin_formula():
    """c_i = 0.3 with ρ = 0.7 and T = 8 gives λ_i = 1 - 0.7⁸."""
    assert 0.3 * geometric_gain(0.7, 8) == pytest.approx(1 - 0.7**8)


def test_distributed_and_central_coincide_on_a_known_pair():
    """Without delays or regions both programs reach the deadbeat optimum."""
    s = _coupled_pair()
    vertices = enumerate_vertices(s.prior)
    central = two_phase_solve(SynthesisRequest.central(s, vertices), "highs")
    nodes = synthesize_nodes(
        [SynthesisRequest.for_node(s, i, vertices) for i in range(2)], method="highs"
    )
    a, b = s.model.global_at(s.true_alpha)
    assert central.robust_lambda == pytest.approx(0.0, abs=1e-7)
    assert margin_of(a, b, central.response) == pytest.approx(0.0, abs=1e-6)
    assert all(r.robust_lambda == pytest.approx(0.0, abs=1e-7) for r in nodes)
    assembled = BlockResponse.from_columns(s.model, [r.column for r in nodes])
    assert margin_of(a, b, assembled) == pytest.approx(0.0, abs=1e-6)


def test_split_columns_reassemble_the_central_response():
    """Columns cut from a central result rebuild it and carry its margin."""
    s = _coupled_pair()
    central = two_phase_solve(_central(s), "highs")
    columns = split_columns(central, s.model)
    assert [r.node for r in columns] == [0, 1]
    assert all(r.lambda_ == central.lambda_ for r in columns)
    assert columns[1].solve_seconds == 0.0
    assembled = BlockResponse.from_columns(s.model, [r.column for r in columns])
    np.testing.assert_array_equal(assembled.R, central.response.R)
    np.testing.assert_array_equal(assembled.M, central.response.M)
    with pytest.raises(ValueError):
        split_columns(columns[0], s.model)


def test_node_variable_count_matches_support():
    """Node 3 of the radius-1 chain has exactly 21 free entries."""
    s = point_prior(chain5_scenario(local_radius=1))
    req = SynthesisRequest.for_node(s, 2, enumerate_vertices(s.prior))
    assert free_variable_count(req) == 21
    lp = build_node(req)
    assert lp.n_variables > 21
    with pytest.raises(ValueError):
        build_central(req)
    with pytest.raises(ValueError):
        build_node(_central(s))


def test_node_solution_passes_its_own_conditions():
    """A freshly synthesized column satisfies the localized conditions at t = 0."""
    s = point_prior(chain5_scenario(local_radius=1))
    req = SynthesisRequest.for_node(s, 0, enumerate_vertices(s.prior))
    result = two_phase_solve(req, "highs")
    assert result.r.shape == (8, 5, 1) and result.m.shape == (8, 2, 1)
    np.testing.assert_allclose(result.r[0, :, 0], [1.0, 0.0, 0.0, 0.0, 0.0])
    assert result.lambda_ == pytest.approx(result.c * geometric_gain(0.7, 8))
    passed, slack = verify_distributed_conditions(
        s.model,
        s.topology,
        0,
        [result.column],
        np.zeros((0, 1)),
        req.plants,
        s.rho,
        result.c,
        s.m1[0],
        s.m2[0],
        lam=result.lambda_,
    )
    assert passed and slack >= -1e-7
    with pytest.raises(ValueError):
        _ = result.response


def test_node_columns_respect_the_support():
    """Entries outside the local region and before the delay stay zero."""
    s = point_prior(chain5_scenario(local_radius=1))
    req = SynthesisRequest.for_node(s, 0, enumerate_vertices(s.prior))
    result = two_phase_solve(req, "highs")
    np.testing.assert_array_equal(result.r[:, 2:, 0], 0.0)
    np.testing.assert_array_equal(result.m[:, 1, 0], 0.0)


def test_previous_solution_stays_feasible_on_a_smaller_set():
    """Shrinking the vertex set never invalidates the previous solution."""
    s = scalar_scenario(a=1.2, a_range=(1.0, 1.5), b_range=(0.5, 1.5))
    result = two_phase_solve(_central(s), "highs")
    shrunk = SynthesisRequest.central(s, np.array([[1.2, 1.0], [1.3, 0.9]]))
    assert previous_is_feasible(shrunk, result) <= 1e-12


def test_adaptation_bound_limits_the_change():
    """With m_a = 0 and a nonzero history the new R(k+1)δ̂ equals the old one."""
    s = scalar_scenario(a=1.2, a_range=(1.0, 1.5), b_range=(0.5, 1.5), m_a=0.0)
    first = two_phase_solve(_central(s), "highs")
    history = np.array([[1.0]])
    narrow = SynthesisRequest.central(
        s,
        np.array([[1.2, 1.0]]),
        previous=first.response,
        delta_history=history,
        t=1,
    )
    second = two_phase_solve(narrow, "highs")
    np.testing.assert_allclose(second.r[1] @ history[0], first.r[1] @ history[0],
                               atol=1e-7)


def test_programs_are_dumped(tmp_path):
    """Both phases write their program when a dump directory is given."""
    s = scalar_scenario(a_range=(0.4, 0.6))
    two_phase_solve(_central(s), "highs", tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [
        "lp_central_t0_performance.txt",
        "lp_central_t0_robustness.txt",
    ]


def test_infeasible_robustness_program_raises(monkeypatch):
    """An infeasible first phase is an error, not a silent fallback."""
    monkeypatch.setattr(
        synthesis,
        "solve",
        lambda lp, method=None: LpSolution(LpStatus.INFEASIBLE, np.zeros(0), math.nan),
    )
    with pytest.raises(InfeasibleSynthesisError, match="central"):
        two_phase_solve(_central(scalar_scenario()))


def test_cost_objective_needs_the_cap():
    """The performance program bounds λ by λ* through the margin variable."""
    s = scalar_scenario(a_range=(0.4, 0.6))
    lp = build_central(_central(s), Objective.COST)
    assert any(hi == pytest.approx(0.95) for _, hi in lp.variable_bounds)


def test_parallel_node_synthesis_keeps_order():
    """Worker threads return results in request order."""
    s = point_prior(chain5_scenario(local_radius=1))
    vertices = enumerate_vertices(s.prior)
    requests = [SynthesisRequest.for_node(s, i, vertices) for i in range(5)]
    results = synthesize_nodes(requests, workers=3, method="highs")
    assert [r.node for r in results] == list(range(5))


def test_request_validation():
    """Vertex width and node requests are checked on construction."""
    s = scalar_scenario()
    with pytest.raises(ValueError):
        SynthesisRequest.central(s, np.zeros((1, 3)))
    with pytest.raises(ValueError, match="topology"):
        SynthesisRequest(
            model=s.model,
            vertices=np.array([[0.5, 1.0]]),
            horizon=2,
            norm="linf",
            lambda_star=0.9,
            cost=s.cost,
            node=0,
        )
