import json

import numpy as np
import pytest

from sls_adapt import service
from sls_adapt.model import Topology
from sls_adapt.scenario import (
    DisturbanceKind,
    ScenarioError,
    chain5_scenario,
    save_scenario,
    scalar_scenario,
)
from sls_adapt.trace import CSV_NAME, SimulationTrace, read_trace, write_trace


def _uncertain_scalar(**overrides):
    return scalar_scenario(
        a=1.2, a_range=(1.0, 1.5), b_range=(0.5, 1.5), **{"steps": 12, **overrides}
    )


@pytest.fixture
def central_run(tmp_path):
    """A short central run on the uncertain scalar plant, written to disk."""
    path = save_scenario(_uncertain_scalar(), tmp_path / "scalar.json")
    run = service.RunConfig(
        scenario=str(path),
        output_dir=tmp_path / "run",
        algorithm=service.Algorithm.CENTRAL,
    )
    return service.execute_run(run)


def test_execute_run_writes_the_trace_and_summary(central_run):
    """The run directory holds the CSV, the sidecar and the summary."""
    directory = central_run.directory
    assert (directory / CSV_NAME).exists()
    summary = json.loads((directory / service.SUMMARY_NAME).read_text())
    assert summary["steps"] == 12
    assert summary == central_run.summary
    assert central_run.trace.algorithm == "central"


def test_fresh_trace_passes_the_audit(central_run):
    """Every required property holds on an untouched run."""
    report = service.audit_trace(central_run.directory)
    assert report.ok
    assert report.get("plant recursion").verdict is service.Verdict.PASS
    assert report.get("state envelope").verdict is service.Verdict.PASS
    assert report.get("robustness").verdict is service.Verdict.PASS
    assert report.get("causality").detail == "no message bus"
    bound = report.get("aggregate δ̂ bound")
    assert bound.verdict is service.Verdict.PASS and bound.required


def test_inflated_delta_breaks_the_aggregate_bound(central_run):
    """A δ̂ spike is caught by the one-step bound at its own step."""
    trace = central_run.trace
    trace.delta[5] += 100.0
    result = service.check_aggregate_bound(trace, central_run.scenario)
    assert result.verdict is service.Verdict.FAIL and result.required
    assert "step 5" in result.detail


def _two_step_chain_trace(algorithm):
    steps, n = 1, 5
    zeros = np.zeros((steps + 1, n))
    delta = zeros.copy()
    delta[0, 0] = 1.0
    delta[1] = 0.4
    return SimulationTrace(
        algorithm=algorithm,
        seed=0,
        x=zeros.copy(),
        u=np.zeros((steps + 1, 2)),
        w=zeros.copy(),
        v=zeros.copy(),
        delta=delta,
        w_hat=zeros.copy(),
        lambdas=np.full((steps + 1, n), 0.5),
        phases=[["1"] * n] * (steps + 1),
        mu=np.zeros(steps + 1),
        mu_applied=np.zeros(steps + 1),
        adapt=np.zeros(steps + 1),
        r_sum=np.zeros(steps + 1),
        synth_seconds=np.zeros((steps + 1, n)),
    )


def test_aggregate_bound_follows_the_run_kind():
    """Per-node sums bind distributed runs; the global norm binds the rest."""
    s = chain5_scenario(steps=1)
    per_node = service.check_aggregate_bound(_two_step_chain_trace("dlar"), s)
    assert per_node.verdict is service.Verdict.FAIL
    assert "step 1" in per_node.detail
    central = service.check_aggregate_bound(_two_step_chain_trace("central"), s)
    assert central.verdict is service.Verdict.PASS
    shared = s.replace(topology=Topology.full(5))
    result = service.check_aggregate_bound(_two_step_chain_trace("dlar"), shared)
    assert result.verdict is service.Verdict.PASS


def test_edited_state_row_fails_the_plant_recursion(central_run):
    """Changing x_3 breaks the recursion at the step that produced it."""
    trace = read_trace(central_run.directory)
    trace.x[3] += 0.5
    write_trace(trace, central_run.directory)
    report = service.audit_trace(central_run.directory)
    assert not report.ok
    result = report.get("plant recursion")
    assert result.verdict is service.Verdict.FAIL
    assert result.detail.endswith("at step 3")


def test_margins_may_not_grow_past_lambda_star(central_run):
    """A λ jump above max(previous λ, λ*) is reported with its step."""
    trace = central_run.trace
    trace.lambdas[4] = 5.0
    result = service.check_monotone_margins(trace, central_run.scenario)
    assert result.verdict is service.Verdict.FAIL
    assert "step 4" in result.detail


def test_bus_counters_must_add_up(central_run):
    """Sent messages are either delivered or still in flight."""
    trace = central_run.trace
    trace.bus = {"sent": 3, "delivered": 1, "in_flight": 1, "early_reads": 0}
    result = service.check_causality(trace, central_run.scenario)
    assert result.verdict is service.Verdict.FAIL
    trace.bus = {"sent": 3, "delivered": 2, "in_flight": 1, "early_reads": 2}
    result = service.check_causality(trace, central_run.scenario)
    assert result.detail == "2 early reads"


def test_quiet_exact_run_settles(tmp_path):
    """Without disturbances and with the true parameters δ̂ vanishes after the start."""
    scenario = scalar_scenario(
        disturbance_kind=DisturbanceKind.ZERO, lambda_star=0.0, steps=6
    )
    path = save_scenario(scenario, tmp_path / "quiet.json")
    outcome = service.execute_run(
        service.RunConfig(
            scenario=str(path), output_dir=tmp_path / "run", algorithm="central"
        )
    )
    np.testing.assert_allclose(outcome.trace.delta[1:], 0.0, atol=1e-6)
    report = service.audit_trace(outcome.directory)
    assert report.get("δ̂ settling").verdict is service.Verdict.PASS
    assert report.ok


def test_uncertain_run_skips_the_settling_check(central_run):
    """δ̂ settling is only judged on exact, noise-free runs."""
    result = service.check_delta_settling(central_run.trace, central_run.scenario)
    assert result.verdict is service.Verdict.SKIP


def test_prepare_scenario_applies_overrides(tmp_path):
    """Seed, steps and the exact prior override the file."""
    path = save_scenario(_uncertain_scalar(), tmp_path / "s.json")
    scenario = service.prepare_scenario(str(path), seed=9, steps=3, exact_prior=True)
    assert (scenario.seed, scenario.steps) == (9, 3)
    np.testing.assert_allclose(scenario.prior.offsets[:2], [1.2, 1.0])
    with pytest.raises(ScenarioError):
        service.prepare_scenario(str(path), steps=-1)


def test_run_config_requires_a_scenario():
    """An empty scenario name is a configuration error."""
    with pytest.raises(ScenarioError):
        service.RunConfig(scenario=" ")


def test_execute_synth_reports_every_problem(tmp_path):
    """Central synthesis gives one row and node synthesis one row per node."""
    path = save_scenario(_uncertain_scalar(), tmp_path / "s.json")
    central = service.execute_synth(str(path), service.Algorithm.CENTRAL)
    assert [row.label for row in central] == ["central"]
    assert central[0].n_variables > 0
    point = service.execute_synth(
        str(path), service.Algorithm.DLAR, service.SynthesisPoint.POINT
    )
    assert [row.label for row in point] == ["node 1"]
    assert point[0].robust_lambda == pytest.approx(0.0, abs=1e-7)


def test_global_eta_hat_without_noise_is_eta():
    """Without measurement noise the ŵ bound is η itself."""
    assert service.global_eta_hat(_uncertain_scalar()) == pytest.approx(0.1)
    noisy = _uncertain_scalar(noise_bound=0.01)
    assert service.global_eta_hat(noisy) == pytest.approx(0.1 + 2.5 * 0.01)
