import json

import numpy as np
import pytest

from sls_adapt.trace import (
    CSV_NAME,
    SIDECAR_NAME,
    CorruptTraceError,
    SimulationTrace,
    read_trace,
    write_trace,
)


def _trace(steps: int = 3, n_margins: int = 2) -> SimulationTrace:
    rng = np.random.default_rng(0)
    rows = steps + 1
    return SimulationTrace(
        algorithm="dlar",
        seed=11,
        x=rng.normal(size=(rows, 2)),
        u=rng.normal(size=(rows, 1)),
        w=rng.normal(size=(rows, 2)) / 3.0,
        v=np.zeros((rows, 2)),
        delta=rng.normal(size=(rows, 2)),
        w_hat=rng.normal(size=(rows, 2)),
        lambdas=rng.uniform(size=(rows, n_margins)),
        phases=[["robustness", "performance"][:n_margins] for _ in range(rows)],
        mu=rng.uniform(size=rows),
        mu_applied=rng.uniform(size=rows),
        adapt=np.full(rows, np.nan),
        r_sum=rng.uniform(1.0, 2.0, size=rows),
        synth_seconds=rng.uniform(size=rows),
        recursive_feasibility=[0.0, 1e-12],
        snapshots=[{"t": 0, "node": 0, "normals": [[1.0]], "offsets": [0.5]}],
        bus={"sent": 4, "delivered": 4},
        summary={"steps": steps},
        scenario={"builtin": "chain5"},
        scenario_hash="abc",
    )


def test_columns_follow_families_and_margins():
    """The header lists every vector entry, one λ and phase per margin."""
    columns = _trace().columns()
    assert columns[:3] == ["t", "x_1", "x_2"]
    assert "u_1" in columns and "w_hat_2" in columns
    assert columns[-2:] == ["phase_1", "phase_2"]
    assert "lambda_2" in columns and "mu_applied" in columns


def test_write_then_read_is_exact(tmp_path):
    """Every float survives the CSV, NaN included."""
    trace = _trace()
    write_trace(trace, tmp_path / "run")
    again = read_trace(tmp_path / "run")
    for name in ("x", "u", "w", "v", "delta", "w_hat", "lambdas", "mu", "r_sum"):
        np.testing.assert_array_equal(getattr(again, name), getattr(trace, name))
    assert np.isnan(again.adapt).all()
    assert again.phases == trace.phases
    assert again.steps == 3 and again.n_margins == 2
    assert again.snapshots == trace.snapshots
    assert again.bus == trace.bus
    assert (again.algorithm, again.seed, again.scenario_hash) == ("dlar", 11, "abc")


def test_missing_files_are_corrupt(tmp_path):
    """A directory without the sidecar cannot be read."""
    with pytest.raises(CorruptTraceError, match="Missing"):
        read_trace(tmp_path)


def test_unknown_version_is_corrupt(tmp_path):
    """Traces of another version are refused."""
    write_trace(_trace(), tmp_path)
    meta = json.loads((tmp_path / SIDECAR_NAME).read_text())
    meta["trace_version"] = 99
    (tmp_path / SIDECAR_NAME).write_text(json.dumps(meta))
    with pytest.raises(CorruptTraceError, match="trace_version"):
        read_trace(tmp_path)


def test_malformed_sidecar_reports_position(tmp_path):
    """Broken JSON in the sidecar carries line and column."""
    write_trace(_trace(), tmp_path)
    (tmp_path / SIDECAR_NAME).write_text('{"trace_version": 1,\n')
    with pytest.raises(CorruptTraceError, match="line 2"):
        read_trace(tmp_path)


def test_header_must_match_dimensions(tmp_path):
    """A trace with fewer columns than the sidecar declares is refused."""
    write_trace(_trace(n_margins=1), tmp_path)
    meta = json.loads((tmp_path / SIDECAR_NAME).read_text())
    meta["n_margins"] = 2
    (tmp_path / SIDECAR_NAME).write_text(json.dumps(meta))
    with pytest.raises(CorruptTraceError, match="columns"):
        read_trace(tmp_path)


@pytest.mark.parametrize("bad", ["not-a-number", ""])
def test_unparsable_values_are_corrupt(tmp_path, bad):
    """Garbage in a numeric cell is reported instead of raising ValueError."""
    write_trace(_trace(), tmp_path)
    lines = (tmp_path / CSV_NAME).read_text().splitlines()
    cells = lines[2].split(",")
    cells[1] = bad
    lines[2] = ",".join(cells)
    (tmp_path / CSV_NAME).write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptTraceError):
        read_trace(tmp_path)


def test_rows_out_of_order_are_corrupt(tmp_path):
    """Row indices must count up from zero."""
    write_trace(_trace(), tmp_path)
    lines = (tmp_path / CSV_NAME).read_text().splitlines()
    lines[1], lines[2] = lines[2], lines[1]
    (tmp_path / CSV_NAME).write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptTraceError, match="Malformed row"):
        read_trace(tmp_path)
