"""
Simulation traces: one CSV row per step plus a JSON sidecar.

Floats are written with `repr`, so reading a trace back reproduces every
value bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from sls_adapt.exceptions import SlsAdaptError

logger = logging.getLogger(__name__)

TRACE_VERSION = 1
CSV_NAME = "trace.csv"
SIDECAR_NAME = "trace.json"

_VECTOR_FAMILIES = ("x", "u", "w", "v", "delta", "w_hat")
_SCALAR_COLUMNS = ("mu", "mu_applied", "adapt", "r_sum", "synth_seconds")


class CorruptTraceError(SlsAdaptError):
    """Raised when trace files are missing, malformed or of another version."""

    pass


@dataclass
class SimulationTrace:
    """
    Per-step records for t = 0..steps. Row t holds x_t, the input u_t and
    the disturbance w_t applied in the transition to t + 1 (zero in the
    last row), the noise v_t, δ̂_t and ŵ_t.

    `lambdas` has one column per node for distributed runs and a single
    column otherwise. `mu` is the true margin of the latest synthesized
    blocks; `mu_applied` and `adapt` are the margin and the adaptation
    residual of the response actually applied, and `r_sum` is Σ_k ‖R̂_t(k)‖.
    """

    algorithm: str
    seed: int
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    v: np.ndarray
    delta: np.ndarray
    w_hat: np.ndarray
    lambdas: np.ndarray
    phases: List[List[str]]
    mu: np.ndarray
    mu_applied: np.ndarray
    adapt: np.ndarray
    r_sum: np.ndarray
    synth_seconds: np.ndarray
    recursive_feasibility: List[float] = field(default_factory=list)
    snapshots: List[dict] = field(default_factory=list)
    responses: Optional[dict] = None
    bus: Dict[str, int] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    scenario: Optional[dict] = None
    scenario_hash: str = ""
    plant_schedule: Optional[List[List[float]]] = None
    applied: Optional[list] = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return self.x.shape[0] - 1

    @property
    def n_margins(self) -> int:
        return self.lambdas.shape[1]

    def columns(self) -> List[str]:
        names = ["t"]
        for family in _VECTOR_FAMILIES:
            width = getattr(self, family).shape[1]
            names += [f"{family}_{k + 1}" for k in range(width)]
        names += [f"lambda_{k + 1}" for k in range(self.n_margins)]
        names += list(_SCALAR_COLUMNS)
        names += [f"phase_{k + 1}" for k in range(self.n_margins)]
        return names

    def metadata(self) -> dict:
        return {
            "trace_version": TRACE_VERSION,
            "algorithm": self.algorithm,
            "seed": self.seed,
            "scenario_hash": self.scenario_hash,
            "scenario": self.scenario,
            "dims": {family: int(getattr(self, family).shape[1])
                     for family in _VECTOR_FAMILIES},
            "n_margins": self.n_margins,
            "snapshots": self.snapshots,
            "responses": self.responses,
            "recursive_feasibility": [float(v) for v in self.recursive_feasibility],
            "bus": self.bus,
            "summary": self.summary,
            "plant_schedule": self.plant_schedule,
        }


def write_trace(trace: SimulationTrace, directory: Union[str, Path]) -> Path:
    """Writes trace.csv and trace.json into `directory` (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / CSV_NAME, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(trace.columns())
        for t in range(trace.steps + 1):
            row: List[str] = [str(t)]
            for family in _VECTOR_FAMILIES:
                row += [repr(float(v)) for v in getattr(trace, family)[t]]
            row += [repr(float(v)) for v in trace.lambdas[t]]
            row += [repr(float(getattr(trace, name)[t])) for name in _SCALAR_COLUMNS]
            row += list(trace.phases[t])
            writer.writerow(row)
    (directory / SIDECAR_NAME).write_text(json.dumps(trace.metadata(), indent=2))
    logger.info("Trace written to %s", directory)
    return directory


def read_trace(directory: Union[str, Path]) -> SimulationTrace:
    """
    Reads a trace written by `write_trace`.

    Raises:
        CorruptTraceError: If a file is missing or unparsable, the version is
            unknown, or the CSV columns disagree with the sidecar.
    """
    directory = Path(directory)
    try:
        meta = json.loads((directory / SIDECAR_NAME).read_text())
        with open(directory / CSV_NAME, newline="") as handle:
            rows = list(csv.reader(handle))
    except FileNotFoundError as e:
        raise CorruptTraceError(f"Missing trace file: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise CorruptTraceError(
            f"{SIDECAR_NAME}: line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    if meta.get("trace_version") != TRACE_VERSION:
        raise CorruptTraceError(
            f"Unsupported trace_version {meta.get('trace_version')!r}."
        )
    if not rows:
        raise CorruptTraceError(f"{CSV_NAME} is empty.")
    try:
        dims = {family: int(meta["dims"][family]) for family in _VECTOR_FAMILIES}
        n_margins = int(meta["n_margins"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptTraceError(f"Sidecar is missing dimension data: {e}") from e

    header, body = rows[0], rows[1:]
    shell = _empty_trace(meta, dims, n_margins, len(body))
    if header != shell.columns():
        raise CorruptTraceError("CSV columns do not match the sidecar dimensions.")
    try:
        for t, row in enumerate(body):
            if len(row) != len(header) or int(row[0]) != t:
                raise CorruptTraceError(f"Malformed row for t={t}.")
            pos = 1
            for family in _VECTOR_FAMILIES:
                width = dims[family]
                getattr(shell, family)[t] = [float(v) for v in row[pos:pos + width]]
                pos += width
            shell.lambdas[t] = [float(v) for v in row[pos:pos + n_margins]]
            pos += n_margins
            for name in _SCALAR_COLUMNS:
                getattr(shell, name)[t] = float(row[pos])
                pos += 1
            shell.phases.append(list(row[pos:pos + n_margins]))
    except ValueError as e:
        raise CorruptTraceError(f"Unparsable value in {CSV_NAME}: {e}") from e
    return shell


def _empty_trace(meta: dict, dims: dict, n_margins: int, n_rows: int):
    arrays = {family: np.zeros((n_rows, dims[family])) for family in _VECTOR_FAMILIES}
    return SimulationTrace(
        algorithm=str(meta.get("algorithm", "")),
        seed=int(meta.get("seed", 0)),
        lambdas=np.zeros((n_rows, n_margins)),
        phases=[],
        mu=np.zeros(n_rows),
        mu_applied=np.zeros(n_rows),
        adapt=np.zeros(n_rows),
        r_sum=np.zeros(n_rows),
        synth_seconds=np.zeros(n_rows),
        recursive_feasibility=list(meta.get("recursive_feasibility", [])),
        snapshots=list(meta.get("snapshots", [])),
        responses=meta.get("responses"),
        bus=dict(meta.get("bus", {})),
        summary=dict(meta.get("summary", {})),
        scenario=meta.get("scenario"),
        scenario_hash=str(meta.get("scenario_hash", "")),
        plant_schedule=meta.get("plant_schedule"),
        **arrays,
    )
