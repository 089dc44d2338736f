"""
Scenarios: a structured plant with its topology, prior knowledge, controller
settings and simulation settings, plus the JSON form they are stored in.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np

from sls_adapt.exceptions import SlsAdaptError
from sls_adapt.lpcore import NormKind, UnsupportedNormError
from sls_adapt.model import (
    StructuredModel,
    Topology,
    chain_delays,
    radius_regions,
)
from sls_adapt.polytope import HalfspacePolytope, membership

logger = logging.getLogger(__name__)

CHAIN5_TRUE_ALPHA = (0.3, 0.6, 0.2, 1.0, -1.0)
CHAIN5_LOWER = (0.1, 0.0, 0.1, 0.2, -1.0)
CHAIN5_UPPER = (0.5, 1.0, 0.5, 1.0, -0.2)
BUILTINS = ("chain5",)


class ScenarioError(SlsAdaptError, ValueError):
    """Raised when a scenario document is malformed or inconsistent."""

    pass


class DisturbanceKind(enum.Enum):
    UNIFORM_BOX = "uniform_box"
    ADVERSARIAL_VERTEX = "adversarial_vertex"
    ZERO = "zero"


def default_cost(n_states: int, n_inputs: int) -> Tuple[np.ndarray, np.ndarray]:
    """C = [I; 0] and D = [0; 0.1·I]."""
    c = np.vstack([np.eye(n_states), np.zeros((n_inputs, n_states))])
    d = np.vstack([np.zeros((n_states, n_inputs)), 0.1 * np.eye(n_inputs)])
    return c, d


def _per_node(value, n: int, name: str) -> Tuple[float, ...]:
    values = np.broadcast_to(np.asarray(value, dtype=float), (n,))
    if np.any(values < 0):
        raise ScenarioError(f"{name} must be nonnegative.")
    return tuple(float(v) for v in values)


@dataclass(frozen=True, eq=False)
class Scenario:
    model: StructuredModel
    topology: Topology
    prior: HalfspacePolytope
    eta: float
    true_alpha: np.ndarray
    x0: np.ndarray
    horizon_T: int = 8
    rho: float = 0.7
    norm: NormKind = NormKind.MAX_ABS
    noise_bound: float = 0.0
    lambda_star: float = 0.95
    m_a: Optional[float] = None
    m1: Any = None
    m2: Any = None
    cost: Optional[Tuple[np.ndarray, np.ndarray]] = None
    steps: int = 200
    seed: int = 0
    disturbance_kind: DisturbanceKind = DisturbanceKind.UNIFORM_BOX
    resynth_period: int = 1
    reduce_every: int = 25
    snapshot_period: int = 10

    def __post_init__(self):
        model = self.model
        n = model.n_nodes
        set_ = lambda name, value: object.__setattr__(self, name, value)  # noqa: E731
        if self.eta < 0:
            raise ScenarioError("eta must be nonnegative.")
        if self.noise_bound < 0:
            raise ScenarioError("noise_bound must be nonnegative.")
        if not 0.0 < self.rho < 1.0:
            raise ScenarioError("rho must lie strictly between 0 and 1.")
        if int(self.horizon_T) < 2:
            raise ScenarioError("horizon_T must be at least 2.")
        if int(self.steps) < 0 or int(self.resynth_period) < 1:
            raise ScenarioError("steps must be >= 0 and resynth_period >= 1.")
        if int(self.snapshot_period) < 1 or int(self.reduce_every) < 1:
            raise ScenarioError("snapshot_period and reduce_every must be >= 1.")
        true_alpha = np.asarray(self.true_alpha, dtype=float).ravel()
        if true_alpha.size != model.p:
            raise ScenarioError(
                f"true_alpha has {true_alpha.size} entries, model has p={model.p}."
            )
        if self.prior.dim != model.p:
            raise ScenarioError(f"prior has dim {self.prior.dim}, expected {model.p}.")
        if not membership(self.prior, true_alpha):
            raise ScenarioError("true_alpha is not inside the prior polytope.")
        x0 = np.asarray(self.x0, dtype=float).ravel()
        if x0.size != model.n_states:
            raise ScenarioError(
                f"x0 has {x0.size} entries, the plant has {model.n_states} states."
            )
        try:
            norm = NormKind.parse(self.norm)
        except UnsupportedNormError as e:
            raise ScenarioError(str(e)) from e
        cost = self.cost or default_cost(model.n_states, model.n_inputs)
        c = np.atleast_2d(np.asarray(cost[0], dtype=float))
        d = np.asarray(cost[1], dtype=float).reshape(c.shape[0], model.n_inputs)
        if c.shape[1] != model.n_states:
            raise ScenarioError(f"cost C must have {model.n_states} columns.")
        set_("true_alpha", true_alpha)
        set_("x0", x0)
        set_("norm", norm)
        set_("cost", (c, d))
        set_("horizon_T", int(self.horizon_T))
        set_("steps", int(self.steps))
        set_("disturbance_kind", DisturbanceKind(self.disturbance_kind))
        set_("m_a", 0.1 * self.eta if self.m_a is None else float(self.m_a))
        set_("m1", _per_node(0.05 * self.eta if self.m1 is None else self.m1, n, "m1"))
        set_("m2", _per_node(0.05 * self.eta if self.m2 is None else self.m2, n, "m2"))
        self.topology.validate(model)

    def replace(self, **changes) -> Scenario:
        return dataclasses.replace(self, **changes)


def _chain_model(n: int = 5) -> StructuredModel:
    p = 5
    basis_A = {}
    edges = set()
    for j in range(n):
        for i, s in ((j - 1, 0), (j, 1), (j + 1, 2)):
            if 0 <= i < n:
                stack = np.zeros((p, 1, 1))
                stack[s, 0, 0] = 1.0
                basis_A[(j, i)] = stack
                edges.add((j, i))
    basis_B = {}
    input_dims = [0] * n
    for j, s in ((0, 3), (n - 1, 4)):
        stack = np.zeros((p, 1, 1))
        stack[s, 0, 0] = 1.0
        basis_B[j] = stack
        input_dims[j] = 1
    return StructuredModel(
        state_dims=(1,) * n,
        input_dims=tuple(input_dims),
        edges=frozenset(edges),
        basis_A=basis_A,
        basis_B=basis_B,
        p=p,
    )


def chain5_scenario(
    true_alpha: Optional[Sequence[float]] = None,
    local_radius: Optional[int] = None,
    **overrides,
) -> Scenario:
    """
    The five-node chain: scalar nodes, actuators at both ends, a tridiagonal
    A with α₁ below, α₂ on and α₃ above the diagonal, B entries α₄ and α₅,
    delays |i - j|.

    Args:
        true_alpha: Ground truth; defaults to (0.3, 0.6, 0.2, 1.0, -1.0).
        local_radius: Radius of the local and send regions; None puts every
            node in every region.
        **overrides: Any other Scenario field.
    """
    n = 5
    regions = radius_regions(n, local_radius)
    fields = dict(
        model=_chain_model(n),
        topology=Topology(chain_delays(n), regions, regions),
        prior=HalfspacePolytope.box(CHAIN5_LOWER, CHAIN5_UPPER),
        eta=0.5,
        true_alpha=np.asarray(
            CHAIN5_TRUE_ALPHA if true_alpha is None else true_alpha, dtype=float
        ),
        x0=np.array([0.0, 3.0, 3.0, 3.0, 0.0]),
        horizon_T=8,
        rho=0.7,
        norm=NormKind.MAX_ABS,
    )
    fields.update(overrides)
    return Scenario(**fields)


def scalar_scenario(
    a: float = 0.5,
    b: float = 1.0,
    a_range: Optional[Tuple[float, float]] = None,
    b_range: Optional[Tuple[float, float]] = None,
    **overrides,
) -> Scenario:
    """
    One scalar node x⁺ = a x + b u + w with α = (a, b). Without ranges the
    prior is the exact point (a, b).
    """
    basis_A = {(0, 0): np.array([[[1.0]], [[0.0]]])}
    basis_B = {0: np.array([[[0.0]], [[1.0]]])}
    model = StructuredModel((1,), (1,), frozenset({(0, 0)}), basis_A, basis_B, 2)
    lo = (a_range or (a, a))[0], (b_range or (b, b))[0]
    hi = (a_range or (a, a))[1], (b_range or (b, b))[1]
    fields = dict(
        model=model,
        topology=Topology.full(1),
        prior=HalfspacePolytope.box(lo, hi),
        eta=0.1,
        true_alpha=np.array([a, b]),
        x0=np.array([1.0]),
        horizon_T=2,
        rho=0.5,
        norm=NormKind.MAX_ABS,
        steps=20,
    )
    fields.update(overrides)
    return Scenario(**fields)


def point_prior(scenario: Scenario) -> Scenario:
    """The perfect-knowledge variant: the prior is the single point true_alpha."""
    return scenario.replace(
        prior=HalfspacePolytope.box(scenario.true_alpha, scenario.true_alpha)
    )


# --- JSON -----------------------------------------------------------------

_TOP_KEYS = {
    "builtin", "model", "topology", "prior", "eta", "true_alpha", "x0",
    "horizon_T", "rho", "norm", "noise_bound", "lambda_star", "m_a", "m1", "m2",
    "cost", "steps", "seed", "disturbance_kind", "resynth_period",
    "reduce_every", "snapshot_period",
}
_MODEL_KEYS = {"state_dims", "input_dims", "p", "basis_A", "basis_B"}
_TOPOLOGY_KEYS = {"delays", "send_regions", "local_regions"}


def _reject_unknown(data: dict, allowed: set, path: str):
    if not isinstance(data, dict):
        raise ScenarioError(f"{path or 'scenario'}: expected an object.")
    unknown = sorted(set(data) - allowed)
    if unknown:
        prefix = f"{path}." if path else ""
        raise ScenarioError(f"Unknown field '{prefix}{unknown[0]}'.")


def _field(data: dict, key: str, path: str, convert):
    try:
        return convert(data[key])
    except KeyError as e:
        raise ScenarioError(f"Missing field '{path}{key}'.") from e
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"Invalid value for '{path}{key}': {e}") from e


def _model_from_json(data: dict) -> StructuredModel:
    _reject_unknown(data, _MODEL_KEYS, "model")
    p = _field(data, "p", "model.", int)
    basis_A, edges = {}, set()
    for k, entry in enumerate(_field(data, "basis_A", "model.", list)):
        _reject_unknown(entry, {"to", "from", "matrices"}, f"model.basis_A[{k}]")
        key = (
            _field(entry, "to", f"model.basis_A[{k}].", int),
            _field(entry, "from", f"model.basis_A[{k}].", int),
        )
        basis_A[key] = _field(entry, "matrices", f"model.basis_A[{k}].", np.asarray)
        edges.add(key)
    basis_B = {}
    for k, entry in enumerate(data.get("basis_B", [])):
        _reject_unknown(entry, {"node", "matrices"}, f"model.basis_B[{k}]")
        node = _field(entry, "node", f"model.basis_B[{k}].", int)
        basis_B[node] = _field(entry, "matrices", f"model.basis_B[{k}].", np.asarray)
    try:
        return StructuredModel(
            state_dims=_field(data, "state_dims", "model.", tuple),
            input_dims=_field(data, "input_dims", "model.", tuple),
            edges=frozenset(edges),
            basis_A=basis_A,
            basis_B=basis_B,
            p=p,
        )
    except ValueError as e:
        raise ScenarioError(f"model: {e}") from e


def _topology_from_json(data: dict) -> Topology:
    _reject_unknown(data, _TOPOLOGY_KEYS, "topology")
    try:
        return Topology(
            delays=_field(data, "delays", "topology.", np.asarray),
            send_regions=_field(data, "send_regions", "topology.", list),
            local_regions=_field(data, "local_regions", "topology.", list),
        )
    except ValueError as e:
        raise ScenarioError(f"topology: {e}") from e


def scenario_from_json(data: dict) -> Scenario:
    """
    Builds a scenario from its JSON object.

    Raises:
        ScenarioError: For unknown keys, missing or invalid fields.
        AssumptionViolationError: If the topology violates the delay assumption.
    """
    _reject_unknown(data, _TOP_KEYS, "")
    fields: dict = {}
    builtin = data.get("builtin")
    if builtin is not None and builtin not in BUILTINS:
        raise ScenarioError(f"Unknown builtin scenario {builtin!r}.")
    if "model" in data:
        fields["model"] = _model_from_json(data["model"])
    if "topology" in data:
        fields["topology"] = _topology_from_json(data["topology"])
    if "prior" in data:
        _reject_unknown(data["prior"], {"normals", "offsets"}, "prior")
        try:
            fields["prior"] = HalfspacePolytope.from_json(data["prior"])
        except ValueError as e:
            raise ScenarioError(f"prior: {e}") from e
    converters = {
        "eta": float, "noise_bound": float, "lambda_star": float, "rho": float,
        "m_a": float, "horizon_T": int, "steps": int, "seed": int,
        "resynth_period": int, "reduce_every": int, "snapshot_period": int,
        "true_alpha": np.asarray, "x0": np.asarray, "m1": np.asarray,
        "m2": np.asarray, "norm": str, "disturbance_kind": DisturbanceKind,
    }
    for key, convert in converters.items():
        if key in data:
            fields[key] = _field(data, key, "", convert)
    if "cost" in data:
        _reject_unknown(data["cost"], {"C", "D"}, "cost")
        fields["cost"] = (
            _field(data["cost"], "C", "cost.", np.asarray),
            _field(data["cost"], "D", "cost.", np.asarray),
        )
    try:
        if builtin == "chain5":
            return chain5_scenario(**fields)
        missing = [
            k for k in ("model", "topology", "prior", "eta", "true_alpha", "x0")
            if k not in fields
        ]
        if missing:
            raise ScenarioError(f"Missing field '{missing[0]}'.")
        return Scenario(**fields)
    except TypeError as e:
        raise ScenarioError(str(e)) from e


def scenario_to_json(s: Scenario) -> dict:
    model = s.model
    return {
        "model": {
            "state_dims": list(model.state_dims),
            "input_dims": list(model.input_dims),
            "p": model.p,
            "basis_A": [
                {"to": j, "from": i, "matrices": model.basis_A[(j, i)].tolist()}
                for j, i in sorted(model.basis_A)
            ],
            "basis_B": [
                {"node": j, "matrices": model.basis_B[j].tolist()}
                for j in sorted(model.basis_B)
                if model.input_dims[j] > 0
            ],
        },
        "topology": {
            "delays": s.topology.delays.tolist(),
            "send_regions": [sorted(r) for r in s.topology.send_regions],
            "local_regions": [sorted(r) for r in s.topology.local_regions],
        },
        "prior": s.prior.to_json(),
        "eta": s.eta,
        "true_alpha": s.true_alpha.tolist(),
        "x0": s.x0.tolist(),
        "horizon_T": s.horizon_T,
        "rho": s.rho,
        "norm": s.norm.value,
        "noise_bound": s.noise_bound,
        "lambda_star": s.lambda_star,
        "m_a": s.m_a,
        "m1": list(s.m1),
        "m2": list(s.m2),
        "cost": {"C": s.cost[0].tolist(), "D": s.cost[1].tolist()},
        "steps": s.steps,
        "seed": s.seed,
        "disturbance_kind": s.disturbance_kind.value,
        "resynth_period": s.resynth_period,
        "reduce_every": s.reduce_every,
        "snapshot_period": s.snapshot_period,
    }


def scenario_hash(s: Scenario) -> str:
    canonical = json.dumps(scenario_to_json(s), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def load_scenario(source: Union[str, Path]) -> Scenario:
    """
    Loads a builtin scenario by name or a JSON file by path.

    Raises:
        ScenarioError: On unreadable files, JSON syntax errors (with line and
            column) or invalid fields.
    """
    if str(source) in BUILTINS:
        return chain5_scenario()
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as e:
        raise ScenarioError(f"Cannot read scenario file {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(
            f"{path}: line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    return scenario_from_json(data)


def save_scenario(s: Scenario, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scenario_to_json(s), indent=2))
    return path
