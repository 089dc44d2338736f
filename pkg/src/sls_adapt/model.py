"""
Structured networked plants.

Nodes are numbered 0..N-1. An edge (j, i) means x^i influences x^j at the next
step, i.e. i ∈ 𝒩(j). Delays are stored as a full N×N integer matrix with
`delays[j, i]` the communication delay from node i to node j.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from sls_adapt.exceptions import DimensionMismatchError, SlsAdaptError

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]


class AssumptionViolationError(SlsAdaptError):
    """Raised when a topology breaks the delay or region assumptions."""

    pass


class NonSquareError(SlsAdaptError, ValueError):
    """Raised when a square matrix is required."""

    pass


@dataclass(frozen=True, eq=False)
class StructuredModel:
    """
    A(α) and B(α) as linear combinations of known basis matrices.

    `basis_A[(j, i)]` has shape (p, n_j, n_i) and `basis_B[j]` has shape
    (p, n_j, m_j); nodes without actuators have m_j = 0.
    """

    state_dims: Tuple[int, ...]
    input_dims: Tuple[int, ...]
    edges: FrozenSet[Edge]
    basis_A: Dict[Edge, np.ndarray]
    basis_B: Dict[int, np.ndarray]
    p: int

    def __post_init__(self):
        state_dims = tuple(int(d) for d in self.state_dims)
        input_dims = tuple(int(d) for d in self.input_dims)
        if len(state_dims) != len(input_dims):
            raise DimensionMismatchError("state_dims and input_dims differ in length.")
        if any(d < 1 for d in state_dims) or any(d < 0 for d in input_dims):
            raise DimensionMismatchError("Node dimensions must be positive.")
        edges = frozenset((int(j), int(i)) for j, i in self.edges)
        n = len(state_dims)
        for j, i in edges:
            if not (0 <= j < n and 0 <= i < n):
                raise DimensionMismatchError(f"Edge {(j, i)} references unknown node.")
        basis_A = {}
        for (j, i), stack in self.basis_A.items():
            key = (int(j), int(i))
            if key not in edges:
                raise DimensionMismatchError(f"Basis given for undeclared edge {key}.")
            arr = np.asarray(stack, dtype=float).reshape(
                self.p, state_dims[key[0]], state_dims[key[1]]
            )
            basis_A[key] = arr
        missing = edges - set(basis_A)
        if missing:
            raise DimensionMismatchError(
                f"Edges without basis matrices: {sorted(missing)}"
            )
        basis_B = {}
        for j in range(n):
            stack = self.basis_B.get(j)
            if stack is None:
                stack = np.zeros((self.p, state_dims[j], input_dims[j]))
            basis_B[j] = np.asarray(stack, dtype=float).reshape(
                self.p, state_dims[j], input_dims[j]
            )
        object.__setattr__(self, "state_dims", state_dims)
        object.__setattr__(self, "input_dims", input_dims)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "basis_A", basis_A)
        object.__setattr__(self, "basis_B", basis_B)

    @property
    def n_nodes(self) -> int:
        return len(self.state_dims)

    @property
    def n_states(self) -> int:
        return sum(self.state_dims)

    @property
    def n_inputs(self) -> int:
        return sum(self.input_dims)

    def state_slice(self, j: int) -> slice:
        start = sum(self.state_dims[:j])
        return slice(start, start + self.state_dims[j])

    def input_slice(self, j: int) -> slice:
        start = sum(self.input_dims[:j])
        return slice(start, start + self.input_dims[j])

    def neighbors(self, j: int) -> List[int]:
        """𝒩(j): nodes whose state enters x^j at the next step."""
        return sorted(i for (jj, i) in self.edges if jj == j)

    def influenced_by(self, i: int) -> List[int]:
        """Nodes j with i ∈ 𝒩(j)."""
        return sorted(j for (j, ii) in self.edges if ii == i)

    def global_basis(self) -> Tuple[np.ndarray, np.ndarray]:
        """Dense stacks of shape (p, n, n) and (p, n, m)."""
        ga = np.zeros((self.p, self.n_states, self.n_states))
        gb = np.zeros((self.p, self.n_states, self.n_inputs))
        for (j, i), stack in self.basis_A.items():
            ga[:, self.state_slice(j), self.state_slice(i)] = stack
        for j, stack in self.basis_B.items():
            gb[:, self.state_slice(j), self.input_slice(j)] = stack
        return ga, gb

    def global_at(self, alpha) -> Tuple[np.ndarray, np.ndarray]:
        """Shortcut for global_matrices(model, *assemble(model, alpha))."""
        return global_matrices(self, *assemble(self, alpha))


def assemble(model: StructuredModel, alpha) -> Tuple[dict, dict]:
    """
    A^{j←i} = Σ_s α_s 𝒜_s^{j←i} and B^j = Σ_s α_s ℬ_s^j.

    Raises:
        DimensionMismatchError: If len(alpha) != model.p.
    """
    alpha = np.asarray(alpha, dtype=float).ravel()
    if alpha.size != model.p:
        raise DimensionMismatchError(
            f"Expected {model.p} parameters, got {alpha.size}."
        )
    a_blocks = {
        edge: np.tensordot(alpha, stack, axes=1)
        for edge, stack in model.basis_A.items()
    }
    b_blocks = {
        j: np.tensordot(alpha, stack, axes=1) for j, stack in model.basis_B.items()
    }
    return a_blocks, b_blocks


def global_matrices(
    model: StructuredModel, a_blocks: dict, b_blocks: dict
) -> Tuple[np.ndarray, np.ndarray]:
    """Dense (A, B) in node order; absent edges are zero blocks."""
    a = np.zeros((model.n_states, model.n_states))
    b = np.zeros((model.n_states, model.n_inputs))
    for (j, i), block in a_blocks.items():
        rows, cols = model.state_slice(j), model.state_slice(i)
        block = np.asarray(block, dtype=float)
        if block.shape != (rows.stop - rows.start, cols.stop - cols.start):
            raise DimensionMismatchError(f"Block A[{j}<-{i}] has shape {block.shape}.")
        a[rows, cols] = block
    for j, block in b_blocks.items():
        rows, cols = model.state_slice(j), model.input_slice(j)
        block = np.asarray(block, dtype=float).reshape(
            rows.stop - rows.start, cols.stop - cols.start
        )
        b[rows, cols] = block
    return a, b


def spectral_radius(a) -> float:
    """max |eigenvalue| of a square matrix."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise NonSquareError(f"Spectral radius needs a square matrix, got {a.shape}.")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


@dataclass(frozen=True, eq=False)
class Topology:
    """Communication delays and the send/local regions of every node."""

    delays: np.ndarray
    send_regions: Tuple[FrozenSet[int], ...]
    local_regions: Tuple[FrozenSet[int], ...]

    def __post_init__(self):
        delays = np.asarray(self.delays, dtype=np.int64)
        n = delays.shape[0]
        if delays.shape != (n, n):
            raise DimensionMismatchError("The delay matrix must be square.")
        send = tuple(frozenset(int(v) for v in r) for r in self.send_regions)
        local = tuple(frozenset(int(v) for v in r) for r in self.local_regions)
        if len(send) != n or len(local) != n:
            raise DimensionMismatchError("One send and one local region per node.")
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "send_regions", send)
        object.__setattr__(self, "local_regions", local)

    @classmethod
    def full(cls, n: int, delays: Optional[np.ndarray] = None) -> Topology:
        everyone = frozenset(range(n))
        d = np.zeros((n, n), dtype=np.int64) if delays is None else delays
        return cls(d, (everyone,) * n, (everyone,) * n)

    @property
    def n_nodes(self) -> int:
        return self.delays.shape[0]

    def delay(self, j: int, i: int) -> int:
        """d_{j←i}."""
        return int(self.delays[j, i])

    @property
    def is_global(self) -> bool:
        """Every delay is zero and every node sends to and acts on all nodes."""
        everyone = frozenset(range(self.n_nodes))
        return not np.any(self.delays) and all(
            region == everyone for region in self.send_regions + self.local_regions
        )

    def receive_regions(self) -> Tuple[FrozenSet[int], ...]:
        """ℛ(i) = {j : i ∈ 𝒮(j)}."""
        return tuple(
            frozenset(j for j in range(self.n_nodes) if i in self.send_regions[j])
            for i in range(self.n_nodes)
        )

    def validate(self, model: StructuredModel) -> None:
        """
        Checks the delay and region assumptions the distributed guarantees
        rest on.

        Raises:
            AssumptionViolationError: Naming the first offending nodes.
        """
        n = self.n_nodes
        if n != model.n_nodes:
            raise AssumptionViolationError(
                f"Topology has {n} nodes, model has {model.n_nodes}."
            )
        if np.any(self.delays < 0):
            raise AssumptionViolationError("Delays must be nonnegative.")
        for i in range(n):
            if self.delays[i, i] != 0:
                raise AssumptionViolationError(f"d[{i}<-{i}] must be 0.")
            if i not in self.local_regions[i]:
                raise AssumptionViolationError(f"Node {i} must be in its local region.")
            if not self.local_regions[i] <= self.send_regions[i]:
                raise AssumptionViolationError(
                    f"Local region of node {i} is not inside its send region."
                )
            for region in (self.local_regions[i], self.send_regions[i]):
                if any(not 0 <= v < n for v in region):
                    raise AssumptionViolationError(
                        f"Region of node {i} names an unknown node."
                    )
        for j in range(n):
            for k in model.neighbors(j):
                bad = np.flatnonzero(self.delays[j, :] > 1 + self.delays[k, :])
                if bad.size:
                    i = int(bad[0])
                    raise AssumptionViolationError(
                        f"Delays propagate slower than the plant: d[{j}<-{i}]="
                        f"{self.delays[j, i]} exceeds 1 + d[{k}<-{i}]="
                        f"{1 + self.delays[k, i]} although {k} is a neighbor of {j}."
                    )

    def extended_region(self, model: StructuredModel, i: int) -> List[int]:
        """𝓛(i) plus every node a column-i response reaches in one step."""
        region = set(self.local_regions[i])
        for n_ in list(region):
            region.update(model.influenced_by(n_))
        return sorted(region)

    def max_delay(self, model: StructuredModel, i: int) -> int:
        """d̄_i over the extended region of node i."""
        return max(self.delay(j, i) for j in self.extended_region(model, i))


def chain_delays(n: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :])


def radius_regions(n: int, radius: Optional[int]) -> Tuple[FrozenSet[int], ...]:
    """Regions {j : |i - j| <= radius}; None means every node."""
    if radius is None:
        return (frozenset(range(n)),) * n
    return tuple(
        frozenset(j for j in range(n) if abs(i - j) <= radius) for i in range(n)
    )


def edges_from_pattern(pattern: Iterable[Sequence[int]]) -> FrozenSet[Edge]:
    return frozenset((int(j), int(i)) for j, i in pattern)
