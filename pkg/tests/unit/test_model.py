import math

import numpy as np
import pytest

from sls_adapt.exceptions import DimensionMismatchError
from sls_adapt.model import (
    AssumptionViolationError,
    NonSquareError,
    StructuredModel,
    Topology,
    assemble,
    chain_delays,
    global_matrices,
    radius_regions,
    spectral_radius,
)
from sls_adapt.scenario import CHAIN5_TRUE_ALPHA, _chain_model


@pytest.fixture
def chain():
    return _chain_model(5)


def _two_node_model():
    basis_A = {
        (0, 0): np.array([[[1.0]], [[0.0]]]),
        (1, 0): np.array([[[0.0]], [[1.0]]]),
        (1, 1): np.array([[[1.0]], [[0.0]]]),
    }
    basis_B = {0: np.array([[[0.0]], [[1.0]]])}
    return StructuredModel((1, 1), (1, 0), frozenset(basis_A), basis_A, basis_B, 2)


def test_chain_matrices_at_the_true_parameters(chain):
    """The chain is tridiagonal with inputs only at both ends."""
    a, b = chain.global_at(CHAIN5_TRUE_ALPHA)
    expected = (
        np.diag([0.6] * 5) + np.diag([0.3] * 4, k=-1) + np.diag([0.2] * 4, k=1)
    )
    np.testing.assert_allclose(a, expected)
    assert b.shape == (5, 2)
    np.testing.assert_allclose(b[:, 0], [1.0, 0.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(b[:, 1], [0.0, 0.0, 0.0, 0.0, -1.0])


def test_chain_is_open_loop_unstable(chain):
    """The true chain has spectral radius 0.6 + 2·√0.06·cos(π/6) > 1."""
    a, _ = chain.global_at(CHAIN5_TRUE_ALPHA)
    expected = 0.6 + 2 * math.sqrt(0.06) * math.cos(math.pi / 6)
    assert spectral_radius(a) == pytest.approx(expected, abs=1e-9)
    assert spectral_radius(a) > 1.0


def test_assemble_is_linear_in_alpha(chain):
    """Blocks of a combination are the combination of blocks."""
    rng = np.random.default_rng(4)
    a1, a2 = rng.normal(size=5), rng.normal(size=5)
    g1 = global_matrices(chain, *assemble(chain, a1))
    g2 = global_matrices(chain, *assemble(chain, a2))
    g = chain.global_at(2.0 * a1 - a2)
    np.testing.assert_allclose(g[0], 2.0 * g1[0] - g2[0])
    np.testing.assert_allclose(g[1], 2.0 * g1[1] - g2[1])


def test_global_basis_matches_assembly(chain):
    """Contracting the dense basis stacks gives the assembled matrices."""
    alpha = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    ga, gb = chain.global_basis()
    a, b = chain.global_at(alpha)
    np.testing.assert_allclose(np.tensordot(alpha, ga, axes=1), a)
    np.testing.assert_allclose(np.tensordot(alpha, gb, axes=1), b)


def test_assemble_rejects_wrong_parameter_count(chain):
    """alpha must have exactly p entries."""
    with pytest.raises(DimensionMismatchError):
        assemble(chain, [0.1, 0.2])


def test_model_rejects_missing_basis_and_unknown_nodes():
    """Every edge needs a basis stack and every node must exist."""
    stack = np.zeros((1, 1, 1))
    with pytest.raises(DimensionMismatchError, match="without basis"):
        StructuredModel((1,), (0,), frozenset({(0, 0)}), {}, {}, 1)
    with pytest.raises(DimensionMismatchError, match="unknown node"):
        StructuredModel((1,), (0,), frozenset({(1, 0)}), {(1, 0): stack}, {}, 1)
    with pytest.raises(DimensionMismatchError):
        StructuredModel((1, 1), (0,), frozenset(), {}, {}, 1)


def test_neighbors_and_slices():
    """Neighbor sets follow the edges and slices follow node dimensions."""
    model = _two_node_model()
    assert model.neighbors(1) == [0, 1]
    assert model.influenced_by(0) == [0, 1]
    assert model.input_slice(1) == slice(1, 1)
    assert model.n_inputs == 1


def test_spectral_radius_requires_square():
    """Non-square input is refused."""
    with pytest.raises(NonSquareError):
        spectral_radius(np.ones((2, 3)))


def test_chain_topology_validates(chain):
    """|i - j| delays on the chain satisfy the propagation assumption."""
    regions = radius_regions(5, 1)
    Topology(chain_delays(5), regions, regions).validate(chain)
    Topology.full(5, chain_delays(5)).validate(chain)


def test_topology_rejects_slow_communication(chain):
    """A delay longer than one plant step past a neighbor is refused."""
    delays = chain_delays(5)
    delays[2, 0] = 3
    with pytest.raises(AssumptionViolationError, match="slower than the plant"):
        Topology.full(5, delays).validate(chain)


@pytest.mark.parametrize(
    "send, local, message",
    [
        ([{0, 1}, {0, 1}], [{0}, {0}], "local region"),
        ([{0}, {0, 1}], [{0, 1}, {1}], "not inside its send region"),
        ([{0, 5}, {0, 1}], [{0}, {1}], "unknown node"),
    ],
)
def test_topology_rejects_bad_regions(send, local, message):
    """Regions must hold the node itself, nest, and name real nodes."""
    model = _two_node_model()
    topology = Topology(np.zeros((2, 2), dtype=int), send, local)
    with pytest.raises(AssumptionViolationError, match=message):
        topology.validate(model)


def test_topology_rejects_self_delay():
    """d_{i←i} must be zero."""
    topology = Topology.full(2, np.array([[1, 0], [0, 0]]))
    with pytest.raises(AssumptionViolationError, match="must be 0"):
        topology.validate(_two_node_model())


def test_receive_regions_invert_send_regions():
    """j receives from i exactly when i sends to j."""
    send = radius_regions(4, 1)
    topology = Topology(chain_delays(4), send, send)
    receive = topology.receive_regions()
    for i in range(4):
        assert receive[i] == frozenset(j for j in range(4) if i in send[j])


def test_only_delay_free_all_to_all_topologies_are_global():
    """Any delay or any region short of all nodes makes a topology local."""
    assert Topology.full(3).is_global
    assert not Topology.full(3, delays=chain_delays(3)).is_global
    everyone = radius_regions(3, None)
    assert not Topology(np.zeros((3, 3)), everyone, radius_regions(3, 1)).is_global


def test_extended_region_and_max_delay(chain):
    """The extended region adds one plant step to the local region."""
    regions = radius_regions(5, 1)
    topology = Topology(chain_delays(5), regions, regions)
    assert topology.extended_region(chain, 0) == [0, 1, 2]
    assert topology.extended_region(chain, 2) == [0, 1, 2, 3, 4]
    assert topology.max_delay(chain, 0) == 2
    assert topology.max_delay(chain, 2) == 2
