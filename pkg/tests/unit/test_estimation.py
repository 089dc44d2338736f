import numpy as np
import pytest

from sls_adapt.estimation import (
    ConstraintLog,
    UnknownNodeError,
    UnsupportedNormForDimError,
    a_norm_bound,
    build_regressors,
    constraint_from_observation,
    observation_radius,
    observe_all,
    update_central,
    update_node,
)
from sls_adapt.exceptions import DimensionMismatchError
from sls_adapt.lpcore import NormKind
from sls_adapt.model import StructuredModel
from sls_adapt.polytope import (
    EmptyPolytopeError,
    HalfspacePolytope,
    LinearConstraintSet,
    membership,
)
from sls_adapt.scenario import CHAIN5_TRUE_ALPHA, chain5_scenario


def _dense_node_model(n_j: int, p: int = 3, seed: int = 0) -> StructuredModel:
    rng = np.random.default_rng(seed)
    basis_A = {(0, 0): rng.normal(size=(p, n_j, n_j))}
    basis_B = {0: rng.normal(size=(p, n_j, 1))}
    return StructuredModel((n_j,), (1,), frozenset(basis_A), basis_A, basis_B, p)


def test_regressors_reproduce_the_dynamics():
    """Σ_s α_s ŷ_s equals node j's row block of A x + B u for any α."""
    model = chain5_scenario().model
    rng = np.random.default_rng(1)
    x, u, alpha = rng.normal(size=5), rng.normal(size=2), rng.normal(size=5)
    a, b = model.global_at(alpha)
    expected = a @ x + b @ u
    for j in range(5):
        bundle = build_regressors(model, x, u, j)
        np.testing.assert_allclose(bundle.predict(alpha), expected[j : j + 1])


def test_chain_regressors_by_hand():
    """Node 0 of the chain sees (0, x0, x1, u0, 0) as regressors."""
    model = chain5_scenario().model
    x = np.array([2.0, -1.0, 0.5, 0.0, 4.0])
    bundle = build_regressors(model, x, [3.0, 7.0], 0)
    np.testing.assert_allclose(bundle.regressors[:, 0], [0.0, 2.0, -1.0, 3.0, 0.0])
    bundle = build_regressors(model, x, [3.0, 7.0], 4)
    np.testing.assert_allclose(bundle.regressors[:, 0], [0.0, 4.0, 0.0, 0.0, 7.0])


def test_constraint_keeps_the_true_parameters():
    """A transition with a bounded disturbance never excludes the truth."""
    s = chain5_scenario()
    model = s.model
    rng = np.random.default_rng(2)
    a, b = model.global_at(s.true_alpha)
    x, u = rng.normal(size=5), rng.normal(size=2)
    x_next = a @ x + b @ u + rng.uniform(-s.eta, s.eta, size=5)
    for c in observe_all(model, x, u, x_next, 1, s.eta):
        assert c.normals.shape == (2, 5)
        assert np.all(c.normals @ s.true_alpha <= c.offsets + 1e-12)


def test_observation_with_zero_motion_gives_no_information():
    """x = 0 and u = 0 yield rows 0·α ≤ η."""
    model = chain5_scenario().model
    bundle = build_regressors(model, np.zeros(5), np.zeros(2), 2, [0.0])
    c = constraint_from_observation(bundle, 0.5)
    np.testing.assert_array_equal(c.normals, 0.0)
    np.testing.assert_allclose(c.offsets, 0.5)


def test_l1_sign_patterns_are_exact():
    """The ℓ1 rows admit α exactly when the residual is within the bound."""
    model = _dense_node_model(2)
    rng = np.random.default_rng(3)
    bundle = build_regressors(model, rng.normal(size=2), [1.0], 0, rng.normal(size=2))
    c = constraint_from_observation(bundle, 0.8, NormKind.SUM_ABS)
    assert c.normals.shape == (4, 3)
    for alpha in rng.normal(scale=0.5, size=(300, 3)):
        inside = np.abs(bundle.observed_next - bundle.predict(alpha)).sum() <= 0.8
        assert inside == bool(np.all(c.normals @ alpha <= c.offsets))


def test_l1_refused_above_dimension_three():
    """Sign-pattern expansion is limited to small nodes."""
    model = _dense_node_model(4)
    bundle = build_regressors(model, np.ones(4), [0.0], 0, np.zeros(4))
    with pytest.raises(UnsupportedNormForDimError):
        constraint_from_observation(bundle, 1.0, "l1")


def test_bad_node_and_sizes():
    """Unknown nodes and wrongly sized vectors are refused."""
    model = chain5_scenario().model
    with pytest.raises(UnknownNodeError):
        build_regressors(model, np.zeros(5), np.zeros(2), 5)
    with pytest.raises(DimensionMismatchError):
        build_regressors(model, np.zeros(4), np.zeros(2), 0)
    with pytest.raises(ValueError):
        constraint_from_observation(
            build_regressors(model, np.zeros(5), np.zeros(2), 0), -1.0
        )


def test_update_central_intersects_every_node():
    """The central estimate shrinks and keeps the truth."""
    s = chain5_scenario()
    rng = np.random.default_rng(5)
    a, b = s.model.global_at(s.true_alpha)
    p = s.prior
    x = s.x0
    for t in range(1, 6):
        u = rng.normal(size=2)
        x_next = a @ x + b @ u + rng.uniform(-s.eta, s.eta, size=5)
        p = update_central(p, observe_all(s.model, x, u, x_next, t, s.eta), time=t)
        x = x_next
        assert membership(p, CHAIN5_TRUE_ALPHA)
    assert p.stamp == 25


def test_update_node_skips_duplicates():
    """A set seen before from the same origin is not intersected again."""
    prior = HalfspacePolytope.box([0.0, 0.0], [1.0, 1.0])
    c = LinearConstraintSet([[1.0, 1.0]], [1.5], 3, 7)
    log = ConstraintLog()
    once = update_node(0, prior, [c], log)
    twice = update_node(0, once, [c], log)
    assert twice is once
    assert log.by_origin == {3: [7]}


def test_update_node_reports_inconsistency():
    """Contradictory observations surface as EmptyPolytopeError naming the node."""
    prior = HalfspacePolytope.box([0.0, 0.0], [1.0, 1.0])
    c = LinearConstraintSet([[1.0, 1.0]], [-1.0], 1, 4)
    with pytest.raises(EmptyPolytopeError, match="node 2, t=4"):
        update_node(2, prior, [c], time=4)
    with pytest.raises(UnknownNodeError):
        update_node(-1, prior, [])


def test_observation_radius_and_gain():
    """Noise widens the radius by (1 + gain) times its bound."""
    s = chain5_scenario()
    gain = a_norm_bound(s.model, np.array([s.true_alpha]))
    assert gain == pytest.approx(1.1)
    assert observation_radius(0.5, 0.1, gain) == pytest.approx(0.71)
