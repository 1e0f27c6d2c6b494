import warnings

import numpy as np
import pytest

from stmpc import sdp
from stmpc.lifted_dynamics import OverallState, PlantModel, lift, terminal_rollout
from stmpc.network import TokenBucketSpec
from stmpc.sets import UNCONSTRAINED, Ellipsoid, Polytope
from stmpc.terminal_design import (
    InfeasibleTerminalLMI, TerminalIngredients, audit_terminal_set, construct_terminal_set, decrease_rhs,
    design_terminal, lmi_matrix, qmi_matrix, synthesize, verify_decrease, verify_qmi,
)

from conftest import random_plant
from oracles import lifted_lyapunov

UNIT = TokenBucketSpec(1, 1, 4)


def test_scalar_qmi_closed_form(scalar_plant):
    assert verify_qmi([[0.0]], [[2.0]], scalar_plant, 1, 0).max_eigs[1] == pytest.approx(-0.5)
    rep = verify_qmi([[0.0]], [[1.0]], scalar_plant, 1, 0)
    assert rep.max_eigs[1] == pytest.approx(0.25)
    assert not rep.passed
    # threshold of the Lyapunov inequality 0.25 P - P + 1 <= 0
    assert verify_qmi([[0.0]], [[4 / 3]], scalar_plant, 1, 0).max_eigs[1] == pytest.approx(0.0, abs=1e-12)
    assert not verify_qmi([[0.0]], [[4 / 3 - 1e-3]], scalar_plant, 1, 0).passed


def test_scalar_decrease_by_hand(scalar_plant):
    term = TerminalIngredients([[0.0]], [[2.0]], 1)
    xi = OverallState([1.0], [0.0], 1)
    lhs = term.cost(terminal_rollout(xi, 1, term, scalar_plant, UNIT).x) - term.cost(xi.x)
    assert lhs == pytest.approx(-1.5)
    assert -decrease_rhs(xi, 1, term, scalar_plant, UNIT) == pytest.approx(-1.0)
    zero = OverallState([0.0], [0.0], 1)
    assert decrease_rhs(zero, 1, term, scalar_plant, UNIT) == 0.0
    assert verify_decrease(term, scalar_plant, UNIT, P=0, samples=50).passed


def test_synthesize_scalar(scalar_plant):
    K, Pf = synthesize(scalar_plant, UNIT, 0)
    assert verify_qmi(K, Pf, scalar_plant, 1, 0).worst <= 0


def test_synthesize_infeasible():
    plant = PlantModel([[2.0]], [[0.0]], [[1.0]], [[1.0]])
    for spec, P in [(UNIT, 0), (TokenBucketSpec(1, 3, 14), 2)]:
        with pytest.raises(InfeasibleTerminalLMI) as info:
            synthesize(plant, spec, P)
        assert info.value.p_index is not None


def test_reactor_certificate(reactor, reactor_terminal):
    rep = verify_qmi(reactor_terminal.K_f, reactor_terminal.P_f, reactor.plant, 3, 2)
    assert sorted(rep.max_eigs) == [1, 2, 3]
    assert rep.worst <= 1e-8
    dec = verify_decrease(reactor_terminal, reactor.plant, reactor.spec, P=2, samples=1000)
    assert dec.passed and dec.worst_margin <= 1e-7


def test_lmi_matrix_layout(scalar_plant):
    p = random_plant(np.random.default_rng(4), 2, 1)
    X = np.array([[2.0, 0.3], [0.3, 1.0]])
    Y = np.array([[0.4, -0.2]])
    L = lift(p, 2)
    W = L.inverse_cost_matrix
    Z = np.zeros((2, 2))
    top = L.A_j @ X + L.B_j @ Y
    want = np.block([[X, Z, np.zeros((2, 1)), top],
                     [Z, W[:2, :2], W[:2, 2:], X],
                     [np.zeros((1, 2)), W[2:, :2], W[2:, 2:], Y],
                     [top.T, X, Y.T, X]])
    np.testing.assert_allclose(lmi_matrix(p, 2, 1, X, Y), want, atol=1e-12)


def test_schur_equivalence():
    rng = np.random.default_rng(11)
    seen = {True: 0, False: 0}
    while sum(seen.values()) < 100:
        n, m, M = rng.integers(1, 5), rng.integers(1, 3), rng.integers(1, 4)
        plant = random_plant(rng, n, m, scale=0.6)
        K = 0.2 * rng.standard_normal((m, n))
        P0 = lifted_lyapunov(plant, K, M)
        if P0 is None:
            continue
        Pf = rng.uniform(0.5, 2.0) * P0
        X = np.linalg.inv(Pf)
        lmi = np.linalg.eigvalsh(lmi_matrix(plant, M, 1, X, K @ X)).min()
        qmi = np.linalg.eigvalsh(qmi_matrix(K, Pf, plant, M, 1)).max()
        if min(abs(lmi), abs(qmi)) < 1e-9:
            continue
        assert (lmi >= 0) == (qmi <= 0)
        seen[bool(qmi <= 0)] += 1
    assert min(seen.values()) > 10


def test_decrease_identity(reactor, reactor_terminal):
    rng = np.random.default_rng(3)
    K, plant = reactor_terminal.K_f, reactor.plant
    IK = np.vstack([np.eye(plant.n), K])
    for _ in range(20):
        xi = OverallState(rng.standard_normal(4), rng.standard_normal(2), 8)
        for p in (1, 2, 3):
            W = IK.T @ lift(plant, 3 * p).cost_matrix @ IK
            assert decrease_rhs(xi, p, reactor_terminal, plant, reactor.spec) == pytest.approx(
                xi.x @ W @ xi.x, rel=1e-9)


def test_terminal_set_unconstrained(scalar_plant):
    assert construct_terminal_set([[0.0]], [[2.0]], scalar_plant) is UNCONSTRAINED


def test_terminal_set_scalar_interval(scalar_plant):
    X = Polytope.box([-1.0], [1.0])
    Xf = construct_terminal_set([[0.0]], [[2.0]], scalar_plant, X=X, M=1, P=0)
    assert isinstance(Xf, Ellipsoid)
    assert Xf.level == pytest.approx(2.0)
    assert Xf.contains([1.0]) and Xf.contains([-1.0]) and not Xf.contains([1.001])


def test_terminal_set_collapses_for_zero_input(scalar_plant):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        Xf = construct_terminal_set([[0.3]], [[2.0]], scalar_plant, U=Polytope.box([0.0], [0.0]))
    assert Xf.level == 0.0
    assert any("origin" in str(w.message) for w in caught)


def test_constrained_reactor_terminal_set(reactor):
    X = Polytope.box(-2 * np.ones(4), 2 * np.ones(4))
    U = Polytope.box(-np.ones(2), np.ones(2))
    term = design_terminal(reactor.plant, reactor.spec, 2, X, U)
    assert isinstance(term.terminal_set, Ellipsoid) and term.terminal_set.level > 0
    assert audit_terminal_set(term.terminal_set, term.K_f, reactor.plant, X, U, 3, 2).passed
    rep = verify_decrease(term, reactor.plant, reactor.spec, P=2, X=X, U=U, delta_max=5, samples=300)
    assert rep.passed
    # gain feasibility on the boundary
    xs = term.terminal_set.boundary_samples(200, np.random.default_rng(0))
    assert all(U.contains(term.K_f @ x) for x in xs)


def test_ingredients_validation():
    with pytest.raises(ValueError):
        TerminalIngredients([[0.0]], [[-1.0]], 1)
    with pytest.raises(ValueError):
        TerminalIngredients([[0.0, 0.0]], [[1.0, 2.0], [0.0, 1.0]], 1)


def test_sdp_phase_one():
    # F(z) = diag(z, 1 - z) is feasible with margin 1/2 at z = 1/2
    block = np.zeros((2, 2, 2))
    block[0] = np.diag([0.0, 1.0])
    block[1] = np.diag([1.0, -1.0])
    z, s = sdp.find_feasible([block], np.array([0.5]), margin=1.0, s_cap=10.0)
    assert s == pytest.approx(0.5, abs=1e-4)
    assert z[0] == pytest.approx(0.5, abs=1e-3)
