from dataclasses import replace

import numpy as np
import pytest

from stmpc.lifted_dynamics import OverallState, PlantModel
from stmpc.minmax_controller import (
    FALLBACK, FeedbackPolicy, InfeasibleProblem, MpcConfig, SelfTriggeredMPC, _Context, _Engine, _Incumbent,
    bucket_admissible_words, evaluate_policy, inner_max, outer_min, shifted_candidate,
)
from stmpc.network import AssumptionViolation, LossSequence, TokenBucketSpec, enumerate_admissible
from stmpc.sets import Polytope
from stmpc.terminal_design import TerminalIngredients

from conftest import random_plant
from oracles import bucket_words, stepwise_policy_cost

UNIT = TokenBucketSpec(1, 1, 4)


@pytest.fixture
def one_step(scalar_plant):
    """N=1, P=0, intervals fixed to 1, terminal law v=0 with cost 2 x^2."""
    return scalar_plant, TerminalIngredients([[0.0]], [[2.0]], 1), MpcConfig(N=1, P=0, delta_max=1)


def zero_policy(N, m=1, n=1, delta=1):
    return FeedbackPolicy(np.zeros((N, m, n)), (delta,) * N)


def test_evaluate_policy_by_hand(one_step):
    plant, term, cfg = one_step
    ev = evaluate_policy(zero_policy(1), OverallState([1.0], [0.0], 1), (1,), term, plant, UNIT, cfg)
    assert ev.value == pytest.approx(1.5)
    assert ev.feasible
    ev = evaluate_policy(zero_policy(1), OverallState([0.0], [0.0], 1), (1,), term, plant, UNIT, cfg)
    assert ev.value == 0.0


def test_evaluate_policy_matches_step_sum(reactor, reactor_terminal):
    rng = np.random.default_rng(0)
    cfg = MpcConfig(N=3, P=2, delta_max=5)
    pol = FeedbackPolicy(0.3 * rng.standard_normal((3, 2, 4)), (2, 3, 4))
    xi = OverallState(rng.standard_normal(4), rng.standard_normal(2), 10)
    t = reactor_terminal
    values = []
    for bits in [(1, 1, 1, 1, 1), (0, 1, 0, 0, 1)]:
        ev = evaluate_policy(pol, xi, LossSequence(bits), t, reactor.plant, reactor.spec, cfg)
        ref = stepwise_policy_cost(reactor.plant, pol.gains, pol.intervals, bits, t.K_f, t.P_f, t.M, xi.x, xi.w)
        assert ev.value == pytest.approx(ref, rel=1e-10)
        values.append(ev.value)
    assert values[0] != pytest.approx(values[1])


def test_evaluate_policy_flags_violations(scalar_plant):
    term = TerminalIngredients([[0.0]], [[2.0]], 1)
    spec = TokenBucketSpec(1, 3, 14)
    cfg = MpcConfig(N=3, P=0, delta_max=5, X=Polytope.box([-1.0], [1.0]))
    ev = evaluate_policy(zero_policy(3), OverallState([2.0], [0.0], 14), (1, 1, 1), term, scalar_plant, spec, cfg)
    assert ("state", 0, 0) in ev.violations
    # three back-to-back transmissions from a level of 2 drain the bucket
    ev = evaluate_policy(zero_policy(3), OverallState([0.1], [0.0], 2), (1, 1, 1), term, scalar_plant, spec, cfg)
    assert any(kind == "bucket" for kind, _, _ in ev.violations)


def test_inner_max_brute_force(scalar_plant):
    term = TerminalIngredients([[-0.2]], [[2.0]], 1)
    cfg = MpcConfig(N=2, P=1, delta_max=2)
    pol = FeedbackPolicy([[[-0.3]], [[0.1]]], (1, 2))
    xi = OverallState([1.0], [0.4], 4)
    adm = enumerate_admissible(2, 1, 0)
    value, seq, evals, feasible = inner_max(pol, xi, adm, term, scalar_plant, UNIT, cfg)
    each = [evaluate_policy(pol, xi, w, term, scalar_plant, UNIT, cfg).value for w in adm]
    assert len(each) == 5 and feasible
    assert value == max(each)
    assert seq == adm[int(np.argmax(each))]


def test_inner_max_ties_and_errors(one_step):
    plant, term, cfg = one_step
    cfg = MpcConfig(N=2, P=1, delta_max=1)
    adm = enumerate_admissible(2, 1, 0)
    value, seq, _, _ = inner_max(zero_policy(2), OverallState([0.0], [0.0], 4), adm, term, plant, UNIT, cfg)
    assert value == 0.0 and seq == adm[0]
    with pytest.raises(ValueError):
        inner_max(zero_policy(2), OverallState([0.0], [0.0], 4), [], term, plant, UNIT, cfg)


def test_single_scenario_equals_evaluation(one_step):
    plant, term, cfg = one_step
    xi = OverallState([0.7], [0.0], 2)
    pol = FeedbackPolicy([[[-0.25]]], (1,))
    value, _, _, _ = inner_max(pol, xi, enumerate_admissible(1, 0, 0), term, plant, UNIT, cfg)
    assert value == evaluate_policy(pol, xi, (1,), term, plant, UNIT, cfg).value


def test_outer_min_scalar_calculus(one_step):
    plant, term, cfg = one_step
    # min_v x^2 + v^2 + 2 (x/2 + v)^2 is attained at v = -x/3 with value 7/6 x^2
    for x in (1.0, -2.5):
        sol = outer_min(OverallState([x], [0.0], 1), 0, term, plant, UNIT, cfg)
        assert sol.policy.gains[0, 0, 0] == pytest.approx(-1 / 3, abs=1e-6)
        assert sol.worst_value == pytest.approx(7 / 6 * x * x, rel=1e-9)


def test_outer_min_at_origin(reactor, reactor_terminal):
    cfg = replace(reactor.mpc, max_words=3)
    for beta0 in (8, 3):
        sol = outer_min(OverallState(np.zeros(4), np.zeros(2), beta0), 0, reactor_terminal, reactor.plant,
                        reactor.spec, cfg)
        assert sol.worst_value == 0.0
        np.testing.assert_array_equal(sol.policy.first_packet(np.zeros(4)).v, 0.0)
        assert sol.intervals == bucket_words(reactor.spec, 6, 5, beta0)[0]


@pytest.mark.parametrize("g,c,b", [(1, 3, 14), (1, 2, 3), (2, 3, 6), (2, 5, 5)])
def test_bucket_pruning_matches_oracle(g, c, b):
    spec = TokenBucketSpec(g, c, b)
    for N, D in [(3, 4), (4, 3)]:
        if D < spec.M:
            continue
        for beta0 in range(b + 1):
            assert bucket_admissible_words(spec, N, D, beta0) == bucket_words(spec, N, D, beta0)


def test_outer_min_counts_bucket_words(reactor, reactor_terminal):
    cfg = replace(reactor.mpc, max_words=1)
    xi = OverallState([0.1, 0.0, -0.1, 0.0], np.zeros(2), 2)
    sol = outer_min(xi, 0, reactor_terminal, reactor.plant, reactor.spec, cfg)
    assert sol.words_feasible == len(bucket_words(reactor.spec, 6, 5, 2))
    assert sol.intervals in bucket_words(reactor.spec, 6, 5, 2)
    with pytest.raises(InfeasibleProblem):
        outer_min(replace(xi, beta=1), 0, reactor_terminal, reactor.plant, reactor.spec, cfg)


def test_outer_min_infeasible(scalar_plant):
    term = TerminalIngredients([[0.0]], [[2.0]], 1)
    cfg = MpcConfig(N=1, P=0, delta_max=1, X=Polytope.box([-1.0], [1.0]))
    with pytest.raises(InfeasibleProblem):
        outer_min(OverallState([5.0], [0.0], 1), 0, term, scalar_plant, UNIT, cfg)
    with pytest.raises(ValueError):
        outer_min(OverallState([0.5], [0.0], 1), 1, term, scalar_plant, UNIT, cfg)


def test_shifted_candidate_structure():
    K_f = np.full((2, 4), 7.0)
    term = TerminalIngredients(K_f, np.eye(4), 3)
    gains = np.arange(6 * 8, dtype=float).reshape(6, 2, 4)
    cand = shifted_candidate(FeedbackPolicy(gains, (1, 2, 3, 4, 5, 1)), term)
    assert cand.intervals == (2, 3, 4, 5, 1, 3)
    np.testing.assert_array_equal(cand.gains[:5], gains[1:])
    np.testing.assert_array_equal(cand.gains[5], K_f)
    short = shifted_candidate(FeedbackPolicy(gains[:1], (4,)), term)
    assert short.intervals == (3,)
    np.testing.assert_array_equal(short.gains[0], K_f)


def test_solution_is_self_consistent(reactor, reactor_terminal):
    cfg = replace(reactor.mpc, max_words=2)
    xi = OverallState([1.0, 0.0, 1.0, 0.0], np.zeros(2), 8)
    sol = outer_min(xi, 0, reactor_terminal, reactor.plant, reactor.spec, cfg)
    assert sol.feasible and 1 <= sol.intervals[0] <= 5
    again = evaluate_policy(sol.policy, xi, sol.worst_sequence, reactor_terminal, reactor.plant,
                            reactor.spec, cfg)
    assert again.value == pytest.approx(sol.worst_value, rel=1e-7)
    assert len(sol.trajectories) == 149


def test_candidate_feasible_after_each_outcome(reactor, reactor_terminal):
    cfg = replace(reactor.mpc, max_words=1)
    plant, spec = reactor.plant, reactor.spec
    xi = OverallState([1.0, 0.0, 1.0, 0.0], np.zeros(2), 8)
    sol = outer_min(xi, 0, reactor_terminal, plant, spec, cfg)
    cand = shifted_candidate(sol, reactor_terminal)
    for sigma in (0, 1):
        nxt = sol.trajectories[sol.admissible.index_of(next(w for w in sol.admissible if w[0] == sigma))][1]
        adm = enumerate_admissible(6, 2, 0 if sigma else 1)
        _, _, _, feasible = inner_max(cand, nxt, adm, reactor_terminal, plant, spec, cfg)
        assert feasible


def test_control_step_at_origin(reactor, reactor_terminal):
    ctl = SelfTriggeredMPC(reactor.plant, reactor.spec, reactor_terminal, replace(reactor.mpc, max_words=1))
    pk = ctl.control_step(OverallState(np.zeros(4), np.zeros(2), 8))
    np.testing.assert_array_equal(pk.v, 0.0)


def test_two_losses_force_delivery(reactor, reactor_terminal):
    ctl = SelfTriggeredMPC(reactor.plant, reactor.spec, reactor_terminal, replace(reactor.mpc, max_words=1))
    xi = OverallState([0.05, 0.0, 0.05, 0.0], np.zeros(2), 14)
    ctl.control_step(xi)
    ctl.control_step(xi, ack=0)
    ctl.control_step(xi, ack=0)
    assert ctl.r == 2
    assert len(ctl.solution.admissible) == 81
    assert all(w[0] == 1 for w in ctl.solution.admissible)
    with pytest.raises(AssumptionViolation):
        ctl.control_step(xi, ack=0)


def test_candidate_seeds_the_search(reactor, reactor_terminal):
    cfg = replace(reactor.mpc, max_words=0)
    cand = FeedbackPolicy(np.repeat(reactor_terminal.K_f[None], 6, axis=0), (3,) * 6)
    # nothing beats the candidate at the origin, so it is kept as the fallback
    sol = outer_min(OverallState(np.zeros(4), np.zeros(2), 14), 0, reactor_terminal, reactor.plant,
                    reactor.spec, cfg, candidate=cand)
    assert sol.provenance == FALLBACK and sol.intervals == (3,) * 6
    # elsewhere its own word is re-optimized and never gets worse
    xi = OverallState([0.2, 0.0, 0.1, 0.0], np.zeros(2), 14)
    adm = enumerate_admissible(6, 2, 0)
    before, _, _, _ = inner_max(cand, xi, adm, reactor_terminal, reactor.plant, reactor.spec, cfg)
    sol = outer_min(xi, 0, reactor_terminal, reactor.plant, reactor.spec, cfg, candidate=cand)
    assert sol.intervals == (3,) * 6
    assert sol.worst_value <= before


def test_tie_break_prefers_short_first_interval():
    inc = _Incumbent(1e-9)
    inc.offer(1.0, (3, 3), None, "a")
    assert inc.offer(1.0 + 1e-12, (2, 5), None, "b")
    assert not inc.offer(1.0, (2, 6), None, "c")
    assert not inc.offer(1.1, (1, 1), None, "d")
    assert inc.word == (2, 5)


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(N=0, P=0, delta_max=1)
    with pytest.raises(ValueError):
        MpcConfig(N=2, P=0, delta_max=2).validate(TokenBucketSpec(1, 3, 14))


def _engine(plant, spec, term, cfg, word, r, z0):
    ctx = _Context(plant, spec, term, cfg)
    return ctx, _Engine(ctx, word, enumerate_admissible(cfg.N, cfg.P, r).bits, z0)


@pytest.mark.parametrize("constrained", [False, True])
def test_engine_gradient_and_values(constrained):
    rng = np.random.default_rng(8)
    plant = random_plant(rng, 2, 1, scale=0.9)
    spec = TokenBucketSpec(1, 2, 6)
    X = Polytope.box([-0.8, -0.8], [0.8, 0.8]) if constrained else None
    U = Polytope.box([-0.3], [0.3]) if constrained else None
    cfg = MpcConfig(N=3, P=1, delta_max=3, **({"X": X, "U": U} if constrained else {}))
    term = TerminalIngredients(0.1 * rng.standard_normal((1, 2)), np.eye(2) * 3, 2)
    z0 = np.array([0.6, -0.5, 0.2])
    ctx, eng = _engine(plant, spec, term, cfg, (1, 3, 2), 0, z0)
    gains = 0.4 * rng.standard_normal((3, 1, 2))
    rho = 50.0 if constrained else 0.0
    vals, pen, _, grad = eng.run(gains, rho, grad=True)
    xi = OverallState(z0[:2], z0[2:], 6)
    pol = FeedbackPolicy(gains, (1, 3, 2))
    for s, bits in enumerate(enumerate_admissible(3, 1, 0)):
        assert vals[s] == pytest.approx(evaluate_policy(pol, xi, bits, term, plant, spec, cfg).value, rel=1e-10)
    h = 1e-6
    for idx in np.ndindex(gains.shape):
        e = np.zeros_like(gains)
        e[idx] = h
        up = eng.run(gains + e, rho)
        dn = eng.run(gains - e, rho)
        fd = (up[0] + rho * up[1] - dn[0] - rho * dn[1]) / (2 * h)
        np.testing.assert_allclose(grad[(slice(None),) + idx], fd, rtol=1e-5, atol=1e-6)


def test_ranking_and_bounds(reactor, reactor_terminal):
    cfg = reactor.mpc
    ctx = _Context(reactor.plant, reactor.spec, reactor_terminal, cfg)
    adm = enumerate_admissible(6, 2, 1)
    xi = OverallState([0.3, -0.2, 0.5, 0.1], [0.05, -0.1], 9)
    z0 = np.r_[xi.x, xi.w]
    words = ctx.all_words()
    fixed = ctx.fixed_gain_values(z0, adm.bits)
    _, Pi = ctx.cached_bounds(1, adm)
    lb = np.einsum("i,swij,j->sw", z0, Pi, z0).max(axis=0)
    rng = np.random.default_rng(1)
    for a in rng.choice(len(words), 5, replace=False):
        word = tuple(int(d) for d in words[a])
        pol = FeedbackPolicy(np.repeat(reactor_terminal.K_f[None], 6, axis=0), word)
        exact = [evaluate_policy(pol, xi, w, reactor_terminal, reactor.plant, reactor.spec, cfg).value
                 for w in adm]
        np.testing.assert_allclose(fixed[a], exact, rtol=1e-9)
        # the lower bound holds for any gains on that word
        assert lb[a] <= max(exact) * (1 + 1e-9)


def test_nominal_controller_plans_without_losses(reactor, reactor_terminal):
    ctl = SelfTriggeredMPC(reactor.plant, reactor.spec, reactor_terminal, replace(reactor.mpc, max_words=1),
                           nominal=True)
    xi = OverallState([0.1, 0.0, 0.1, 0.0], np.zeros(2), 14)
    ctl.control_step(xi)
    ctl.control_step(xi, ack=0)
    ctl.control_step(xi, ack=0)
    ctl.control_step(xi, ack=0)
    assert ctl.r == 0 and len(ctl.solution.admissible) == 1
