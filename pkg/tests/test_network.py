import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmpc.network import (
    AdversarialLoss, AssumptionViolation, BoundedRandomLoss, LossHistory, LossSequence, ScriptedLoss,
    TokenBucketSpec, bucket_step, enumerate_admissible, is_admissible, parse_loss_trace, split_by_first_bit,
    update_counter,
)

SPEC = TokenBucketSpec(1, 3, 14)


def brute_force(N, P, r):
    """Filter every binary word directly through the three admissibility conditions."""
    out = []
    for bits in itertools.product((0, 1), repeat=N + P):
        ones = [i for i, b in enumerate(bits) if b]
        if not ones or ones[0] > P - r:
            continue
        if any(b - a > P + 1 for a, b in zip(ones, ones[1:])):
            continue
        if N + P - ones[-1] > P + 1:
            continue
        out.append(bits)
    return out


def words(s):
    return [w.bits for w in s]


def as_bits(*texts):
    return [tuple(int(c) for c in t) for t in texts]


def test_bucket_step_examples():
    assert bucket_step(8, True, SPEC) == 6
    assert bucket_step(14, False, SPEC) == 14
    assert bucket_step(1, True, SPEC) == -1


def test_bucket_spec_derived():
    assert SPEC.M == 3 and SPEC.min_level == 2
    assert TokenBucketSpec(2, 5, 9).M == 3
    with pytest.raises(ValueError):
        TokenBucketSpec(3, 2, 5)


def test_enumeration_examples():
    assert words(enumerate_admissible(2, 1, 0)) == as_bits("010", "011", "101", "110", "111")
    assert words(enumerate_admissible(2, 1, 1)) == as_bits("101", "110", "111")
    for N in range(1, 5):
        assert words(enumerate_admissible(N, 0, 0)) == [(1,) * N]


def test_enumeration_rejects_bad_counter():
    with pytest.raises(ValueError):
        enumerate_admissible(3, 1, 2)


@pytest.mark.parametrize("N,P", [(N, P) for N in range(1, 6) for P in range(0, 4)])
def test_enumeration_matches_brute_force(N, P):
    for r in range(P + 1):
        got = enumerate_admissible(N, P, r)
        assert words(got) == brute_force(N, P, r)
        assert all(is_admissible(w.bits, P, r) for w in got)
        assert all(got.index_of(w) == i for i, w in enumerate(got))


def test_reactor_set_sizes():
    # frozen from the brute-force filter above
    assert [len(brute_force(6, 2, r)) for r in range(3)] == [149, 125, 81]
    assert [len(enumerate_admissible(6, 2, r)) for r in range(3)] == [149, 125, 81]


def test_forced_success_at_counter_limit():
    assert all(w[0] == 1 for w in enumerate_admissible(6, 2, 2))


def test_split_by_first_bit():
    s = enumerate_admissible(2, 1, 0)
    assert words(split_by_first_bit(s, 1)) == as_bits("101", "110", "111")
    assert words(split_by_first_bit(s, 0)) == as_bits("010", "011")
    assert split_by_first_bit([], 1) == []


@pytest.mark.parametrize("N,P", [(N, P) for N in range(1, 6) for P in range(0, 4)])
def test_suffix_consistency(N, P):
    """Every word admissible one instant later continues some word admissible now."""
    for r in range(P + 1):
        now = enumerate_admissible(N, P, r)
        for first in (0, 1):
            r_next = 0 if first else r + 1
            if r_next > P:
                continue
            prefixes = {w.bits[1:] for w in split_by_first_bit(now, first)}
            for w in enumerate_admissible(N, P, r_next):
                assert w.bits[:N + P - 1] in prefixes


def test_update_counter():
    assert update_counter(LossHistory(2, 0), 1, 2) == LossHistory(0, 1)
    assert update_counter(LossHistory(0, 1), 0, 2) == LossHistory(1, 0)
    with pytest.raises(AssumptionViolation):
        update_counter(LossHistory(2, 0), 0, 2)


def test_loss_sequence_tau():
    s = LossSequence((0, 1, 1, 0, 1))
    assert s.tau == (1, 2, 4)
    assert str(s) == "01101"
    with pytest.raises(ValueError):
        LossSequence((0, 2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), P=st.integers(0, 3), p=st.floats(0.0, 1.0))
def test_bounded_random_respects_bound(seed, P, p):
    model = BoundedRandomLoss(p, P, seed)
    r = longest = 0
    for _ in range(10_000):
        r = 0 if model.draw(r) else r + 1
        longest = max(longest, r)
    assert longest <= P


def test_bounded_random_is_seeded():
    a, b = BoundedRandomLoss(0.5, 2, 7), BoundedRandomLoss(0.5, 2, 7)
    assert [a.draw(0) for _ in range(50)] == [b.draw(0) for _ in range(50)]


def test_scripted_and_adversarial():
    s = ScriptedLoss([1, 0, 0])
    assert [s.draw(0) for _ in range(7)] == [1, 0, 0, 1, 0, 0, 1]
    once = ScriptedLoss([1], repeat=False)
    once.draw(0)
    with pytest.raises(IndexError):
        once.draw(0)
    assert AdversarialLoss(2).draw(0) == 1
    assert AdversarialLoss(2, choose=lambda r, sol: 0).draw(0) == 0


def test_parse_loss_trace():
    assert parse_loss_trace("1 0 0  # comment\n1\n\n0 1") == [1, 0, 0, 1, 0, 1]
    with pytest.raises(ValueError):
        parse_loss_trace("1 2")


def test_periodic_sending_keeps_bucket_nonnegative():
    for g, c, b in [(1, 3, 14), (2, 5, 9), (1, 1, 2), (3, 7, 8)]:
        spec = TokenBucketSpec(g, c, b)
        for beta0 in range(spec.min_level, b + 1):
            for spacing in range(spec.M, spec.M + 3):
                beta = beta0
                for t in range(60):
                    beta = bucket_step(beta, t % spacing == 0, spec)
                    assert beta >= 0
