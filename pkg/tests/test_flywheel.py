import json
import math

import numpy as np
import pytest

from learnloop.allocation import EngagementCurve
from learnloop.bkt import FIT_BOUNDS, BktParams, box_arrays, learn_transition
from learnloop.errors import OrderingError, UnknownSkillError, ValidationError
from learnloop.flywheel import (
    FlywheelState,
    Tier,
    initial_state,
    policy_loss,
    proximal_update,
    recommend,
    step,
    tier_for,
)
from learnloop.signals import Channel, SignalEvent, SmootherState

P = BktParams(0.5, 0.2, 0.1, 0.2)


def ev(ts, correct=1, skills=("s",), student="u", features=(1.0, 2.0, 3.0, 4.0, 5.0)):
    return SignalEvent(student, ts, f"q{ts}", skills, correct, features)


def test_policy_loss_examples():
    assert policy_loss(0.5, 1) == pytest.approx(0.6931, abs=1e-4)
    assert policy_loss(1.0, 1) == pytest.approx(0.0, abs=1e-8)
    assert math.isfinite(policy_loss(0.0, 1))
    for p in np.linspace(0.01, 0.99, 25):
        assert policy_loss(p, 1) == pytest.approx(policy_loss(1 - p, 0), rel=1e-12)


def test_proximal_update_examples():
    lo, hi = box_arrays(FIT_BOUNDS)
    theta = P.as_array()
    np.testing.assert_array_equal(proximal_update(theta, np.zeros(4), 0.1, 0.0, lo, hi), theta)
    np.testing.assert_allclose(proximal_update([0.5], [1.0], 0.1, 0.0), [0.4])
    np.testing.assert_allclose(proximal_update(theta, np.zeros(4), 1.0, 1e9, lo, hi), lo)
    np.testing.assert_allclose(proximal_update(theta, np.zeros(4), 1.0, 1e12), 0.0, atol=1e-11)
    with pytest.raises(ValidationError):
        proximal_update([0.5, 0.5], [1.0], 0.1, 0.0)


def test_small_step_is_small():
    rng = np.random.default_rng(0)
    for _ in range(100):
        theta = rng.uniform(0.1, 0.4, 4)
        g = rng.normal(size=4)
        eta = 10 ** rng.uniform(-6, -2)
        out = proximal_update(theta, g, eta, 0.0)
        assert np.linalg.norm(out - theta) <= eta * np.linalg.norm(g) + 1e-15


def test_tiers():
    assert tier_for(0.05) is Tier.FOUNDATIONAL
    assert tier_for(0.1) is Tier.FOUNDATIONAL
    assert tier_for(0.4) is Tier.PRACTICE
    assert tier_for(0.8) is Tier.ADVANCED
    assert tier_for(0.79, (0.2, 0.9)) is Tier.PRACTICE


def test_recommend_targets_highest_engagement():
    state = initial_state("u", {"low": BktParams(0.5, 0.1, 0.1, 0.2), "high": BktParams(0.9, 0.1, 0.1, 0.2)}, curve=EngagementCurve(2.0, 1.0, 0.5))
    rec = recommend(state, "high")
    assert rec.target_skill == "low"
    assert rec.tier is Tier.ADVANCED and rec.mastery == 0.9
    assert rec.engagement == 1.0
    with pytest.raises(UnknownSkillError):
        recommend(state, "nope")


def test_absorbing_mastery_stays_advanced():
    state = initial_state("u", {"s": BktParams(1.0, 0.3, 0.0, 0.0)}, smoother=SmootherState(alpha=1.0, window=1))
    new, rec = step(state, ev(1, 1))
    assert new.mastery["s"].p_mastery == 1.0
    assert rec.tier is Tier.ADVANCED
    np.testing.assert_array_equal(new.features, [1.0, 2.0, 3.0, 4.0, 5.0])
    assert new.policy["s"].in_box()


def test_low_mastery_is_foundational():
    state = initial_state("u", {"s": BktParams(0.1, 0.01, 0.1, 0.2)})
    assert recommend(state, "s").tier is Tier.FOUNDATIONAL


def test_step_order_and_state_updates():
    state = initial_state("u", {"s": P, "t": P}, eta=0.05)
    new, rec = step(state, ev(10, 1, ("s",)))
    # input untouched
    assert state.counter == 0 and state.mastery["s"].posterior is None
    s = new.mastery["s"]
    post = 0.5 * 0.9 / (0.5 * 0.9 + 0.5 * 0.2)
    assert s.posterior == pytest.approx(post, abs=1e-15)
    assert s.p_mastery == pytest.approx(learn_transition(post, new.policy["s"]), abs=1e-15)
    assert new.mastery["t"].observation_count == 0 and new.policy["t"] == P
    # a correct answer under l0 = 0.5 pushes l0 up and slip down
    assert new.policy["s"].l0 > P.l0 and new.policy["s"].slip < P.slip
    assert (new.counter, new.last_timestamp, new.last_recommendation) == (1, 10, rec.target_skill)
    assert rec.skill_id == "s"


def test_step_errors():
    state = initial_state("u", {"s": P})
    state, _ = step(state, ev(5))
    with pytest.raises(OrderingError):
        step(state, ev(4))
    with pytest.raises(UnknownSkillError):
        step(state, ev(6, skills=("zzz",)))
    with pytest.raises(ValidationError):
        step(state, ev(6, student="other"))
    with pytest.raises(ValidationError):
        initial_state("u", {"s": P}, eta=0.0)
    with pytest.raises(ValidationError):
        initial_state("u", {"s": P}, lam=-1.0)


def test_untagged_event_still_recommends():
    state = initial_state("u", {"s": P})
    forum = SignalEvent("u", 3, "forum", (), 0, (0.0,) * 5, channel=Channel.PARTICIPATION)
    new, rec = step(state, forum)
    assert rec.skill_id == "s" and new.policy == state.policy and new.counter == 1


def _replay(seed):
    rng = np.random.default_rng(seed)
    state = initial_state("u", {"a": P, "b": BktParams(0.3, 0.1, 0.2, 0.25)})
    for i in range(300):
        tags = ("a",) if i % 3 else ("a", "b")
        state, _ = step(state, ev(i + 1, int(rng.integers(0, 2)), tags, features=tuple(rng.normal(size=5))))
    return state


def test_replay_is_bit_identical():
    a, b = _replay(4), _replay(4)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)


def test_state_json_round_trip_resumes_identically():
    state = _replay(5)
    clone = FlywheelState.from_dict(json.loads(json.dumps(state.to_dict())))
    e = ev(10_000, 1, ("b",))
    x, rx = step(state, e)
    y, ry = step(clone, e)
    assert x.to_dict() == y.to_dict() and rx == ry
