import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from altnet_lab.envs import Pendulum
from altnet_lab.errors import NumericError, PreconditionError, ShapeError
from altnet_lab.nn_core import global_grad_norm
from altnet_lab.ppo import (
    EnvCursor,
    Normalizer,
    PpoConfig,
    clip_gradients,
    clipped_policy_loss,
    collect_rollout,
    compute_gae,
    make_ppo_agent,
    minibatch_loss_and_grads,
    normalize_advantages,
    passive_ppo_update,
    policy_log_prob,
    ppo_update,
    reset_ppo_agent,
    rollout_gae,
    value_loss,
)
from altnet_lab.seeding import SeedStream

SMALL = PpoConfig(hidden_sizes=(16, 16), rollout_length=256, num_minibatches=8, update_epochs=4)


def rollout_for(agent, seed=0, steps=256, env=None):
    env = env or Pendulum()
    cursor = EnvCursor(env, SeedStream(seed, "episodes"), Normalizer(3))
    return collect_rollout(agent, cursor, steps, np.random.default_rng(seed))


def gae_oracle(r, v, d, boot, g, lam):
    # explicit sum over future deltas, truncated at the first episode end
    n = len(r)
    nxt = np.append(v[1:], boot)
    delta = r + g * (1 - d) * nxt - v
    adv = np.zeros(n)
    for t in range(n):
        coef = 1.0
        for k in range(t, n):
            adv[t] += coef * delta[k]
            if d[k]:
                break
            coef *= g * lam
    return adv


def test_gae_hand_unrolled_five_steps():
    r = np.array([1.0, -0.5, 2.0, 0.0, 0.3])
    v = np.array([0.2, 0.1, -0.4, 0.5, 1.0])
    d = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
    g, lam, boot = 0.9, 0.8, 0.7
    d4 = 0.3 + g * boot - 1.0
    d3 = 0.0 + g * 1.0 - 0.5
    d2 = 2.0 - (-0.4)
    d1 = -0.5 + g * -0.4 - 0.1
    d0 = 1.0 + g * 0.1 - 0.2
    a4 = d4
    a3 = d3 + g * lam * a4
    a2 = d2
    a1 = d1 + g * lam * a2
    a0 = d0 + g * lam * a1
    adv, ret = compute_gae(r, v, d, boot, g, lam)
    assert np.allclose(adv, [a0, a1, a2, a3, a4], rtol=0, atol=1e-12)
    assert np.allclose(ret, adv + v, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_gae_matches_explicit_sum(n, g, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=n), rng.normal(size=n)
    d = (rng.random(n) < 0.3).astype(float)
    boot = float(rng.normal())
    adv, _ = compute_gae(r, v, d, boot, g, lam)
    assert np.allclose(adv, gae_oracle(r, v, d, boot, g, lam), rtol=1e-9, atol=1e-9)


def test_gae_degenerate_cases():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=20), rng.normal(size=20)
    d = (rng.random(20) < 0.2).astype(float)
    delta = r + 0.99 * (1 - d) * np.append(v[1:], 0.4) - v
    assert np.array_equal(compute_gae(r, v, d, 0.4, 0.99, 0.0)[0], delta)
    assert np.array_equal(compute_gae(r, v, d, 0.4, 0.0, 0.95)[0], r - v)


def test_gae_done_blocks_propagation():
    r, v, d = np.zeros(4), np.zeros(4), np.array([0.0, 1.0, 0.0, 0.0])
    base = compute_gae(r, v, d, 0.0, 0.99, 0.95)[0]
    r2 = r.copy()
    r2[2:] = 5.0
    changed = compute_gae(r2, v, d, 0.0, 0.99, 0.95)[0]
    assert np.array_equal(base[:2], changed[:2])


def test_rollout_is_reproducible_and_logprobs_recompute():
    a1 = make_ppo_agent(3, 1, 0, SMALL)
    r1 = rollout_for(a1, seed=3)
    r2 = rollout_for(make_ppo_agent(3, 1, 0, SMALL), seed=3)
    assert np.array_equal(r1.observations, r2.observations) and np.array_equal(r1.actions, r2.actions)
    assert np.allclose(policy_log_prob(a1, r1.observations, r1.actions), r1.behavior_log_prob,
                       rtol=0, atol=1e-10)
    assert len(r1) == 256 and r1.dones.sum() == 1  # 200-step episodes


def test_rollout_rewards_match_resimulation():
    env = Pendulum()
    ag = make_ppo_agent(3, 1, 1, SMALL)
    ro = rollout_for(ag, seed=1, steps=300, env=env)
    sim = Pendulum()
    for t in range(len(ro)):
        cos, sin, thd = ro.raw_observations[t]
        sim.set_state(math.atan2(sin, cos), thd)
        res = sim.step(np.clip(ro.actions[t], -2, 2))
        assert res.reward == pytest.approx(ro.env_rewards[t], abs=1e-9)
        assert np.allclose(res.observation, ro.raw_next_observations[t], atol=1e-9)


def test_rollout_requires_a_step():
    with pytest.raises(PreconditionError):
        rollout_for(make_ppo_agent(3, 1, 0, SMALL), steps=0)


def test_clipped_loss_identity_ratio_and_clipped_gradient():
    adv = np.array([1.0, -2.0, 0.5])
    loss, _ = clipped_policy_loss(np.ones(3), adv, 0.2)
    assert loss == pytest.approx(-adv.mean())
    _, d = clipped_policy_loss(np.array([1.5, 1.0, 0.5]), np.array([1.0, 1.0, -1.0]), 0.2)
    assert d[0] == 0.0 and d[2] == 0.0 and d[1] != 0.0


def test_advantage_normalization_moments():
    adv = normalize_advantages(np.random.default_rng(0).normal(3, 7, 64))
    assert abs(adv.mean()) < 1e-8 and abs(adv.std() - 1) < 1e-6


def test_gradient_clipping_bounds_norm():
    rng = np.random.default_rng(0)
    arrays = [rng.normal(0, 10, 30), rng.normal(0, 10, (4, 5))]
    raw = clip_gradients(arrays, 0.5)
    assert raw > 0.5 and global_grad_norm(arrays) <= 0.5 + 1e-9
    small = [np.full(3, 0.01)]
    clip_gradients(small, 0.5)
    assert np.array_equal(small[0], np.full(3, 0.01))


def _mb(seed=0, clamp=None):
    ag = make_ppo_agent(3, 2, seed, PpoConfig(hidden_sizes=(5,)))
    rng = np.random.default_rng(seed)
    n = 12
    obs, act = rng.normal(size=(n, 3)), rng.normal(size=(n, 2))
    blp = policy_log_prob(ag, obs, act) + rng.normal(0, 0.1, n)
    adv, ret = rng.normal(size=n), rng.normal(size=n)
    return ag, (obs, act, blp, adv, ret, clamp)


@pytest.mark.parametrize("clamp", [None, 5.0])
def test_total_loss_gradient_matches_finite_differences(clamp):
    ag, args = _mb(2, clamp)
    _, pg, d_ls, vg = minibatch_loss_and_grads(ag, *args)
    h = 1e-6
    for params, grads in ((ag.policy_net.params(), pg.arrays()), ([ag.log_std], [d_ls]),
                          (ag.value_net.params(), vg.arrays())):
        for p, g in zip(params, grads):
            num = np.zeros_like(p)
            for i in np.ndindex(*p.shape):
                old = p[i]
                p[i] = old + h
                up = minibatch_loss_and_grads(ag, *args)[0]["total"]
                p[i] = old - h
                down = minibatch_loss_and_grads(ag, *args)[0]["total"]
                p[i] = old
                num[i] = (up - down) / (2 * h)
            scale = max(np.max(np.abs(num)), 1e-8)
            assert np.max(np.abs(num - g)) / scale < 1e-3


def test_ratio_clamp_is_exactly_e5():
    ag, (obs, act, blp, adv, ret, _) = _mb(3)
    blp = policy_log_prob(ag, obs, act) - 20.0  # passive log-prob 20 nats above behavior
    adv = -np.abs(adv) - 1.0  # negative advantages select the unclipped ratio term
    loss, *_ = minibatch_loss_and_grads(ag, obs, act, blp, adv, ret, 5.0)
    adv_n = normalize_advantages(adv)
    expected = -np.mean(np.minimum(math.exp(5) * adv_n, 1.2 * adv_n))
    assert loss["policy_loss"] == pytest.approx(expected, rel=1e-12)


def test_nonfinite_ratio_is_numeric_error():
    ag, (obs, act, blp, adv, ret, _) = _mb(4)
    with pytest.raises(NumericError):
        minibatch_loss_and_grads(ag, obs, act, blp - 1e4, adv, ret)


def test_passive_equals_active_when_parameters_match():
    a, b = make_ppo_agent(3, 1, 5, SMALL), make_ppo_agent(3, 1, 5, SMALL)
    ro = rollout_for(a, seed=5)
    adv, ret = rollout_gae(a, ro)
    r1 = ppo_update(a, ro, adv, ret, np.random.default_rng(0))
    r2 = passive_ppo_update(b, ro, adv, ret, np.random.default_rng(0))
    assert r1 == r2
    assert np.array_equal(a.policy_net.flat, b.policy_net.flat)


def test_fresh_passive_reduces_its_value_loss():
    active = make_ppo_agent(3, 1, 6, SMALL)
    ro = rollout_for(active, seed=6)
    passive = make_ppo_agent(3, 1, 77, SMALL)
    adv, ret = rollout_gae(passive, ro)
    before = value_loss(passive, ro, ret)
    rep = passive_ppo_update(passive, ro, adv, ret, np.random.default_rng(1))
    assert all(math.isfinite(x) for x in vars(rep).values())
    assert value_loss(passive, ro, ret) < before


def test_update_counts_minibatches_and_checks_alignment():
    ag = make_ppo_agent(3, 1, 0, SMALL)
    ro = rollout_for(ag)
    adv, ret = rollout_gae(ag, ro)
    assert ppo_update(ag, ro, adv, ret, np.random.default_rng(0)).minibatches == 4 * 8
    with pytest.raises(ShapeError):
        ppo_update(ag, ro, adv[:-1], ret, np.random.default_rng(0))


def test_reset_restores_fresh_parameters():
    ag = make_ppo_agent(3, 1, 0, SMALL)
    ro = rollout_for(ag)
    adv, ret = rollout_gae(ag, ro)
    ppo_update(ag, ro, adv, ret, np.random.default_rng(0))
    reset_ppo_agent(ag, 42)
    fresh = make_ppo_agent(3, 1, 42, SMALL)
    assert np.array_equal(ag.policy_net.flat, fresh.policy_net.flat)
    assert np.array_equal(ag.value_net.flat, fresh.value_net.flat)
    assert np.all(ag.log_std == 0) and ag.policy_opt.step_count == 0
