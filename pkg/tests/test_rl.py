import numpy as np
import pytest

from conftest import single_state
from puail.mdp import SoftmaxPolicy, StochasticPolicy, rollout
from puail.rl import (
    StateBaseline,
    as_batch,
    entropy_gradient,
    policy_gradient,
    policy_gradient_step,
    reward_to_go,
    surrogate_objective,
)


def _random_setup(seed, S=5, A=3, n=6, H=8):
    from puail.mdp import random_mdp

    rng = np.random.default_rng(seed)
    m = random_mdp(rng, S, A)
    pol = SoftmaxPolicy(rng.normal(size=(S, A)))
    batch = rollout(m, pol, n, H, rng, pol.version)
    return m, pol, batch, rng


def test_reward_to_go_matches_loop():
    r = np.array([[1.0, 2.0, 3.0]])
    assert np.allclose(reward_to_go(r, 0.5), [[1 + 0.5 * 2 + 0.25 * 3, 2 + 0.5 * 3, 3]])


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("ent", [0.0, 0.3])
def test_gradient_matches_finite_differences(seed, ent):
    m, pol, batch, rng = _random_setup(seed)
    table = rng.normal(size=(m.n_states, m.n_actions))
    grad, w = policy_gradient(pol, batch, lambda s, a: table[s, a], m.gamma, ent)
    h = 1e-6
    fd = np.zeros_like(grad)
    for idx in np.ndindex(*grad.shape):
        lp, lm = pol.logits.copy(), pol.logits.copy()
        lp[idx] += h
        lm[idx] -= h
        fd[idx] = (
            surrogate_objective(lp, batch.states, batch.actions, w, ent)
            - surrogate_objective(lm, batch.states, batch.actions, w, ent)
        ) / (2 * h)
    rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
    assert rel < 1e-4


def test_entropy_gradient_finite_differences():
    rng = np.random.default_rng(0)
    th = rng.normal(size=(4, 3))

    def H(t):
        p = np.exp(t - t.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        return -(p * np.log(p)).sum(1).mean()

    fd = np.zeros_like(th)
    for idx in np.ndindex(*th.shape):
        e = np.zeros_like(th)
        e[idx] = 1e-6
        fd[idx] = (H(th + e) - H(th - e)) / 2e-6
    assert np.abs(entropy_gradient(th) - fd).max() < 1e-8


def test_zero_reward_leaves_policy_unchanged():
    m, pol, batch, _ = _random_setup(1)
    new = policy_gradient_step(pol, batch, lambda s, a: np.zeros(s.shape), 1.0, 0.0, m.gamma,
                               StateBaseline(m.n_states))
    assert np.array_equal(new.logits, pol.logits)


def test_bandit_converges_to_rewarded_arm():
    m = single_state(0.0, 0.9, n_actions=2)
    reward = np.array([[1.0, 0.0]])
    pol = SoftmaxPolicy.uniform(1, 2)
    base = StateBaseline(1)
    rng = np.random.default_rng(0)
    for step in range(5000):
        batch = rollout(m, pol, 8, 5, rng, pol.version)
        pol = policy_gradient_step(pol, batch, lambda s, a: reward[s, a], 1.0, 0.0, m.gamma, base)
        if pol.probs[0, 0] > 0.99:
            break
    assert pol.probs[0, 0] > 0.99


def test_large_entropy_bonus_drives_toward_uniform():
    m = single_state(0.0, 0.9, n_actions=3)
    reward = np.array([[1.0, 0.0, 0.0]])
    pol = SoftmaxPolicy(np.array([[3.0, -1.0, 0.5]]))
    rng = np.random.default_rng(1)
    for _ in range(300):
        batch = rollout(m, pol, 8, 5, rng, pol.version)
        pol = policy_gradient_step(pol, batch, lambda s, a: reward[s, a], 0.01, 100.0, m.gamma)
    assert np.abs(pol.probs - 1 / 3).max() < 0.02


def test_stale_rollouts_rejected():
    m, pol, batch, rng = _random_setup(2)
    newer = policy_gradient_step(pol, batch, lambda s, a: np.ones(s.shape), 0.1, 0.0, m.gamma)
    with pytest.raises(ValueError, match="stale"):
        policy_gradient_step(newer, batch, lambda s, a: np.ones(s.shape), 0.1, 0.0, m.gamma)


def test_empty_rollouts_rejected():
    with pytest.raises(ValueError):
        as_batch([])


def test_non_finite_reward_raises():
    m, pol, batch, _ = _random_setup(3)
    with pytest.raises(FloatingPointError):
        policy_gradient(pol, batch, lambda s, a: np.full(s.shape, np.nan), m.gamma)


def test_state_baseline_running_mean():
    b = StateBaseline(2, rate=0.5)
    b.update(np.array([0, 0]), np.array([2.0, 4.0]))
    assert b.values[0] == 3.0 and b.values[1] == 0.0
    b.update(np.array([0]), np.array([5.0]))
    assert b.values[0] == 4.0


def test_stochastic_policy_rejects_bad_rows():
    with pytest.raises(ValueError):
        StochasticPolicy(np.array([[0.6, 0.6]]))
