"""REINFORCE with a per-state baseline for tabular softmax policies."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .mdp import RolloutBatch, SoftmaxPolicy, TabularMdp, rollout, softmax

RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class StateBaseline:
    """Running mean of observed reward-to-go per state (exponentially weighted)."""

    def __init__(self, n_states: int, rate: float = 0.1):
        self.values = np.zeros(n_states)
        self.seen = np.zeros(n_states, dtype=bool)
        self.rate = rate

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return self.values[states]

    def update(self, states: np.ndarray, targets: np.ndarray) -> None:
        n = len(self.values)
        sums = np.bincount(states.ravel(), weights=targets.ravel(), minlength=n)
        counts = np.bincount(states.ravel(), minlength=n)
        hit = counts > 0
        means = np.zeros(n)
        means[hit] = sums[hit] / counts[hit]
        fresh = hit & ~self.seen
        old = hit & self.seen
        self.values[fresh] = means[fresh]
        self.values[old] += self.rate * (means[old] - self.values[old])
        self.seen |= hit


def reward_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """G[:, t] = sum_{k >= t} gamma^(k - t) rewards[:, k] over the truncated horizon."""
    G = np.zeros_like(rewards, dtype=float)
    acc = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        acc = rewards[:, t] + gamma * acc
        G[:, t] = acc
    return G


def batch_mean_baseline(states: np.ndarray, G: np.ndarray, n_states: int) -> np.ndarray:
    sums = np.bincount(states.ravel(), weights=G.ravel(), minlength=n_states)
    counts = np.maximum(np.bincount(states.ravel(), minlength=n_states), 1)
    return (sums / counts)[states]


def as_batch(rollouts) -> RolloutBatch:
    if isinstance(rollouts, RolloutBatch):
        return rollouts
    trajs = list(rollouts)
    if not trajs:
        raise ValueError("policy gradient needs at least one rollout")
    H = max(len(t) for t in trajs)
    if any(len(t) != H for t in trajs):
        raise ValueError("rollouts must share one horizon")
    stack = lambda attr: np.stack([getattr(t, attr) for t in trajs])  # noqa: E731
    return RolloutBatch(stack("states"), stack("actions"), stack("next_states"), stack("rewards"))


def entropy_gradient(logits: np.ndarray) -> np.ndarray:
    """Gradient of the mean per-state entropy w.r.t. the logits."""
    p = softmax(logits)
    logp = np.log(np.clip(p, 1e-300, None))
    H = -(p * logp).sum(axis=1, keepdims=True)
    return -p * (logp + H) / logits.shape[0]


def surrogate_objective(
    logits: np.ndarray,
    states: np.ndarray,
    actions: np.ndarray,
    weights: np.ndarray,
    entropy_bonus: float,
) -> float:
    """sum_i,t weights[i,t] * log pi(a|s) / n + entropy_bonus * mean_s H(pi(.|s))."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1).mean()
    return float((weights * logp[states, actions]).sum() / states.shape[0] + entropy_bonus * ent)


def policy_gradient(
    policy: SoftmaxPolicy,
    rollouts,
    reward_fn: RewardFn,
    gamma: float,
    entropy_bonus: float = 0.0,
    baseline: StateBaseline | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (gradient of the surrogate w.r.t. logits, per-step weights gamma^t * A_t)."""
    batch = as_batch(rollouts)
    S, A = policy.logits.shape
    r = np.asarray(reward_fn(batch.states, batch.actions), dtype=float)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("reward function returned non-finite values")
    G = reward_to_go(r, gamma)
    if baseline is None:
        b = batch_mean_baseline(batch.states, G, S)
    else:
        b = baseline(batch.states)
        baseline.update(batch.states, G)
    adv = G - b
    weights = adv * gamma ** np.arange(batch.horizon)[None, :]
    p = policy.probs
    grad = np.zeros((S, A))
    n = batch.n
    flat_s, flat_a, flat_w = batch.states.ravel(), batch.actions.ravel(), weights.ravel()
    np.add.at(grad, (flat_s, flat_a), flat_w / n)
    grad -= np.bincount(flat_s, weights=flat_w / n, minlength=S)[:, None] * p
    if entropy_bonus:
        grad += entropy_bonus * entropy_gradient(policy.logits)
    return grad, weights


def policy_gradient_step(
    policy: SoftmaxPolicy,
    rollouts,
    reward_fn: RewardFn,
    lr: float,
    entropy_bonus: float = 0.0,
    gamma: float = 0.99,
    baseline: StateBaseline | None = None,
) -> SoftmaxPolicy:
    """One ascent step on the REINFORCE surrogate; returns a new policy."""
    batch = as_batch(rollouts)
    if batch.policy_version is not None and batch.policy_version != policy.version:
        raise ValueError(
            f"stale rollouts: generated by policy v{batch.policy_version}, current v{policy.version}"
        )
    grad, _ = policy_gradient(policy, batch, reward_fn, gamma, entropy_bonus, baseline)
    return SoftmaxPolicy(policy.logits + lr * grad, policy.version + 1)


def train_on_true_reward(
    mdp: TabularMdp,
    iters: int,
    rng: np.random.Generator,
    n_rollouts: int = 32,
    horizon: int = 100,
    lr: float = 1.0,
    entropy_bonus: float = 0.0,
    snapshots: list[int] | None = None,
) -> tuple[SoftmaxPolicy, dict[int, SoftmaxPolicy]]:
    """Plain REINFORCE against the MDP reward, keeping copies at the requested iterations."""
    policy = SoftmaxPolicy.uniform(mdp.n_states, mdp.n_actions)
    baseline = StateBaseline(mdp.n_states)
    wanted = set(snapshots or [])
    saved = {}
    reward_fn = lambda s, a: mdp.reward[s, a]  # noqa: E731
    for it in range(iters + 1):
        if it in wanted:
            saved[it] = policy
        if it == iters:
            break
        batch = rollout(mdp, policy, n_rollouts, horizon, rng, policy.version)
        policy = policy_gradient_step(
            policy, batch, reward_fn, lr, entropy_bonus, mdp.gamma, baseline
        )
    return policy, saved
