"""Finite MDPs: exact planning, policy evaluation, occupancy measures and rollouts.

Occupancy measures are normalized, ``rho(s, a) = (1 - gamma) * sum_t gamma^t P(s_t=s, a_t=a)``,
so they are probability tables over state-action pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

PROB_ATOL = 1e-12

# grid actions: up, right, down, left
GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


class NumericError(ArithmeticError):
    """Raised when a numerical routine produces an unusable result."""


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_stochastic_rows(probs: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(probs)):
        raise ValueError(f"{what} contains non-finite entries")
    if np.any(probs < 0):
        raise ValueError(f"{what} has negative entries")
    err = np.abs(probs.sum(axis=-1) - 1.0).max()
    if err > PROB_ATOL * max(1, probs.shape[-1]):
        raise ValueError(f"{what} rows do not sum to one (max error {err:.3e})")


@dataclass(frozen=True)
class TabularMdp:
    transition: np.ndarray  # [S, A, S'] = P(s' | s, a)
    reward: np.ndarray  # [S, A]
    gamma: float
    init_dist: np.ndarray  # [S]
    # optional normalized (row, col) per state for grid feature maps
    coords: np.ndarray | None = None
    name: str = "mdp"

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward)
        mu0 = _frozen(self.init_dist)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape [S, A, S], got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        if R.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {R.shape}")
        if not np.all(np.isfinite(R)):
            raise ValueError("reward table contains non-finite entries")
        if mu0.shape != (S,):
            raise ValueError(f"init_dist must have shape {(S,)}, got {mu0.shape}")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        _check_stochastic_rows(P, "transition")
        _check_stochastic_rows(mu0, "init_dist")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "init_dist", mu0)
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.coords is not None:
            c = _frozen(self.coords)
            if c.shape[0] != S:
                raise ValueError("coords must have one row per state")
            object.__setattr__(self, "coords", c)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class StochasticPolicy:
    probs: np.ndarray  # [S, A]

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise ValueError("policy table must be 2-D")
        _check_stochastic_rows(p, "policy")
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "StochasticPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Iterable[int], n_actions: int) -> "StochasticPolicy":
        actions = np.asarray(list(actions), dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class SoftmaxPolicy:
    """Per-state softmax over a logit table. ``version`` counts parameter updates."""

    logits: np.ndarray
    version: int = 0

    def __post_init__(self):
        th = _frozen(self.logits)
        if th.ndim != 2 or not np.all(np.isfinite(th)):
            raise ValueError("logits must be a finite 2-D table")
        object.__setattr__(self, "logits", th)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "SoftmaxPolicy":
        return cls(np.zeros((n_states, n_actions)))

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def stochastic(self) -> StochasticPolicy:
        p = self.probs
        return StochasticPolicy(p / p.sum(axis=1, keepdims=True))

    def entropy(self) -> np.ndarray:
        p = self.probs
        return -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1)


@dataclass(frozen=True)
class OccupancyMeasure:
    rho: np.ndarray  # [S, A], sums to one

    def __post_init__(self):
        r = _frozen(self.rho)
        if r.ndim != 2 or not np.all(np.isfinite(r)):
            raise ValueError("occupancy must be a finite 2-D table")
        if np.any(r < -1e-14):
            raise ValueError("occupancy has negative entries")
        if abs(r.sum() - 1.0) > 1e-10:
            raise ValueError(f"occupancy sums to {r.sum():.12f}, expected 1")
        object.__setattr__(self, "rho", r)

    @property
    def state_marginal(self) -> np.ndarray:
        return self.rho.sum(axis=1)

    def policy(self) -> StochasticPolicy:
        """Recover pi(a|s) = rho(s,a) / sum_a rho(s,a); uniform where the state has no mass."""
        d = self.state_marginal
        S, A = self.rho.shape
        probs = np.full((S, A), 1.0 / A)
        seen = d > 0
        probs[seen] = self.rho[seen] / d[seen, None]
        return StochasticPolicy(probs / probs.sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def steps(self) -> list[tuple[int, int, float, int]]:
        return [
            (int(s), int(a), float(r), int(s2))
            for s, a, r, s2 in zip(self.states, self.actions, self.rewards, self.next_states)
        ]

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.rewards * gamma ** np.arange(len(self.rewards))))


@dataclass(frozen=True)
class RolloutBatch:
    """Equal-length rollouts stored as [n, horizon] arrays."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    policy_version: int | None = None
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def trajectories(self) -> list[Trajectory]:
        return [
            Trajectory(self.states[i], self.actions[i], self.rewards[i], self.next_states[i])
            for i in range(self.n)
        ]


def _as_probs(policy) -> np.ndarray:
    if isinstance(policy, SoftmaxPolicy):
        return policy.probs
    if isinstance(policy, StochasticPolicy):
        return policy.probs
    return np.asarray(policy, dtype=float)


def _check_policy(mdp: TabularMdp, probs: np.ndarray) -> None:
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {probs.shape} does not match mdp {(mdp.n_states, mdp.n_actions)}"
        )


def state_transition_matrix(mdp: TabularMdp, policy) -> np.ndarray:
    probs = _as_probs(policy)
    _check_policy(mdp, probs)
    return np.einsum("sa,sat->st", probs, mdp.transition)


def q_from_values(mdp: TabularMdp, values: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.gamma * mdp.transition @ values


def policy_evaluation(mdp: TabularMdp, policy) -> np.ndarray:
    """Exact V^pi from the linear system (I - gamma P_pi) V = r_pi."""
    probs = _as_probs(policy)
    P_pi = state_transition_matrix(mdp, probs)
    r_pi = (probs * mdp.reward).sum(axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def value_iteration(
    mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 1_000_000
) -> tuple[np.ndarray, StochasticPolicy]:
    """Optimal values and the greedy one-hot policy (ties go to the lowest action index)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not np.all(np.isfinite(mdp.reward)):
        raise ValueError("reward table contains non-finite entries")
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        V_new = q_from_values(mdp, V).max(axis=1)
        diff = np.abs(V_new - V).max()
        V = V_new
        # residual of V_new is at most gamma * diff
        if diff < tol:
            break
    else:
        raise NumericError(f"value iteration did not converge in {max_iter} sweeps")
    Q = q_from_values(mdp, V)
    scale = max(1.0, float(np.abs(Q).max()))
    best = Q >= Q.max(axis=1, keepdims=True) - 1e-9 * scale
    greedy = np.argmax(best, axis=1)
    return V, StochasticPolicy.deterministic(greedy, mdp.n_actions)


def bellman_flow_residual(mdp: TabularMdp, rho: np.ndarray) -> float:
    """max_s |sum_a rho(s,a) - (1-gamma) mu0(s) - gamma sum_{s',a'} P(s|s',a') rho(s',a')|"""
    inflow = np.einsum("sa,sat->t", rho, mdp.transition)
    lhs = rho.sum(axis=1)
    rhs = (1 - mdp.gamma) * mdp.init_dist + mdp.gamma * inflow
    return float(np.abs(lhs - rhs).max())


def occupancy(
    mdp: TabularMdp,
    policy,
    tol: float = 1e-13,
    method: str = "solve",
    max_iter: int = 1_000_000,
) -> OccupancyMeasure:
    """Normalized discounted state-action occupancy of ``policy``.

    ``method="solve"`` solves the flow equations directly; ``"power"`` iterates them
    until the update falls below ``tol``.
    """
    probs = _as_probs(policy)
    P_pi = state_transition_matrix(mdp, probs)
    mu0 = mdp.init_dist
    g = mdp.gamma
    if method == "solve":
        A = np.eye(mdp.n_states) - g * P_pi.T
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e12:
            raise NumericError(f"flow system is ill-conditioned (cond={cond:.3e}, gamma={g})")
        d = np.linalg.solve(A, (1 - g) * mu0)
    elif method == "power":
        d = (1 - g) * mu0
        for _ in range(max_iter):
            d_new = (1 - g) * mu0 + g * P_pi.T @ d
            if np.abs(d_new - d).max() < tol:
                d = d_new
                break
            d = d_new
        else:
            raise NumericError(f"power iteration did not reach residual {tol} in {max_iter} steps")
    else:
        raise ValueError(f"unknown occupancy method {method!r}")
    d = np.clip(d, 0.0, None)
    rho = d[:, None] * probs
    return OccupancyMeasure(rho / rho.sum())


def evaluate_return(mdp: TabularMdp, policy) -> float:
    """Expected discounted return from mu0, computed through the occupancy measure."""
    probs = _as_probs(policy)
    rho = occupancy(mdp, probs).rho
    via_rho = float((rho * mdp.reward).sum() / (1 - mdp.gamma))
    via_values = float(mdp.init_dist @ policy_evaluation(mdp, probs))
    if abs(via_rho - via_values) > 1e-8 * max(1.0, abs(via_values)):
        raise NumericError(
            f"return mismatch: occupancy route {via_rho!r} vs evaluation route {via_values!r}"
        )
    return via_rho


def _sample_rows(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF sampling, one row of cum per draw
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def rollout(
    mdp: TabularMdp,
    policy,
    n: int,
    horizon: int,
    rng: np.random.Generator,
    policy_version: int | None = None,
) -> RolloutBatch:
    """Sample ``n`` trajectories of exactly ``horizon`` steps as arrays."""
    if n <= 0 or horizon <= 0:
        raise ValueError("n and horizon must be positive")
    probs = _as_probs(policy)
    _check_policy(mdp, probs)
    pcum = np.cumsum(probs, axis=1)
    tcum = np.cumsum(mdp.transition, axis=2)
    states = np.empty((n, horizon), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    nexts = np.empty((n, horizon), dtype=np.int64)
    s = _sample_rows(np.broadcast_to(np.cumsum(mdp.init_dist), (n, mdp.n_states)), rng.random(n))
    for t in range(horizon):
        a = _sample_rows(pcum[s], rng.random(n))
        s2 = _sample_rows(tcum[s, a], rng.random(n))
        states[:, t], actions[:, t], nexts[:, t] = s, a, s2
        s = s2
    rewards = mdp.reward[states, actions]
    return RolloutBatch(states, actions, nexts, rewards, policy_version)


def sample_trajectories(
    mdp: TabularMdp, policy, n: int, horizon: int, seed: int
) -> list[Trajectory]:
    return rollout(mdp, policy, n, horizon, np.random.default_rng(seed)).trajectories()


def sample_occupancy_pairs(
    mdp: TabularMdp, policy, n: int, rng: np.random.Generator, horizon: int = 1000
) -> np.ndarray:
    """Draw ``n`` i.i.d. (s, a) pairs from the normalized occupancy.

    Each pair is the step of an independent trajectory at a Geometric(1 - gamma) stopping
    time, truncated at ``horizon - 1``.
    """
    probs = _as_probs(policy)
    _check_policy(mdp, probs)
    if mdp.gamma > 0:
        stop = rng.geometric(1 - mdp.gamma, size=n) - 1
    else:
        stop = np.zeros(n, dtype=np.int64)
    stop = np.minimum(stop, horizon - 1)
    pcum = np.cumsum(probs, axis=1)
    tcum = np.cumsum(mdp.transition, axis=2)
    s = _sample_rows(np.broadcast_to(np.cumsum(mdp.init_dist), (n, mdp.n_states)), rng.random(n))
    out = np.empty((n, 2), dtype=np.int64)
    active = np.arange(n)
    for t in range(int(stop.max()) + 1):
        a = _sample_rows(pcum[s], rng.random(len(active)))
        done = stop[active] == t
        out[active[done], 0] = s[done]
        out[active[done], 1] = a[done]
        keep = ~done
        active, s, a = active[keep], s[keep], a[keep]
        if len(active) == 0:
            break
        s = _sample_rows(tcum[s, a], rng.random(len(active)))
    return out


# --- constructors -------------------------------------------------------------------------


def gridworld(
    layout: str,
    slip: float = 0.1,
    gamma: float = 0.95,
    goal_reward: float = 1.0,
    step_reward: float = 0.0,
) -> TabularMdp:
    """Build a grid MDP from a layout string.

    ``S`` start, ``G`` goal (absorbing, pays ``goal_reward`` per step), ``#`` wall, ``.`` free.
    With probability ``slip`` the move direction is drawn uniformly from the four moves.
    Bumping into a wall or the border leaves the agent in place.
    """
    rows = [line.strip() for line in layout.strip().splitlines() if line.strip()]
    if not rows:
        raise ValueError("empty gridworld layout")
    width = len(rows[0])
    for i, line in enumerate(rows):
        if len(line) != width:
            raise ValueError(f"layout line {i + 1} has width {len(line)}, expected {width}")
        bad = set(line) - set("SG#.")
        if bad:
            raise ValueError(f"layout line {i + 1}: unknown characters {sorted(bad)}")
    if not 0.0 <= slip <= 1.0:
        raise ValueError("slip must lie in [0, 1]")
    cells = [(r, c) for r, line in enumerate(rows) for c, ch in enumerate(line) if ch != "#"]
    index = {rc: i for i, rc in enumerate(cells)}
    starts = [index[rc] for rc in cells if rows[rc[0]][rc[1]] == "S"]
    goals = {index[rc] for rc in cells if rows[rc[0]][rc[1]] == "G"}
    if not starts:
        raise ValueError("layout has no start cell 'S'")
    if not goals:
        raise ValueError("layout has no goal cell 'G'")
    S, A = len(cells), len(GRID_MOVES)
    P = np.zeros((S, A, S))
    R = np.full((S, A), float(step_reward))
    for i, (r, c) in enumerate(cells):
        if i in goals:
            P[i, :, i] = 1.0
            R[i, :] = goal_reward
            continue
        dest = []
        for dr, dc in GRID_MOVES:
            rc = (r + dr, c + dc)
            dest.append(index.get(rc, i))
        for a in range(A):
            P[i, a, dest[a]] += 1.0 - slip
            for b in range(A):
                P[i, a, dest[b]] += slip / A
    mu0 = np.zeros(S)
    mu0[starts] = 1.0 / len(starts)
    height = len(rows)
    coords = np.array([(r / max(1, height - 1), c / max(1, width - 1)) for r, c in cells])
    return TabularMdp(P, R, gamma, mu0, coords=coords, name="gridworld")


CANONICAL_LAYOUT = "\n".join(["S......."] + ["........"] * 6 + [".......G"])


def canonical_gridworld() -> TabularMdp:
    """8x8 open grid, start top-left, goal bottom-right, slip 0.1, gamma 0.95."""
    return gridworld(CANONICAL_LAYOUT, slip=0.1, gamma=0.95)


MDP_TEXT_HEADER = "# puail-mdp v1"


def dump_mdp_text(mdp: TabularMdp) -> str:
    lines = [
        MDP_TEXT_HEADER,
        f"n_states {mdp.n_states}",
        f"n_actions {mdp.n_actions}",
        f"gamma {float(mdp.gamma)!r}",
    ]
    for s in np.flatnonzero(mdp.init_dist):
        lines.append(f"init {s} {float(mdp.init_dist[s])!r}")
    for s, a, t in zip(*np.nonzero(mdp.transition)):
        lines.append(f"transition {s} {a} {t} {float(mdp.transition[s, a, t])!r}")
    for s, a in zip(*np.nonzero(mdp.reward)):
        lines.append(f"reward {s} {a} {float(mdp.reward[s, a])!r}")
    return "\n".join(lines) + "\n"


def load_mdp_text(text: str) -> TabularMdp:
    """Parse the explicit tensor listing written by :func:`dump_mdp_text`.

    Unlisted transition, reward and init entries are zero. Errors carry the line number.
    """
    sizes: dict[str, float] = {}
    entries: list[tuple[int, str, list[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key in ("n_states", "n_actions", "gamma"):
            if len(rest) != 1:
                raise ValueError(f"line {lineno}: '{key}' takes one value")
            try:
                sizes[key] = float(rest[0])
            except ValueError:
                raise ValueError(f"line {lineno}: bad number {rest[0]!r}") from None
        elif key in ("init", "transition", "reward"):
            entries.append((lineno, key, rest))
        else:
            raise ValueError(f"line {lineno}: unknown record {key!r}")
    for key in ("n_states", "n_actions", "gamma"):
        if key not in sizes:
            raise ValueError(f"missing '{key}' record")
    S, A = int(sizes["n_states"]), int(sizes["n_actions"])
    P, R, mu0 = np.zeros((S, A, S)), np.zeros((S, A)), np.zeros(S)
    arity = {"init": 2, "transition": 4, "reward": 3}
    for lineno, key, rest in entries:
        if len(rest) != arity[key]:
            raise ValueError(f"line {lineno}: '{key}' takes {arity[key]} fields")
        try:
            idx = [int(x) for x in rest[:-1]]
            val = float(rest[-1])
        except ValueError:
            raise ValueError(f"line {lineno}: malformed '{key}' record") from None
        if min(idx) < 0:
            raise ValueError(f"line {lineno}: negative index in '{key}' record")
        try:
            if key == "init":
                mu0[idx[0]] = val
            elif key == "transition":
                P[idx[0], idx[1], idx[2]] = val
            else:
                R[idx[0], idx[1]] = val
        except IndexError:
            raise ValueError(f"line {lineno}: index out of range in '{key}' record") from None
    return TabularMdp(P, R, sizes["gamma"], mu0)


def random_mdp(
    rng: np.random.Generator, n_states: int, n_actions: int, gamma: float | None = None
) -> TabularMdp:
    """Dirichlet transitions, Gaussian rewards; used by property tests."""
    P = rng.dirichlet(np.ones(n_states) * 0.5, size=(n_states, n_actions))
    R = rng.normal(size=(n_states, n_actions))
    mu0 = rng.dirichlet(np.ones(n_states))
    g = float(rng.uniform(0.5, 0.99)) if gamma is None else gamma
    return TabularMdp(P, R, g, mu0)
