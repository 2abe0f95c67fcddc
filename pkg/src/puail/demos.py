"""Imperfect demonstration sets: optimal and non-optimal sources mixed without labels.

Learners only ever see :attr:`DemoSet.pairs`. Provenance (which source produced a
transition and whether that source is optimal) is kept for evaluation code.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import (
    OccupancyMeasure,
    StochasticPolicy,
    TabularMdp,
    evaluate_return,
    sample_occupancy_pairs,
    value_iteration,
)
from .rl import train_on_true_reward

DEMO_HEADER = "# puail-demos v1"
FILTERS = ("all", "optimal_only", "non_optimal_only")


class DemoGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    kind: str  # "checkpoint" (D1) or "action_noise" (D2)
    levels: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in ("checkpoint", "action_noise"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        levels = tuple(float(x) for x in self.levels)
        if not levels:
            raise ValueError("noise levels must be non-empty")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("noise levels must be strictly increasing")
        if any(not 0.0 <= x <= 1.0 for x in levels):
            raise ValueError("noise levels must lie in [0, 1]")
        object.__setattr__(self, "levels", levels)


@dataclass(frozen=True)
class DemoSet:
    states: np.ndarray
    actions: np.ndarray
    sources: np.ndarray  # source policy index, 0 is the optimal policy
    is_optimal: np.ndarray

    def __post_init__(self):
        arrs = [np.array(x, copy=True) for x in (self.states, self.actions, self.sources)]
        opt = np.array(self.is_optimal, dtype=bool, copy=True)
        n = len(arrs[0])
        if any(len(a) != n for a in arrs) or len(opt) != n:
            raise ValueError("transitions and provenance must have equal length")
        for name, a in zip(("states", "actions", "sources"), arrs):
            a = a.astype(np.int64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        opt.setflags(write=False)
        object.__setattr__(self, "is_optimal", opt)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def pairs(self) -> np.ndarray:
        """(n, 2) array of (state, action); the only view learners use."""
        return np.stack([self.states, self.actions], axis=1)

    @property
    def ratio_optimal(self) -> float:
        return float(self.is_optimal.sum()) / len(self) if len(self) else float("nan")

    @property
    def n_sources(self) -> int:
        return int(self.sources.max()) + 1 if len(self) else 0

    def with_provenance(self, sources, is_optimal) -> "DemoSet":
        return DemoSet(self.states, self.actions, sources, is_optimal)


def make_d2_policies(
    optimal: StochasticPolicy,
    levels: Sequence[float],
    mdp: TabularMdp | None = None,
) -> list[StochasticPolicy]:
    """Corrupt the optimal policy with uniform action noise: (1 - eps) * pi + eps * uniform.

    When ``mdp`` is given the returns are checked to be non-increasing in eps.
    """
    probs = optimal.probs
    uniform = np.full_like(probs, 1.0 / probs.shape[1])
    out = []
    for eps in levels:
        if not 0.0 <= eps <= 1.0:
            raise ValueError(f"noise level {eps} outside [0, 1]")
        out.append(StochasticPolicy((1 - eps) * probs + eps * uniform))
    if mdp is not None:
        order = np.argsort(levels, kind="stable")
        rets = [evaluate_return(mdp, out[i]) for i in order]
        if any(b > a + 1e-9 for a, b in zip(rets, rets[1:])):
            raise DemoGenerationError(f"returns not non-increasing in noise level: {rets}")
    return out


def make_d1_policies(
    mdp: TabularMdp,
    levels: Sequence[float],
    seed: int,
    total_iters: int = 400,
    n_rollouts: int = 32,
    horizon: int = 100,
    lr: float = 2.0,
    max_attempts: int = 5,
) -> list[StochasticPolicy]:
    """Snapshot a REINFORCE run on the true reward at fractions ``levels`` of training."""
    if any(not 0.0 <= x <= 1.0 for x in levels):
        raise ValueError("checkpoint levels must be training fractions in [0, 1]")
    marks = [int(round(x * total_iters)) for x in levels]
    last = None
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        _, saved = train_on_true_reward(
            mdp, max(marks), rng, n_rollouts, horizon, lr, snapshots=marks
        )
        policies = [saved[m].stochastic() for m in marks]
        rets = [evaluate_return(mdp, p) for p in policies]
        if all(b >= a for a, b in zip(rets, rets[1:])):
            return policies
        last = rets
    raise DemoGenerationError(
        f"checkpoint returns not monotone after {max_attempts} attempts: {last}"
    )


def build_demo_set(
    mdp: TabularMdp,
    optimal: StochasticPolicy,
    non_optimal: Sequence[StochasticPolicy],
    n_per_policy: int,
    horizon: int,
    seed: int,
) -> DemoSet:
    """Draw ``n_per_policy`` occupancy samples from every source and shuffle them together."""
    if n_per_policy <= 0:
        raise ValueError("n_per_policy must be positive")
    rng = np.random.default_rng(seed)
    chunks, src = [], []
    for k, pol in enumerate([optimal, *non_optimal]):
        chunks.append(sample_occupancy_pairs(mdp, pol, n_per_policy, rng, horizon))
        src.append(np.full(n_per_policy, k))
    pairs = np.concatenate(chunks)
    sources = np.concatenate(src)
    perm = rng.permutation(len(pairs))
    pairs, sources = pairs[perm], sources[perm]
    return DemoSet(pairs[:, 0], pairs[:, 1], sources, sources == 0)


def empirical_occupancy(
    demos: DemoSet, filter: str = "all", n_states: int | None = None, n_actions: int | None = None
) -> OccupancyMeasure:
    if filter not in FILTERS:
        raise ValueError(f"filter must be one of {FILTERS}")
    mask = {
        "all": np.ones(len(demos), dtype=bool),
        "optimal_only": demos.is_optimal,
        "non_optimal_only": ~demos.is_optimal,
    }[filter]
    if not mask.any():
        raise ValueError(f"no demonstrations under filter {filter!r}")
    S = n_states if n_states is not None else int(demos.states.max()) + 1
    A = n_actions if n_actions is not None else int(demos.actions.max()) + 1
    counts = np.zeros((S, A))
    np.add.at(counts, (demos.states[mask], demos.actions[mask]), 1.0)
    return OccupancyMeasure(counts / counts.sum())


def optimal_policy(mdp: TabularMdp) -> StochasticPolicy:
    return value_iteration(mdp)[1]


# --- text format --------------------------------------------------------------------------


def dumps_demos(demos: DemoSet) -> str:
    lines = [
        f"{DEMO_HEADER} n={len(demos)} n_sources={demos.n_sources} "
        f"n_optimal={int(demos.is_optimal.sum())} ratio_optimal={float(demos.ratio_optimal)!r}"
    ]
    for s, a, k, o in zip(demos.states, demos.actions, demos.sources, demos.is_optimal):
        lines.append(f"{s} {a} {k} {int(o)}")
    return "\n".join(lines) + "\n"


def loads_demos(text: str) -> DemoSet:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(DEMO_HEADER):
        raise ValueError(f"line 1: expected header starting with {DEMO_HEADER!r}")
    meta = dict(tok.split("=", 1) for tok in lines[0][len(DEMO_HEADER):].split())
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 'state action source_index is_optimal'")
        try:
            rows.append([int(x) for x in parts])
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer field") from None
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    if "n" in meta and int(meta["n"]) != len(arr):
        raise ValueError(f"header declares n={meta['n']} but file holds {len(arr)} transitions")
    return DemoSet(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(bool))


def save_demos(demos: DemoSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_demos(demos))


def load_demos(path) -> DemoSet:
    with open(path) as fh:
        return loads_demos(fh.read())
