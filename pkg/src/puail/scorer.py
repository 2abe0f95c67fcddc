"""Discriminator / critic functions with hand-written gradients.

Three architectures share one flat parameter vector layout:

* ``tabular``: one weight per (state, action). As a function of the one-hot embedding
  ``x = e_s (+) e_a`` it is the bilinear form ``x_s^T W x_a``, which gives input gradients
  for the Lipschitz penalty.
* ``linear``: ``w^T x + b``.
* ``mlp``: ``w2^T tanh(W1 x + b1) + b2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ARCHITECTURES = ("tabular", "linear", "mlp")
FEATURE_MAPS = ("onehot", "grid")
SCORER_HEADER = "# puail-scorer v1"

LossFn = Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]]


@dataclass(frozen=True)
class ScorerParams:
    architecture: str
    n_states: int
    n_actions: int
    weights: np.ndarray
    feature_map: str = "onehot"
    hidden: int = 32
    coords: np.ndarray | None = None  # [S, 2], needed by the grid feature map

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.feature_map not in FEATURE_MAPS:
            raise ValueError(f"unknown feature map {self.feature_map!r}")
        if self.architecture == "tabular" and self.feature_map != "onehot":
            raise ValueError("tabular scorers use the one-hot feature map")
        if self.feature_map == "grid" and self.coords is None:
            raise ValueError("grid feature map needs state coordinates")
        w = np.array(self.weights, dtype=float, copy=True).ravel()
        if w.size != n_params(self.architecture, self.feature_dim, self.hidden, self.n_states, self.n_actions):
            raise ValueError(f"weight vector has {w.size} entries, architecture needs a different count")
        if not np.all(np.isfinite(w)):
            raise ValueError("scorer weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def feature_dim(self) -> int:
        base = self.n_states if self.feature_map == "onehot" else 2
        return base + self.n_actions

    def replace_weights(self, weights: np.ndarray) -> "ScorerParams":
        return ScorerParams(
            self.architecture, self.n_states, self.n_actions, weights,
            self.feature_map, self.hidden, self.coords,
        )

    # views into the flat vector
    def table(self) -> np.ndarray:
        return self.weights.reshape(self.n_states, self.n_actions)

    def mlp_parts(self):
        F, H = self.feature_dim, self.hidden
        w = self.weights
        W1 = w[: H * F].reshape(H, F)
        b1 = w[H * F : H * F + H]
        w2 = w[H * F + H : H * F + 2 * H]
        b2 = w[-1]
        return W1, b1, w2, b2


def n_params(architecture: str, feature_dim: int, hidden: int, n_states: int, n_actions: int) -> int:
    if architecture == "tabular":
        return n_states * n_actions
    if architecture == "linear":
        return feature_dim + 1
    return hidden * feature_dim + 2 * hidden + 1


def init_scorer(
    architecture: str,
    n_states: int,
    n_actions: int,
    rng: np.random.Generator,
    feature_map: str = "onehot",
    hidden: int = 32,
    coords: np.ndarray | None = None,
    scale: float = 0.05,
) -> ScorerParams:
    fdim = (n_states if feature_map == "onehot" else 2) + n_actions
    k = n_params(architecture, fdim, hidden, n_states, n_actions)
    w = rng.uniform(-scale, scale, size=k)
    return ScorerParams(architecture, n_states, n_actions, w, feature_map, hidden, coords)


def _pairs(batch) -> np.ndarray:
    b = np.asarray(batch, dtype=np.int64)
    if b.ndim != 2 or b.shape[1] != 2 or len(b) == 0:
        raise ValueError("batch must be a non-empty (n, 2) array of (state, action)")
    return b


def features(scorer: ScorerParams, batch) -> np.ndarray:
    b = _pairs(batch)
    s, a = b[:, 0], b[:, 1]
    S, A = scorer.n_states, scorer.n_actions
    if s.min() < 0 or s.max() >= S or a.min() < 0 or a.max() >= A:
        raise IndexError("state or action index out of range")
    n = len(b)
    X = np.zeros((n, scorer.feature_dim))
    if scorer.feature_map == "onehot":
        X[np.arange(n), s] = 1.0
        X[np.arange(n), S + a] = 1.0
    else:
        X[:, :2] = scorer.coords[s]
        X[np.arange(n), 2 + a] = 1.0
    return X


def score_features(scorer: ScorerParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if scorer.architecture == "tabular":
        S = scorer.n_states
        return np.einsum("ns,sa,na->n", X[:, :S], scorer.table(), X[:, S:])
    if scorer.architecture == "linear":
        return X @ scorer.weights[:-1] + scorer.weights[-1]
    W1, b1, w2, b2 = scorer.mlp_parts()
    return np.tanh(X @ W1.T + b1) @ w2 + b2


def score(scorer: ScorerParams, batch) -> np.ndarray:
    """Raw outputs g(s, a) for a batch of (state, action) pairs."""
    b = _pairs(batch)
    if scorer.architecture == "tabular":
        s, a = b[:, 0], b[:, 1]
        if s.min() < 0 or s.max() >= scorer.n_states or a.min() < 0 or a.max() >= scorer.n_actions:
            raise IndexError("state or action index out of range")
        return scorer.table()[s, a].copy()
    return score_features(scorer, features(scorer, b))


def score_all(scorer: ScorerParams) -> np.ndarray:
    """g over the full state-action table, shape [S, A]."""
    if scorer.architecture == "tabular":
        return scorer.table().copy()
    S, A = scorer.n_states, scorer.n_actions
    grid = np.stack(np.meshgrid(np.arange(S), np.arange(A), indexing="ij"), -1).reshape(-1, 2)
    return score(scorer, grid).reshape(S, A)


def _backprop(scorer: ScorerParams, batch: np.ndarray, dscores: np.ndarray) -> np.ndarray:
    """Gradient of sum_i dscores[i] * g(batch[i]) w.r.t. the flat weights."""
    if scorer.architecture == "tabular":
        grad = np.zeros((scorer.n_states, scorer.n_actions))
        np.add.at(grad, (batch[:, 0], batch[:, 1]), dscores)
        return grad.ravel()
    X = features(scorer, batch)
    if scorer.architecture == "linear":
        return np.concatenate([dscores @ X, [dscores.sum()]])
    W1, b1, w2, _ = scorer.mlp_parts()
    h = np.tanh(X @ W1.T + b1)
    dz = (dscores[:, None] * w2[None, :]) * (1 - h**2)
    return np.concatenate([(dz.T @ X).ravel(), dz.sum(0), dscores @ h, [dscores.sum()]])


@dataclass(frozen=True)
class GradResult:
    value: float
    scores: tuple[np.ndarray, ...]
    param_grad: np.ndarray
    input_grad: np.ndarray | None = None


def loss_grad(scorer: ScorerParams, loss: LossFn, *batches) -> GradResult:
    """Evaluate ``loss`` on the scores of each batch and backpropagate to the weights.

    ``loss`` receives one score array per batch and returns ``(value, grads)`` where
    ``grads[k]`` is d value / d scores of batch ``k``.
    """
    bs = [_pairs(b) for b in batches]
    scores = [score(scorer, b) for b in bs]
    value, dscores = loss(scores)
    if not np.isfinite(value):
        raise FloatingPointError(f"loss is not finite ({value})")
    grad = np.zeros_like(scorer.weights)
    for b, d in zip(bs, dscores):
        grad += _backprop(scorer, b, np.asarray(d, dtype=float))
    return GradResult(float(value), tuple(scores), grad)


def sgd_step(scorer: ScorerParams, grad: np.ndarray, lr: float, direction: str = "ascent") -> ScorerParams:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if direction not in ("ascent", "descent"):
        raise ValueError("direction must be 'ascent' or 'descent'")
    sign = 1.0 if direction == "ascent" else -1.0
    return scorer.replace_weights(scorer.weights + sign * lr * np.asarray(grad, dtype=float))


# --- Lipschitz penalty --------------------------------------------------------------------


def interpolate_batch(
    scorer: ScorerParams,
    expert_batch,
    agent_batch,
    rng: np.random.Generator | int,
    mode: str = "interpolate",
    u: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Random convex combinations u * x_e + (1 - u) * x_a of paired feature embeddings.

    Returns ``(X, u)`` with ``len(X) == min(len(expert), len(agent))``. ``mode="agent"``
    penalizes on agent embeddings only (u = 0).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    Xe, Xa = features(scorer, expert_batch), features(scorer, agent_batch)
    m = min(len(Xe), len(Xa))
    Xe, Xa = Xe[:m], Xa[:m]
    if mode == "agent":
        u = np.zeros(m)
    elif u is None:
        u = rng.random(m)
    u = np.broadcast_to(np.asarray(u, dtype=float), (m,))
    return u[:, None] * Xe + (1 - u[:, None]) * Xa, u


def input_gradients(scorer: ScorerParams, X: np.ndarray) -> np.ndarray:
    """d g / d x at each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if scorer.architecture == "tabular":
        S = scorer.n_states
        W = scorer.table()
        return np.concatenate([X[:, S:] @ W.T, X[:, :S] @ W], axis=1)
    if scorer.architecture == "linear":
        return np.broadcast_to(scorer.weights[:-1], X.shape).copy()
    W1, b1, w2, _ = scorer.mlp_parts()
    h = np.tanh(X @ W1.T + b1)
    return ((1 - h**2) * w2) @ W1


def penalty_and_grad(scorer: ScorerParams, X: np.ndarray) -> tuple[float, np.ndarray]:
    """Psi = -mean((||grad_x g|| - 1)^2) over rows of X, and dPsi / d weights."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = len(X)
    G = input_gradients(scorer, X)
    norms = np.linalg.norm(G, axis=1)
    psi = -float(np.mean((norms - 1.0) ** 2))
    safe = np.where(norms > 1e-12, norms, 1.0)
    coef = np.where(norms > 1e-12, -2.0 * (norms - 1.0) / (m * safe), 0.0)
    V = coef[:, None] * G  # dPsi / dG
    if scorer.architecture == "tabular":
        S = scorer.n_states
        Vs, Va = V[:, :S], V[:, S:]
        grad = Vs.T @ X[:, S:] + X[:, :S].T @ Va
        return psi, grad.ravel()
    if scorer.architecture == "linear":
        return psi, np.concatenate([V.sum(0), [0.0]])
    W1, b1, w2, _ = scorer.mlp_parts()
    h = np.tanh(X @ W1.T + b1)
    s = 1 - h**2
    U = V @ W1.T  # [m, H]
    q = s * w2
    dw2 = (U * s).sum(0)
    dz = -2.0 * U * w2 * h * s
    dW1 = q.T @ V + dz.T @ X
    db1 = dz.sum(0)
    return psi, np.concatenate([dW1.ravel(), db1, dw2, [0.0]])


def lipschitz_penalty(
    scorer: ScorerParams, expert_batch, agent_batch, seed, mode: str = "interpolate"
) -> float:
    X, _ = interpolate_batch(scorer, expert_batch, agent_batch, seed, mode)
    return penalty_and_grad(scorer, X)[0]


# --- serialization ------------------------------------------------------------------------


def dumps_scorer(scorer: ScorerParams) -> str:
    head = (
        f"{SCORER_HEADER} architecture={scorer.architecture} n_states={scorer.n_states} "
        f"n_actions={scorer.n_actions} feature_map={scorer.feature_map} hidden={scorer.hidden} "
        f"n_weights={scorer.weights.size}"
    )
    lines = [head]
    if scorer.coords is not None:
        lines.append("coords " + " ".join(repr(float(c)) for c in scorer.coords.ravel()))
    lines += [repr(float(w)) for w in scorer.weights]
    return "\n".join(lines) + "\n"


def loads_scorer(text: str) -> ScorerParams:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(SCORER_HEADER):
        raise ValueError("line 1: not a scorer file")
    meta = dict(tok.split("=", 1) for tok in lines[0][len(SCORER_HEADER):].split())
    body = lines[1:]
    coords = None
    if body and body[0].startswith("coords "):
        coords = np.array([float(x) for x in body[0].split()[1:]]).reshape(-1, 2)
        body = body[1:]
    w = np.array([float(x) for x in body if x.strip()])
    if w.size != int(meta["n_weights"]):
        raise ValueError(f"expected {meta['n_weights']} weights, found {w.size}")
    return ScorerParams(
        meta["architecture"], int(meta["n_states"]), int(meta["n_actions"]), w,
        meta["feature_map"], int(meta["hidden"]), coords,
    )
