"""Adversarial imitation training loops (UID-GAIL, GAIL, UID-WAIL, WAIL, PU-GAIL) and BC."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .demos import DemoSet
from .mdp import RolloutBatch, SoftmaxPolicy, TabularMdp, evaluate_return, rollout
from .objectives import (
    CRITIC_METHODS,
    CLAMP_UPDATES,
    OBJECTIVES,
    SIGMOID_METHODS,
    reward_for,
    sigmoid,
)
from .rl import StateBaseline, policy_gradient_step
from .scorer import (
    ScorerParams,
    init_scorer,
    interpolate_batch,
    loss_grad,
    penalty_and_grad,
    score,
    score_all,
    sgd_step,
)

METHODS = ("uid_gail", "gail", "uid_wail", "wail", "pu_gail", "bc")
RUN_HEADER = "# puail-run v1"
TAIL_FRACTION = 0.1
RECORD_FIELDS = ("iter", "return", "disc_loss", "clamp_active_frac", "acc_do", "acc_dn", "entropy")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "uid_gail"
    alpha: float = 0.7
    lambda_gp: float = 1.0
    iters: int = 300
    disc_steps_per_iter: int = 1
    policy_steps_per_iter: int = 3
    batch_size: int = 64
    lr_disc: float = 1.0
    lr_policy: float = 1.0
    rollout_per_iter: int = 16
    horizon: int = 60
    seed: int = 0
    entropy_bonus: float = 0.01
    architecture: str = "tabular"
    feature_map: str = "onehot"
    hidden: int = 32
    penalty_samples: str = "interpolate"  # or "agent"
    baseline_rate: float = 0.1
    clamp_update: str = "reverse"  # or "subgradient"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.lambda_gp < 0 or self.entropy_bonus < 0:
            raise ValueError("lambda_gp and entropy_bonus must be non-negative")
        if self.iters < 0:
            raise ValueError("iters must be non-negative")
        for name in ("disc_steps_per_iter", "policy_steps_per_iter", "batch_size",
                     "rollout_per_iter", "horizon", "hidden"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_disc < 0 or self.lr_policy < 0:
            raise ValueError("learning rates must be non-negative")
        if self.penalty_samples not in ("interpolate", "agent"):
            raise ValueError("penalty_samples must be 'interpolate' or 'agent'")
        if self.clamp_update not in CLAMP_UPDATES:
            raise ValueError(f"clamp_update must be one of {CLAMP_UPDATES}")

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    method: str
    seed: int
    returns: list[float] = field(default_factory=list)
    disc_loss: list[float | None] = field(default_factory=list)
    clamp_active_frac: list[float | None] = field(default_factory=list)
    acc_do: list[float | None] = field(default_factory=list)
    acc_dn: list[float | None] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    policy: SoftmaxPolicy | None = None
    scorer: ScorerParams | None = None
    aborted: str | None = None
    tags: dict[str, str] = field(default_factory=dict)  # free-form key=value labels

    def __len__(self) -> int:
        return len(self.returns)

    @property
    def final_return(self) -> float:
        return self.returns[-1] if self.returns else float("nan")

    def tail_return(self, frac: float = TAIL_FRACTION) -> float:
        """Mean return over the last ``frac`` of iterations (at least one)."""
        if not self.returns:
            return float("nan")
        k = max(1, int(len(self.returns) * frac))
        return float(np.mean(self.returns[-k:]))

    def rows(self):
        for i in range(len(self)):
            yield (i, self.returns[i], self.disc_loss[i], self.clamp_active_frac[i],
                   self.acc_do[i], self.acc_dn[i], self.entropy[i])


# --- steps --------------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscStepResult:
    scorer: ScorerParams
    loss: float
    clamp_active: bool


def discriminator_objective(
    scorer: ScorerParams, expert_batch, agent_batch, cfg: TrainConfig, rng=None, direction=None
):
    """Value and weight gradient of the method's maximized objective (incl. lambda * Psi).

    With ``direction`` set to a clamp-update rule the returned vector is the
    ascent direction of that rule rather than the exact gradient.
    """
    obj = OBJECTIVES[cfg.method]
    clamp = {}

    def loss(scores):
        ev = obj(scores[0], scores[1], cfg.alpha)
        clamp["active"] = ev.clamp_active
        if direction is None:
            return ev.value, (ev.grad_expert, ev.grad_agent)
        return ev.value, ev.ascent_direction(direction)

    res = loss_grad(scorer, loss, expert_batch, agent_batch)
    value, grad = res.value, res.param_grad
    if cfg.method in CRITIC_METHODS and cfg.lambda_gp > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        X, _ = interpolate_batch(scorer, expert_batch, agent_batch, rng, cfg.penalty_samples)
        psi, dpsi = penalty_and_grad(scorer, X)
        value += cfg.lambda_gp * psi
        grad = grad + cfg.lambda_gp * dpsi
    return value, grad, clamp["active"]


def discriminator_step(
    scorer: ScorerParams, expert_batch, agent_batch, cfg: TrainConfig, rng=None
) -> DiscStepResult:
    """One gradient-ascent step on the method's discriminator/critic objective."""
    value, grad, clamp = discriminator_objective(
        scorer, expert_batch, agent_batch, cfg, rng, cfg.clamp_update
    )
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"{cfg.method} discriminator objective is not finite: {value}")
    return DiscStepResult(sgd_step(scorer, grad, cfg.lr_disc, "ascent"), value, clamp)


def disc_accuracy(scorer: ScorerParams, demos: DemoSet, method: str) -> tuple[float, float]:
    """Accuracy on optimal (positive) and non-optimal (negative) demonstrations.

    Sigmoid discriminators call D > 0.5 positive; critics call r above the median
    critic value over all demonstrations positive. Needs provenance: evaluation only.
    """
    g = score(scorer, demos.pairs)
    if method in SIGMOID_METHODS:
        pos = sigmoid(g) > 0.5
    elif method in CRITIC_METHODS:
        pos = g > np.median(g)
    else:
        raise ValueError(f"method {method!r} has no discriminator")
    opt = demos.is_optimal
    acc_do = float(pos[opt].mean()) if opt.any() else float("nan")
    acc_dn = float((~pos[~opt]).mean()) if (~opt).any() else float("nan")
    return acc_do, acc_dn


def sample_agent_pairs(batch: RolloutBatch, n: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Draw (s, a) from rollouts with step t weighted by gamma^t (approximates the occupancy)."""
    w = gamma ** np.arange(batch.horizon)
    t = rng.choice(batch.horizon, size=n, p=w / w.sum())
    i = rng.integers(0, batch.n, size=n)
    return np.stack([batch.states[i, t], batch.actions[i, t]], axis=1)


def bc_step(policy: SoftmaxPolicy, pairs: np.ndarray, lr: float) -> SoftmaxPolicy:
    """Gradient ascent on the mean log-likelihood of the demonstrated actions."""
    p = policy.probs
    grad = np.zeros_like(p)
    s, a = pairs[:, 0], pairs[:, 1]
    np.add.at(grad, (s, a), 1.0)
    grad -= np.bincount(s, minlength=p.shape[0])[:, None] * p
    return SoftmaxPolicy(policy.logits + lr * grad / len(pairs), policy.version + 1)


# --- main loop ----------------------------------------------------------------------------


def _mean_entropy(policy: SoftmaxPolicy) -> float:
    return float(policy.entropy().mean())


def train(mdp: TabularMdp, demos: DemoSet, cfg: TrainConfig) -> RunRecord:
    """Run ``cfg.iters`` iterations of the configured method; deterministic given ``cfg.seed``."""
    if len(demos) == 0:
        raise ValueError("demonstration set is empty")
    rng = np.random.default_rng(cfg.seed)
    policy = SoftmaxPolicy.uniform(mdp.n_states, mdp.n_actions)
    rec = RunRecord(cfg.method, cfg.seed)
    expert_pairs = demos.pairs  # learner-facing view, no provenance
    if cfg.method == "bc":
        return _train_bc(mdp, demos, expert_pairs, cfg, rng, policy, rec)

    scorer = init_scorer(
        cfg.architecture, mdp.n_states, mdp.n_actions, rng, cfg.feature_map, cfg.hidden,
        mdp.coords,
    )
    reward_of = reward_for(cfg.method)
    baseline = StateBaseline(mdp.n_states, cfg.baseline_rate)

    for it in range(cfg.iters):
        batch = rollout(mdp, policy, cfg.rollout_per_iter, cfg.horizon, rng, policy.version)
        losses, clamps = [], []
        try:
            for _ in range(cfg.disc_steps_per_iter):
                eb = expert_pairs[rng.integers(0, len(expert_pairs), cfg.batch_size)]
                ab = sample_agent_pairs(batch, cfg.batch_size, mdp.gamma, rng)
                step = discriminator_step(scorer, eb, ab, cfg, rng)
                scorer = step.scorer
                losses.append(step.loss)
                clamps.append(step.clamp_active)
        except FloatingPointError as exc:
            rec.aborted = f"iteration {it}: {exc}"
            break
        table = reward_of(score_all(scorer))
        reward_fn = lambda s, a, table=table: table[s, a]  # noqa: E731
        for k in range(cfg.policy_steps_per_iter):
            if k > 0:
                batch = rollout(mdp, policy, cfg.rollout_per_iter, cfg.horizon, rng, policy.version)
            policy = policy_gradient_step(
                policy, batch, reward_fn, cfg.lr_policy, cfg.entropy_bonus, mdp.gamma, baseline
            )
        acc_do, acc_dn = disc_accuracy(scorer, demos, cfg.method)
        loss = float(np.mean(losses))
        if not math.isfinite(loss):
            rec.aborted = f"iteration {it}: non-finite discriminator loss"
            break
        rec.returns.append(evaluate_return(mdp, policy))
        rec.disc_loss.append(loss)
        rec.clamp_active_frac.append(float(np.mean(clamps)))
        rec.acc_do.append(acc_do)
        rec.acc_dn.append(acc_dn)
        rec.entropy.append(_mean_entropy(policy))
    rec.policy, rec.scorer = policy, scorer
    return rec


def _train_bc(mdp, demos, expert_pairs, cfg, rng, policy, rec) -> RunRecord:
    for _ in range(cfg.iters):
        for _ in range(cfg.policy_steps_per_iter):
            eb = expert_pairs[rng.integers(0, len(expert_pairs), cfg.batch_size)]
            policy = bc_step(policy, eb, cfg.lr_policy)
        rec.returns.append(evaluate_return(mdp, policy))
        rec.disc_loss.append(None)
        rec.clamp_active_frac.append(None)
        rec.acc_do.append(None)
        rec.acc_dn.append(None)
        rec.entropy.append(_mean_entropy(policy))
    rec.policy = policy
    return rec


# --- serialization ------------------------------------------------------------------------


def _fmt(x) -> str:
    return "null" if x is None else repr(float(x)) if not isinstance(x, int) else str(x)


def dumps_record(rec: RunRecord) -> str:
    head = f"{RUN_HEADER} method={rec.method} seed={rec.seed} fields={','.join(RECORD_FIELDS)}"
    for k, v in rec.tags.items():
        if not k or any(c.isspace() or c == "=" for c in k + str(v)):
            raise ValueError(f"tag {k}={v} must not contain whitespace or '='")
        head += f" {k}={v}"
    if rec.aborted:
        head += " aborted=1"
    lines = [head]
    for row in rec.rows():
        lines.append(" ".join(_fmt(x) for x in row))
    if rec.aborted:
        lines.append("# aborted: " + rec.aborted)
    return "\n".join(lines) + "\n"


def loads_record(text: str) -> RunRecord:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(RUN_HEADER):
        raise ValueError("line 1: not a run record file")
    meta = dict(tok.split("=", 1) for tok in lines[0][len(RUN_HEADER):].split())
    rec = RunRecord(meta.pop("method", "?"), int(meta.pop("seed", 0)))
    meta.pop("fields", None)
    meta.pop("aborted", None)
    rec.tags = meta
    for lineno, line in enumerate(lines[1:], 2):
        if line.startswith("# aborted: "):
            rec.aborted = line[len("# aborted: "):]
            continue
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != len(RECORD_FIELDS):
            raise ValueError(f"line {lineno}: expected {len(RECORD_FIELDS)} fields, got {len(parts)}")
        try:
            vals = [None if p == "null" else float(p) for p in parts]
        except ValueError:
            raise ValueError(f"line {lineno}: malformed number") from None
        if vals[0] is None or int(vals[0]) != len(rec):
            raise ValueError(f"line {lineno}: iteration index out of sequence")
        rec.returns.append(vals[1])
        rec.disc_loss.append(vals[2])
        rec.clamp_active_frac.append(vals[3])
        rec.acc_do.append(vals[4])
        rec.acc_dn.append(vals[5])
        rec.entropy.append(vals[6])
    return rec
