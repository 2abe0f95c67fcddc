"""PU risk estimators and the adversarial objectives built on them.

Discriminator objectives are written in "maximize" form and evaluated on raw scorer
outputs ``g``; each returns its value together with the gradient w.r.t. the expert and
agent scores so that scorers can backpropagate without an autodiff framework.

Sigmoid outputs are clamped to [D_MIN, 1 - D_MIN] before taking logs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

D_MIN = 1e-7
G_MAX = float(np.log((1 - D_MIN) / D_MIN))  # logit of 1 - D_MIN


def _arr(x, what="scores") -> np.ndarray:
    a = np.asarray(x, dtype=float).ravel()
    if a.size == 0:
        raise ValueError(f"{what} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{what} contain non-finite values")
    return a


def sigmoid(g):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(g, dtype=float)))


def log_sigmoid(g):
    g = np.asarray(g, dtype=float)
    return -np.logaddexp(0.0, -g)


def logistic_loss(z):
    """phi(z) = log(1 + exp(-z))."""
    return np.logaddexp(0.0, -np.asarray(z, dtype=float))


def logistic_loss_grad(z):
    return -sigmoid(-np.asarray(z, dtype=float))


# --- PU risk ------------------------------------------------------------------------------


@dataclass(frozen=True)
class PuLossConfig:
    alpha: float = 0.7
    clamp: str = "non_negative_correction"  # or "none"
    loss_side_convention: str = "minimize_risk"  # or "maximize_discriminator"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.clamp not in ("non_negative_correction", "none"):
            raise ValueError(f"unknown clamp {self.clamp!r}")
        if self.loss_side_convention not in ("minimize_risk", "maximize_discriminator"):
            raise ValueError(f"unknown convention {self.loss_side_convention!r}")


def pu_risk_terms(out_e, out_a, phi=logistic_loss, alpha=0.7) -> tuple[float, float]:
    """(E_e[phi(g)] - alpha E_a[phi(g)], alpha E_a[phi(-g)]) before any correction."""
    g_e, g_a = _arr(out_e, "expert scores"), _arr(out_a, "agent scores")
    first = float(np.mean(phi(g_e)) - alpha * np.mean(phi(g_a)))
    second = float(alpha * np.mean(phi(-g_a)))
    return first, second


def pu_risk(out_e, out_a, phi=logistic_loss, cfg: PuLossConfig = PuLossConfig()) -> float:
    """max(0, E_e[phi(g)] - alpha E_a[phi(g)]) + alpha E_a[phi(-g)].

    Expert data plays the unlabeled role and agent data the (weighted) known-class role.
    With ``clamp="none"`` the first term is left uncorrected. Under the
    ``maximize_discriminator`` convention the negated risk is returned, which turns the
    correction into min(0, .) as in the discriminator objectives below.
    """
    first, second = pu_risk_terms(out_e, out_a, phi, cfg.alpha)
    if cfg.clamp == "non_negative_correction":
        first = max(0.0, first)
    risk = first + second
    return -risk if cfg.loss_side_convention == "maximize_discriminator" else risk


def true_pu_risk(
    scores: np.ndarray, rho_resid: np.ndarray, rho_agent: np.ndarray, alpha: float, phi=logistic_loss
) -> float:
    """(1 - alpha) E_resid[phi(g)] + alpha E_agent[phi(-g)] under exact tabular densities."""
    g = np.asarray(scores, dtype=float)
    return float(
        (1 - alpha) * (rho_resid * phi(g)).sum() + alpha * (rho_agent * phi(-g)).sum()
    )


def exact_pu_risk(
    scores: np.ndarray,
    rho_expert: np.ndarray,
    rho_agent: np.ndarray,
    alpha: float,
    phi=logistic_loss,
    clamp: bool = False,
) -> float:
    """The PU estimator with sample means replaced by exact expectations."""
    g = np.asarray(scores, dtype=float)
    first = float((rho_expert * phi(g)).sum() - alpha * (rho_agent * phi(g)).sum())
    if clamp:
        first = max(0.0, first)
    return first + float(alpha * (rho_agent * phi(-g)).sum())


# --- discriminator / critic objectives ----------------------------------------------------


@dataclass(frozen=True)
class ObjectiveEval:
    value: float
    grad_expert: np.ndarray
    grad_agent: np.ndarray
    clamp_active: bool = False
    # gradient of the term inside min{0, .}; None for objectives without a clamp
    inner_expert: np.ndarray | None = None
    inner_agent: np.ndarray | None = None

    def ascent_direction(self, clamp_update: str = "reverse") -> tuple[np.ndarray, np.ndarray]:
        """Score-space update direction for a maximizing step.

        ``"subgradient"`` follows the gradient of the value. ``"reverse"`` (the
        non-negative PU training rule) instead descends the clamped term while the
        clamp is active, pushing the estimate back into its valid range.
        """
        if clamp_update not in CLAMP_UPDATES:
            raise ValueError(f"clamp_update must be one of {CLAMP_UPDATES}")
        if clamp_update == "reverse" and self.clamp_active and self.inner_expert is not None:
            return -self.inner_expert, -self.inner_agent
        return self.grad_expert, self.grad_agent


CLAMP_UPDATES = ("reverse", "subgradient")


def _clip_logits(g):
    g = np.asarray(g, dtype=float)
    inside = (g > -G_MAX) & (g < G_MAX)
    return np.clip(g, -G_MAX, G_MAX), inside.astype(float)


def _log_d(g):
    gc, m = _clip_logits(g)
    # d/dg log sigmoid(g) = 1 - D
    return log_sigmoid(gc), (1 - sigmoid(gc)) * m


def _log_1md(g):
    gc, m = _clip_logits(g)
    # d/dg log(1 - sigmoid(g)) = -D
    return log_sigmoid(-gc), -sigmoid(gc) * m


def uid_gail_objective(g_e, g_a, alpha: float) -> ObjectiveEval:
    """min{0, E_e[log D] - alpha E_a[log D]} + alpha E_a[log(1 - D)] with D = sigmoid(g)."""
    g_e, g_a = _arr(g_e), _arr(g_a)
    ne, na = len(g_e), len(g_a)
    lde, dlde = _log_d(g_e)
    lda, dlda = _log_d(g_a)
    l1a, dl1a = _log_1md(g_a)
    inner = lde.mean() - alpha * lda.mean()
    clamped = inner > 0
    value = min(0.0, inner) + alpha * l1a.mean()
    ie, ia = dlde / ne, -alpha * dlda / na
    ge = np.zeros(ne) if clamped else ie
    ga = alpha * dl1a / na + (0.0 if clamped else ia)
    return ObjectiveEval(float(value), ge, ga, bool(clamped), ie, ia)


def gail_objective(g_e, g_a, alpha: float = 1.0) -> ObjectiveEval:
    """E_e[log D] + E_a[log(1 - D)]; every demonstration is a positive."""
    g_e, g_a = _arr(g_e), _arr(g_a)
    lde, dlde = _log_d(g_e)
    l1a, dl1a = _log_1md(g_a)
    value = lde.mean() + l1a.mean()
    return ObjectiveEval(float(value), dlde / len(g_e), dl1a / len(g_a), False)


def pu_gail_objective(g_e, g_a, alpha: float) -> ObjectiveEval:
    """Agent data unlabeled, demonstrations positive:
    min{0, E_a[log(1 - D)] - alpha E_e[log(1 - D)]} + alpha E_e[log D]."""
    g_e, g_a = _arr(g_e), _arr(g_a)
    ne, na = len(g_e), len(g_a)
    l1a, dl1a = _log_1md(g_a)
    l1e, dl1e = _log_1md(g_e)
    lde, dlde = _log_d(g_e)
    inner = l1a.mean() - alpha * l1e.mean()
    clamped = inner > 0
    value = min(0.0, inner) + alpha * lde.mean()
    ie, ia = -alpha * dl1e / ne, dl1a / na
    ge = alpha * dlde / ne + (0.0 if clamped else ie)
    ga = np.zeros(na) if clamped else ia
    return ObjectiveEval(float(value), ge, ga, bool(clamped), ie, ia)


def uid_wail_objective(r_e, r_a, alpha: float) -> ObjectiveEval:
    """min{0, E_e[r] - alpha E_a[r]} - alpha E_a[r] (penalty added by the caller)."""
    r_e, r_a = _arr(r_e), _arr(r_a)
    ne, na = len(r_e), len(r_a)
    inner = r_e.mean() - alpha * r_a.mean()
    clamped = inner > 0
    value = min(0.0, inner) - alpha * r_a.mean()
    ie, ia = np.full(ne, 1.0 / ne), np.full(na, -alpha / na)
    ge = np.zeros(ne) if clamped else ie
    ga = np.full(na, -alpha / na) + (0.0 if clamped else ia)
    return ObjectiveEval(float(value), ge, ga, bool(clamped), ie, ia)


def wail_objective(r_e, r_a, alpha: float = 1.0) -> ObjectiveEval:
    """E_e[r] - E_a[r] (penalty added by the caller)."""
    r_e, r_a = _arr(r_e), _arr(r_a)
    value = r_e.mean() - r_a.mean()
    return ObjectiveEval(
        float(value), np.full(len(r_e), 1.0 / len(r_e)), np.full(len(r_a), -1.0 / len(r_a)), False
    )


OBJECTIVES: dict[str, Callable[..., ObjectiveEval]] = {
    "uid_gail": uid_gail_objective,
    "gail": gail_objective,
    "pu_gail": pu_gail_objective,
    "uid_wail": uid_wail_objective,
    "wail": wail_objective,
}
SIGMOID_METHODS = ("uid_gail", "gail", "pu_gail")
CRITIC_METHODS = ("uid_wail", "wail")


def gail_reward(g):
    """-log(1 - D) with D = sigmoid(g), i.e. softplus(g)."""
    gc, _ = _clip_logits(g)
    return np.logaddexp(0.0, gc)


def critic_reward(g):
    return np.asarray(g, dtype=float)


def reward_for(method: str) -> Callable[[np.ndarray], np.ndarray]:
    if method in SIGMOID_METHODS:
        return gail_reward
    if method in CRITIC_METHODS:
        return critic_reward
    raise KeyError(f"method {method!r} has no discriminator reward")


def _clamp_d(d, what):
    d = _arr(d, what)
    return np.clip(d, D_MIN, 1 - D_MIN)


def uid_discriminator_loss_js(d_expert, d_agent, alpha: float) -> float:
    """UID-GAIL discriminator objective on probabilities D (to be maximized)."""
    de, da = _clamp_d(d_expert, "expert D"), _clamp_d(d_agent, "agent D")
    inner = np.log(de).mean() - alpha * np.log(da).mean()
    return float(min(0.0, inner) + alpha * np.log1p(-da).mean())


def uid_critic_loss_tv(r_expert, r_agent, alpha: float, penalty: float = 0.0, lambda_gp: float = 1.0) -> float:
    """UID-WAIL critic objective (to be maximized); ``penalty`` is the Lipschitz term Psi <= 0."""
    return uid_wail_objective(r_expert, r_agent, alpha).value + lambda_gp * float(penalty)


# --- f-divergences ------------------------------------------------------------------------


@dataclass(frozen=True)
class FDivSpec:
    name: str
    f: Callable[[np.ndarray], np.ndarray]
    f_conjugate: Callable[[np.ndarray], np.ndarray]
    domain: tuple[float, float]  # closed-open bounds of f* (inf for unbounded)
    domain_closed: bool
    f_prime: Callable[[np.ndarray], np.ndarray]
    recession: float  # lim_{u -> inf} f(u) / u, used when nu = 0 < mu
    decision_transform: Callable[[np.ndarray], np.ndarray]
    reward_map: Callable[[np.ndarray], np.ndarray]

    def in_domain(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        lo, hi = self.domain
        if self.domain_closed:
            return (t >= lo) & (t <= hi)
        return (t > lo) & (t < hi)


def _xlogx(u):
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0)), 0.0)


def _js_f(u):
    # convex conjugate of t -> -1 - log(1 - e^t); equals the GAN divergence generator plus one
    u = np.asarray(u, dtype=float)
    return _xlogx(u) - _xlogx(u + 1) + 1.0


def _js_f_conj(t):
    return -1.0 - np.log1p(-np.exp(np.asarray(t, dtype=float)))


def _js_f_prime(u):
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(u) - np.log1p(u)


def _tv_f(u):
    return 0.5 * np.abs(np.asarray(u, dtype=float) - 1.0)


def _tv_f_prime(u):
    return 0.5 * np.sign(np.asarray(u, dtype=float) - 1.0)


def fdiv_registry() -> dict[str, FDivSpec]:
    return {
        "js": FDivSpec(
            name="js",
            f=_js_f,
            f_conjugate=_js_f_conj,
            domain=(-np.inf, 0.0),
            domain_closed=False,
            f_prime=_js_f_prime,
            recession=0.0,
            decision_transform=lambda g: log_sigmoid(g),  # T = log D
            reward_map=gail_reward,  # -log(1 - D)
        ),
        "tv": FDivSpec(
            name="tv",
            f=_tv_f,
            f_conjugate=lambda t: np.asarray(t, dtype=float),
            domain=(-0.5, 0.5),
            domain_closed=True,
            f_prime=_tv_f_prime,
            recession=0.5,
            decision_transform=lambda g: np.asarray(g, dtype=float),
            reward_map=critic_reward,
        ),
    }


def get_fdiv(name: str) -> FDivSpec:
    reg = fdiv_registry()
    if name not in reg:
        raise KeyError(f"unknown f-divergence {name!r}; known: {sorted(reg)}")
    return reg[name]


def variational_objective(T_expert, T_agent, fspec: FDivSpec, alpha: float) -> float:
    """min{0, E_e[T] - alpha E_a[T]} - alpha E_a[f*(T)] on sample batches (to be maximized)."""
    te, ta = _arr(T_expert, "expert T"), _arr(T_agent, "agent T")
    if not (fspec.in_domain(ta).all() and fspec.in_domain(te).all()):
        raise ValueError(f"T values outside the domain {fspec.domain} of {fspec.name} f*")
    inner = te.mean() - alpha * ta.mean()
    return float(min(0.0, inner) - alpha * fspec.f_conjugate(ta).mean())


def exact_variational_objective(
    T: np.ndarray, rho_expert: np.ndarray, rho_agent: np.ndarray, fspec: FDivSpec, alpha: float
) -> float:
    """Same objective with exact tabular expectations."""
    T = np.asarray(T, dtype=float)
    if not fspec.in_domain(T[rho_agent > 0]).all():
        raise ValueError(f"T values outside the domain of {fspec.name} f*")
    inner = float((rho_expert * T).sum() - alpha * (rho_agent * T).sum())
    conj = np.where(rho_agent > 0, fspec.f_conjugate(np.where(rho_agent > 0, T, fspec_safe(fspec))), 0.0)
    return min(0.0, inner) - alpha * float((rho_agent * conj).sum())


def fspec_safe(fspec: FDivSpec) -> float:
    lo, hi = fspec.domain
    if np.isfinite(lo) and np.isfinite(hi):
        return 0.5 * (lo + hi)
    return hi - 1.0 if np.isfinite(hi) else (lo + 1.0 if np.isfinite(lo) else 0.0)
