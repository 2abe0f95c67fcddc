"""Exact checks of the UID discriminator and variational results on small tabular instances.

Everything here uses exact expectations over occupancy tables, so the identities hold
to floating-point precision rather than up to sampling noise. Conventions:

* ``0 * log 0 = 0``; a KL term with mass outside the reference support is ``+inf``.
* Divergences are ``I_f(mu, nu) = sum nu * f(mu / nu)``, with ``nu = 0 < mu`` entries
  contributing ``mu * recession(f)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import OccupancyMeasure
from .objectives import FDivSpec, fdiv_registry, log_sigmoid, sigmoid

VALID_TOL = 1e-12


class InvalidMixtureError(ValueError):
    pass


def _table(x) -> np.ndarray:
    if isinstance(x, OccupancyMeasure):
        x = x.rho
    t = np.array(x, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if t.ndim != 2:
        raise ValueError("occupancy tables must be 1-D or 2-D")
    return t


@dataclass(frozen=True)
class MixtureInstance:
    """Demonstration occupancy ``rho_e`` written as a mixture with the agent occupancy."""

    rho_e: np.ndarray
    rho_theta: np.ndarray
    alpha: float

    def __post_init__(self):
        e, t = _table(self.rho_e), _table(self.rho_theta)
        if e.shape != t.shape:
            raise ValueError(f"shape mismatch: rho_e {e.shape} vs rho_theta {t.shape}")
        if (e < 0).any() or (t < 0).any():
            raise ValueError("occupancies must be non-negative")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        for arr in (e, t):
            arr.setflags(write=False)
        object.__setattr__(self, "rho_e", e)
        object.__setattr__(self, "rho_theta", t)
        object.__setattr__(self, "alpha", float(self.alpha))

    @classmethod
    def from_components(cls, rho_eps, rho_theta, alpha: float) -> "MixtureInstance":
        """Build rho_e = (1 - alpha) rho_eps + alpha rho_theta."""
        eps, th = _table(rho_eps), _table(rho_theta)
        return cls((1 - alpha) * eps + alpha * th, th, alpha)

    @property
    def mu(self) -> np.ndarray:
        return self.rho_e - self.alpha * self.rho_theta

    @property
    def nu(self) -> np.ndarray:
        return self.alpha * self.rho_theta

    @property
    def valid(self) -> bool:
        return bool((self.mu >= -VALID_TOL).all())

    @property
    def degenerate(self) -> bool:
        return self.alpha >= 1.0

    @property
    def rho_eps(self) -> np.ndarray:
        if self.degenerate:
            raise InvalidMixtureError("alpha = 1 leaves no room for the residual component")
        return np.clip(self.mu, 0.0, None) / (1 - self.alpha) if self.valid else self.mu / (1 - self.alpha)

    def describe(self) -> str:
        S, A = self.rho_e.shape
        return f"{S}x{A} table, alpha={self.alpha!r}, valid={self.valid}"


def _require_valid(inst: MixtureInstance) -> None:
    if not inst.valid:
        raise InvalidMixtureError(
            f"alpha * rho_theta exceeds rho_e by {float(-inst.mu.min()):.3g}; not a valid mixture"
        )
    if inst.degenerate:
        raise InvalidMixtureError("alpha = 1: the mixture has no residual component")


def random_valid_mixture(
    rng: np.random.Generator,
    n_states: int = 5,
    n_actions: int = 2,
    alpha: float | None = None,
    concentration: float = 1.0,
) -> MixtureInstance:
    """Dirichlet draws for both components; alpha uniform on [0.1, 0.9] unless given."""
    if alpha is None:
        alpha = float(rng.uniform(0.1, 0.9))
    k = n_states * n_actions
    eps = rng.dirichlet(np.full(k, concentration)).reshape(n_states, n_actions)
    th = rng.dirichlet(np.full(k, concentration)).reshape(n_states, n_actions)
    return MixtureInstance.from_components(eps, th, alpha)


def equilibrium_instance(rho, alpha: float) -> MixtureInstance:
    """rho_theta = rho_eps = rho_e = rho."""
    r = _table(rho)
    return MixtureInstance(r, r, alpha)


# --- discriminators -----------------------------------------------------------------------


def optimal_discriminator(inst: MixtureInstance) -> np.ndarray:
    """Closed form D* = rho_eps / (rho_eps + ((1 - alpha) / alpha) rho_theta).

    Points with no mass under either component get alpha; points only the
    residual component visits get 1.
    """
    _require_valid(inst)
    eps, th, a = inst.rho_eps, inst.rho_theta, inst.alpha
    den = eps + (1 - a) / a * th
    out = np.full(eps.shape, a)
    pos = den > 0
    out[pos] = eps[pos] / den[pos]
    return out


def exact_maximizer(inst: MixtureInstance) -> np.ndarray:
    """Pointwise maximizer of the exact UID discriminator objective: (rho_e - alpha rho_theta) / rho_e.

    Equivalently rho_eps / (rho_eps + (alpha / (1 - alpha)) rho_theta). Zero-mass points get alpha.
    """
    _require_valid(inst)
    mu = np.clip(inst.mu, 0.0, None)
    out = np.full(mu.shape, inst.alpha)
    pos = inst.rho_e > 0
    out[pos] = mu[pos] / inst.rho_e[pos]
    return out


def _xlog(w, v):
    """w * log(v) with 0 * log(anything) = 0."""
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(w != 0, w * np.log(np.where(w != 0, v, 1.0)), 0.0)


def exact_uid_objective(D, inst: MixtureInstance) -> float:
    """min{0, E_e[log D] - alpha E_theta[log D]} + alpha E_theta[log(1 - D)] with exact expectations."""
    D = np.asarray(D, dtype=float)
    inner = float(_xlog(inst.rho_e, D).sum() - inst.alpha * _xlog(inst.rho_theta, D).sum())
    return min(0.0, inner) + inst.alpha * float(_xlog(inst.rho_theta, 1 - D).sum())


def _exact_uid_grad_logits(g, inst: MixtureInstance):
    D = sigmoid(g)
    e, t, a = inst.rho_e, inst.rho_theta, inst.alpha
    inner = float((e * log_sigmoid(g)).sum() - a * (t * log_sigmoid(g)).sum())
    grad = -a * t * D
    if inner <= 0:
        grad = grad + (e - a * t) * (1 - D)
    return grad


@dataclass
class OracleReport:
    name: str
    passed: bool
    values: dict = field(default_factory=dict)
    detail: str = ""
    asserted: bool = True  # False for informational checks

    def lines(self) -> list[str]:
        status = ("PASS" if self.passed else "FAIL") if self.asserted else "INFO"
        out = [f"[{status}] {self.name}"]
        if self.detail:
            out.append(f"  instance: {self.detail}")
        for k, v in self.values.items():
            out.append(f"  {k}: {v!r}" if not isinstance(v, float) else f"  {k}: {v:.12g}")
        return out


def format_reports(reports: list[OracleReport]) -> str:
    lines = ["# puail-oracle v1"]
    for r in reports:
        lines.extend(r.lines())
    n_fail = sum(1 for r in reports if r.asserted and not r.passed)
    lines.append(f"summary: {len(reports)} checks, {n_fail} failed")
    return "\n".join(lines) + "\n"


def maximize_uid_discriminator(
    inst: MixtureInstance, max_iters: int = 20000, grad_tol: float = 1e-13, lr: float = 1.0
) -> tuple[np.ndarray, int, bool]:
    """Exact-expectation gradient ascent on the logits of a tabular sigmoid discriminator.

    Each coordinate's step is scaled by the inverse of its probability mass so that
    rarely visited entries converge at the same rate as frequent ones.
    """
    mass = inst.rho_e + inst.alpha * inst.rho_theta
    support = mass > 0
    precond = np.where(support, 1.0 / np.where(support, mass, 1.0), 0.0)
    g = np.zeros_like(mass)
    for it in range(1, max_iters + 1):
        grad = _exact_uid_grad_logits(g, inst)
        # 4 = inverse of the largest curvature of log-sigmoid terms per unit mass
        g = np.clip(g + 4.0 * lr * precond * grad, -30, 30)
        if np.abs(precond * grad).max() < grad_tol:
            return sigmoid(g), it, True
    return sigmoid(g), max_iters, False


def verify_discriminator_by_optimization(
    inst: MixtureInstance, tol: float = 1e-3, target: str = "closed_form", max_iters: int = 20000
) -> OracleReport:
    """Compare the optimized discriminator with a reference table on the support.

    ``target="closed_form"`` uses :func:`optimal_discriminator`; ``"maximizer"`` uses
    :func:`exact_maximizer`. The objective at the reference is compared too.
    """
    _require_valid(inst)
    ref_fn = {"closed_form": optimal_discriminator, "maximizer": exact_maximizer}[target]
    D_opt, iters, converged = maximize_uid_discriminator(inst, max_iters=max_iters)
    ref = ref_fn(inst)
    support = (inst.rho_e + inst.rho_theta) > 0
    linf = float(np.abs(D_opt - ref)[support].max())
    obj = exact_uid_objective(D_opt, inst)
    obj_ref = exact_uid_objective(ref, inst)
    passed = converged and linf < tol and abs(obj - obj_ref) < tol
    return OracleReport(
        f"discriminator optimum vs {target}",
        passed,
        {"linf": linf, "objective_optimized": obj, "objective_reference": obj_ref,
         "iterations": iters, "converged": converged, "tol": tol},
        inst.describe(),
    )


# --- KL decomposition ---------------------------------------------------------------------


def kl(p, q) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if ((p > 0) & (q <= 0)).any():
        return math.inf
    m = p > 0
    return float((p[m] * np.log(p[m] / q[m])).sum())


def equilibrium_constant(alpha: float) -> float:
    """(1 - alpha) log(1 - alpha) + alpha log(alpha), with 0 log 0 = 0."""
    return float(_xlog(1 - alpha, 1 - alpha) + _xlog(alpha, alpha))


def kl_decomposition(inst: MixtureInstance) -> tuple[float, float, float]:
    """(C, (1 - alpha) KL(rho_eps || rho_e), alpha KL(rho_theta || rho_e))."""
    _require_valid(inst)
    a = inst.alpha
    return (
        equilibrium_constant(a),
        (1 - a) * kl(inst.rho_eps, inst.rho_e),
        a * kl(inst.rho_theta, inst.rho_e),
    )


def kl_identity_residual(inst: MixtureInstance, discriminator: str = "closed_form") -> float:
    """|objective at D - (C + both KL terms)| for D the closed form or the true maximizer."""
    D = {"closed_form": optimal_discriminator, "maximizer": exact_maximizer}[discriminator](inst)
    return abs(exact_uid_objective(D, inst) - sum(kl_decomposition(inst)))


# --- variational f-divergence -------------------------------------------------------------


def closed_form_fdiv(mu, nu, fspec: FDivSpec, allow_negative: bool = False) -> float:
    """sum nu * f(mu / nu); nu = 0 < mu contributes mu * recession, both zero contribute 0."""
    mu, nu = np.asarray(mu, dtype=float), np.asarray(nu, dtype=float)
    if mu.shape != nu.shape:
        raise ValueError("mu and nu must share a shape")
    if (nu < 0).any():
        raise ValueError("nu must be non-negative")
    if (mu < 0).any() and not allow_negative:
        raise ValueError("mu has negative entries; pass allow_negative=True to evaluate anyway")
    pos = nu > 0
    total = float((nu[pos] * fspec.f(mu[pos] / nu[pos])).sum())
    only_mu = (~pos) & (mu != 0)
    if only_mu.any():
        if not math.isfinite(fspec.recession):
            return math.inf
        total += float(fspec.recession * mu[only_mu].sum())
    return total


def _exact_var_objective(T, inst: MixtureInstance, fspec: FDivSpec) -> float:
    inner = float((inst.rho_e * T).sum() - inst.alpha * (inst.rho_theta * T).sum())
    nu = inst.nu
    conj = np.zeros_like(T)
    pos = nu > 0
    conj[pos] = fspec.f_conjugate(T[pos])
    return min(0.0, inner) - float((nu * conj).sum())


def maximize_variational(
    inst: MixtureInstance, fspec: FDivSpec, max_iters: int = 20000, grad_tol: float = 1e-13
) -> tuple[np.ndarray, int, bool]:
    """Gradient ascent on a tabular T for the exact variational objective.

    js parametrizes T = log sigmoid(g) to stay inside the open domain; tv takes
    projected steps inside [-1/2, 1/2].
    """
    mu, nu = inst.mu, inst.nu
    mass = np.abs(mu) + nu
    precond = np.where(mass > 0, 1.0 / np.where(mass > 0, mass, 1.0), 0.0)
    if fspec.name == "js":
        g = np.zeros_like(mu)
        for it in range(1, max_iters + 1):
            T = log_sigmoid(g)
            inner = float((mu * T).sum())
            w = mu if inner <= 0 else np.zeros_like(mu)
            D = sigmoid(g)
            # d/dg [w T + nu (1 + log(1 - e^T))] = w (1 - D) - nu D
            grad = w * (1 - D) - nu * D
            g = np.clip(g + 4.0 * precond * grad, -30, 30)
            if np.abs(precond * grad).max() < grad_tol:
                return log_sigmoid(g), it, True
        return log_sigmoid(g), max_iters, False
    lo, hi = fspec.domain
    T = np.zeros_like(mu)
    for it in range(1, max_iters + 1):
        inner = float((mu * T).sum())
        w = mu if inner <= 0 else np.zeros_like(mu)
        grad = w - nu  # f*(t) = t
        T_new = np.clip(T + 0.5 * precond * grad, lo, hi)
        if np.abs(T_new - T).max() < grad_tol:
            return T_new, it, True
        T = T_new
    return T, max_iters, False


def verify_variational_tightness(
    inst: MixtureInstance, fspec: FDivSpec, tol: float = 1e-3, max_iters: int = 20000
) -> OracleReport:
    """Optimized variational value vs closed-form I_f(mu, nu), and T* vs f'(mu / nu).

    Asserted for divergences with an unconstrained conjugate domain. For bounded
    domains (tv) the attained gap is reported without a pass/fail verdict.
    """
    _require_valid(inst)
    T, iters, converged = maximize_variational(inst, fspec, max_iters)
    mu, nu = np.clip(inst.mu, 0.0, None), inst.nu
    closed = closed_form_fdiv(mu, nu, fspec)
    value = _exact_var_objective(T, inst, fspec)
    both = (mu > 0) & (nu > 0)
    t_star = fspec.f_prime(mu[both] / nu[both])
    t_err = float(np.abs(T[both] - t_star).max()) if both.any() else 0.0
    gap = closed - value
    asserted = not np.isfinite(fspec.domain[1] - fspec.domain[0])
    passed = converged and abs(gap) < tol and t_err < tol
    return OracleReport(
        f"variational tightness ({fspec.name})",
        passed if asserted else True,
        {"closed_form": closed, "optimized": value, "gap": gap, "t_star_linf": t_err,
         "iterations": iters, "converged": converged, "tol": tol},
        inst.describe(),
        asserted=asserted,
    )


# --- battery ------------------------------------------------------------------------------


def _with_alpha(inst: MixtureInstance, alpha: float) -> MixtureInstance:
    return MixtureInstance(inst.rho_e, inst.rho_theta, alpha)


def run_battery(seed: int = 0, n_instances: int = 10, self_test: bool = False) -> list[OracleReport]:
    """Run every oracle check on seeded random instances.

    With ``self_test`` the discriminator references are evaluated at a wrong alpha
    (scaled by 0.8, which keeps every mixture valid); the asserted checks must then fail.
    """
    rng = np.random.default_rng(seed)
    reports: list[OracleReport] = []
    js, tv = fdiv_registry()["js"], fdiv_registry()["tv"]
    insts = [random_valid_mixture(rng) for _ in range(n_instances)]

    def ref_inst(inst):
        return _with_alpha(inst, 0.8 * inst.alpha) if self_test else inst

    worst = 0.0
    worst_printed = 0.0
    for inst in insts:
        D, _, _ = maximize_uid_discriminator(inst)
        sup = (inst.rho_e + inst.rho_theta) > 0
        ref = ref_inst(inst)
        worst = max(worst, float(np.abs(D - exact_maximizer(ref))[sup].max()))
        worst_printed = max(worst_printed, float(np.abs(D - optimal_discriminator(inst))[sup].max()))
    reports.append(OracleReport(
        "optimized discriminator matches the exact maximizer", worst < 1e-3,
        {"linf_max": worst, "instances": n_instances}))
    reports.append(OracleReport(
        "optimized discriminator vs printed closed form (random alpha)", True,
        {"linf_max": worst_printed}, asserted=False))

    half = [_with_alpha(i, 0.5) for i in insts if _with_alpha(i, 0.5).valid]
    half_err = 0.0
    for inst in half:
        D, _, _ = maximize_uid_discriminator(inst)
        ref = ref_inst(inst)
        half_err = max(half_err, float(np.abs(D - optimal_discriminator(ref)).max()))
    reports.append(OracleReport(
        "printed closed form at alpha = 0.5", half_err < 1e-3,
        {"linf_max": half_err, "instances": len(half)}))

    res_max = max(abs(exact_uid_objective(exact_maximizer(ref_inst(i)), i) - sum(kl_decomposition(i)))
                  for i in insts)
    res_printed = max(kl_identity_residual(i, "closed_form") for i in insts)
    reports.append(OracleReport(
        "KL decomposition at the exact maximizer", res_max < 1e-9, {"residual_max": res_max}))
    reports.append(OracleReport(
        "KL decomposition at the printed closed form (random alpha)", True,
        {"residual_max": res_printed}, asserted=False))

    rho = rng.dirichlet(np.ones(10)).reshape(5, 2)
    eq = equilibrium_instance(rho, 0.5)
    D, _, _ = maximize_uid_discriminator(eq)
    c_ref = equilibrium_constant(ref_inst(eq).alpha)
    val = exact_uid_objective(D, eq)
    reports.append(OracleReport(
        "equilibrium value and discriminator at alpha = 0.5",
        abs(val - c_ref) < 1e-3 and float(np.abs(D - ref_inst(eq).alpha).max()) < 1e-2,
        {"objective": val, "expected": c_ref, "d_linf": float(np.abs(D - ref_inst(eq).alpha).max())}))

    gaps, terr = [], []
    for inst in insts:
        r = verify_variational_tightness(inst, js)
        gaps.append(abs(r.values["gap"]))
        terr.append(r.values["t_star_linf"])
    reports.append(OracleReport(
        "variational tightness (js)", max(gaps) < 1e-3 and max(terr) < 1e-3,
        {"gap_max": max(gaps), "t_star_linf_max": max(terr)}))
    tv_gaps = [verify_variational_tightness(i, tv).values["gap"] for i in insts]
    reports.append(OracleReport(
        "variational tightness (tv)", True, {"gap_max": max(tv_gaps)}, asserted=False))

    sums = []
    for _ in range(200):
        inst = random_valid_mixture(rng)
        sums.append(sum(kl_decomposition(inst)) - equilibrium_constant(inst.alpha))
    reports.append(OracleReport(
        "KL sum never below its equilibrium constant", min(sums) >= -1e-12,
        {"min_excess": float(min(sums))}))
    return reports
