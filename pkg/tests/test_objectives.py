import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from puail.objectives import (
    D_MIN,
    PuLossConfig,
    exact_pu_risk,
    exact_variational_objective,
    fdiv_registry,
    gail_objective,
    gail_reward,
    get_fdiv,
    logistic_loss,
    pu_gail_objective,
    pu_risk,
    pu_risk_terms,
    sigmoid,
    true_pu_risk,
    uid_critic_loss_tv,
    uid_discriminator_loss_js,
    uid_gail_objective,
    uid_wail_objective,
    variational_objective,
    wail_objective,
)
from puail.oracle import closed_form_fdiv, maximize_variational, random_valid_mixture

LOG2 = math.log(2.0)
JS, TV = fdiv_registry()["js"], fdiv_registry()["tv"]


# --- PU risk ------------------------------------------------------------------------------


def test_pu_config_validation():
    with pytest.raises(ValueError):
        PuLossConfig(alpha=0.0)
    with pytest.raises(ValueError):
        PuLossConfig(clamp="abs")
    with pytest.raises(ValueError):
        PuLossConfig(loss_side_convention="either")


def test_pu_risk_cancellation_at_alpha_one():
    g = np.random.default_rng(0).normal(size=20)
    risk = pu_risk(g, g, cfg=PuLossConfig(alpha=1.0))
    assert risk == pytest.approx(np.mean(logistic_loss(-g)), abs=1e-14)


def test_pu_risk_all_zero_outputs():
    assert pu_risk(np.zeros(5), np.zeros(7), cfg=PuLossConfig(alpha=0.5)) == pytest.approx(LOG2, abs=1e-15)


def test_pu_risk_maximize_convention_negates():
    rng = np.random.default_rng(1)
    ge, ga = rng.normal(size=9), rng.normal(size=9)
    a = pu_risk(ge, ga, cfg=PuLossConfig(alpha=0.6))
    b = pu_risk(ge, ga, cfg=PuLossConfig(alpha=0.6, loss_side_convention="maximize_discriminator"))
    assert a == -b


def test_pu_risk_non_finite_raises():
    with pytest.raises(FloatingPointError):
        pu_risk([np.nan], [0.0])
    with pytest.raises(ValueError):
        pu_risk([], [0.0])


def test_non_negative_correction_over_random_batches():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        ge, ga = rng.normal(0, 3, size=rng.integers(1, 30)), rng.normal(0, 3, size=rng.integers(1, 30))
        alpha = rng.uniform(0.05, 1.0)
        cfg = PuLossConfig(alpha=alpha)
        _, second = pu_risk_terms(ge, ga, alpha=alpha)
        assert pu_risk(ge, ga, cfg=cfg) - second >= 0.0


def _mixture(seed, alpha):
    inst = random_valid_mixture(np.random.default_rng(seed), 6, 3, alpha=alpha)
    return inst.rho_e, inst.rho_theta, inst.rho_eps


@pytest.mark.parametrize("seed", range(10))
def test_exact_estimator_equals_true_risk(seed):
    alpha = 0.1 + 0.08 * seed
    rho_e, rho_t, rho_r = _mixture(seed, alpha)
    g = np.random.default_rng(seed + 100).normal(size=rho_e.shape)
    assert abs(exact_pu_risk(g, rho_e, rho_t, alpha) - true_pu_risk(g, rho_r, rho_t, alpha)) < 1e-12


def test_sampled_estimator_error_decreases():
    alpha = 0.7
    rho_e, rho_t, rho_r = _mixture(3, alpha)
    g = np.random.default_rng(4).normal(size=rho_e.shape)
    truth = true_pu_risk(g, rho_r, rho_t, alpha)
    rng = np.random.default_rng(5)
    flat = g.ravel()
    cfg = PuLossConfig(alpha=alpha, clamp="none")

    def median_err(n):
        errs = []
        for _ in range(50):
            ie = rng.choice(flat.size, n, p=rho_e.ravel())
            ia = rng.choice(flat.size, n, p=rho_t.ravel())
            errs.append(abs(pu_risk(flat[ie], flat[ia], cfg=cfg) - truth))
        return np.median(errs)

    assert median_err(10_000) < median_err(100)


# --- UID-GAIL / GAIL / PU-GAIL --------------------------------------------------------------


def test_uid_js_half_everywhere():
    v = uid_discriminator_loss_js(np.full(4, 0.5), np.full(6, 0.5), 0.5)
    assert v == pytest.approx(-LOG2, abs=1e-15)


def test_uid_js_equilibrium_value_at_half():
    assert uid_discriminator_loss_js([0.5] * 3, [0.5] * 3, 0.5) == pytest.approx(-0.6931, abs=1e-4)


@pytest.mark.parametrize("alpha", [0.2, 0.5, 0.7, 0.9])
def test_uid_js_equilibrium_value_attained_at_one_minus_alpha(alpha):
    # with matched distributions the objective peaks at D = 1 - alpha
    d = np.full(5, 1 - alpha)
    expected = (1 - alpha) * math.log(1 - alpha) + alpha * math.log(alpha)
    assert uid_discriminator_loss_js(d, d, alpha) == pytest.approx(expected, abs=1e-12)
    for other in (0.5 * (1 - alpha), 1 - 0.5 * alpha):
        o = np.full(5, other)
        assert uid_discriminator_loss_js(o, o, alpha) < expected


def test_uid_js_alpha_one_reduces_to_gail_agent_term():
    d = np.random.default_rng(6).uniform(0.05, 0.95, size=8)
    assert uid_discriminator_loss_js(d, d, 1.0) == pytest.approx(np.log1p(-d).mean(), abs=1e-14)


def test_uid_js_bounded_by_agent_term_and_clamps_extremes():
    rng = np.random.default_rng(7)
    for _ in range(100):
        de, da, a = rng.uniform(size=5), rng.uniform(size=5), rng.uniform(0.1, 1)
        v = uid_discriminator_loss_js(de, da, a)
        assert v <= a * np.log1p(-np.clip(da, D_MIN, 1 - D_MIN)).mean() + 1e-15
    assert np.isfinite(uid_discriminator_loss_js([0.0, 1.0], [1.0, 0.0], 0.5))


def test_sign_coherence_with_pu_risk():
    rng = np.random.default_rng(8)
    for _ in range(200):
        ge, ga, a = rng.normal(0, 2, 11), rng.normal(0, 2, 13), rng.uniform(0.1, 1)
        uid = uid_discriminator_loss_js(sigmoid(ge), sigmoid(ga), a)
        assert abs(uid + pu_risk(ge, ga, cfg=PuLossConfig(alpha=a))) < 1e-9


def test_score_space_objective_matches_probability_form():
    rng = np.random.default_rng(9)
    ge, ga = rng.normal(size=7), rng.normal(size=5)
    ev = uid_gail_objective(ge, ga, 0.6)
    assert ev.value == pytest.approx(uid_discriminator_loss_js(sigmoid(ge), sigmoid(ga), 0.6), abs=1e-12)


def test_uid_gail_alpha_one_same_batch_gradient_equals_gail_agent_term():
    g = np.random.default_rng(10).normal(size=6)
    uid = uid_gail_objective(g, g, 1.0)
    ref = -sigmoid(g) / len(g)  # d/dg mean log(1 - D)
    assert np.allclose(uid.grad_agent + uid.grad_expert, ref, atol=1e-15)


def test_gail_objective_value():
    ev = gail_objective(np.zeros(3), np.zeros(4))
    assert ev.value == pytest.approx(-2 * LOG2)


def test_pu_gail_clamp_reports_activity():
    # agent looks like demos: D low on agent -> log(1 - D) near 0 > alpha * expert term
    ev = pu_gail_objective(np.full(4, 3.0), np.full(4, -3.0), 0.5)
    assert ev.clamp_active
    assert np.all(ev.grad_agent == 0)


def test_reverse_rule_descends_inner_term_when_clamped():
    ev = uid_gail_objective(np.full(3, 2.0), np.full(3, -2.0), 0.7)
    assert ev.clamp_active
    de, da = ev.ascent_direction("reverse")
    assert np.array_equal(de, -ev.inner_expert) and np.array_equal(da, -ev.inner_agent)
    se, sa = ev.ascent_direction("subgradient")
    assert np.array_equal(se, ev.grad_expert)
    with pytest.raises(ValueError):
        ev.ascent_direction("sideways")


def test_gail_reward_increasing_and_matches_formula():
    g = np.linspace(-8, 8, 200)
    r = gail_reward(g)
    assert np.all(np.diff(r) > 0)
    assert np.allclose(r, -np.log1p(-sigmoid(g)), rtol=1e-10)


# --- UID-WAIL -----------------------------------------------------------------------------


def test_tv_constant_critic():
    assert uid_critic_loss_tv(np.ones(3), np.ones(3), 0.5) == pytest.approx(-0.5)


def test_tv_alpha_one_same_batch():
    r = np.random.default_rng(11).normal(size=6)
    assert uid_critic_loss_tv(r, r, 1.0) == pytest.approx(-r.mean(), abs=1e-14)


def test_tv_zero_critic_returns_penalty():
    assert uid_critic_loss_tv(np.zeros(2), np.zeros(2), 0.3, penalty=-0.4, lambda_gp=2.0) == pytest.approx(-0.8)


def test_wail_objective_value():
    assert wail_objective([1.0, 3.0], [0.5]).value == pytest.approx(1.5)
    assert uid_wail_objective([1.0], [1.0], 0.5).clamp_active


# --- f-divergences ------------------------------------------------------------------------


def test_registry_contents_and_lookup():
    assert {"js", "tv"} <= set(fdiv_registry())
    with pytest.raises(KeyError):
        get_fdiv("chi2")


def test_js_conjugate_value():
    assert float(JS.f_conjugate(math.log(0.5))) == pytest.approx(-1 - math.log(0.5), abs=1e-15)
    assert float(JS.f_conjugate(math.log(0.5))) == pytest.approx(-0.3069, abs=1e-4)


def test_tv_conjugate_and_normalization():
    assert float(TV.f_conjugate(0.3)) == 0.3
    assert float(TV.f(1.0)) == 0.0


def test_js_generator_is_conjugate_of_printed_conjugate():
    # f(1) = 1 - 2 log 2 for the generator paired with f*(t) = -1 - log(1 - e^t)
    assert float(JS.f(1.0)) == pytest.approx(1 - 2 * LOG2, abs=1e-15)
    for u in (0.1, 0.5, 1.0, 2.0, 7.0):
        res = minimize_scalar(lambda t: -(u * t - float(JS.f_conjugate(t))), bounds=(-30, -1e-12),
                              method="bounded", options={"xatol": 1e-12})
        assert -res.fun == pytest.approx(float(JS.f(u)), abs=1e-9)


@pytest.mark.parametrize("name", ["js", "tv"])
def test_fenchel_inequality(name):
    spec = fdiv_registry()[name]
    rng = np.random.default_rng(12)
    u = rng.exponential(2.0, 2000)
    lo, hi = spec.domain
    t = rng.uniform(max(lo, -20), hi, 2000)
    if name == "js":
        t = np.minimum(t, -1e-9)
    assert np.all(u * t - spec.f(u) <= spec.f_conjugate(t) + 1e-9)


@pytest.mark.parametrize("name", ["js", "tv"])
def test_f_prime_attains_fenchel_equality(name):
    spec = fdiv_registry()[name]
    for u in (0.3, 0.8, 1.7, 4.0):
        t = float(spec.f_prime(u))
        assert u * t - float(spec.f(u)) == pytest.approx(float(spec.f_conjugate(t)), abs=1e-12)


def test_js_decision_transform_and_reward_map():
    g = np.array([-2.0, 0.0, 3.0])
    assert np.allclose(JS.decision_transform(g), np.log(sigmoid(g)))
    assert np.allclose(JS.reward_map(g), -np.log(1 - sigmoid(g)))
    assert np.array_equal(TV.reward_map(g), g)


def test_variational_js_equals_uid_plus_alpha():
    rng = np.random.default_rng(13)
    for _ in range(100):
        de, da, a = rng.uniform(0.01, 0.99, 9), rng.uniform(0.01, 0.99, 7), rng.uniform(0.1, 1)
        v = variational_objective(np.log(de), np.log(da), JS, a)
        assert abs(v - (uid_discriminator_loss_js(de, da, a) + a)) < 1e-12


def test_variational_js_half_example():
    v = variational_objective(np.full(3, math.log(0.5)), np.full(3, math.log(0.5)), JS, 0.5)
    assert v == pytest.approx(-LOG2 + 0.5, abs=1e-15)


def test_variational_tv_zero():
    assert variational_objective(np.zeros(4), np.zeros(4), TV, 0.7) == 0.0


def test_variational_domain_error():
    with pytest.raises(ValueError, match="domain"):
        variational_objective([0.1], [0.1], JS, 0.5)
    with pytest.raises(ValueError, match="domain"):
        variational_objective([0.0], [0.9], TV, 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_variational_maximum_equals_closed_form(seed):
    inst = random_valid_mixture(np.random.default_rng(seed))
    T, _, converged = maximize_variational(inst, JS)
    assert converged
    value = exact_variational_objective(T, inst.rho_e, inst.rho_theta, JS, inst.alpha)
    assert abs(value - closed_form_fdiv(inst.mu, inst.nu, JS)) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["js", "tv"]))
def test_variational_lower_bound(seed, name):
    spec = fdiv_registry()[name]
    rng = np.random.default_rng(seed)
    inst = random_valid_mixture(rng)
    lo, hi = spec.domain
    T = rng.uniform(max(lo, -8), hi, size=inst.mu.shape)
    if name == "js":
        T = np.minimum(T, -1e-6)
    value = exact_variational_objective(T, inst.rho_e, inst.rho_theta, spec, inst.alpha)
    assert value <= closed_form_fdiv(inst.mu, inst.nu, spec) + 1e-9
