import math

import numpy as np
import pytest

import puail.trainer as trainer_mod
from puail.demos import DemoSet, build_demo_set, make_d2_policies, optimal_policy
from puail.objectives import ObjectiveEval, log_sigmoid, sigmoid
from puail.scorer import ScorerParams, init_scorer, loss_grad, score
from puail.trainer import (
    METHODS,
    RunRecord,
    TrainConfig,
    bc_step,
    disc_accuracy,
    discriminator_objective,
    discriminator_step,
    dumps_record,
    loads_record,
    sample_agent_pairs,
    train,
)

SMALL = dict(iters=6, rollout_per_iter=4, horizon=20, batch_size=16)


@pytest.fixture(scope="module")
def demos4(grid4):
    opt = optimal_policy(grid4)
    return build_demo_set(grid4, opt, make_d2_policies(opt, [0.5, 0.9]), 80, 100, seed=0)


def _batch(rng, n, S=16, A=4):
    return np.stack([rng.integers(0, S, n), rng.integers(0, A, n)], 1)


# --- config -------------------------------------------------------------------------------


@pytest.mark.parametrize("bad", [
    dict(method="airl"), dict(alpha=0.0), dict(alpha=1.5), dict(iters=-1), dict(batch_size=0),
    dict(lr_disc=-1.0), dict(entropy_bonus=-0.1), dict(penalty_samples="expert"),
    dict(clamp_update="ignore"), dict(hidden=0),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_from_dict_rejects_unknown():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"iters": 3, "lr": 0.1})
    assert TrainConfig.from_dict({"iters": 3}).iters == 3


# --- train --------------------------------------------------------------------------------


def test_zero_iterations_returns_initial_policy(grid4, demos4):
    rec = train(grid4, demos4, TrainConfig(iters=0))
    assert len(rec) == 0
    assert np.allclose(rec.policy.probs, 0.25)


def test_empty_demos_rejected(grid4):
    with pytest.raises(ValueError):
        train(grid4, DemoSet([], [], [], []), TrainConfig(iters=1))


def test_bc_recovers_expert_actions(grid4):
    opt = optimal_policy(grid4)
    demos = build_demo_set(grid4, opt, [], 400, 100, seed=1)
    rec = train(grid4, demos, TrainConfig(method="bc", iters=100, lr_policy=2.0))
    visited = np.unique(demos.states)
    expert = opt.probs.argmax(1)
    assert np.array_equal(rec.policy.probs[visited].argmax(1), expert[visited])
    assert rec.disc_loss == [None] * 100


@pytest.mark.parametrize("method", METHODS)
def test_every_method_runs_and_records(grid4, demos4, method):
    rec = train(grid4, demos4, TrainConfig(method=method, **SMALL))
    assert len(rec) == SMALL["iters"] and rec.aborted is None
    assert all(math.isfinite(r) for r in rec.returns)
    if method != "bc":
        assert all(0 <= a <= 1 for a in rec.acc_do + rec.acc_dn)
        assert all(0 <= c <= 1 for c in rec.clamp_active_frac)


@pytest.mark.parametrize("method", ["uid_gail", "uid_wail", "bc"])
def test_seed_determinism(grid4, demos4, method):
    cfg = TrainConfig(method=method, architecture="mlp", hidden=4, **SMALL)
    assert dumps_record(train(grid4, demos4, cfg)) == dumps_record(train(grid4, demos4, cfg))


def test_different_seeds_differ(grid4, demos4):
    a = train(grid4, demos4, TrainConfig(seed=1, **SMALL))
    b = train(grid4, demos4, TrainConfig(seed=2, **SMALL))
    assert a.returns != b.returns


def test_nan_loss_aborts_with_diagnostic(grid4, demos4, monkeypatch):
    def broken(g_e, g_a, alpha):
        return ObjectiveEval(float("nan"), np.zeros(len(g_e)), np.zeros(len(g_a)))

    monkeypatch.setitem(trainer_mod.OBJECTIVES, "uid_gail", broken)
    rec = train(grid4, demos4, TrainConfig(**SMALL))
    assert rec.aborted is not None and "iteration 0" in rec.aborted
    assert len(rec) == 0
    text = dumps_record(rec)
    assert "aborted=1" in text.splitlines()[0]
    assert loads_record(text).aborted == rec.aborted


# --- discriminator step -------------------------------------------------------------------


def test_zero_learning_rate_keeps_scorer(grid4):
    rng = np.random.default_rng(0)
    sc = init_scorer("mlp", 16, 4, rng, hidden=4)
    res = discriminator_step(sc, _batch(rng, 8), _batch(rng, 8), TrainConfig(lr_disc=0.0))
    assert np.array_equal(res.scorer.weights, sc.weights)
    assert math.isfinite(res.loss)


@pytest.mark.parametrize("arch", ["tabular", "mlp"])
def test_alpha_one_same_batch_matches_gail_agent_term(arch):
    rng = np.random.default_rng(1)
    sc = init_scorer(arch, 16, 4, rng, hidden=4, scale=0.5)
    b = _batch(rng, 10)
    cfg = TrainConfig(alpha=1.0)
    _, grad, clamp = discriminator_objective(sc, b, b, cfg)
    ref = loss_grad(sc, lambda s: (float(np.mean(log_sigmoid(-s[0]))), [-sigmoid(s[0]) / len(s[0])]), b)
    assert not clamp
    assert np.allclose(grad, ref.param_grad, atol=1e-14)


def test_reverse_and_subgradient_rules_differ_only_when_clamped():
    rng = np.random.default_rng(2)
    # expert scores high, agent scores low: the inner term is positive
    w = np.zeros(64)
    w[:32] = 3.0
    sc = ScorerParams("tabular", 16, 4, w)
    eb = np.stack([rng.integers(0, 8, 12), rng.integers(0, 4, 12)], 1)
    ab = np.stack([rng.integers(8, 16, 12), rng.integers(0, 4, 12)], 1)
    rev = discriminator_step(sc, eb, ab, TrainConfig(clamp_update="reverse", lr_disc=1.0))
    sub = discriminator_step(sc, eb, ab, TrainConfig(clamp_update="subgradient", lr_disc=1.0))
    assert rev.clamp_active and sub.clamp_active
    # reverse rule lowers expert scores, pulling the inner term back below zero
    assert score(rev.scorer, eb).mean() < score(sc, eb).mean()
    assert np.array_equal(score(sub.scorer, eb), score(sc, eb))
    w2 = np.zeros(64)
    sc2 = ScorerParams("tabular", 16, 4, w2)
    a = discriminator_step(sc2, eb, ab, TrainConfig(clamp_update="reverse"))
    b = discriminator_step(sc2, eb, ab, TrainConfig(clamp_update="subgradient"))
    assert not a.clamp_active
    assert np.array_equal(a.scorer.weights, b.scorer.weights)


def test_wail_penalty_included_in_value():
    rng = np.random.default_rng(3)
    sc = init_scorer("mlp", 16, 4, rng, hidden=4, scale=0.5)
    eb, ab = _batch(rng, 8), _batch(rng, 8)
    v0, _, _ = discriminator_objective(sc, eb, ab, TrainConfig(method="wail", lambda_gp=0.0), 5)
    v1, _, _ = discriminator_objective(sc, eb, ab, TrainConfig(method="wail", lambda_gp=1.0), 5)
    assert v1 < v0


# --- accuracy -----------------------------------------------------------------------------


def test_accuracy_extremes(demos4):
    hi = ScorerParams("tabular", 16, 4, np.full(64, 50.0))
    lo = ScorerParams("tabular", 16, 4, np.full(64, -50.0))
    assert disc_accuracy(hi, demos4, "uid_gail") == (1.0, 0.0)
    assert disc_accuracy(lo, demos4, "gail") == (0.0, 1.0)
    with pytest.raises(ValueError):
        disc_accuracy(hi, demos4, "bc")


def test_critic_accuracy_uses_median(demos4):
    w = np.zeros((16, 4))
    opt_pairs = demos4.pairs[demos4.is_optimal]
    w[opt_pairs[:, 0], opt_pairs[:, 1]] = 1.0
    do, dn = disc_accuracy(ScorerParams("tabular", 16, 4, w.ravel()), demos4, "uid_wail")
    assert 0 <= do <= 1 and 0 <= dn <= 1


# --- helpers ------------------------------------------------------------------------------


def test_agent_pairs_discount_weighting(grid4):
    from puail.mdp import SoftmaxPolicy, rollout

    rng = np.random.default_rng(4)
    batch = rollout(grid4, SoftmaxPolicy.uniform(16, 4), 4, 50, rng, 0)
    pairs = sample_agent_pairs(batch, 20_000, 0.9, rng)
    # the first state is always the start cell; its weight is at least (1 - 0.9) / (1 - 0.9^50)
    assert np.mean(pairs[:, 0] == 0) > 0.1 * 0.99


def test_bc_step_increases_likelihood():
    from puail.mdp import SoftmaxPolicy

    pol = SoftmaxPolicy.uniform(3, 2)
    pairs = np.array([[0, 1], [1, 0], [2, 1]])
    new = bc_step(pol, pairs, 0.5)
    ll = lambda p: np.log(p.probs[pairs[:, 0], pairs[:, 1]]).sum()  # noqa: E731
    assert ll(new) > ll(pol)
    assert new.version == pol.version + 1


# --- records ------------------------------------------------------------------------------


def test_record_round_trip(grid4, demos4):
    rec = train(grid4, demos4, TrainConfig(**SMALL))
    rec.tags = {"alpha": "0.7", "ratio": "2"}
    text = dumps_record(rec)
    back = loads_record(text)
    assert dumps_record(back) == text
    assert back.tags == rec.tags and back.method == "uid_gail"
    assert len(text.strip().splitlines()) == SMALL["iters"] + 1


def test_record_bc_nulls(grid4, demos4):
    rec = train(grid4, demos4, TrainConfig(method="bc", **SMALL))
    line = dumps_record(rec).splitlines()[1].split()
    assert line[2:6] == ["null"] * 4


def test_record_parse_errors():
    head = "# puail-run v1 method=gail seed=0 fields=iter,return,disc_loss,clamp_active_frac,acc_do,acc_dn,entropy\n"
    with pytest.raises(ValueError, match="line 1"):
        loads_record("nothing\n")
    with pytest.raises(ValueError, match="line 2"):
        loads_record(head + "0 1.0 2.0\n")
    with pytest.raises(ValueError, match="line 3"):
        loads_record(head + "0 1 1 1 1 1 1\n0 1 1 1 1 1 1\n")
    with pytest.raises(ValueError, match="whitespace"):
        dumps_record(RunRecord("gail", 0, tags={"a b": "c"}))


def test_tail_return():
    rec = RunRecord("gail", 0, returns=list(range(20)))
    assert rec.tail_return(0.1) == pytest.approx(18.5)
    assert rec.final_return == 19
    assert math.isnan(RunRecord("gail", 0).tail_return())
