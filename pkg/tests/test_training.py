import numpy as np
import pytest

from fairloop import envs
from fairloop.mdp import ConfigurationError, NotionKind
from fairloop.nets import finite_difference_grad, forward, init_net, net_from_params, prob, sigmoid
from fairloop.training import (
    TrainConfig,
    advantages,
    clip_grad_norm,
    ppo_clip_terms,
    regularize_advantage,
    renyi_terms,
    semi_stochastic_action,
    shifted_next,
    train,
    weighted_bce_terms,
)


@pytest.fixture(scope="module")
def lending():
    return envs.load_env("lending")


def small_cfg(**kw):
    base = dict(
        algorithm="ppo",
        notion="opportunity",
        total_steps=4096,
        n_steps=1024,
        episode_steps=32,
        seed=5,
        run_id="t",
    )
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(algorithm="sgd")
    with pytest.raises(ConfigurationError):
        TrainConfig(omega=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig(clip_eps=1.5)
    with pytest.raises(ConfigurationError):
        TrainConfig(n_steps=100, episode_steps=33, total_steps=1000)
    cfg = TrainConfig(algorithm="reg_oracle")
    assert cfg.instrument  # oracle penalty needs ground truth


def test_advantages_zero_when_value_exact():
    gamma = 0.9
    r = np.full(50, 0.3)
    v = np.full(50, 0.3 / (1 - gamma))
    adv, ret = advantages(r, v, 0.3 / (1 - gamma), gamma, 0.95)
    assert np.max(np.abs(adv)) < 1e-10
    assert ret == pytest.approx(v)


def test_advantages_lambda_one_is_return_minus_baseline():
    rng = np.random.default_rng(0)
    r = rng.normal(size=6)
    v = rng.normal(size=6)
    boot = 0.7
    gamma = 0.95
    adv, _ = advantages(r, v, boot, gamma, 1.0)
    for t in range(6):
        g = sum(gamma ** (i - t) * r[i] for i in range(t, 6)) + gamma ** (6 - t) * boot
        assert adv[t] == pytest.approx(g - v[t], abs=1e-10)


def test_advantages_match_recursive_oracle():
    rng = np.random.default_rng(1)
    r = rng.normal(size=5)
    v = rng.normal(size=5)
    boot = float(rng.normal())
    gamma, lam = 0.99, 0.95

    def oracle(t):
        # A_t = delta_t + gamma*lam*A_{t+1}
        if t == 5:
            return 0.0
        nxt = boot if t == 4 else v[t + 1]
        return (r[t] + gamma * nxt - v[t]) + gamma * lam * oracle(t + 1)

    adv, ret = advantages(r, v, boot, gamma, lam)
    for t in range(5):
        assert adv[t] == pytest.approx(oracle(t), abs=1e-10)
    assert ret == pytest.approx(adv + v)


def test_regularize_advantage_worked_examples():
    adv = np.zeros(3)
    # inside tolerance: |0.02| < 0.05/2
    out = regularize_advantage(adv, np.full(3, 0.02), 0.05, 5.0, True)
    assert out == pytest.approx(np.zeros(3))
    # outside: 5 * (0.10 - 0.025) = 0.375
    out = regularize_advantage(adv, np.full(3, 0.10), 0.05, 5.0, True)
    assert out == pytest.approx(np.full(3, -0.375))
    # beta1 = 0 leaves advantages untouched
    out = regularize_advantage(adv, np.full(3, 0.8), 0.05, 0.0, True)
    assert out == pytest.approx(adv)


def test_regularize_advantage_charges_increases():
    adv = np.zeros(2)
    sig = np.array([0.10, 0.02])
    nxt = np.array([0.30, 0.50])
    out = regularize_advantage(adv, sig, 0.05, 0.0, False, beta2_increase=2.0, signal_next=nxt)
    # first record: |0.10| > omega, increase 0.2 -> -0.4; second: |0.02| <= omega -> 0
    assert out == pytest.approx([-0.4, 0.0])


def test_shifted_next_respects_episodes():
    col = np.array([1.0, 2.0, 3.0, 4.0])
    ep = np.array([0, 0, 1, 1])
    out = shifted_next(col, ep)
    assert out == pytest.approx([2.0, 2.0, 4.0, 4.0])


def test_ppo_clip_loss_identity_policy():
    rng = np.random.default_rng(2)
    net = init_net("tanh64", 4, rng)
    x = rng.normal(size=(32, 4))
    p = prob(net, x)
    a = (rng.random(32) < p).astype(np.int8)
    adv = rng.normal(size=32)
    loss, dlogit, _acts, per, unclipped, _p = ppo_clip_terms(net, x, a, p, adv, 0.2)
    # unchanged policy: every ratio is 1, surrogate equals the advantage
    assert loss == pytest.approx(-float(np.mean(adv)), abs=1e-12)
    assert per == pytest.approx(adv)


def test_ppo_clip_caps_ratio():
    # single sample, ratio 1.5 with positive advantage clips at 1.2
    net = net_from_params("linear", [np.zeros((1, 1))], [np.zeros(1)])
    x = np.zeros((1, 1))
    a = np.array([1], dtype=np.int8)
    old = np.array([1.0 / 3.0])  # current prob is 0.5 -> ratio 1.5
    adv = np.array([2.0])
    loss, _dl, _acts, per, unclipped, _p = ppo_clip_terms(net, x, a, old, adv, 0.2)
    assert unclipped[0] == pytest.approx(3.0)
    assert per[0] == pytest.approx(2.4)  # 1.2 * 2.0


def test_surrogate_never_exceeds_unclipped_for_positive_advantage():
    rng = np.random.default_rng(3)
    net = init_net("tanh64", 4, rng)
    x = rng.normal(size=(64, 4))
    a = rng.integers(0, 2, 64).astype(np.int8)
    old = rng.uniform(0.2, 0.8, 64)
    adv = np.abs(rng.normal(size=64))
    _loss, _dl, _acts, per, unclipped, _p = ppo_clip_terms(net, x, a, old, adv, 0.2)
    assert (per <= unclipped + 1e-12).all()


def test_renyi_uniform_policy_closed_form():
    # current policy = all previous policies = 0.5 everywhere -> w = 1,
    # loss = r1 + r0 = 1.0 under the conditional-expectation form
    n = 10
    p = np.full(n, 0.5)
    qbar = np.full(n, 0.5)  # one previous snapshot at 0.5
    z = np.array([0, 1] * 5)
    coeff = np.array([0.5, 0.5])
    const = np.array([(1 - 0.25) / 0.5, (1 - 0.25) / 0.5])  # a_cum/r with two policies
    loss, _dp, w = renyi_terms(p, qbar, z, coeff, const, 2)
    assert w == pytest.approx(np.ones(n))
    assert loss == pytest.approx(1.0)


def test_renyi_loss_monotone_in_rejection():
    qbar = np.array([0.6])
    z = np.array([0])
    coeff = np.array([1.0])
    const = np.array([1.0])
    loss_lo, _, w_lo = renyi_terms(np.array([0.8]), qbar, z, coeff, const, 1)
    loss_hi, _, w_hi = renyi_terms(np.array([0.5]), qbar, z, coeff, const, 1)
    assert w_hi[0] > w_lo[0]
    assert loss_hi > loss_lo


def test_renyi_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = init_net("tanh64", 3, rng)
    x = rng.normal(size=(16, 3))
    qbar = rng.uniform(0.3, 0.9, 16)
    z = rng.integers(0, 2, 16)
    coeff = np.array([0.4, 0.6])
    const = np.array([1.3, 0.8])

    def loss_of(n):
        p = prob(n, x)
        return renyi_terms(p, qbar, z, coeff, const, 2)[0]

    from fairloop.nets import backward, forward_cached

    out, acts = forward_cached(net, x)
    p = sigmoid(out)
    _loss, dp, _w = renyi_terms(p, qbar, z, coeff, const, 2)
    analytic = backward(net, acts, dp * p * (1 - p))
    numeric = finite_difference_grad(net, loss_of)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-9)
    assert np.mean(np.abs(analytic - numeric) / denom <= 1e-4) >= 0.95


def test_weighted_bce_uniform_weights_reduce_to_mean():
    rng = np.random.default_rng(5)
    net = init_net("linear", 3, rng)
    net.theta[...] = rng.normal(scale=0.3, size=net.theta.size)
    x = rng.normal(size=(20, 3))
    y = rng.integers(0, 2, 20).astype(np.float64)
    z = np.zeros(20, dtype=np.int64)
    loss, _dl, _acts = weighted_bce_terms(net, x, y, z, np.ones(20), 1)
    p = prob(net, x)
    expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert loss == pytest.approx(expected, abs=1e-10)


def test_predictor_converges_on_positive_memory(lending):
    # all-positive labels: the weighted cross-entropy drives phi towards 1
    rng = np.random.default_rng(6)
    from fairloop.nets import Adam, backward, forward_cached

    net = init_net("linear", 4, rng)
    opt = Adam(lr=0.1)
    x = rng.normal(size=(64, 4))
    y = np.ones(64)
    z = np.zeros(64, dtype=np.int64)
    for _ in range(200):
        loss, dlogit, acts = weighted_bce_terms(net, x, y, z, np.ones(64), 1)
        opt.step(net, backward(net, acts, dlogit))
    assert prob(net, x).min() > 0.9


def test_semi_stochastic_action_rule():
    rng = np.random.default_rng(7)
    assert all(semi_stochastic_action(0.2, rng) == 0 for _ in range(100))
    assert all(semi_stochastic_action(1.0, rng) == 1 for _ in range(100))
    draws = np.array([semi_stochastic_action(0.5, rng) for _ in range(10_000)])
    assert abs(draws.mean() - 0.5) < 3 * 0.5 / np.sqrt(10_000)
    with pytest.raises(ConfigurationError):
        semi_stochastic_action(1.2, rng)


def test_clip_grad_norm():
    g = np.array([3.0, 4.0])
    out = clip_grad_norm(g, 0.5)
    assert np.linalg.norm(out) == pytest.approx(0.5)
    assert clip_grad_norm(np.array([0.1, 0.0]), 0.5) == pytest.approx([0.1, 0.0])


def test_training_deterministic(lending):
    cfg = small_cfg(algorithm="reg_imputed", beta1=2.0, beta2=0.05, instrument=True)
    a = train(cfg, lending)
    b = train(cfg, lending)
    assert np.array_equal(a.policy.flat(), b.policy.flat())
    assert np.array_equal(a.value.flat(), b.value.flat())
    assert np.array_equal(a.predictor.flat(), b.predictor.flat())
    for ra, rb in zip(a.rows, b.rows):
        for k in ra:
            if k != "wall_clock":
                assert ra[k] == rb[k] or (ra[k] != ra[k] and rb[k] != rb[k]), k


def test_ppo_reduction_bit_identical(lending):
    ppo = train(small_cfg(algorithm="ppo"), lending)
    reduced = train(
        small_cfg(algorithm="reg_imputed", beta1=0.0, beta2=0.0, predictor_steps=0), lending
    )
    assert np.array_equal(ppo.policy.flat(), reduced.policy.flat())
    assert np.array_equal(ppo.value.flat(), reduced.value.flat())


def test_snapshot_count_equals_iterations(lending):
    res = train(small_cfg(total_steps=5 * 1024), lending)
    assert len(res.history) == 5
    assert len(res.rows) == 5
    assert [r["step"] for r in res.rows] == [1, 2, 3, 4, 5]


def test_semisto_rule_applied_in_rollouts(lending):
    from fairloop.mdp import StateCache, collect_rollout, init_run

    run = init_run(lending, seed=9)
    low = StateCache(run.registry, lambda e: np.full(len(e), 0.2), lambda e: np.full(len(e), 0.5))
    buf = collect_rollout(run, low, NotionKind.QUALIFICATION, 2000, semi_stochastic=True)
    assert (buf.a == 0).all()  # below the 0.25 threshold: outright rejection
    run2 = init_run(lending, seed=9)
    low2 = StateCache(run2.registry, lambda e: np.full(len(e), 0.2), lambda e: np.full(len(e), 0.5))
    buf2 = collect_rollout(run2, low2, NotionKind.QUALIFICATION, 2000, semi_stochastic=False)
    assert (buf2.a == 1).any()


def test_oracle_requires_and_uses_truth(lending):
    res = train(small_cfg(algorithm="reg_oracle", beta1=1.0, beta2=1.0), lending)
    assert res.config.instrument
    assert all(np.isfinite(r["delta_true_pool"]) for r in res.rows)


def test_value_head_outputs_raw_values():
    rng = np.random.default_rng(8)
    net = init_net("tanh64", 3, rng, head_scale=1.0)
    out = forward(net, rng.normal(size=(5, 3)))
    assert out.shape == (5,)
