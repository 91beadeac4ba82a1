import math

import numpy as np
import pytest

from modeloco import policy as pol
from modeloco import refmotion as rm
from modeloco import sim
from modeloco.encoder import LatentMode
from modeloco.sampler import EpisodeScript


def library_with_latents(selector="pi2", seed=0):
    lib = rm.builtin_library(selector)
    rng = np.random.default_rng(seed)
    return lib.with_latents(
        [LatentMode(rng.normal(size=4), m.name) for m in lib.motions]
    )


OBS_DIM = sim.observation_dim(4)


# --- acting -------------------------------------------------------------------


def test_zero_network_deterministic_action_is_zero():
    net = pol.MlpParams(
        weights=[np.zeros((8, OBS_DIM)), np.zeros((4, 8))],
        biases=[np.zeros(8), np.zeros(4)],
    )
    params = pol.PolicyParams(net=net, log_std=np.zeros(4))
    a, _ = pol.act(params, np.ones(OBS_DIM), stochastic=False)
    np.testing.assert_array_equal(a, np.zeros(4))


def test_act_deterministic_given_seed():
    rng = np.random.default_rng(0)
    params = pol.init_policy(rng, OBS_DIM)
    obs = np.random.default_rng(1).normal(size=OBS_DIM)
    a1, lp1 = pol.act(params, obs, stochastic=True, rng=np.random.default_rng(7))
    a2, lp2 = pol.act(params, obs, stochastic=True, rng=np.random.default_rng(7))
    assert np.array_equal(a1, a2) and lp1 == lp2


def test_log_prob_matches_closed_form_density():
    rng = np.random.default_rng(2)
    params = pol.init_policy(rng, OBS_DIM)
    obs = rng.normal(size=OBS_DIM)
    a, lp = pol.act(params, obs, stochastic=True, rng=rng)
    mean = pol.policy_mean(params, obs)
    std = np.exp(params.log_std)
    # independent evaluation of the diagonal Gaussian density
    dens = np.prod(
        np.exp(-0.5 * ((a - mean) / std) ** 2) / (std * np.sqrt(2 * np.pi))
    )
    assert lp == pytest.approx(math.log(dens), rel=1e-10)


def test_one_dimensional_density_integrates_to_one():
    log_std = np.array([-0.3])
    mean = np.array([[0.4]])
    xs = np.linspace(-6, 6, 4001)[:, None]
    lp = pol.gaussian_log_prob(xs, np.repeat(mean, xs.shape[0], axis=0), log_std)
    integral = np.trapezoid(np.exp(lp), xs[:, 0])
    assert integral == pytest.approx(1.0, abs=1e-3)


def test_action_covariance_is_diagonal_positive():
    params = pol.init_policy(np.random.default_rng(3), OBS_DIM)
    assert np.all(np.exp(params.log_std) > 0.0)


# --- GAE ------------------------------------------------------------------------


def test_gae_lambda_one_equals_discounted_monte_carlo():
    rng = np.random.default_rng(4)
    for _ in range(20):
        T = int(rng.integers(2, 30))
        rewards = rng.normal(size=T)
        values = rng.normal(size=T + 1)
        gamma = float(rng.uniform(0.5, 1.0))
        adv = pol.compute_gae(rewards, values, gamma, 1.0)
        for t in range(T):
            mc = (
                sum(gamma ** (k - t) * rewards[k] for k in range(t, T))
                + gamma ** (T - t) * values[T]
                - values[t]
            )
            assert adv[t] == pytest.approx(mc, abs=1e-10)


# --- PPO losses -------------------------------------------------------------------


def test_clipped_surrogate_equals_unclipped_inside_trust_region():
    rng = np.random.default_rng(5)
    cfg = pol.PpoConfig(clip_ratio=0.2)
    policy = pol.init_policy(rng, 3, act_dim=2, hidden=(4,))
    obs = rng.normal(size=(6, 3))
    actions = rng.normal(size=(6, 2))
    mean, _ = pol.mlp_forward(policy.net, obs)
    lp = pol.gaussian_log_prob(actions, mean, policy.log_std)
    adv = rng.normal(size=6)
    # old log probs chosen so every ratio lies strictly inside [1-eps, 1+eps]
    ratios = rng.uniform(0.85, 1.15, size=6)
    old_lp = lp - np.log(ratios)
    clipped = np.clip(ratios, 0.8, 1.2)
    assert np.array_equal(clipped, ratios)
    surr_clipped = np.minimum(ratios * adv, clipped * adv)
    np.testing.assert_allclose(surr_clipped, ratios * adv, atol=1e-15)
    # and through the actual loss: equality with an unclipped config
    batch = {
        "obs": obs,
        "actions": actions,
        "old_log_probs": old_lp,
        "advantages": adv,
        "returns": rng.normal(size=6),
    }
    value = pol.init_value(rng, 3, hidden=(4,))
    loose = pol.PpoConfig(clip_ratio=1e9)
    assert pol.ppo_loss(policy, value, batch, cfg) == pytest.approx(
        pol.ppo_loss(policy, value, batch, loose), abs=1e-12
    )


def test_surrogate_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10):
        obs_dim = int(rng.integers(2, 5))
        act_dim = int(rng.integers(1, 4))
        cfg = pol.PpoConfig(clip_ratio=0.2, entropy_coef=0.01, value_coef=0.5)
        policy = pol.init_policy(rng, obs_dim, act_dim=act_dim, hidden=(3,))
        value = pol.init_value(rng, obs_dim, hidden=(3,))
        B = 8
        batch = {
            "obs": rng.normal(size=(B, obs_dim)),
            "actions": rng.normal(size=(B, act_dim)),
            "old_log_probs": rng.normal(scale=0.2, size=B) - 1.5,
            "advantages": rng.normal(size=B),
            "returns": rng.normal(size=B),
        }
        _, g_p, g_v = pol.ppo_loss_and_grad(policy, value, batch, cfg)
        h = 1e-6
        for pack, unpack, grad, which in (
            (pol.pack_policy, pol.unpack_policy, g_p, "p"),
            (pol.pack_value, pol.unpack_value, g_v, "v"),
        ):
            base = pack(policy if which == "p" else value)
            fd = np.zeros_like(base)
            for i in range(base.size):
                plus = base.copy()
                plus[i] += h
                minus = base.copy()
                minus[i] -= h
                if which == "p":
                    lp_ = pol.ppo_loss(unpack(plus, policy), value, batch, cfg)
                    lm_ = pol.ppo_loss(unpack(minus, policy), value, batch, cfg)
                else:
                    lp_ = pol.ppo_loss(policy, unpack(plus, value), batch, cfg)
                    lm_ = pol.ppo_loss(policy, unpack(minus, value), batch, cfg)
                fd[i] = (lp_ - lm_) / (2 * h)
            rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-6)
            worst = max(worst, rel.max())
    assert worst < 1e-4


def _single_step_traj(obs, action, rew, lp, value_hat):
    return pol.Trajectory(
        obs=np.vstack([obs, obs]),
        actions=np.atleast_2d(action),
        rewards=np.array([rew]),
        log_probs=np.array([lp]),
        values=np.array([value_hat, 0.0]),
    )


def test_zero_advantages_leave_policy_mean_untouched():
    rng = np.random.default_rng(7)
    cfg = pol.PpoConfig(entropy_coef=0.0, epochs=2, minibatches=1, learning_rate=1e-2)
    policy = pol.init_policy(rng, 3, act_dim=2, hidden=(4,))
    value = pol.init_value(rng, 3, hidden=(4,))
    opt = pol.PpoOptState.fresh(policy, value)
    # two trajectories whose GAE advantages are exactly zero:
    # reward == value(s_t) - gamma*value(s_{t+1}) makes every delta vanish
    trajs = []
    for _ in range(4):
        obs = rng.normal(size=3)
        v = float(pol.value_of(value, obs))
        a = rng.normal(size=2)
        lp = float(pol.gaussian_log_prob(a, pol.policy_mean(policy, obs), policy.log_std)[0])
        trajs.append(_single_step_traj(obs, a, v - cfg.discount * 0.0, lp, v))
    new_policy, _, _, _ = pol.ppo_update(policy, value, opt, trajs, cfg, rng)
    for w1, w2 in zip(policy.net.weights, new_policy.net.weights):
        np.testing.assert_allclose(w1, w2, atol=1e-12)
    np.testing.assert_allclose(policy.log_std, new_policy.log_std, atol=1e-12)


def test_bandit_policy_mean_converges():
    # one-step environment, reward -(a-1)^2: optimal deterministic action is 1
    rng = np.random.default_rng(8)
    cfg = pol.PpoConfig(
        epochs=4, minibatches=2, learning_rate=5e-3, entropy_coef=0.0, horizon=1
    )
    obs = np.zeros(1)
    policy = pol.init_policy(rng, 1, act_dim=1, hidden=(8,), log_std_init=-0.7)
    value = pol.init_value(rng, 1, hidden=(8,))
    opt = pol.PpoOptState.fresh(policy, value)
    for update in range(200):
        trajs = []
        for _ in range(32):
            a, lp = pol.act(policy, obs, stochastic=True, rng=rng)
            r = -float((a[0] - 1.0) ** 2)
            v = float(pol.value_of(value, obs))
            trajs.append(_single_step_traj(obs, a, r, lp, v))
        policy, value, opt, _ = pol.ppo_update(policy, value, opt, trajs, cfg, rng)
    mean = float(pol.policy_mean(policy, obs)[0])
    assert abs(mean - 1.0) < 0.05


def test_non_finite_update_rejected():
    rng = np.random.default_rng(9)
    cfg = pol.PpoConfig()
    policy = pol.init_policy(rng, 3, act_dim=2, hidden=(4,))
    value = pol.init_value(rng, 3, hidden=(4,))
    opt = pol.PpoOptState.fresh(policy, value)
    tr = _single_step_traj(np.zeros(3), np.zeros(2), float("nan"), 0.0, 0.0)
    new_policy, new_value, _, stats = pol.ppo_update(policy, value, opt, [tr], cfg, rng)
    assert stats.rejected
    assert np.array_equal(pol.pack_policy(policy), pol.pack_policy(new_policy))
    assert np.array_equal(pol.pack_value(value), pol.pack_value(new_value))


# --- rollouts ------------------------------------------------------------------


ROBOT = sim.RobotConfig()
REWARD = sim.RewardConfig()


def test_rollout_latent_switch_exact_step():
    lib = library_with_latents()
    rng = np.random.default_rng(0)
    policy = pol.init_policy(rng, OBS_DIM)
    # clip_s=1, phi_s=0.25, 50-step cycle: switch at round(1.25 * 50) = 62
    script = EpisodeScript(
        mode_from=0, mode_to=2, switch_phase=0.25, switch_clip=1,
        switch_step=62, horizon=80,
    )
    tr = pol.rollout(
        policy, None, lib, script, sim.Terrain.flat(), ROBOT, REWARD,
        stochastic=False,
    )
    z_from = lib.latents[0].z
    z_to = lib.latents[2].z
    assert tr.length == 80
    np.testing.assert_array_equal(tr.obs[61, 2:6], z_from)
    np.testing.assert_array_equal(tr.obs[62, 2:6], z_to)
    np.testing.assert_array_equal(tr.obs[79, 2:6], z_to)


def test_rollout_same_mode_keeps_latent_constant():
    lib = library_with_latents()
    policy = pol.init_policy(np.random.default_rng(1), OBS_DIM)
    script = EpisodeScript(
        mode_from=1, mode_to=1, switch_phase=0.5, switch_clip=0,
        switch_step=25, horizon=60,
    )
    tr = pol.rollout(
        policy, None, lib, script, sim.Terrain.flat(), ROBOT, REWARD,
        stochastic=False,
    )
    for t in range(tr.length):
        np.testing.assert_array_equal(tr.obs[t, 2:6], lib.latents[1].z)


def test_rollout_fall_truncates_with_zero_bootstrap():
    lib = library_with_latents()
    rng = np.random.default_rng(2)
    policy = pol.init_policy(rng, OBS_DIM)
    # huge log-std makes the robot thrash and fall quickly
    policy.log_std[:] = 2.0
    value = pol.init_value(rng, OBS_DIM)
    script = EpisodeScript(
        mode_from=0, mode_to=0, switch_phase=0.5, switch_clip=0,
        switch_step=25, horizon=200,
    )
    tr = pol.rollout(
        policy, value, lib, script, sim.Terrain.flat(), ROBOT, REWARD,
        rng=rng, stochastic=True,
    )
    assert tr.fell
    assert tr.length < 200
    assert tr.values[-1] == 0.0


def test_rollout_reward_bookkeeping_is_exact():
    lib = library_with_latents()
    rng = np.random.default_rng(3)
    policy = pol.init_policy(rng, OBS_DIM)
    value = pol.init_value(rng, OBS_DIM)
    script = EpisodeScript(
        mode_from=0, mode_to=1, switch_phase=0.5, switch_clip=0,
        switch_step=25, horizon=50,
    )
    tr = pol.rollout(
        policy, value, lib, script, sim.Terrain.flat(), ROBOT, REWARD,
        rng=rng, stochastic=True,
    )
    _, _, _, stats = pol.ppo_update(
        policy, value, pol.PpoOptState.fresh(policy, value), [tr],
        pol.PpoConfig(), np.random.default_rng(0),
    )
    assert stats.mean_return == tr.rewards.sum()
    assert stats.returns_by_pair[(0, 1)] == tr.rewards.sum()


def test_evaluate_modes_shapes_and_range():
    lib = library_with_latents()
    policy = pol.init_policy(np.random.default_rng(4), OBS_DIM)
    modes, transitions = pol.evaluate_modes(
        policy, lib, sim.Terrain.flat(), ROBOT, REWARD, horizon=30,
    )
    assert modes.shape == (4,)
    assert transitions.shape == (4, 4)
    assert np.all(modes >= 0.0) and np.all(modes <= 1.0)
    assert np.all(transitions >= 0.0) and np.all(transitions <= 1.0)
