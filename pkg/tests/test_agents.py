import numpy as np
import pytest

from lyapunov_rl.agents.dqn import DqnAgent, DqnConfig, ReplayBuffer, dqn_update, td_loss
from lyapunov_rl.agents.mlp import Adam, backward, clip_grad_norm, forward_cached, init_mlp, mlp_forward
from lyapunov_rl.agents.policies import MultiCategorical, SquashedGaussian
from lyapunov_rl.agents.ppo import PpoConfig, clipped_surrogate, discounted_returns, gae, ppo_loss
from lyapunov_rl.agents.train import RunningNorm, evaluate, train
from lyapunov_rl.errors import ContractViolation
from lyapunov_rl.mec import MecConfig, MecEnv
from lyapunov_rl.queues import RewardShaper, ShaperKind, Transition, step_queue

SMALL = (4, 4)


def flat(params):
    return np.concatenate([p.ravel() for p in params])


def fd_grad(f, params, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = f()
            p[i] = old - h
            down = f()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def jitter_biases(params, rng, scale=0.1):
    """Zero biases put dead units exactly on the ReLU kink; move them off it."""
    for b in params[1::2]:
        b += rng.normal(scale=scale, size=b.shape)
    return params


def rel_err(a, b):
    a, b = flat(a), flat(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# --- MLP -------------------------------------------------------------------

def test_forward_matches_explicit_matmuls():
    rng = np.random.default_rng(0)
    params = init_mlp(rng, 3, 2, (5, 6))
    x = rng.normal(size=(7, 3))
    h1 = np.maximum(x @ params[0] + params[1], 0)
    h2 = np.maximum(h1 @ params[2] + params[3], 0)
    expect = h2 @ params[4] + params[5]
    assert np.allclose(mlp_forward(params, x), expect)
    assert np.allclose(mlp_forward(params, x[0]), expect[0])


def test_zero_network_outputs_bias():
    params = [np.zeros((3, 4)), np.zeros(4), np.zeros((4, 2)), np.array([1.5, -2.0])]
    assert np.allclose(mlp_forward(params, np.ones((5, 3))), [[1.5, -2.0]] * 5)


def test_hand_set_linear_path():
    params = [np.eye(2), np.zeros(2), np.array([[2.0], [3.0]]), np.array([1.0])]
    # ReLU cuts the negative coordinate
    assert mlp_forward(params, np.array([1.0, -1.0]))[0] == pytest.approx(3.0)
    assert mlp_forward(params, np.array([1.0, 2.0]))[0] == pytest.approx(9.0)


def test_forward_rejects_wrong_width():
    params = init_mlp(np.random.default_rng(0), 3, 1, SMALL)
    with pytest.raises(ContractViolation):
        mlp_forward(params, np.ones(4))


def test_default_architecture_is_five_by_64():
    params = init_mlp(np.random.default_rng(0), 7, 3)
    assert [p.shape for p in params[::2]] == [(7, 64)] + [(64, 64)] * 4 + [(64, 3)]


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = jitter_biases(init_mlp(rng, 3, 2, SMALL), rng)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 2))
    _, cache = forward_cached(params, x)
    grads = backward(params, cache, w)
    num = fd_grad(lambda: float(np.sum(mlp_forward(params, x) * w)), params)
    assert rel_err(grads, num) < 1e-4


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0, -1.0])]
    opt = Adam(p, lr=0.1)
    opt.step(p, [np.array([3.0, -0.5])])
    assert np.allclose(p[0], [0.9, -0.9])


def test_clip_grad_norm():
    g, n = clip_grad_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert n == pytest.approx(5.0)
    assert np.allclose(flat(g), [0.6, 0.8])
    g, _ = clip_grad_norm([np.array([0.3])], 1.0)
    assert g[0][0] == 0.3


# --- policies --------------------------------------------------------------

def test_squashed_density_integrates_to_one():
    pol = SquashedGaussian([0.0], [4.0])
    rng = np.random.default_rng(1)
    params = pol.init(rng, 2, SMALL)
    params[-1][:] = np.log(0.8)
    a = np.linspace(0, 4, 200001)[1:-1]
    obs = np.tile([0.3, -0.2], (a.size, 1))
    dens = np.exp(pol.log_prob(params, obs, a[:, None]))
    assert np.trapezoid(dens, a) == pytest.approx(1.0, abs=1e-3)


def test_sample_mean_matches_quadrature():
    pol = SquashedGaussian([0.0, -1.0], [10.0, 1.0])
    rng = np.random.default_rng(2)
    params = pol.init(rng, 2, SMALL)
    params[-1][:] = [0.3, -0.5]
    obs = np.array([0.5, 1.0])
    draws = np.array([pol.sample(params, obs, rng)[1] for _ in range(10**5)])
    expect = pol.mean_action(params, obs)
    span = pol.high - pol.low
    assert np.all(np.abs(draws.mean(axis=0) - expect) <= 0.01 * span)


def test_vanishing_std_collapses_to_greedy():
    pol = SquashedGaussian([0.0], [2.0])
    rng = np.random.default_rng(3)
    params = pol.init(rng, 1, SMALL)
    params[-1][:] = -30.0
    obs = np.array([0.7])
    assert pol.sample(params, obs, rng)[1] == pytest.approx(pol.greedy(params, obs), abs=1e-9)


def test_sample_logp_agrees_with_evaluate():
    pol = SquashedGaussian([0.0, 0.0], [1.0, 5.0])
    rng = np.random.default_rng(4)
    params = pol.init(rng, 3, SMALL)
    obs = rng.normal(size=3)
    u, _, logp = pol.sample(params, obs, rng)
    lp, _, _ = pol.evaluate(params, obs[None], u[None])
    assert lp[0] == pytest.approx(logp)


def test_categorical_respects_mask():
    mask = np.array([[True, True, False], [True, False, False]])
    pol = MultiCategorical(mask)
    rng = np.random.default_rng(5)
    params = pol.init(rng, 2, SMALL)
    params[-1][:] = [0, 0, 50, 0, 50, 50]  # masked logits would dominate if not masked
    for _ in range(200):
        idx, _, logp = pol.sample(params, np.zeros(2), rng)
        assert mask[np.arange(2), idx].all()
        assert logp == pytest.approx(np.log(0.5), abs=1e-6)


def test_categorical_sampling_frequencies():
    pol = MultiCategorical(np.ones((1, 3), bool))
    params = [np.zeros((1, 3)), np.log(np.array([0.2, 0.3, 0.5]))]
    rng = np.random.default_rng(6)
    counts = np.bincount([pol.sample(params, np.zeros(1), rng)[0][0] for _ in range(20000)], minlength=3)
    assert np.allclose(counts / 20000, [0.2, 0.3, 0.5], atol=0.015)


# --- PPO -------------------------------------------------------------------

def test_clipped_surrogate_arithmetic():
    A = 2.0
    assert clipped_surrogate(np.array(1.5), A, 0.2) == pytest.approx(1.2 * A)
    assert clipped_surrogate(np.array(0.5), A, 0.2) == pytest.approx(0.5 * A)
    assert clipped_surrogate(np.array(0.5), -A, 0.2) == pytest.approx(0.8 * -A)
    assert clipped_surrogate(np.array(1.3), 0.0, 0.2) == 0.0


def _ppo_problem(seed, discrete):
    rng = np.random.default_rng(seed)
    cfg = PpoConfig(entropy_coef=0.05)
    B, obs_dim = 8, 3
    if discrete:
        pol = MultiCategorical(np.array([[True, True, True], [True, True, False]]))
        actions = np.stack([rng.integers(0, 3, B), rng.integers(0, 2, B)], axis=1)
    else:
        pol = SquashedGaussian(np.zeros(2), np.ones(2))
        actions = rng.normal(size=(B, 2))
    actor = pol.init(rng, obs_dim, (4, 3))
    net = actor if discrete else actor[:-1]
    jitter_biases(net, rng, 0.3)
    critic = jitter_biases(init_mlp(rng, obs_dim, 1, SMALL), rng)
    obs = rng.normal(size=(B, obs_dim))
    old = pol.evaluate(actor, obs, actions)[0] + rng.normal(scale=0.3, size=B)
    adv = rng.normal(size=B)
    ret = rng.normal(size=B)
    return pol, actor, critic, obs, actions, old, adv, ret, cfg


@pytest.mark.parametrize("discrete", [False, True])
@pytest.mark.parametrize("seed", range(20))
def test_ppo_gradients_match_finite_differences(seed, discrete):
    pol, actor, critic, obs, act, old, adv, ret, cfg = _ppo_problem(seed, discrete)
    _, ga, gc, _ = ppo_loss(pol, actor, critic, obs, act, old, adv, ret, cfg)
    f = lambda: ppo_loss(pol, actor, critic, obs, act, old, adv, ret, cfg)[0]
    assert len(flat(actor)) <= 64
    assert rel_err(ga, fd_grad(f, actor)) < 1e-4
    assert rel_err(gc, fd_grad(f, critic)) < 1e-4


def test_ppo_zero_advantage_gives_no_policy_gradient():
    pol, actor, critic, obs, act, old, adv, ret, cfg = _ppo_problem(0, False)
    cfg.entropy_coef = 0.0
    _, ga, _, st = ppo_loss(pol, actor, critic, obs, act, old, np.zeros_like(adv), ret, cfg)
    assert st["policy_loss"] == 0.0
    assert np.allclose(flat(ga), 0.0)


def test_ppo_clipped_region_has_zero_policy_gradient():
    pol, actor, critic, obs, act, _, adv, ret, cfg = _ppo_problem(1, False)
    cfg.entropy_coef = 0.0
    logp = pol.evaluate(actor, obs, act)[0]
    # ratio = 2 with positive advantages sits entirely in the clipped branch
    _, ga, _, st = ppo_loss(pol, actor, critic, obs, act, logp - np.log(2.0), np.abs(adv) + 0.1, ret, cfg)
    assert st["clip_frac"] == 1.0
    assert np.allclose(flat(ga), 0.0)


def test_discounted_returns_brute_force():
    rng = np.random.default_rng(7)
    r = rng.normal(size=30)
    g = 0.9
    brute = [sum(g ** (k - t) * r[k] for k in range(t, 30)) for t in range(30)]
    assert np.allclose(discounted_returns(r, g), brute)


def test_discounted_returns_reset_at_done():
    out = discounted_returns([1.0, 1.0, 1.0], 0.5, dones=[False, True, False])
    assert np.allclose(out, [1.5, 1.0, 1.0])


def test_gae_with_lambda_one_is_return_minus_value():
    rng = np.random.default_rng(8)
    r, v = rng.normal(size=12), rng.normal(size=12)
    adv, ret = gae(r, v, last_value=0.0, gamma=0.9, lam=1.0, dones=np.r_[np.zeros(11, bool), True])
    assert np.allclose(ret, discounted_returns(r, 0.9))
    assert np.allclose(adv, ret - v)


def test_gae_lambda_zero_is_td_error_with_bootstrap():
    r, v = np.array([1.0, 2.0]), np.array([0.5, 0.25])
    adv, _ = gae(r, v, last_value=4.0, gamma=0.5, lam=0.0)
    assert np.allclose(adv, [1 + 0.5 * 0.25 - 0.5, 2 + 0.5 * 4 - 0.25])


# --- DQN -------------------------------------------------------------------

def test_replay_evicts_oldest_first():
    buf = ReplayBuffer(3, 1, 1)
    for i in range(5):
        buf.add([i], [0], float(i), [i + 1], False)
    assert len(buf) == 3
    assert sorted(buf.rewards) == [2.0, 3.0, 4.0]


def test_dqn_config_rejects_small_capacity():
    with pytest.raises(ValueError):
        DqnConfig(capacity=10, minibatch=32)


def test_epsilon_schedule():
    cfg = DqnConfig()
    assert cfg.epsilon(0, 100) == 1.0
    assert cfg.epsilon(25, 100) == pytest.approx(0.525)
    assert cfg.epsilon(90, 100) == pytest.approx(0.05)


@pytest.mark.parametrize("seed", range(20))
def test_td_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mask = np.array([[True, True], [True, False]])
    params = jitter_biases(init_mlp(rng, 2, 4, SMALL), rng)
    target = init_mlp(rng, 2, 4, SMALL)
    B = 6
    obs, nxt = rng.normal(size=(B, 2)), rng.normal(size=(B, 2))
    act = np.stack([rng.integers(0, 2, B), np.zeros(B, int)], axis=1)
    rew, done = rng.normal(size=B), rng.random(B) < 0.3
    _, g = td_loss(params, target, mask, obs, act, rew, nxt, done, 0.9)
    num = fd_grad(lambda: td_loss(params, target, mask, obs, act, rew, nxt, done, 0.9)[0], params)
    assert rel_err(g, num) < 1e-4


def test_terminal_target_is_reward():
    rng = np.random.default_rng(9)
    mask = np.ones((1, 2), bool)
    params = [np.zeros((1, 2)), np.array([0.0, 0.0])]
    target = [np.zeros((1, 2)), np.array([100.0, 100.0])]
    loss, _ = td_loss(params, target, mask, np.zeros((1, 1)), np.array([[0]]), np.array([3.0]),
                      np.zeros((1, 1)), np.array([True]), 0.9)
    assert loss == pytest.approx(0.5 * 9.0)
    loss, _ = td_loss(params, target, mask, np.zeros((1, 1)), np.array([[0]]), np.array([3.0]),
                      np.zeros((1, 1)), np.array([False]), 0.9)
    assert loss == pytest.approx(0.5 * 93.0**2)
    del rng


def test_gamma_zero_repeated_transition_converges_to_reward():
    rng = np.random.default_rng(12)
    cfg = DqnConfig(capacity=128, minibatch=32, discount=0.0, lr=1e-2, hidden=(8,))
    agent = DqnAgent(np.ones((1, 2), bool), 1, cfg, rng)
    buf = ReplayBuffer(128, 1, 1)
    for _ in range(128):
        buf.add([0.5], [1], 2.5, [0.5], False)
    for _ in range(500):
        dqn_update(agent, buf, cfg, rng)
    assert mlp_forward(agent.q, np.array([0.5]))[1] == pytest.approx(2.5, abs=1e-3)


def test_gamma_zero_bandit_learns_best_arm():
    rng = np.random.default_rng(10)
    cfg = DqnConfig(capacity=256, minibatch=64, discount=0.0, lr=1e-2, hidden=(8,))
    agent = DqnAgent(np.ones((1, 3), bool), 1, cfg, rng)
    buf = ReplayBuffer(256, 1, 1)
    means = np.array([0.2, 1.0, 0.5])
    for _ in range(256):
        a = rng.integers(3)
        buf.add([1.0], [a], means[a] + 0.1 * rng.normal(), [1.0], False)
    for _ in range(400):
        dqn_update(agent, buf, cfg, rng)
    q = mlp_forward(agent.q, np.array([1.0]))
    assert agent.greedy_idx(np.array([1.0]))[0] == 1
    assert np.allclose(q, means, atol=0.05)


# --- trainer ---------------------------------------------------------------

class ToyQueue:
    """One queue, one unit of work per slot; serving c costs k per unit."""

    kind = "toy"
    obs_dim = 1

    def __init__(self, k=0.25):
        self.k = k
        self.action_low = np.array([0.0])
        self.action_high = np.array([4.0])
        self.reward_scale = 1.0
        self.q = np.zeros(1)

    def reset(self):
        self.q = np.zeros(1)
        return self.q.copy()

    def step(self, action):
        c = float(np.clip(action, 0, 4)[0])
        before = self.q
        self.q = step_queue(before, [1.0], [c])
        return self.q.copy(), Transition(before, c, self.q.copy(), self.k * c, before, self.q.copy(), {})


def greedy_episode_reward(env, result, shaper, steps):
    obs = env.reset()
    policy = result.policy()
    total = 0.0
    for _ in range(steps):
        obs, tr = env.step(policy(obs))
        total += shaper(tr.backlog_before, tr.backlog_after, tr.penalty)
    return total / steps


def test_ppo_solves_toy_queue():
    T, k = 50, 0.25
    shaper = RewardShaper(ShaperKind.LDPTRLQ, V=1.0)
    # serve exactly what is queued: nothing in slot 1, one unit afterwards
    optimum = (-0.5 + (T - 1) * (-1.0) - (T - 1) * k) / T
    env = ToyQueue(k)
    cfg = PpoConfig(lr=1e-2, hidden=(32, 32), minibatch=50)
    res = train(env, shaper, cfg, seed=0, episodes=300, steps_per_episode=T)
    assert res.error is None
    got = greedy_episode_reward(env, res, shaper, T)
    assert abs(got - optimum) <= 0.05 * abs(optimum)


def test_zero_episodes_gives_empty_records():
    env = MecEnv(MecConfig(K=2), seed=0)
    res = train(env, RewardShaper(ShaperKind.LDPTRLQ), PpoConfig(), seed=0, episodes=0)
    assert res.records == [] and res.error is None


@pytest.mark.parametrize("cfg", [PpoConfig(hidden=SMALL, minibatch=16), DqnConfig(hidden=SMALL, minibatch=16, capacity=64)])
def test_training_is_deterministic(cfg):
    def run():
        env = MecEnv(MecConfig(K=2), seed=3)
        res = train(env, RewardShaper(ShaperKind.ORIGINAL_LDP), cfg, seed=3, episodes=3, steps_per_episode=40)
        return [r.__dict__ for r in res.records], flat(res.agent.tensors()[i][1] for i in range(2))

    a, b = run(), run()
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])
    assert [r["slot"] for r in a[0]] == [40, 80, 120]


def test_training_failure_keeps_partial_records(monkeypatch):
    from lyapunov_rl.agents import ppo
    from lyapunov_rl.errors import TrainingError

    calls = {"n": 0}
    real = ppo.ppo_update

    def flaky(agent, batch, cfg, rng):
        calls["n"] += 1
        if calls["n"] == 2:
            raise TrainingError("non-finite loss", batch_index=0)
        return real(agent, batch, cfg, rng)

    monkeypatch.setattr(ppo, "ppo_update", flaky)
    env = MecEnv(MecConfig(K=2), seed=0)
    res = train(env, RewardShaper(ShaperKind.LDPTRLQ), PpoConfig(hidden=SMALL), seed=0, episodes=4, steps_per_episode=20)
    assert res.error is not None
    assert len(res.records) == 1


def test_running_norm_matches_batch_statistics():
    rng = np.random.default_rng(11)
    x = rng.normal(3.0, 2.0, size=(500, 2))
    norm = RunningNorm(2)
    for row in x:
        norm.update(row)
    assert np.allclose(norm.mean, x.mean(axis=0), atol=1e-5)
    assert np.allclose(norm.var, x.var(axis=0), rtol=1e-4)


def test_evaluate_mec_max_service():
    env = MecEnv(MecConfig(K=2), seed=0)
    res = evaluate(env, lambda obs: env.max_service_action(), slots=300)
    assert res.latency is None
    assert res.mean_energy > 0
    assert res.backlog_totals.shape == (300,)
