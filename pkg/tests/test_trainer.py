import inspect
import math
import re

import numpy as np
import pytest

from omiga import dataset as data
from omiga import trainer as T
from omiga.approximator import AdamState, Layer, Mlp, adam_step
from omiga.dataset import Batch
from omiga.envs import BehaviorPolicy, CooperativeMatrixGame, CoopGrid, make_behavior_policy
from omiga.errors import CompatibilityError, NumericError, ParameterError, UsageError
from omiga.mixer import MixerParams, init_mixer, mix_q, weights
from omiga.oracle import local_v_objective

E = math.e


def linear(w, b):
    return Mlp([Layer(np.atleast_2d(np.array(w, dtype=float)), np.atleast_1d(np.array(b, dtype=float)))])


def constant_mixer(n, d, w_value, b_value=0.0):
    w_net = linear(np.zeros((n, d)), np.full(n, w_value))
    b_net = linear(np.zeros((1, n * d)), [b_value])
    return MixerParams(w_net, b_net, n)


def one_agent_nets(q_weights, v_value, n_actions=2):
    """One agent with scalar observation; Q(o, a) = q_weights . [o, onehot(a)], V = v_value."""
    q = linear([q_weights], [0.0])
    v = linear([[0.0]], [v_value])
    pi = linear(np.zeros((n_actions, 1)), np.zeros(n_actions))
    return T.AgentNets([q], [q.copy()], [v], [pi])


def single_state_batch(actions, rewards=None):
    actions = np.asarray(actions)
    B = len(actions)
    return Batch(np.ones((B, 1, 1)), actions.reshape(B, 1), np.zeros(B) if rewards is None else np.asarray(rewards, float),
                 np.zeros((B, 1, 1)), np.ones(B))


def cfg(**kw):
    return T.TrainConfig(**kw)


# -- configuration -----------------------------------------------------------------


def test_defaults():
    c = T.TrainConfig()
    assert (c.gamma, c.tau, c.batch_size, c.q_lr, c.v_lr, c.pi_lr) == (0.99, 0.005, 128, 5e-4, 5e-4, 5e-4)
    assert (c.hidden, c.mixer_hidden, c.exp_clamp, c.weight_clamp, c.eval_episodes) == (256, 64, 20.0, 100.0, 32)
    assert c.variant == "full" and c.eval_mode == "stochastic"


@pytest.mark.parametrize("bad", [{"alpha": 0}, {"gamma": 1.0}, {"tau": 2}, {"exp_clamp": 0}, {"variant": "x"},
                                 {"eval_mode": "argmax"}])
def test_config_validation(bad):
    with pytest.raises(ParameterError):
        T.TrainConfig(**bad)


def test_ablation_variants():
    assert T.ablation_variant("full") == T.TrainConfig()
    assert T.ablation_variant("no_w").variant == "no_w"
    assert T.ablation_variant("local_w", T.TrainConfig(alpha=2)).alpha == 2
    with pytest.raises(ParameterError):
        T.ablation_variant("global")


def test_local_w_mixer_input():
    trainer = T.OmigaTrainer(2, 5, 3, cfg(hidden=8, mixer_hidden=8, variant="local_w"))
    assert trainer.mixer.w_net.input_dim == 5 and trainer.mixer.local


# -- v_loss ------------------------------------------------------------------------


def test_v_loss_zero_weight():
    nets = one_agent_nets([0.0, 1.0, 0.0], 0.7)
    loss, grads = T.v_loss(single_state_batch([0, 1, 1]), nets, constant_mixer(1, 1, 0.0), cfg(alpha=1.0))
    assert loss == 1.0
    assert not np.any(grads["v_0"].theta)


def test_v_loss_single_sample():
    nets = one_agent_nets([0.0, 0.0, 0.0], 0.0)
    loss, _ = T.v_loss(single_state_batch([0]), nets, constant_mixer(1, 1, 1.0), cfg(alpha=1.0))
    assert loss == 1.0


def test_no_w_v_loss_with_equal_q_and_v():
    v_value, alpha = 0.4, 2.0
    nets = one_agent_nets([v_value, 0.0, 0.0], v_value)  # Q = o * 0.4 = V on o = 1
    loss, _ = T.v_loss(single_state_batch([0, 1]), nets, constant_mixer(1, 1, 5.0), cfg(alpha=alpha, variant="no_w"))
    assert loss == pytest.approx(1.0 + v_value / alpha, rel=1e-14)


def test_v_loss_minimizer_is_log_mean_exp():
    nets = one_agent_nets([0.0, 1.0, 0.0], 0.0)  # Q = 1 for action 0, 0 for action 1
    mixer = constant_mixer(1, 1, 1.0)
    c = cfg(alpha=1.0)
    batch = single_state_batch([0, 1] * 8)
    state = AdamState.create(nets.v[0], 0.02)
    for _ in range(3000):
        _, grads = T.v_loss(batch, nets, mixer, c)
        nets.v[0], state = adam_step(nets.v[0], grads["v_0"], state)
    v = float(T.predict(nets.v[0], np.ones(1))[0])
    grid = np.linspace(0, 1, 100_001)
    grid_min = grid[np.argmin(local_v_objective(grid, 1.0, 1.0, [1.0, 0.0], [0.5, 0.5]))]
    assert abs(v - math.log((E + 1) / 2)) < 1e-3
    assert abs(v - grid_min) < 1e-3
    # first-order condition at the minimizer
    assert abs(0.5 * math.exp(1 - v) + 0.5 * math.exp(-v) - 1.0) <= 1e-3


def test_v_loss_reports_nonfinite():
    nets = one_agent_nets([0.0, np.nan, 0.0], 0.0)
    with pytest.raises(NumericError):
        T.v_loss(single_state_batch([0]), nets, constant_mixer(1, 1, 1.0), cfg(alpha=1.0))


# -- q_loss ------------------------------------------------------------------------


def test_q_loss_zero_case():
    nets = one_agent_nets([0.0, 0.0, 0.0], 0.0)
    loss, grads, _ = T.q_loss(single_state_batch([0, 1]), nets, constant_mixer(1, 1, 1.0), cfg(gamma=0.0))
    assert loss == 0.0 and set(grads) == {"q_0", "mixer_w", "mixer_b"}


def test_q_loss_terminal_target_is_reward():
    nets = one_agent_nets([0.0, 0.0, 0.0], 3.0)  # V(o') would add 3 * gamma if not masked
    loss, _, _ = T.q_loss(single_state_batch([0], rewards=[1.0]), nets, constant_mixer(1, 1, 1.0), cfg())
    assert loss == 1.0


def test_q_loss_bootstraps_without_done():
    nets = one_agent_nets([0.0, 0.0, 0.0], 3.0)
    batch = single_state_batch([0], rewards=[1.0])
    batch.done[:] = 0.0
    loss, _, _ = T.q_loss(batch, nets, constant_mixer(1, 1, 1.0), cfg(gamma=0.5))
    assert loss == pytest.approx((1.0 + 0.5 * 3.0) ** 2, rel=1e-14)


def _mixed_q_table(trainer, A=2):
    obs = np.ones((1, 2, 1))
    w, b, _ = weights(trainer.mixer, obs)
    q = np.array([[T.predict(trainer.nets.q[i], np.r_[1.0, np.eye(A)[a]])[0] for a in range(A)] for i in range(2)])
    return np.array([[mix_q(w[0], b[0], [q[0, a0], q[1, a1]]) for a1 in range(A)] for a0 in range(A)])


def test_q_tot_learns_additive_payoff():
    payoff = [[1.0, 0.5], [0.5, 0.0]]
    env = CooperativeMatrixGame(payoff_table=payoff)
    ds = data.build(env, make_behavior_policy(env, "uniform"), 2000, 0)
    trainer = T.OmigaTrainer(2, 1, 2, cfg(alpha=1.0, hidden=16, mixer_hidden=16, q_lr=3e-3))
    rng = np.random.default_rng(0)
    for _ in range(1500):
        trainer.update(data.sample_batch(ds, 128, rng))
    assert np.max(np.abs(_mixed_q_table(trainer) - payoff)) <= 0.05


def test_additive_mix_cannot_fit_and_payoff():
    """Best additive fit of the AND table (least squares over all four cells) misses by 0.25 everywhere."""
    design = np.array([[1, 1, 0, 1, 0], [1, 1, 0, 0, 1], [1, 0, 1, 1, 0], [1, 0, 1, 0, 1]], dtype=float)
    target = np.array([1.0, 0.0, 0.0, 0.0])
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    np.testing.assert_allclose(np.abs(design @ coef - target), 0.25, atol=1e-12)
    # interaction contrast is invariant to any additive term
    assert target[0] - target[1] - target[2] + target[3] == 1.0


# -- policy_loss -------------------------------------------------------------------


def test_policy_loss_unit_weights_is_behavior_cloning():
    rng = np.random.default_rng(0)
    nets = T.init_agent_nets(2, 3, 4, 8, rng)
    mixer = init_mixer(2, 3, 8, rng)
    mixer = MixerParams(mixer.w_net.zeros_like(), mixer.b_net, 2)  # w = 0
    batch = Batch(rng.normal(size=(6, 2, 3)), rng.integers(0, 4, size=(6, 2)), np.zeros(6), rng.normal(size=(6, 2, 3)),
                  np.zeros(6))
    loss, grads = T.policy_loss(batch, nets, mixer, cfg())
    bc, bc_grads = T.bc_loss(batch, nets.pi)
    assert loss == pytest.approx(bc, rel=1e-14)
    for i in range(2):
        np.testing.assert_allclose(grads[f"pi_{i}"].theta, bc_grads[f"pi_{i}"].theta, rtol=1e-13)


def _fit_policy(nets, mixer, c, actions, steps=4000, lr=0.02):
    batch = single_state_batch(actions)
    state = AdamState.create(nets.pi[0], lr)
    for _ in range(steps):
        _, grads = T.policy_loss(batch, nets, mixer, c)
        assert set(grads) == {"pi_0"}
        nets.pi[0], state = adam_step(nets.pi[0], grads["pi_0"], state)
    return np.exp(T.log_softmax(T.predict(nets.pi[0], np.ones(1))))


def test_awr_fixed_point():
    nets = one_agent_nets([0.0, 1.0, -1.0], 0.0)  # advantages +1 and -1
    probs = _fit_policy(nets, constant_mixer(1, 1, 1.0), cfg(alpha=1.0), [0, 1] * 8)
    assert probs[0] >= 0.87
    assert abs(probs[0] - E**2 / (E**2 + 1)) < 1e-3


def test_large_alpha_recovers_behavior():
    actions = [0] * 3 + [1] * 13  # empirical behavior (0.1875, 0.8125)
    nets = one_agent_nets([0.0, 1.0, -1.0], 0.0)
    probs = _fit_policy(nets, constant_mixer(1, 1, 1.0), cfg(alpha=1e6), actions)
    assert 0.5 * np.abs(probs - [3 / 16, 13 / 16]).sum() <= 0.02


def test_policy_weights_are_clamped():
    nets = one_agent_nets([0.0, 1e4, 0.0], 0.0)
    loss, _ = T.policy_loss(single_state_batch([0]), nets, constant_mixer(1, 1, 1.0), cfg(alpha=1.0))
    assert loss == pytest.approx(-100.0 * math.log(0.5), rel=1e-12)


# -- in-sample property ------------------------------------------------------------


def test_q_inputs_encode_dataset_actions():
    x = T.q_inputs(np.zeros((3, 2)), np.array([2, 0, 1]), 3)
    assert x[:, 2:].argmax(axis=1).tolist() == [2, 0, 1]


def test_static_in_sample_audit():
    """Every Q-network evaluation in the losses goes through q_inputs with batch actions."""
    for fn in (T.v_loss, T.q_loss, T.policy_loss):
        src = inspect.getsource(fn)
        for call in re.findall(r"(?:forward|predict)\(nets\.q\w*\[i\],([^\n]*)", src):
            assert "q_inputs(" in call and "batch.act" in call or "act" in call


# -- training loop -----------------------------------------------------------------


@pytest.fixture(scope="module")
def matrix_ds():
    env = CooperativeMatrixGame()
    return env, data.build(env, make_behavior_policy(env, "uniform"), 500, 0)


def small(**kw):
    base = dict(alpha=1.0, hidden=8, mixer_hidden=8, steps=25, eval_every=10, eval_episodes=4, batch_size=32)
    base.update(kw)
    return T.TrainConfig(**base)


def test_zero_steps_returns_initialization(matrix_ds):
    env, ds = matrix_ds
    c = small(steps=0)
    ckpt, metrics = T.train(ds, env, c)
    init = T.OmigaTrainer(2, 1, 2, c).networks()
    assert metrics == []
    for name, net in init.nets.items():
        assert np.array_equal(ckpt.net(name).theta, net.theta)


def test_metrics_rows_and_columns(matrix_ds):
    env, ds = matrix_ds
    _, metrics = T.train(ds, env, small())
    assert [r["step"] for r in metrics] == [10, 20, 25]  # ceil(25 / 10) rows
    csv_text = T.metrics_csv(metrics)
    assert csv_text.splitlines()[0] == "step,v_loss,q_loss,pi_loss,mean_w,eval_return"


def test_training_is_deterministic(matrix_ds, tmp_path):
    env, ds = matrix_ds
    a, ma = T.train(ds, env, small(seed=3))
    b, mb = T.train(ds, env, small(seed=3))
    assert T.metrics_csv(ma) == T.metrics_csv(mb)
    assert a.dumps() == b.dumps()
    c, mc = T.train(ds, env, small(seed=4))
    assert T.metrics_csv(ma) != T.metrics_csv(mc)


def test_update_order_and_gradient_owners(matrix_ds, monkeypatch):
    env, ds = matrix_ds
    trainer = T.OmigaTrainer(2, 1, 2, small())
    calls = []
    for name in ("v_loss", "q_loss", "policy_loss"):
        original = getattr(T, name)

        def spy(*args, _orig=original, _name=name):
            out = _orig(*args)
            calls.append((_name, sorted(out[1])))
            return out

        monkeypatch.setattr(T, name, spy)
    before = [net.copy() for net in trainer.nets.q_target]
    trainer.update(data.sample_batch(ds, 16, np.random.default_rng(0)))
    assert [c[0] for c in calls] == ["v_loss", "q_loss", "policy_loss"]
    assert calls[0][1] == ["v_0", "v_1"]
    assert calls[1][1] == ["mixer_b", "mixer_w", "q_0", "q_1"]
    assert calls[2][1] == ["pi_0", "pi_1"]
    for old, new, online in zip(before, trainer.nets.q_target, trainer.nets.q):
        np.testing.assert_allclose(new.theta, 0.995 * old.theta + 0.005 * online.theta, rtol=1e-12)


def test_checkpoint_round_trip(matrix_ds, tmp_path):
    env, ds = matrix_ds
    ckpt, _ = T.train(ds, env, small())
    path = ckpt.save(tmp_path / "checkpoint.json")
    back = T.Checkpoint.load(path)
    assert back.dumps() == ckpt.dumps()
    assert back.config["alpha"] == 1.0 and back.meta["variant"] == "full"
    assert {"mixer_w", "mixer_b", "q_0", "q_target_0", "v_0", "pi_0"} <= set(back.networks.nets)


def test_checkpoint_format_checked(tmp_path):
    (tmp_path / "c.json").write_text('{"format": "other"}')
    with pytest.raises(CompatibilityError):
        T.Checkpoint.load(tmp_path / "c.json")


def test_divergence_aborts(matrix_ds):
    env, ds = matrix_ds
    trainer = T.OmigaTrainer(2, 1, 2, small())
    trainer.nets.q_target[0] = trainer.nets.q_target[0].with_theta(np.full_like(trainer.nets.q_target[0].theta, np.inf))
    with pytest.raises(NumericError):
        trainer.update(data.sample_batch(ds, 8, np.random.default_rng(0)))


def test_metrics_file_round_trip(matrix_ds, tmp_path):
    env, ds = matrix_ds
    _, metrics = T.bc_train(ds, small())
    T.write_metrics(metrics, tmp_path / "m.csv")
    back = T.read_metrics(tmp_path / "m.csv")
    assert [r["pi_loss"] for r in back] == [r["pi_loss"] for r in metrics]
    assert all(r["v_loss"] is None and r["eval_return"] is None for r in back)


# -- evaluation --------------------------------------------------------------------


def policy_checkpoint(env, logits):
    nets = {f"pi_{i}": linear(np.zeros((env.n_actions, env.obs_dim)), logits) for i in range(env.n_agents)}
    meta = {"n_agents": env.n_agents, "obs_dim": env.obs_dim, "n_actions": env.n_actions, "algo": "bc",
            "variant": "bc", "env": env.config(), "env_name": env.name, "dataset_quality": "none"}
    return T.Checkpoint(T.NetworkSet(nets), T.TrainConfig().to_json(), meta)


def test_uniform_policy_return():
    env = CooperativeMatrixGame()
    mean, std = T.evaluate(policy_checkpoint(env, [0.0, 0.0]), env, episodes=10_000, seed=0)
    assert abs(mean - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 10_000)
    assert std > 0


def test_greedy_forced_action():
    env = CooperativeMatrixGame()
    mean, std = T.evaluate(policy_checkpoint(env, [5.0, 0.0]), env, mode="greedy")
    assert (mean, std) == (1.0, 0.0)


def test_default_episode_count():
    assert inspect.signature(T.evaluate).parameters["episodes"].default == 32


def test_evaluation_is_decentralized():
    env = CoopGrid()
    ckpt = policy_checkpoint(env, np.zeros(4))
    ckpt.networks.nets["pi_0"] = linear(np.random.default_rng(0).normal(size=(4, env.obs_dim)), np.zeros(4))
    obs = np.stack([env.observe(s) for s in range(5)])
    changed = obs.copy()
    changed[:, 1] = np.roll(changed[:, 1], 3, axis=1)  # alter agent 1's view only
    np.testing.assert_array_equal(T.action_probs(ckpt, obs)[:, 0], T.action_probs(ckpt, changed)[:, 0])


def test_evaluate_rejects_incompatible_env():
    ckpt = policy_checkpoint(CooperativeMatrixGame(), [0.0, 0.0])
    with pytest.raises(CompatibilityError):
        T.evaluate(ckpt, CoopGrid())


# -- behavior cloning --------------------------------------------------------------


def test_bc_recovers_uniform():
    env = CooperativeMatrixGame()
    ds = data.build(env, make_behavior_policy(env, "uniform"), 4000, 0)
    ckpt, _ = T.bc_train(ds, small(steps=400, hidden=8, pi_lr=5e-3, batch_size=128))
    probs = T.policy_table(ckpt, env.tabular_export())[:, 0]
    assert np.max(0.5 * np.abs(probs - 0.5).sum(axis=1)) <= 0.02


def test_bc_deterministic_expert():
    env = CooperativeMatrixGame()
    probs = np.zeros((2, 2, 2))
    probs[:, :, 0] = 1.0
    ds = data.build(env, BehaviorPolicy(probs, "expert"), 200, 0)
    ckpt, _ = T.bc_train(ds, small(steps=400, hidden=8, pi_lr=5e-3))
    assert T.policy_table(ckpt, env.tabular_export())[:, 0, 0].min() >= 0.99


def test_bc_empty_dataset(matrix_ds):
    env, ds = matrix_ds
    empty = data.Dataset(ds.manifest, *(getattr(ds, k)[:0] for k in data.TRANSITION_KEYS))
    with pytest.raises(UsageError):
        T.bc_train(empty, small())
    with pytest.raises(UsageError):
        T.train(empty, env, small())
