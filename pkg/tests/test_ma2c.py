import math

import numpy as np
import pytest
from _gradcheck import check_fixture

from clearway.env import TrafficEnv
from clearway.ma2c import (
    MA2C,
    Adam,
    PolicyController,
    TrainingDiverged,
    load_checkpoint,
    policy_loss,
    sample_action,
    save_checkpoint,
    softmax,
    train,
    value_loss,
)
from clearway.scenario import (
    EmvSpec,
    FlowSpec,
    NetworkSpec,
    Scenario,
    SimConfig,
    TrainConfig,
)

TINY = TrainConfig(
    fc_obs_units=8,
    fc_fp_units=6,
    lstm_units=5,
    init_std=0.4,
    batch_steps=8,
    episodes=2,
    gamma=0.9,
)


def micro_scenario(episodes=2, **train_kw):
    """2x2 grid, one light flow, EMV 2 -> 1, ten control steps."""
    return Scenario(
        name="micro",
        network=NetworkSpec(kind="grid", rows=2, cols=2),
        flows=[FlowSpec(rate_veh_per_lane_hr=360.0, start_s=0.0, end_s=50.0, origin=0, destination=3)],
        emv=EmvSpec(origin=2, destination=1, dispatch_s=10.0),
        sim=SimConfig(horizon_s=50.0),
        train=TrainConfig(
            fc_obs_units=8,
            fc_fp_units=6,
            lstm_units=6,
            batch_steps=8,
            episodes=episodes,
            gamma=0.9,
            **train_kw,
        ),
    )


# -- gradients against finite differences ---------------------------------


def test_policy_gradients_match_fd():
    rng = np.random.default_rng(1)
    assert check_fixture(rng, 4, 3, 4, 4, TINY, "policy", coef=0.01, extra_resets=1) < 5e-6
    assert check_fixture(rng, 3, 0, 5, 3, TINY, "policy", coef=0.05) < 5e-6
    assert check_fixture(rng, 5, 2, 8, 3, TINY, "policy", coef=0.02, zero_head=True) < 5e-6
    assert check_fixture(rng, 4, 2, 3, 5, TINY, "policy", coef=0.0, extra_resets=2) < 5e-6


def test_value_gradients_match_fd():
    rng = np.random.default_rng(2)
    assert check_fixture(rng, 5, 2, 1, 4, TINY, "value", extra_resets=1) < 5e-6
    assert check_fixture(rng, 3, 0, 1, 6, TINY, "value", extra_resets=1) < 5e-6


# -- activation heads -------------------------------------------------------


def test_softmax_simplex():
    rng = np.random.default_rng(3)
    for _ in range(20):
        y = rng.normal(scale=5.0, size=rng.integers(2, 9))
        p = softmax(y)
        assert p.sum() == pytest.approx(1.0)
        assert np.all(p > 0.0)
        np.testing.assert_allclose(softmax(y + 123.4), p, atol=1e-12)
    np.testing.assert_allclose(softmax(np.zeros(2)), [0.5, 0.5])


def test_zero_head_gives_exact_uniform():
    rng = np.random.default_rng(4)
    model = rng and __import__("clearway.ma2c", fromlist=["TwoBranchLSTM"]).TwoBranchLSTM(
        rng, 6, 3, 4, TINY, zero_head=True
    )
    y, _ = model.step(rng.normal(size=6), rng.uniform(size=3), model.zero_state(), reset=True)
    assert np.array_equal(softmax(y), np.full(4, 0.25))


def test_sample_action():
    assert sample_action(np.array([0.4, 0.4, 0.2]), None) == 0  # argmax, ties low
    rng = np.random.default_rng(5)
    p = np.array([0.2, 0.8])
    draws = np.array([sample_action(p, rng) for _ in range(10_000)])
    assert abs(draws.mean() - 0.8) < 0.02


# -- loss values -------------------------------------------------------------


def test_entropy_term_value():
    uniform = np.full(8, 1.0 / 8.0)
    # advantage zero isolates the entropy bonus: L = -coef * H(pi)
    assert policy_loss([uniform], [0], np.zeros(1), 1.0) == pytest.approx(-math.log(8))


def test_value_loss_example():
    assert value_loss(np.array([1.0, 3.0]), np.array([0.0, 1.0])) == pytest.approx(1.25)
    with pytest.raises(ValueError, match="empty"):
        value_loss(np.array([]), np.array([]))
    with pytest.raises(ValueError, match="empty"):
        policy_loss([], [], np.array([]), 0.01)


# -- optimizer ----------------------------------------------------------------


def test_adam_clips_by_global_norm():
    params = {"w": np.zeros(2)}
    opt = Adam(params, lr=0.1, total_updates=10, clip=2.5)
    opt.step({"w": np.array([3.0, 4.0])})  # norm 5 -> scaled by 0.5
    np.testing.assert_allclose(opt.m["w"], 0.1 * np.array([1.5, 2.0]))
    np.testing.assert_allclose(opt.v["w"], 0.001 * np.array([1.5**2, 2.0**2]))


def test_adam_rate_decays_to_zero():
    params = {"w": np.array([1.0])}
    opt = Adam(params, lr=0.5, total_updates=2, clip=1e9)
    opt.step({"w": np.array([1.0])})
    opt.step({"w": np.array([1.0])})
    frozen = params["w"].copy()
    opt.step({"w": np.array([1.0])})  # rate factor now 0
    assert np.array_equal(params["w"], frozen)


# -- the agent container -------------------------------------------------------


def test_fingerprints_concatenate_neighbor_policies():
    sc = micro_scenario()
    net = sc.build_network()
    rng = np.random.default_rng(6)
    obs_dims = [4] * net.n_nodes
    ma2c = MA2C(net, sc.train, rng, obs_dims)
    for i, node in enumerate(net.intersections):
        expect = sum(len(net.intersections[j].phases) for j in node.neighbors)
        assert ma2c.fp_dims[i] == expect
        assert ma2c.fingerprints()[i].shape == (expect,)
    # before any action everyone advertises the uniform simplex
    fp0 = ma2c.fingerprints()[0]
    n0 = len(net.intersections[ma2c.net.intersections[0].neighbors[0]].phases)
    np.testing.assert_allclose(fp0[:n0], 1.0 / n0)

    obs = [rng.normal(size=4) for _ in range(net.n_nodes)]
    _, pis = ma2c.act(obs, ma2c.fingerprints(), rng)
    for i, node in enumerate(net.intersections):
        np.testing.assert_array_equal(
            ma2c.fingerprints()[i], np.concatenate([pis[j] for j in node.neighbors])
        )
    ma2c.reset_episode()
    np.testing.assert_allclose(ma2c.fingerprints()[0][:n0], 1.0 / n0)


def test_no_fingerprint_mode():
    sc = micro_scenario()
    net = sc.build_network()
    ma2c = MA2C(net, sc.train, np.random.default_rng(0), [4] * net.n_nodes, fingerprint=False)
    assert ma2c.fp_dims == [0] * net.n_nodes
    assert ma2c.fingerprints() == [None] * net.n_nodes


def test_policy_controller_modal_vs_sampled():
    sc = micro_scenario()
    net = sc.build_network()
    env = TrafficEnv(sc, net, np.random.default_rng(0))
    ma2c = MA2C(net, sc.train, np.random.default_rng(1), [o.shape[0] for o in env.observations()])
    greedy = PolicyController(ma2c)
    greedy.reset(env)
    # fresh policies have zero heads: uniform simplex, modal pick is phase 0
    assert greedy.actions(env) == [0] * net.n_nodes
    sampled = PolicyController(ma2c, rng=np.random.default_rng(2))
    sampled.reset(env)
    draws = [tuple(sampled.actions(env)) for _ in range(6)]
    assert len(set(draws)) > 1


# -- the training loop -----------------------------------------------------------


def test_train_is_deterministic():
    sc = micro_scenario(episodes=3)
    net = sc.build_network()
    a = train(sc, net, seed=11, episodes=3)
    b = train(sc, net, seed=11, episodes=3)
    assert [(r.episode, r.t_emv_s, r.t_avg_s, r.mean_reward) for r in a.curve] == [
        (r.episode, r.t_emv_s, r.t_avg_s, r.mean_reward) for r in b.curve
    ]
    for i in range(a.ma2c.n_agents):
        for key in a.ma2c.policies[i].params:
            assert np.array_equal(a.ma2c.policies[i].params[key], b.ma2c.policies[i].params[key])
        for key in a.ma2c.values[i].params:
            assert np.array_equal(a.ma2c.values[i].params[key], b.ma2c.values[i].params[key])
    c = train(sc, net, seed=12, episodes=3)
    assert any(
        not np.array_equal(a.ma2c.policies[i].params[k], c.ma2c.policies[i].params[k])
        for i in range(a.ma2c.n_agents)
        for k in a.ma2c.policies[i].params
    )


def test_train_zero_episodes():
    sc = micro_scenario()
    net = sc.build_network()
    res = train(sc, net, seed=0, episodes=0)
    assert res.curve == [] and res.updates == 0


def test_train_counts_updates():
    sc = micro_scenario(episodes=2)
    net = sc.build_network()
    res = train(sc, net, seed=0, episodes=2)
    # 2 episodes x 10 steps with batch 8 -> 2 full windows
    assert res.updates == 2
    assert len(res.curve) == 2


def test_divergence_guard(monkeypatch):
    sc = micro_scenario()
    net = sc.build_network()
    monkeypatch.setattr("clearway.ma2c.value_loss", lambda r, v: float("nan"))
    with pytest.raises(TrainingDiverged):
        train(sc, net, seed=0, episodes=1)


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    sc = micro_scenario(episodes=2)
    net = sc.build_network()
    res = train(sc, net, seed=7, episodes=2)
    path = tmp_path / "checkpoint.npz"
    save_checkpoint(path, res, sc)
    loaded, meta = load_checkpoint(path, sc, net)
    assert meta["seed"] == 7 and meta["episodes"] == 2
    assert meta["scenario_hash"] == sc.content_hash()
    for i in range(loaded.n_agents):
        for key in loaded.policies[i].params:
            assert np.array_equal(loaded.policies[i].params[key], res.ma2c.policies[i].params[key])
        for key in loaded.values[i].params:
            assert np.array_equal(loaded.values[i].params[key], res.ma2c.values[i].params[key])


def test_checkpoint_scenario_mismatch(tmp_path):
    sc = micro_scenario(episodes=1)
    net = sc.build_network()
    res = train(sc, net, seed=0, episodes=1)
    path = tmp_path / "checkpoint.npz"
    save_checkpoint(path, res, sc)
    other = micro_scenario(episodes=1)
    other = Scenario(
        name=other.name,
        network=other.network,
        flows=[FlowSpec(rate_veh_per_lane_hr=720.0, start_s=0.0, end_s=50.0, origin=0, destination=3)],
        emv=other.emv,
        sim=other.sim,
        train=other.train,
    )
    with pytest.raises(ValueError, match="does not match"):
        load_checkpoint(path, other, net)
