import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from d3qn_nav import neuro
from d3qn_nav.errors import ConfigError, TrainingError, UsageError
from d3qn_nav.geom_sim import ActionPair
from d3qn_nav.qagent import (
    AgentConfig,
    Batch,
    DuelingHeads,
    QAgent,
    QOutput,
    ReplayBuffer,
    Transition,
    branch_targets,
    build_network,
    double_q_targets,
    dueling_combine,
    epsilon_at,
    network_layout,
    q_batch,
    q_grad_to_output_grad,
    select_action,
    td_loss_grad,
)

finite = st.floats(-50, 50, allow_nan=False)


def tr(i, size=3, terminal=False, reward=0.05):
    return Transition(np.full(size, i, np.float32), ActionPair(i % 2, i % 5), reward,
                      np.full(size, i + 1, np.float32), terminal)


# -- dueling ------------------------------------------------------------


def test_dueling_subtracts_branch_mean():
    q = dueling_combine(DuelingHeads(np.array(2.0), np.zeros(2), np.arange(1.0, 6.0)))
    np.testing.assert_array_equal(q.q_angular, [0, 1, 2, 3, 4])
    q = dueling_combine(DuelingHeads(np.array(1.0), np.zeros(2), np.zeros(5)))
    np.testing.assert_array_equal(q.q_linear, [1, 1])


def test_dueling_batched_value_broadcast():
    v = np.array([[1.0], [2.0]])
    q = dueling_combine(DuelingHeads(v, np.zeros((2, 2)), np.zeros((2, 5))))
    np.testing.assert_array_equal(q.q_angular, [[1] * 5, [2] * 5])


@settings(max_examples=60, deadline=None)
@given(v=finite, al=arrays(np.float64, 2, elements=finite), aa=arrays(np.float64, 5, elements=finite), c=finite)
def test_dueling_shift_invariance(v, al, aa, c):
    base = dueling_combine(DuelingHeads(np.array(v), al, aa))
    shifted = dueling_combine(DuelingHeads(np.array(v), al + c, aa + c))
    np.testing.assert_allclose(shifted.q_linear, base.q_linear, atol=1e-6)
    np.testing.assert_allclose(shifted.q_angular, base.q_angular, atol=1e-6)
    # the branches are independent: shifting one leaves the other untouched
    only_lin = dueling_combine(DuelingHeads(np.array(v), al + c, aa))
    assert only_lin.q_angular.tobytes() == base.q_angular.tobytes()


# -- network wiring -----------------------------------------------------


@pytest.mark.parametrize("variant", ["dqn", "ddqn", "d3qn"])
@pytest.mark.parametrize("preset", ["dense", "linear", "table"])
def test_layouts_produce_branch_widths(variant, preset):
    net = build_network(preset, variant, 64, np.random.default_rng(0))
    q, _ = q_batch(net, np.zeros((3, 64)), variant)
    assert q.q_linear.shape == (3, 2) and q.q_angular.shape == (3, 5)
    assert net.output_size == (8 if variant == "d3qn" else 7)


def test_table_preset_too_short():
    with pytest.raises(ConfigError):
        network_layout("table", "d3qn", 12)
    with pytest.raises(ConfigError):
        network_layout("huge", "d3qn", 64)


def test_zero_weight_network_gives_zero_q():
    agent = QAgent(AgentConfig(), 16, preset="dense", seed=0)
    neuro.zero_params(agent.online)
    q = agent.q_values(np.ones(16))
    assert np.all(q.q_linear == 0) and np.all(q.q_angular == 0)


def test_d3qn_hand_set_heads_match_combine():
    net = build_network("linear", "d3qn", 3, np.random.default_rng(0))
    neuro.zero_params(net)
    adv, val = net.biases
    adv[:] = [0.5, -1.0, 1, 2, 3, 4, 5]
    val[:] = 2.0
    q, _ = q_batch(net, np.zeros(3), "d3qn")
    ref = dueling_combine(DuelingHeads(np.array(2.0), adv[:2], adv[2:]))
    assert q.q_linear[0].tobytes() == ref.q_linear.astype(np.float32).tobytes()
    np.testing.assert_array_equal(q.q_angular[0], [0, 1, 2, 3, 4])


def test_same_seed_same_q():
    obs = np.random.default_rng(3).random(64)
    a = QAgent(AgentConfig(), 64, seed=11).q_values(obs)
    b = QAgent(AgentConfig(), 64, seed=11).q_values(obs)
    assert a.q_angular.tobytes() == b.q_angular.tobytes()


# -- action selection -----------------------------------------------------


def test_greedy_argmax_and_tie_rule():
    rng = np.random.default_rng(0)
    a = select_action(QOutput(np.array([2.0, 2.0]), np.array([1, 3, 2, 0, -1.0])), 0.0, rng)
    assert a == ActionPair(0, 1)


def test_uniform_exploration_frequency():
    rng = np.random.default_rng(5)
    q = QOutput(np.zeros(2), np.array([0, 0, 9.0, 0, 0]))
    counts = np.zeros(5)
    for _ in range(100_000):
        counts[select_action(q, 1.0, rng).angular_idx] += 1
    assert np.all(np.abs(counts / 100_000 - 0.2) <= 0.01)


def test_epsilon_schedule():
    assert epsilon_at(0) == 1.0
    assert epsilon_at(20_000) == pytest.approx(0.05)
    assert epsilon_at(10**6) == pytest.approx(0.05)
    assert epsilon_at(10_000) == pytest.approx(0.525)
    vals = [epsilon_at(s) for s in range(0, 30_000, 97)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(UsageError):
        epsilon_at(-1)


@pytest.mark.parametrize("kw", [{"gamma": 1.0}, {"gamma": 0.0}, {"eps_end": 1.5}, {"variant": "a3c"},
                                {"batch_size": 0}, {"sync_period": 0}, {"warmup": 10}])
def test_invalid_agent_config(kw):
    with pytest.raises(ConfigError):
        AgentConfig(**kw)


# -- targets ------------------------------------------------------------


ONLINE = np.array([[1.0, 3.0, 2.0]])
TARGET = np.array([[5.0, 0.0, 7.0]])


def test_double_target_uses_online_argmax():
    y = branch_targets([0.08], [False], ONLINE, TARGET, 0.9, "d3qn")
    assert y[0] == pytest.approx(0.08, abs=1e-15)
    assert branch_targets([0.08], [False], ONLINE, TARGET, 0.9, "ddqn")[0] == y[0]


def test_dqn_target_uses_target_max():
    y = branch_targets([0.08], [False], ONLINE, TARGET, 0.9, "dqn")
    assert y[0] == pytest.approx(6.38, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(gamma=st.floats(0.01, 0.99), on=arrays(np.float64, (1, 5), elements=finite),
       tg=arrays(np.float64, (1, 5), elements=finite), variant=st.sampled_from(["dqn", "ddqn", "d3qn"]))
def test_terminal_target_is_bare_reward(gamma, on, tg, variant):
    assert branch_targets([-10.0], [True], on, tg, gamma, variant)[0] == -10.0


@settings(max_examples=40, deadline=None)
@given(on=arrays(np.float64, (4, 5), elements=finite, unique=True),
       tg=arrays(np.float64, (4, 5), elements=finite), noise=arrays(np.float64, (4, 5), elements=finite))
def test_double_q_decoupling(on, tg, noise):
    r = np.full(4, 0.05)
    term = np.zeros(4, bool)
    y = branch_targets(r, term, on, tg, 0.9, "ddqn")
    best = on.argmax(axis=1)
    # changing target values changes only the evaluated value, never the choice
    y2 = branch_targets(r, term, on, tg + noise, 0.9, "ddqn")
    np.testing.assert_allclose(y2, r + 0.9 * (tg + noise)[np.arange(4), best])
    # lowering online values of non-argmax actions leaves y alone
    on2 = on - np.abs(noise) - 1.0
    on2[np.arange(4), best] = on[np.arange(4), best]
    assert branch_targets(r, term, on2, tg, 0.9, "ddqn").tobytes() == y.tobytes()


def test_ddqn_equals_dqn_when_target_is_online():
    rng = np.random.default_rng(2)
    agent = QAgent(AgentConfig(variant="ddqn"), 10, seed=4)
    items = [Transition(rng.random(10).astype(np.float32), ActionPair(0, 1), 0.05,
                        rng.random(10).astype(np.float32), i % 3 == 0) for i in range(32)]
    batch = Batch.from_transitions(items)
    a = double_q_targets(batch, agent.online, agent.target, 0.99, "ddqn")
    b = double_q_targets(batch, agent.online, agent.target, 0.99, "dqn")
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


# -- replay ---------------------------------------------------------------


def test_replay_fifo_eviction():
    buf = ReplayBuffer(3, 3)
    for i in range(4):
        buf.push(tr(i))
    assert len(buf) == 3
    got = buf.take(buf.ordered_indices()).obs[:, 0]
    np.testing.assert_array_equal(got, [1, 2, 3])


def test_replay_full_sample_is_permutation():
    buf = ReplayBuffer(10, 3)
    for i in range(10):
        buf.push(tr(i))
    b = buf.sample(10, np.random.default_rng(0))
    assert sorted(b.obs[:, 0].tolist()) == list(range(10))


def test_replay_sampling_uniform():
    buf = ReplayBuffer(100, 1)
    for i in range(100):
        buf.push(tr(i, size=1))
    rng = np.random.default_rng(7)
    counts = np.zeros(100)
    n = 10
    for _ in range(10_000):
        counts[buf.sample(n, rng).obs[:, 0].astype(int)] += 1
    expected = 0.01 * n * 10_000
    assert np.all(np.abs(counts - expected) <= 0.1 * expected)


def test_replay_sample_deterministic_and_guarded():
    buf = ReplayBuffer(20, 3)
    for i in range(5):
        buf.push(tr(i))
    a = buf.sample(3, np.random.default_rng(1)).obs
    b = buf.sample(3, np.random.default_rng(1)).obs
    assert a.tobytes() == b.tobytes()
    with pytest.raises(UsageError):
        buf.sample(6, np.random.default_rng(1))
    with pytest.raises(UsageError):
        buf.push(tr(0, size=4))


def test_replay_state_round_trip():
    buf = ReplayBuffer(4, 3)
    for i in range(6):
        buf.push(tr(i, terminal=i == 5))
    other = ReplayBuffer(4, 3)
    other.load_state_dict(buf.state_dict())
    assert other.cursor == buf.cursor and len(other) == 4
    assert other.take(other.ordered_indices()).obs.tobytes() == buf.take(buf.ordered_indices()).obs.tobytes()


# -- learning -------------------------------------------------------------


def scalar_agent(variant="d3qn", lr=1e-2):
    cfg = AgentConfig(variant=variant, batch_size=1, warmup=1, lr=lr, gamma=0.9)
    return QAgent(cfg, 1, preset="linear", seed=0)


def one_batch(reward=1.0, terminal=True):
    return Batch.from_transitions([Transition(np.ones(1, np.float32), ActionPair(1, 3), reward,
                                              np.ones(1, np.float32), terminal)])


def test_zero_loss_leaves_params_unchanged():
    agent = scalar_agent()
    neuro.zero_params(agent.online)
    neuro.copy_into(agent.target, agent.online)
    before = agent.online.flat.copy()
    out = agent.train_step(one_batch(reward=0.0, terminal=True))
    assert out["loss"] == 0.0
    assert agent.online.flat.tobytes() == before.tobytes()


@pytest.mark.parametrize("variant", ["dqn", "ddqn", "d3qn"])
def test_single_step_reduces_td_error(variant):
    agent = scalar_agent(variant)
    batch = one_batch(reward=0.7)
    td0 = agent.train_step(batch)["td_abs"]
    td1 = agent.train_step(batch)["td_abs"]
    assert td1 < td0


def test_non_selected_actions_get_no_gradient():
    q = QOutput(np.array([[0.3, -0.2]]), np.array([[1.0, 2.0, 3.0, 4.0, 5.0]]))
    batch = one_batch()
    _, _, g_lin, g_ang = td_loss_grad(q, batch, np.array([1.0]), np.array([1.0]), 1.0)
    assert g_lin[0, 0] == 0 and g_lin[0, 1] != 0
    assert np.count_nonzero(g_ang) == 1 and g_ang[0, 3] != 0


def test_huber_clips_gradient():
    q = QOutput(np.array([[0.0, 100.0]]), np.array([[0, 0, 0, -100.0, 0]]))
    loss, td, g_lin, g_ang = td_loss_grad(q, one_batch(), np.array([0.0]), np.array([0.0]), 1.0)
    assert g_lin[0, 1] == 0.5 and g_ang[0, 3] == -0.5
    assert loss == pytest.approx(99.5)
    assert td == pytest.approx(100.0)


def test_dueling_output_grad_matches_finite_difference():
    rng = np.random.default_rng(0)
    out = rng.normal(size=(3, 8))
    g_lin, g_ang = rng.normal(size=(3, 2)), rng.normal(size=(3, 5))

    def f(o):
        from d3qn_nav.qagent import split_output
        q = split_output(o, "d3qn")
        return np.sum(q.q_linear * g_lin) + np.sum(q.q_angular * g_ang)

    analytic = q_grad_to_output_grad(g_lin, g_ang, "d3qn")
    num = np.zeros_like(out)
    for idx in np.ndindex(out.shape):
        e = np.zeros_like(out)
        e[idx] = 1e-6
        num[idx] = (f(out + e) - f(out - e)) / 2e-6
    np.testing.assert_allclose(analytic, num, atol=1e-7)


def test_non_finite_loss_raises():
    agent = scalar_agent()
    with pytest.raises(TrainingError):
        agent.train_step(one_batch(reward=np.nan))


def test_sync_target_behaviour():
    cfg = AgentConfig(batch_size=4, warmup=4, sync_period=5, lr=1e-2)
    agent = QAgent(cfg, 6, seed=1)
    rng = np.random.default_rng(0)
    x = rng.random((20, 6))
    for i in range(8):
        agent.observe(Transition(rng.random(6).astype(np.float32), ActionPair(1, 2), 0.05,
                                 rng.random(6).astype(np.float32), False))
    before = neuro.forward(agent.target, x)[0]
    for _ in range(3):
        agent.train_step(agent.sample())
    assert neuro.forward(agent.target, x)[0].tobytes() == before.tobytes()
    assert neuro.forward(agent.online, x)[0].tobytes() != before.tobytes()

    assert agent.next_sync == 5
    agent.global_step = 4
    assert not agent.maybe_sync()
    agent.global_step = 5
    assert agent.maybe_sync()
    assert agent.next_sync == 10
    assert neuro.forward(agent.target, x)[0].tobytes() == neuro.forward(agent.online, x)[0].tobytes()
    # the copy is deep
    agent.train_step(agent.sample())
    assert neuro.forward(agent.target, x)[0].tobytes() != neuro.forward(agent.online, x)[0].tobytes()
