import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshrl import agents as ag
from meshrl import neural
from meshrl.datagen import RULE_FIELDS, get_profile
from meshrl.errors import NumericError, ValidationError

S1, S2 = get_profile("s1"), get_profile("s2")

# frozen: the first ten exploratory picks from default_rng(2024) over a 4-action grid
FROZEN_PICKS = [0, 0, 3, 3, 0, 0, 1, 2, 1, 2]


def const_env(qps=100.0, p503=0.2):
    return lambda x, seeds: np.tile([qps, p503], (len(x), 1))


def small_agent(kind="call", profile=S2, fields=None, seed=0, lr=1e-3, hidden=(16, 16)):
    fields = fields or ag.single_state_fields(kind)
    return ag.make_agent(ag.action_space(profile, kind), fields, seed, profile, hidden=hidden, learning_rate=lr)


# --- rewards ---------------------------------------------------------------

def test_reward_503_examples():
    assert ag.reward_503(100, 0.3) == pytest.approx(30.0, abs=1e-12)
    assert ag.reward_503(123.4, 0.0) == 0.0
    assert ag.reward_503(0.0, 1.0) == 0.0


@given(st.floats(0, 1e6), st.floats(0, 1))
def test_reward_503_bounds(q, p):
    r = ag.reward_503(q, p)
    assert 0 <= r <= q
    assert r == q * p


def test_reward_multi_arithmetic():
    assert ag.reward_multi(1, [10, 20], [0.5, 0.5], 1.0) == 12.5


@given(st.floats(0, 1e5), st.floats(0, 1))
def test_reward_multi_single_service_no_coupling(q, p):
    assert ag.reward_multi(1, [q], [p], 0.0) == ag.reward_503(q, p)


@given(st.lists(st.tuples(st.floats(0, 1e5), st.floats(0, 1)), min_size=1, max_size=6))
def test_reward_multi_beta_zero_decouples(pairs):
    qs = [a for a, _ in pairs]
    ps = [b for _, b in pairs]
    for n in range(1, len(pairs) + 1):
        assert ag.reward_multi(n, qs, ps, 0.0) == ag.reward_503(qs[n - 1], ps[n - 1])


def test_reward_multi_errors():
    with pytest.raises(ValidationError):
        ag.reward_multi(1, [1.0, 2.0], [0.1], 0.5)
    with pytest.raises(ValidationError):
        ag.reward_multi(3, [1.0, 2.0], [0.1, 0.2], 0.5)


# --- action spaces ---------------------------------------------------------

def test_grids():
    assert ag.action_space("s1", "thread").values == (1, 2, 3, 4, 5)
    assert ag.action_space("s2", "call").values == (100, 200, 300, 400)
    assert ag.action_space("s2", "thread").values == (3, 4, 5, 6, 7)
    assert ag.action_space("s1", "call").values == tuple(range(435, 451))


@pytest.mark.parametrize("name", ["s1", "s2", "s3", "s4", "s5"])
@pytest.mark.parametrize("kind", ["thread", "call"])
def test_grids_inside_profile(name, kind):
    space = ag.action_space(name, kind)
    lo, hi = get_profile(name).range_of(space.field)
    assert lo <= space.values[0] and space.values[-1] <= hi
    assert list(space.values) == sorted(set(space.values))


def test_bad_grid():
    with pytest.raises(ValidationError):
        ag.ActionSpace("call", (3, 2))
    with pytest.raises(ValidationError):
        ag.ActionSpace("queue", (1,))


# --- state layouts ---------------------------------------------------------

def test_state_dimension_matrix():
    assert len(ag.single_state_fields("thread")) == 8
    assert len(ag.single_state_fields("call")) == 8
    ind = ag.multi_state_fields("independent")
    assert (len(ind["thread"]), len(ind["call"])) == (7, 7)
    for mode, first, second in (("thread-call", "thread", "call"), ("call-thread", "call", "thread")):
        dep = ag.multi_state_fields(mode)
        assert (len(dep[first]), len(dep[second])) == (7, 8)
    assert ag.single_state_fields("thread")[-1] == "calls"


def test_normalizer_maps_range_to_unit_interval():
    fields = ag.single_state_fields("call")
    off, sc = ag.state_normalizer(S2, fields)
    lows = np.array([S2.range_of(f)[0] for f in fields], dtype=float)
    highs = np.array([S2.range_of(f)[1] for f in fields], dtype=float)
    z_lo, z_hi = (lows - off) / sc, (highs - off) / sc
    varying = highs > lows
    np.testing.assert_allclose(z_lo[varying], -1)
    np.testing.assert_allclose(z_hi[varying], 1)
    assert np.all(z_lo[~varying] == 0)


# --- q-values and selection ------------------------------------------------

def test_zero_weight_q_values_equal_bias():
    agent = small_agent()
    for w in agent.net.weights:
        w[:] = 0
    agent.net.biases[-1][:] = [1.0, 2.0, 3.0, 4.0]
    np.testing.assert_array_equal(ag.q_values(agent, np.ones(8)), [1, 2, 3, 4])


def test_output_length_is_grid_size():
    assert ag.q_values(small_agent("thread"), np.ones(8)).shape == (5,)
    assert ag.q_values(small_agent("call"), np.ones(8)).shape == (4,)


def test_fresh_agent_starts_tied():
    agent = small_agent()
    q = ag.q_values(agent, np.ones(8))
    assert np.all(q == q[0])


def test_q_values_dimension_mismatch():
    with pytest.raises(ValidationError):
        ag.q_values(small_agent(), np.ones(7))


def test_select_greedy_and_ties():
    rng = np.random.default_rng(0)
    assert ag.select_action([1, 3, 2], 0.0, rng) == 1
    assert ag.select_action([5, 5, 5], 0.0, rng) == 0


def test_select_explore_frozen_sequence():
    rng = np.random.default_rng(2024)
    assert [ag.select_action(np.zeros(4), 1.0, rng) for _ in range(10)] == FROZEN_PICKS


def test_select_empty():
    with pytest.raises(ValidationError):
        ag.select_action([], 0.0, np.random.default_rng(0))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10), st.floats(-1e3, 1e3))
def test_argmax_shift_invariance(q, c):
    rng = np.random.default_rng(0)
    shifted = [v + c for v in q]
    if len(set(shifted)) == len(set(q)):  # shifting must not merge distinct values by rounding
        assert ag.select_action(q, 0.0, rng) == ag.select_action(shifted, 0.0, rng)


@settings(max_examples=30)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_select_in_range(eps, seed):
    rng = np.random.default_rng(seed)
    assert 0 <= ag.select_action(np.arange(7.0), eps, rng) < 7


# --- q-regression ----------------------------------------------------------

def test_exact_target_no_change():
    agent = small_agent()
    state = np.full(8, 4.0)
    agent.net.biases[-1][:] = [0.0, 0.7, 0.0, 0.0]
    before = [p.copy() for p in agent.net.params()]
    loss = ag.update_q_regression(agent, state, 1, 0.7)
    assert loss == 0.0
    for p, q in zip(before, agent.net.params()):
        np.testing.assert_array_equal(p, q)


def test_unchosen_outputs_get_no_gradient():
    agent = small_agent()
    agent.net.weights[-1][:] = np.random.default_rng(0).normal(size=agent.net.weights[-1].shape)
    q, cache = neural.forward(agent.net, agent.normalize(np.full(8, 4.0)))
    _, d = ag._q_regression_grad(q, 2, 5.0)
    dws, dbs, _ = neural.backward(agent.net, cache, d)
    for row in (0, 1, 3):
        assert np.all(dws[-1][row] == 0) and dbs[-1][row] == 0
    assert np.any(dws[-1][2] != 0)


def test_repeated_update_converges():
    agent = small_agent(lr=1e-3)
    state = np.array([4, 5, 6, 180, 100, 1, 3, 5], dtype=float)
    losses = [ag.update_q_regression(agent, state, 2, 0.8) for _ in range(500)]
    assert losses[-1] < 1e-3
    assert losses[-1] < losses[0]


def test_frozen_bandit_converges_within_tolerance():
    agent = small_agent(lr=1e-3)
    state = np.array([4, 5, 6, 180, 100, 1, 3, 5], dtype=float)
    rewards = [0.2, 0.9, 0.4, 0.6]
    for t in range(2000):
        a = t % 4
        ag.update_q_regression(agent, state, a, rewards[a])
    np.testing.assert_allclose(ag.q_values(agent, state), rewards, atol=1e-2)


def test_reward_scale_divides_target():
    agent = small_agent(lr=1e-3)
    agent.reward_scale = 10.0
    state = np.full(8, 4.0)
    for _ in range(800):
        ag.update_q_regression(agent, state, 0, 5.0)
    assert ag.q_values(agent, state)[0] == pytest.approx(0.5, abs=1e-2)


def test_non_finite_reward():
    with pytest.raises(NumericError):
        ag.update_q_regression(small_agent(), np.ones(8), 0, float("nan"))


# --- reinforce -------------------------------------------------------------

def test_trajectory_return():
    assert ag.trajectory_return([3.0], 1.0) == 3.0
    assert ag.trajectory_return([1.0, 1.0, 1.0], 0.5) == 1.75


def test_reinforce_zero_reward_no_change():
    agent = small_agent()
    agent.net.weights[-1][:] = 0.1
    before = [p.copy() for p in agent.net.params()]
    ag.update_reinforce(agent, [(np.full(8, 4.0), 1, 0.0)])
    for p, q in zip(before, agent.net.params()):
        np.testing.assert_array_equal(p, q)


def test_reinforce_two_action_bandit():
    space = ag.ActionSpace("thread", (1, 2))
    agent = ag.make_agent(space, ("max_pending",), 3, hidden=(8,), learning_rate=1e-2)
    rng = np.random.default_rng(0)
    state = np.array([1.0])
    probs = []
    for _ in range(200):
        a = ag.sample_policy(ag.q_values(agent, state), rng)
        ag.update_reinforce(agent, [(state, a, 1.0 if a == 0 else 0.0)])
        probs.append(ag.softmax(ag.q_values(agent, state))[0])
    assert probs[-1] > 0.9
    assert probs[-1] > probs[0]


def test_reinforce_empty_trajectory():
    with pytest.raises(ValidationError):
        ag.update_reinforce(small_agent(), [])


# --- single rounds ---------------------------------------------------------

def test_single_thread_agent_on_s1():
    agent = small_agent("thread", S1)
    log = ag.run_round_single(agent, const_env(), S1, np.random.default_rng(0))
    assert log.states["thread"].shape == (8,)
    assert log.inputs[7] in (1, 2, 3, 4, 5)
    assert log.inputs.shape == (9,)
    assert S1.contains(log.inputs)


def test_single_call_agent_on_s2():
    agent = small_agent("call", S2)
    log = ag.run_round_single(agent, const_env(), S2, np.random.default_rng(0))
    assert log.inputs[8] in (100, 200, 300, 400)
    assert log.reward == pytest.approx(20.0)


def test_greedy_constant_env_constant_action():
    agent = small_agent("call", S2)
    agent.epsilon = 0.0
    rng = np.random.default_rng(1)
    acts = {ag.run_round_single(agent, const_env(), S2, rng).actions["call"] for _ in range(20)}
    assert len(acts) == 1


# --- multi rounds ----------------------------------------------------------

def multi_agents(mode, profile=S2):
    layout = ag.multi_state_fields(mode)
    return {k: ag.make_agent(ag.action_space(profile, k), layout[k], i, profile, hidden=(16,), learning_rate=1e-3)
            for i, k in enumerate(("thread", "call"))}


@pytest.mark.parametrize("mode, dims", [("independent", (7, 7)), ("thread-call", (7, 8)), ("call-thread", (8, 7))])
def test_multi_state_dims(mode, dims):
    agents = multi_agents(mode)
    log = ag.run_round_multi(agents, mode, const_env(), S2, np.random.default_rng(0))
    assert (log.states["thread"].size, log.states["call"].size) == dims
    assert log.inputs.shape == (9,)
    assert log.inputs[7] in agents["thread"].space.values
    assert log.inputs[8] in agents["call"].space.values


def test_dependent_second_state_carries_first_action():
    agents = multi_agents("thread-call")
    log = ag.run_round_multi(agents, "thread-call", const_env(), S2, np.random.default_rng(0))
    assert log.states["call"][-1] == log.inputs[7]


def test_shared_reward(monkeypatch):
    seen = []
    real = ag.update_q_regression

    def spy(agent, state, action, reward):
        seen.append(reward)
        return real(agent, state, action, reward)

    monkeypatch.setattr(ag, "update_q_regression", spy)
    ag.run_round_multi(multi_agents("independent"), "independent", const_env(50.0, 0.3), S2,
                       np.random.default_rng(0))
    assert len(seen) == 2 and seen[0] == seen[1]


def test_multi_wrong_agents():
    agents = multi_agents("independent")
    with pytest.raises(ValidationError):
        ag.run_round_multi({"thread": agents["thread"]}, "independent", const_env(), S2, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        ag.run_round_multi(agents, "thread-call", const_env(), S2, np.random.default_rng(0))


# --- collaborative ---------------------------------------------------------

def collab(n=3, width=16, kind="call", both=False, aux=False, seed=0):
    space = ag.action_space(S2, kind)
    return ag.make_collab(space, ag.collab_state_fields(kind, both), n, seed, [S2] * n, width=width,
                          learning_rate=1e-3, aux=aux)


def test_collab_shapes():
    nets = collab(n=5)
    assert nets.snet.layer_dims == [8, 16]
    assert all(p.layer_dims == [16, 16, 4] for p in nets.pnets)
    assert ag.make_collab(ag.action_space(S2, "call"), ag.collab_state_fields("call", False), 2, 0).snet.layer_dims == [8, 512]


def test_snet_single_storage():
    nets = collab(n=5)
    views = [nets.service_view(k)[0] for k in range(5)]
    assert all(v is views[0] for v in views)
    state = np.full(8, 4.0)
    before = [ag.q_values(nets, state, k) for k in range(5)]
    nets.snet.weights[0] += 0.5
    after = [ag.q_values(nets, state, k) for k in range(5)]
    nets.pnets[0].weights[-1][:] = 1.0  # so a changed SNet shows up in every head
    assert all(not np.array_equal(b, a) or np.all(b == 0) for b, a in zip(before, after))


def test_snet_change_moves_every_service():
    nets = collab(n=3)
    rng = np.random.default_rng(0)
    for p in nets.pnets:
        p.weights[-1][:] = rng.normal(size=p.weights[-1].shape)
    state = np.full(8, 4.0)
    before = [ag.q_values(nets, state, k) for k in range(3)]
    nets.snet.weights[0] *= -1
    for k in range(3):
        assert not np.array_equal(before[k], ag.q_values(nets, state, k))


def test_collab_round_rewards_and_sharing():
    nets = collab(n=5)
    envs = [const_env(10.0 * (k + 1), 0.5) for k in range(5)]
    rng = np.random.default_rng(0)
    for _ in range(5):
        out = ag.run_round_collab({"call": nets}, envs, [S2] * 5, 0.5, rng)
        qs = [s.qps for s in out.steps]
        ps = [s.p503 for s in out.steps]
        assert out.rewards == [ag.reward_multi(k + 1, qs, ps, 0.5) for k in range(5)]
        snet = [nets.service_view(k)[0] for k in range(5)]
        for k in range(1, 5):
            for a, b in zip(snet[0].params(), snet[k].params()):
                np.testing.assert_array_equal(a, b)


def test_snet_one_adam_step_per_round():
    nets = collab(n=4)
    ag.run_round_collab({"call": nets}, [const_env()] * 4, [S2] * 4, 0.5, np.random.default_rng(0))
    assert nets.snet_opt.t == 1
    assert all(o.t == 1 for o in nets.pnet_opts)


def test_collab_single_service_matches_single_agent():
    # one service, no coupling: the two-block collab net learns exactly like one composed agent net
    nets = collab(n=1, width=16)
    for p in nets.pnets:
        p.weights[-1][:] = np.random.default_rng(3).normal(size=p.weights[-1].shape)
    composed = neural.DenseNet([8, 16, 16, 4], [nets.snet.weights[0].copy()] + [w.copy() for w in nets.pnets[0].weights],
                               [nets.snet.biases[0].copy()] + [b.copy() for b in nets.pnets[0].biases])
    off, sc = nets.normalizers[0]
    agent = ag.AgentNet(composed, neural.adam_init(composed, 1e-3), nets.space, nets.state_fields,
                        np.random.default_rng(0), nets.epsilon, off, sc)
    nets.rng = np.random.default_rng(0)
    env = const_env(80.0, 0.25)
    sampled = np.array([4, 5, 6, 180, 100, 1, 3, 5, 300], dtype=float)
    for _ in range(3):
        c = ag.run_round_collab({"call": nets}, [env], [S2], 0.0, None, sampled=[sampled])
        s = ag.run_round_single(agent, env, S2, None, sampled=sampled)
        assert c.steps[0].actions == s.actions
        assert c.rewards[0] == s.reward
        assert c.steps[0].losses["call"] == s.losses["call"]
    mine = [nets.snet.weights[0]] + nets.pnets[0].weights
    for a, b in zip(mine, agent.net.weights):
        np.testing.assert_array_equal(a, b)


def test_collab_both_kinds_separate_snets():
    groups = {"thread": collab(n=2, kind="thread", both=True, seed=1),
              "call": collab(n=2, kind="call", both=True, seed=2)}
    out = ag.run_round_collab(groups, [const_env()] * 2, [S2] * 2, 0.5, np.random.default_rng(0))
    assert groups["thread"].snet is not groups["call"].snet
    for s in out.steps:
        assert s.states["thread"].size == 7 and s.states["call"].size == 7
        assert set(s.losses) == {"thread", "call"}


def test_collab_mismatched_lengths():
    with pytest.raises(ValidationError):
        ag.run_round_collab({"call": collab(n=3)}, [const_env()] * 2, [S2] * 2, 0.5, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        ag.collab_update(collab(n=2), [np.ones(8)], [0], [1.0])


# --- auxiliary snet objective -----------------------------------------------

def test_aux_constant_sequence_converges():
    nets = collab(n=1, aux=True)
    s = nets.normalize(0, np.array([4, 5, 6, 180, 100, 1, 3, 5], dtype=float))
    buf = [(s, None, s)]
    losses = [ag.snet_aux_update(nets, buf) for _ in range(300)]
    assert losses[-1] < 0.05 * losses[0]


def test_aux_single_sample_decreases():
    nets = collab(n=1, aux=True)
    rng = np.random.default_rng(1)
    s, s_next = rng.normal(size=8), rng.normal(size=8)
    losses = [ag.snet_aux_update(nets, [(s, None, s_next)]) for _ in range(100)]
    assert losses[-1] < losses[0]
    assert sum(b < a for a, b in zip(losses, losses[1:])) >= 90


def test_aux_switch_off_leaves_snet():
    nets = collab(n=1, aux=True)
    before = [p.copy() for p in nets.snet.params()]
    assert ag.snet_aux_update(nets, [(np.ones(8), None, np.ones(8))], enabled=False) == 0.0
    for a, b in zip(before, nets.snet.params()):
        np.testing.assert_array_equal(a, b)


def test_aux_errors():
    with pytest.raises(ValidationError):
        ag.snet_aux_update(collab(n=1, aux=True), [])
    with pytest.raises(ValidationError):
        ag.snet_aux_update(collab(n=1, aux=False), [(np.ones(8), None, np.ones(8))])
