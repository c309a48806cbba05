import numpy as np
import pytest

from dvmpc.config import TrainingSection
from dvmpc.critic import Critic, CriticConfig, MetricsLog, ReplayBuffer, bellman_target, update
from dvmpc.dynamics import TransitionTuple
from dvmpc.errors import ContractViolation
from dvmpc.value_net import ValueNet, forward

NO_GOAL = np.zeros(0)


def constant_net(value, state_dim=1, horizon=3.0):
    return ValueNet(weights=(np.zeros((1, 1 + state_dim)),), biases=(np.array([value]),), horizon=horizon,
                    state_dim=state_dim)


def tr(t=0.0, s=0.0, c=0.0, s_next=0.0, done=False, u=0.0):
    return TransitionTuple(t=t, s=np.atleast_1d(float(s)), u=np.atleast_1d(float(u)), c=c,
                           s_next=np.atleast_1d(float(s_next)), done=done, goal=NO_GOAL)


def test_done_transition_target_is_cost():
    assert bellman_target(constant_net(3.0), tr(c=20.0, done=True), CriticConfig()) == 20.0


def test_bootstrapped_target_arithmetic():
    cfg = CriticConfig(discount=0.99, dt=1.0)
    assert cfg.step_discount == pytest.approx(0.99)
    assert bellman_target(constant_net(3.0), tr(), cfg) == pytest.approx(2.97)
    raw = CriticConfig(discount=0.99, dt=0.1, discount_mode="per_step_raw")
    assert bellman_target(constant_net(3.0), tr(), raw) == pytest.approx(2.97)
    assert CriticConfig(discount=0.99, dt=0.1).step_discount == pytest.approx(0.99**0.1)


def test_geometric_series_is_the_fixed_point():
    cfg = CriticConfig(discount=0.9, dt=1.0)
    c = 2.0
    fixed = c / (1.0 - cfg.step_discount)
    assert bellman_target(constant_net(fixed), tr(c=c), cfg) == pytest.approx(fixed, rel=1e-14)


def test_config_validation():
    with pytest.raises(ContractViolation):
        CriticConfig(minibatches=0)
    with pytest.raises(ContractViolation):
        CriticConfig(step_size=0.0)
    with pytest.raises(ContractViolation):
        CriticConfig(discount_mode="other")


def test_replay_buffer_ring_evicts_oldest_first():
    buf = ReplayBuffer(3, 1, 1)
    for k in range(5):
        buf.add(tr(t=float(k)))
    assert len(buf) == 3 and buf.inserted == 5
    assert sorted(buf.t) == [2.0, 3.0, 4.0]
    with pytest.raises(ContractViolation):
        buf.add(tr(c=float("nan")))
    with pytest.raises(ContractViolation):
        ReplayBuffer(0, 1, 1)


def test_uniform_sampling():
    buf = ReplayBuffer(10, 1, 1)
    buf.extend(tr(t=float(k)) for k in range(10))
    draws = 100_000
    idx = buf.sample_indices(draws, np.random.default_rng(5))
    counts = np.bincount(idx, minlength=10)
    p = 0.1
    se = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * se)


def test_update_not_ready_with_small_buffer():
    critic = Critic(constant_net(0.0), CriticConfig(batch_size=8))
    buf = ReplayBuffer(100, 1, 1)
    buf.extend(tr() for _ in range(7))
    assert critic.update(buf, np.random.default_rng(0)) is None
    assert update(critic, buf, np.random.default_rng(0)) is None


def test_consistent_buffer_gives_weight_decay_floor_only():
    rng = np.random.default_rng(1)
    net = ValueNet.initialize(1, 0, 3.0, rng)
    s = np.array([0.4])
    v = float(forward(net, 3.0, s))
    cfg = CriticConfig(batch_size=4, minibatches=1, weight_decay=1e-4)
    critic = Critic(net, cfg)
    buf = ReplayBuffer(10, 1, 1)
    buf.extend(tr(t=3.0, s=0.4, c=v, s_next=0.4, done=True) for _ in range(10))
    loss, mean_target = critic.update(buf, rng)
    assert loss < 1e-30 and mean_target == pytest.approx(v)


def test_targets_are_constants_within_a_step():
    rng = np.random.default_rng(2)
    net = ValueNet.initialize(1, 0, 3.0, rng)
    cfg = CriticConfig()
    critic = Critic(net, cfg)
    buf = ReplayBuffer(100, 1, 1)
    buf.extend(tr(t=rng.uniform(0, 2.9), s=rng.normal(), c=1.0, s_next=rng.normal()) for _ in range(100))
    batch = buf.batch(np.arange(20))
    y = bellman_target(critic.target, batch, cfg)
    critic.net = critic.net.with_params([p + 1.0 for p in critic.net.params])
    np.testing.assert_array_equal(bellman_target(critic.target, batch, cfg), y)


def test_loss_is_finite_and_non_negative():
    rng = np.random.default_rng(3)
    critic = Critic(ValueNet.initialize(2, 0, 3.0, rng), CriticConfig(batch_size=16))
    buf = ReplayBuffer(200, 2, 1)
    for _ in range(200):
        s = rng.normal(size=2)
        buf.add(TransitionTuple(t=rng.uniform(0, 3), s=s, u=np.zeros(1), c=rng.exponential(), s_next=s + 0.1,
                                done=bool(rng.random() < 0.1), goal=NO_GOAL))
    for _ in range(10):
        loss = update(critic, buf, rng)
        assert np.isfinite(loss) and loss >= 0.0


def test_frozen_target_regression_reaches_weight_decay_floor():
    rng = np.random.default_rng(4)
    net = ValueNet.initialize(1, 0, 3.0, rng, hidden=(64,))
    cfg = CriticConfig(batch_size=16, minibatches=50, step_size=1e-2, weight_decay=0.0, polyak_tau=0.0)
    critic = Critic(net, cfg)
    buf = ReplayBuffer(16, 1, 1)
    states = np.linspace(-1, 1, 4)
    buf.extend(tr(t=1.0, s=x, c=float(np.sin(3 * x)), done=True) for x in states for _ in range(4))
    first = update(critic, buf, rng)
    for _ in range(40):
        last = update(critic, buf, rng)
    assert last < 1e-3 * first and last < 1e-4


def chain_fixed_point(c=1.0, gamma=0.8, seed=0):
    """Deterministic one-state chain at zero time-to-go, so the bootstrap time clamp keeps it stationary."""
    cfg = CriticConfig(discount=gamma, discount_mode="per_step_raw")
    rng = np.random.default_rng(seed)
    net = ValueNet.initialize(1, 0, 3.0, rng, output_gain=0.01, output_scale=10.0)
    critic = Critic(net, cfg)
    buf = ReplayBuffer(1000, 1, 1)
    buf.extend(tr(t=3.0, s=0.5, c=c, s_next=0.5) for _ in range(200))
    budget = TrainingSection().iterations * TrainingSection().updates_per_iteration
    for _ in range(budget):
        critic.update(buf, rng)
    return float(forward(critic.target, 3.0, np.array([0.5]))), c / (1.0 - cfg.step_discount)


def test_constant_cost_chain_converges_to_geometric_series():
    v, fixed = chain_fixed_point()
    assert abs(v - fixed) / fixed < 0.05


def test_metrics_log_schema(tmp_path):
    p = tmp_path / "critic.csv"
    log = MetricsLog(p)
    log.append(1, 0.5, 64, 2.0)
    lines = p.read_text().splitlines()
    assert lines[0] == "iteration,loss,buffer_size,mean_target"
    assert [float(v) for v in lines[1].split(",")] == [1, 0.5, 64, 2.0]
