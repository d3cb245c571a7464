import numpy as np
import pytest

from soundsight import envsim as E
from soundsight import policy as P
from soundsight import varmodel as V
from soundsight.checkpoint import file_digest
from soundsight.numerics import grad_check

TINY = P.PolicyConfig(image_size=20, d_joint=4, hidden=6, feature=5, conv_channels=(2, 3), dtype="float64")


def mdp(rng, batch, cfg=TINY, zero=False):
    n, d = cfg.image_size, cfg.d_joint
    if zero:
        return P.MdpState(np.zeros((batch, n, n, 3)), np.zeros((batch, d)), np.zeros((batch, d)),
                          np.zeros((batch, cfg.actions)))
    robot = np.eye(cfg.actions)[rng.integers(cfg.actions, size=batch)]
    return P.MdpState(rng.uniform(0, 1, (batch, n, n, 3)), rng.standard_normal((batch, d)),
                      rng.standard_normal((batch, d)), robot)


# -- forward pass ---------------------------------------------------------------------

def test_forward_zero_state_is_a_distribution():
    net = P.PolicyNet(TINY)
    probs, value, (h, c) = P.policy_forward(net, mdp(None, 3, zero=True), net.initial_hidden(3))
    assert np.all(np.isfinite(probs)) and np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert value.shape == (3,) and h.shape == (3, TINY.hidden)


def test_forward_deterministic_and_commutative():
    net = P.PolicyNet(TINY)
    rng = np.random.default_rng(0)
    state = mdp(rng, 4)
    hidden = (rng.standard_normal((4, 6)), rng.standard_normal((4, 6)))
    a = P.policy_forward(net, state, hidden)
    b = P.policy_forward(net, state, hidden)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    swapped = P.MdpState(state.image, state.v_goal, state.v_image, state.robot_state)
    c = P.policy_forward(net, swapped, hidden)
    assert np.allclose(a[0], c[0], atol=1e-12) and np.allclose(a[1], c[1], atol=1e-12)


def test_forward_shape_mismatch():
    net = P.PolicyNet(TINY)
    state = mdp(np.random.default_rng(0), 2)
    state.v_goal = np.zeros((2, 5))
    with pytest.raises(ValueError):
        P.policy_forward(net, state, net.initial_hidden(2))


# -- GAE --------------------------------------------------------------------------------

def gae_oracle(rewards, values, dones, last_value, gamma, lam):
    """Double loop over the definition A_t = sum_k (gamma lam)^k delta_{t+k}."""
    n = len(rewards)
    nxt = list(values[1:]) + [last_value]
    deltas = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, weight = 0.0, 1.0
        for k in range(t, n):
            total += weight * deltas[k]
            if dones[k]:
                break
            weight *= gamma * lam
        adv.append(total)
    return np.array(adv)


@pytest.mark.parametrize("length", range(1, 21))
def test_gae_matches_oracle(length):
    rng = np.random.default_rng(length)
    r, v = rng.standard_normal(length), rng.standard_normal(length)
    d = rng.random(length) < 0.2
    last = rng.standard_normal()
    adv, ret = P.compute_gae(r, v, d, last, 0.97, 0.9)
    assert np.max(np.abs(adv - gae_oracle(r, v, d, last, 0.97, 0.9))) < 1e-12
    assert np.allclose(ret, adv + v, atol=0)


def test_gae_td_and_monte_carlo_limits():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal(6), rng.standard_normal(6)
    d = np.zeros(6, bool)
    adv, _ = P.compute_gae(r, v, d, 0.3, 0.9, 0.0)
    nxt = np.append(v[1:], 0.3)
    assert np.allclose(adv, r + 0.9 * nxt - v, atol=1e-15)
    adv, _ = P.compute_gae(r, np.zeros(6), d, 0.0, 1.0, 1.0)
    assert np.allclose(adv, np.cumsum(r[::-1])[::-1], atol=1e-12)


def test_gae_empty():
    with pytest.raises(ValueError):
        P.compute_gae([], [], [], 0.0, 0.99, 0.95)


def test_gae_batched_columns_are_independent():
    rng = np.random.default_rng(3)
    r, v = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    d = rng.random((8, 3)) < 0.3
    last = rng.standard_normal(3)
    adv, _ = P.compute_gae(r, v, d, last, 0.99, 0.95)
    for e in range(3):
        assert np.allclose(adv[:, e], gae_oracle(r[:, e], v[:, e], d[:, e], last[e], 0.99, 0.95), atol=1e-12)


# -- PPO objective ----------------------------------------------------------------------

def fixture_minibatch(net, rng, steps=4, batch=2):
    state = mdp(rng, steps * batch)
    starts = np.zeros((steps, batch), bool)
    starts[2, 1] = True
    h0 = rng.standard_normal((batch, net.cfg.hidden)) * 0.5
    c0 = rng.standard_normal((batch, net.cfg.hidden)) * 0.5
    actions = rng.integers(net.cfg.actions, size=steps * batch)
    logits, _ = net.sequence(state, starts, h0, c0)
    logp = logits.data - np.log(np.exp(logits.data).sum(axis=1, keepdims=True))
    return P.Minibatch(state, starts, h0, c0, actions, logp[np.arange(len(actions)), actions],
                       rng.standard_normal(steps * batch), rng.standard_normal(steps * batch))


def test_ratio_identity():
    net = P.PolicyNet(TINY)
    mb = fixture_minibatch(net, np.random.default_rng(0))
    cfg = P.PpoConfig(vf_coef=0.0, ent_coef=0.0)
    loss, diag = P.ppo_loss(net, mb, cfg, normalize=False)
    assert loss.item() == pytest.approx(-mb.advantages.mean(), abs=1e-12)
    assert diag["clip_frac"] == 0.0


def test_clipped_branch_selected():
    net = P.PolicyNet(TINY)
    mb = fixture_minibatch(net, np.random.default_rng(1))
    mb.logp_old = mb.logp_old - np.log(1.5)  # every ratio is 1.5
    mb.advantages = np.abs(mb.advantages) + 0.1
    cfg = P.PpoConfig(vf_coef=0.0, ent_coef=0.0, clip=0.2)
    loss, diag = P.ppo_loss(net, mb, cfg, normalize=False)
    assert loss.item() == pytest.approx(-1.2 * mb.advantages.mean(), abs=1e-10)
    assert diag["clip_frac"] == 1.0


def test_diagnostics_ranges():
    net = P.PolicyNet(TINY)
    mb = fixture_minibatch(net, np.random.default_rng(2))
    mb.logp_old = mb.logp_old + np.random.default_rng(0).normal(0, 0.5, mb.logp_old.shape)
    _, diag = P.ppo_loss(net, mb, P.PpoConfig())
    assert 0.0 <= diag["clip_frac"] <= 1.0 and diag["entropy"] >= 0.0


@pytest.mark.parametrize("seed", range(3))
def test_ppo_loss_gradcheck(seed):
    net = P.PolicyNet(P.PolicyConfig(**{**TINY.__dict__, "seed": seed}))
    rng = np.random.default_rng(seed)
    mb = fixture_minibatch(net, rng)
    mb.logp_old = mb.logp_old + rng.normal(0, 0.05, mb.logp_old.shape)
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0, 0.1, p.shape)
    cfg = P.PpoConfig(clip=10.0)  # keep every ratio away from the clip kink
    assert grad_check(lambda: P.ppo_loss(net, mb, cfg)[0], net.parameters()) < 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        P.PpoConfig(gamma=0.0)
    with pytest.raises(ValueError):
        P.PpoConfig(lam=1.5)
    with pytest.raises(ValueError):
        P.PpoConfig(clip=0.0)


# -- training loop ----------------------------------------------------------------------

SMOKE = P.PpoConfig(horizon=64, num_envs=4, chunk=16, minibatch=32, epochs=2, total_steps=128)


@pytest.fixture(scope="module")
def small_var():
    return V.VarModel(V.VarConfig(image_channels=(4, 4, 4), sound_channels=(4, 4), d_image=16, d_sound=16,
                                  d_joint=8))


def test_train_rl_smoke_is_deterministic(tmp_path, small_var):
    runs = []
    for k in range(2):
        path = tmp_path / f"m{k}.csv"
        P.train_rl(E.EnvConfig(), small_var, SMOKE, "eq5", seed=4, metrics_path=path)
        runs.append(path.read_text())
    assert runs[0] == runs[1]
    header, *rows = runs[0].strip().split("\n")
    assert header.split(",") == list(P.METRIC_COLUMNS) and len(rows) == 2


def test_train_rl_keeps_var_frozen(tmp_path, small_var):
    before = file_digest(V.save_var(small_var, tmp_path / "a.ckpt"))
    P.train_rl(E.EnvConfig(), small_var, SMOKE, "eq4", seed=1)
    assert file_digest(V.save_var(small_var, tmp_path / "b.ckpt")) == before


def test_train_rl_rejects_unknown_reward(small_var):
    with pytest.raises(ValueError):
        P.train_rl(E.EnvConfig(), small_var, SMOKE, "eq6")


def test_policy_checkpoint_roundtrip(tmp_path):
    net = P.PolicyNet(TINY)
    loaded = P.load_policy(P.save_policy(net, tmp_path / "p.ckpt"))
    state = mdp(np.random.default_rng(0), 2)
    a = P.policy_forward(net, state, net.initial_hidden(2))
    b = P.policy_forward(loaded, state, loaded.initial_hidden(2))
    assert np.array_equal(a[0], b[0])


# -- success rate -----------------------------------------------------------------------

def oracle_actor(cfg):
    return lambda states, *_: [E.oracle_action(s, cfg) for s in states]


def test_oracle_policy_scores_one():
    cfg = E.EnvConfig()
    assert P.success_rate(oracle_actor(cfg), cfg, episodes_per_intent=10)["overall"] == 1.0


def test_random_policy_is_weak_and_deterministic():
    cfg = E.EnvConfig()
    a = P.success_rate(P.random_actor(0), cfg, episodes_per_intent=50)
    b = P.success_rate(P.random_actor(0), cfg, episodes_per_intent=50)
    assert a == b and a["overall"] < 0.25


def test_success_rate_needs_episodes():
    with pytest.raises(ValueError):
        P.success_rate(P.random_actor(0), E.EnvConfig(), episodes_per_intent=0)
