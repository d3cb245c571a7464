"""Recurrent actor-critic over ``x_t = [I_t, v^I_t, v^S_g, M_t]`` trained with
PPO on intrinsic rewards.

Network: a fresh CNN over the image, the element-wise sum ``v^I_t + v^S_g``,
and the previous-action one-hot are concatenated, passed through an affine
layer into an LSTM, and read out by policy and value heads.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .envsim import ACTIONS, EnvConfig, Observation, reset, step
from .numerics import Conv2d, Linear, LSTMCell, Module, Tensor
from .reward import reward_from_vectors
from .varmodel import VarModel

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("update", "steps", "mean_return", "success_rate", "policy_loss", "value_loss",
                  "entropy", "clip_frac")
REWARD_MODES = ("eq4", "eq5")


@dataclass(frozen=True)
class PolicyConfig:
    image_size: int = 64
    d_joint: int = 32
    actions: int = len(ACTIONS)
    hidden: int = 128
    feature: int = 128
    conv_channels: tuple[int, int] = (16, 32)
    fuse_layers: int = 2
    dtype: str = "float32"
    seed: int = 0


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    horizon: int = 2048
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    lr: float = 1e-3
    total_steps: int = 200_000
    num_envs: int = 16
    chunk: int = 16
    max_grad_norm: float = 0.5
    normalize_rewards: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.horizon % (self.num_envs * self.chunk):
            raise ValueError("horizon must be a multiple of num_envs * chunk")
        if self.minibatch % self.chunk or self.minibatch > self.horizon:
            raise ValueError("minibatch must be a multiple of chunk and at most horizon")


@dataclass
class MdpState:
    """A batch of agent states; ``image`` is ``(B, n, n, 3)`` in [0, 1]."""
    image: np.ndarray
    v_image: np.ndarray
    v_goal: np.ndarray
    robot_state: np.ndarray


class PolicyNet(Module):
    def __init__(self, cfg: PolicyConfig = PolicyConfig(), dtype=None):
        self.cfg = cfg
        dtype = np.dtype(dtype or cfg.dtype).type
        self.dtype = dtype
        rng = np.random.default_rng([cfg.seed, 8803])
        c1, c2 = cfg.conv_channels
        self.conv1 = Conv2d(3, c1, 8, rng, stride=4, dtype=dtype)
        self.conv2 = Conv2d(c1, c2, 4, rng, stride=2, dtype=dtype)
        side = ((cfg.image_size - 8) // 4 + 1 - 4) // 2 + 1
        self.fc_image = Linear(c2 * side * side, cfg.feature, rng, gain=np.sqrt(2), dtype=dtype)
        widths = [cfg.feature + cfg.d_joint + cfg.actions] + [cfg.hidden] * cfg.fuse_layers
        self.fuse = [Linear(a, b, rng, gain=np.sqrt(2), dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.lstm = LSTMCell(cfg.hidden, cfg.hidden, rng, dtype=dtype)
        self.pi = Linear(cfg.hidden, cfg.actions, rng, gain=0.01, dtype=dtype)
        self.v = Linear(cfg.hidden, 1, rng, gain=1.0, dtype=dtype)

    def initial_hidden(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        shape = (batch, self.cfg.hidden)
        return np.zeros(shape, self.dtype), np.zeros(shape, self.dtype)

    def encode(self, state: MdpState) -> Tensor:
        """Per-step input to the recurrent cell, ``(B, hidden)``."""
        n = self.cfg.image_size
        image = np.asarray(state.image)
        if image.shape[1:] != (n, n, 3):
            raise ValueError(f"expected images of shape (B, {n}, {n}, 3), got {image.shape}")
        d = self.cfg.d_joint
        if np.shape(state.v_image)[-1] != d or np.shape(state.v_goal)[-1] != d:
            raise ValueError(f"joint-space vectors must have {d} components")
        if np.shape(state.robot_state)[-1] != self.cfg.actions:
            raise ValueError("robot state must be a one-hot over actions")
        x = Tensor(np.ascontiguousarray(image.transpose(0, 3, 1, 2), dtype=self.dtype))
        x = nx.relu(self.conv2(nx.relu(self.conv1(x))))
        feat = nx.relu(self.fc_image(x.reshape(x.shape[0], -1)))
        fused = Tensor(np.asarray(state.v_image, self.dtype)) + Tensor(np.asarray(state.v_goal, self.dtype))
        joint = nx.concat([feat, fused, Tensor(np.asarray(state.robot_state, self.dtype))], axis=1)
        for layer in self.fuse:
            joint = nx.relu(layer(joint))
        return joint

    def heads(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return self.pi(h), self.v(h).reshape(-1)

    def sequence(self, state: MdpState, starts: np.ndarray, h0: np.ndarray, c0: np.ndarray):
        """Unroll over ``(T, B)``-major flattened inputs.  ``starts[t, b]``
        clears the memory before step ``t``.  Returns logits ``(T*B, A)`` and
        values ``(T*B,)`` in the same order."""
        steps, batch = starts.shape
        inputs = self.encode(state)
        h, c = Tensor(h0), Tensor(c0)
        outs = []
        for t in range(steps):
            keep = Tensor((1.0 - starts[t].astype(self.dtype))[:, None])
            h, c = self.lstm(inputs[t * batch : (t + 1) * batch], h * keep, c * keep)
            outs.append(h)
        return self.heads(nx.concat(outs, axis=0))


def policy_forward(net: PolicyNet, state: MdpState, hidden: tuple[np.ndarray, np.ndarray]):
    """One step for a batch.  Returns ``(probs, values, (h, c))``."""
    with nx.no_grad():
        h, c = net.lstm(net.encode(state), Tensor(hidden[0]), Tensor(hidden[1]))
        logits, value = net.heads(h)
        probs = nx.softmax(logits, axis=1).data
    return probs.astype(np.float64), value.data.astype(np.float64), (h.data, c.data)


# ---------------------------------------------------------------------------
# advantage estimation and the PPO objective
# ---------------------------------------------------------------------------

def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float):
    """Generalized advantage estimation along axis 0.

    ``dones[t]`` marks that the episode ended after step ``t`` so nothing is
    bootstrapped past it; ``last_value`` is ``V(x_T)`` for the state after
    the final step.  Returns ``(advantages, returns)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if len(rewards) == 0:
        raise ValueError("empty trajectory")
    if values.shape != rewards.shape or dones.shape != rewards.shape:
        raise ValueError("rewards, values and dones must share a shape")
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    next_value = np.asarray(last_value, dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class Trajectory:
    """Rollout storage, every array ``(T, E, ...)``.  ``h0``/``c0`` hold the
    memory entering each step (already cleared at episode starts)."""
    images: np.ndarray
    v_image: np.ndarray
    v_goal: np.ndarray
    robot: np.ndarray
    starts: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_value: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def allocate(cls, steps: int, envs: int, n: int, d: int, actions: int, hidden: int):
        z = np.zeros
        return cls(
            images=z((steps, envs, n, n, 3), np.uint8), v_image=z((steps, envs, d), np.float32),
            v_goal=z((steps, envs, d), np.float32), robot=z((steps, envs, actions), np.float32),
            starts=z((steps, envs), bool), h0=z((steps, envs, hidden), np.float32),
            c0=z((steps, envs, hidden), np.float32), actions=z((steps, envs), np.int64),
            logp=z((steps, envs)), values=z((steps, envs)), rewards=z((steps, envs)),
            dones=z((steps, envs), bool), last_value=z(envs),
        )

    def __len__(self) -> int:
        return self.actions.size


@dataclass
class Minibatch:
    state: MdpState
    starts: np.ndarray  # (T, B)
    h0: np.ndarray
    c0: np.ndarray
    actions: np.ndarray  # flattened (T*B,)
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def chunk_minibatch(traj: Trajectory, chunks: list[tuple[int, int]], length: int) -> Minibatch:
    """Gather chunks ``(start_step, env)`` of ``length`` steps into a
    time-major minibatch."""
    t_idx = np.array([[s + k for s, _ in chunks] for k in range(length)])  # (T, B)
    e_idx = np.array([[e for _, e in chunks]] * length)
    flat = lambda a: a[t_idx, e_idx].reshape((-1,) + a.shape[2:])
    state = MdpState(flat(traj.images).astype(np.float32) / 255.0, flat(traj.v_image), flat(traj.v_goal),
                     flat(traj.robot))
    first_t = np.array([s for s, _ in chunks])
    envs = np.array([e for _, e in chunks])
    return Minibatch(
        state=state, starts=traj.starts[t_idx, e_idx], h0=traj.h0[first_t, envs], c0=traj.c0[first_t, envs],
        actions=flat(traj.actions), logp_old=flat(traj.logp), advantages=flat(traj.advantages),
        returns=flat(traj.returns),
    )


def ppo_loss(net: PolicyNet, mb: Minibatch, cfg: PpoConfig, normalize: bool = True):
    """Clipped surrogate + value regression - entropy bonus.  Returns the
    scalar loss Tensor and a diagnostics dict."""
    logits, values = net.sequence(mb.state, mb.starts, mb.h0, mb.c0)
    logp_all = nx.log_softmax(logits, axis=1)
    logp = nx.take_along(logp_all, mb.actions[:, None], axis=1).reshape(-1)
    adv = np.asarray(mb.advantages, np.float64)
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    adv = adv.astype(net.dtype)
    ratio = nx.exp(logp - Tensor(mb.logp_old.astype(net.dtype)))
    surrogate = nx.minimum(ratio * adv, nx.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv)
    policy_loss = -surrogate.mean()
    value_loss = nx.square(values - Tensor(mb.returns.astype(net.dtype))).mean() * 0.5
    entropy = -(nx.exp(logp_all) * logp_all).sum(axis=1).mean()
    total = policy_loss + value_loss * cfg.vf_coef - entropy * cfg.ent_coef
    clip_frac = float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip))
    diag = {"policy_loss": float(policy_loss.data), "value_loss": float(value_loss.data),
            "entropy": float(entropy.data), "clip_frac": clip_frac}
    return total, diag


def ppo_update(net: PolicyNet, opt: nx.Adam, traj: Trajectory, cfg: PpoConfig, rng: np.random.Generator) -> dict:
    """``cfg.epochs`` passes over shuffled sequence chunks.  Advantages are
    normalized over the whole rollout before chunking."""
    steps, envs = traj.actions.shape
    adv = traj.advantages
    traj.advantages = (adv - adv.mean()) / (adv.std() + 1e-8)
    chunks = [(s, e) for e in range(envs) for s in range(0, steps, cfg.chunk)]
    per_mb = cfg.minibatch // cfg.chunk
    totals: dict[str, list[float]] = {k: [] for k in ("policy_loss", "value_loss", "entropy", "clip_frac")}
    for _ in range(cfg.epochs):
        order = rng.permutation(len(chunks))
        for start in range(0, len(chunks), per_mb):
            mb = chunk_minibatch(traj, [chunks[i] for i in order[start : start + per_mb]], cfg.chunk)
            opt.zero_grad()
            loss, diag = ppo_loss(net, mb, cfg, normalize=False)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite PPO loss: {diag}")
            loss.backward()
            opt.step()
            for k, v in diag.items():
                totals[k].append(v)
    traj.advantages = adv
    return {k: float(np.mean(v)) for k, v in totals.items()}


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

class VarCache:
    """Memoized frozen-VAR encodings.  Image vectors are keyed per episode
    by pose (objects never move within an episode); sounds by content."""

    def __init__(self, model: VarModel):
        self.model = model
        self.sounds: dict[bytes, np.ndarray] = {}

    def sound_v(self, sounds: list[np.ndarray]) -> np.ndarray:
        keys = [s.tobytes() for s in sounds]
        missing = [i for i, k in enumerate(keys) if k not in self.sounds]
        if missing:
            out = self.model.encode_sound(np.stack([sounds[i] for i in missing])).v
            for i, v in zip(missing, out):
                self.sounds[keys[i]] = v.astype(np.float32)
        return np.stack([self.sounds[k] for k in keys])

    def image_v(self, images: list[np.ndarray], keys: list, caches: list[dict]) -> np.ndarray:
        missing = [i for i, k in enumerate(keys) if k not in caches[i]]
        if missing:
            out = self.model.encode_image(np.stack([images[i] for i in missing])).v
            for i, v in zip(missing, out):
                caches[i][keys[i]] = v.astype(np.float32)
        return np.stack([caches[i][k] for i, k in enumerate(keys)])


GoalSampler = Callable[[np.random.Generator], np.ndarray]


class EnvWorker:
    """One environment instance plus its episode bookkeeping."""

    def __init__(self, cfg: EnvConfig, seeds: np.random.Generator, goal_sampler: GoalSampler | None = None):
        self.cfg = cfg
        self.seeds = seeds
        self.goal_sampler = goal_sampler
        self.pose_cache: dict = {}
        self.new_episode()

    def new_episode(self):
        episode_seed = int(self.seeds.integers(2**30))
        self.state, self.obs, goal_sound = reset(self.cfg, episode_seed)
        if self.goal_sampler is not None:
            goal_sound = self.goal_sampler(self.seeds)
        self.goal_sound = goal_sound
        self.pose_cache = {}
        self.episode_return = 0.0

    @property
    def pose(self):
        return (self.state.agent, self.state.heading)


def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(probs))
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1)


@dataclass
class RolloutStats:
    returns: list[float] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)


def collect_rollout(net: PolicyNet, workers: list[EnvWorker], cache: VarCache, hidden, cfg: PpoConfig,
                    reward_mode: str, rng: np.random.Generator, fresh: np.ndarray):
    """Step every worker ``horizon / num_envs`` times.  Returns the filled
    trajectory, episode statistics, the carried memory and start flags."""
    envs = len(workers)
    steps = cfg.horizon // envs
    ncfg = net.cfg
    traj = Trajectory.allocate(steps, envs, ncfg.image_size, ncfg.d_joint, ncfg.actions, ncfg.hidden)
    stats = RolloutStats()
    h, c = hidden
    v_goal = cache.sound_v([w.goal_sound for w in workers])
    for t in range(steps):
        images = [w.obs.image for w in workers]
        v_image = cache.image_v(images, [w.pose for w in workers], [w.pose_cache for w in workers])
        robot = np.stack([w.obs.robot_state for w in workers]).astype(np.float32)
        image_arr = np.stack(images)
        h = np.where(fresh[:, None], 0, h).astype(net.dtype)
        c = np.where(fresh[:, None], 0, c).astype(net.dtype)
        traj.images[t] = np.round(image_arr * 255).astype(np.uint8)
        traj.v_image[t], traj.v_goal[t], traj.robot[t] = v_image, v_goal, robot
        traj.starts[t], traj.h0[t], traj.c0[t] = fresh, h, c
        probs, values, (h, c) = policy_forward(net, MdpState(image_arr, v_image, v_goal, robot), (h, c))
        actions = _sample(probs, rng)
        traj.actions[t], traj.values[t] = actions, values
        traj.logp[t] = np.log(np.maximum(probs[np.arange(envs), actions], 1e-12))
        fresh = np.zeros(envs, bool)
        sounds = []
        for i, w in enumerate(workers):
            w.state, w.obs, done, success = step(w.cfg, w.state, int(actions[i]))
            sounds.append(w.obs.sound)
            traj.dones[t, i] = done
        # the reward scores the observation reached by the action
        v_next = cache.image_v([w.obs.image for w in workers], [w.pose for w in workers],
                               [w.pose_cache for w in workers])
        v_sound = cache.sound_v(sounds) if reward_mode == "eq5" else None
        rewards = reward_from_vectors(v_next, v_goal, v_sound)
        traj.rewards[t] = rewards
        for i, w in enumerate(workers):
            w.episode_return += float(rewards[i])
            if traj.dones[t, i]:
                stats.returns.append(w.episode_return)
                stats.successes.append(bool(w.state.success))
                w.new_episode()
                fresh[i] = True
        if fresh.any():
            v_goal = cache.sound_v([w.goal_sound for w in workers])
    images = [w.obs.image for w in workers]
    v_image = cache.image_v(images, [w.pose for w in workers], [w.pose_cache for w in workers])
    robot = np.stack([w.obs.robot_state for w in workers]).astype(np.float32)
    h_last = np.where(fresh[:, None], 0, h).astype(net.dtype)
    c_last = np.where(fresh[:, None], 0, c).astype(net.dtype)
    _, last_value, _ = policy_forward(net, MdpState(np.stack(images), v_image, v_goal, robot), (h_last, c_last))
    traj.last_value = last_value
    return traj, stats, (h, c), fresh


class ReturnScaler:
    """Divides rewards by a running standard deviation of the discounted
    return, keeping value targets near unit scale."""

    def __init__(self, envs: int, gamma: float):
        self.gamma = gamma
        self.running = np.zeros(envs)
        self.count, self.mean, self.var = 1e-4, 0.0, 1.0

    def __call__(self, rewards: np.ndarray, dones: np.ndarray) -> np.ndarray:
        out = np.empty_like(rewards)
        for t in range(len(rewards)):
            self.running = self.running * self.gamma + rewards[t]
            self._update(self.running)
            out[t] = rewards[t] / np.sqrt(self.var + 1e-8)
            self.running[dones[t]] = 0.0
        return out

    def _update(self, x: np.ndarray):
        batch_mean, batch_var, n = x.mean(), x.var(), len(x)
        delta = batch_mean - self.mean
        total = self.count + n
        self.mean += delta * n / total
        m2 = self.var * self.count + batch_var * n + delta ** 2 * self.count * n / total
        self.var = m2 / total
        self.count = total


@dataclass
class RlResult:
    policy: PolicyNet
    metrics: list[dict]


def train_rl(env_cfg: EnvConfig, var: VarModel, ppo: PpoConfig = PpoConfig(), reward_mode: str = "eq5",
             seed: int = 0, policy: PolicyNet | None = None, policy_cfg: PolicyConfig | None = None,
             goal_sampler: GoalSampler | None = None, metrics_path: str | Path | None = None,
             checkpoint_dir: str | Path | None = None, track_success: bool = True) -> RlResult:
    """PPO on intrinsic rewards.  Training episodes run to the time limit even
    after success so the agent keeps collecting reward at the goal."""
    if reward_mode not in REWARD_MODES:
        raise ValueError(f"reward mode must be one of {REWARD_MODES}")
    if env_cfg.terminate_on_success:
        from dataclasses import replace
        env_cfg = replace(env_cfg, terminate_on_success=False)
    if policy is None:
        policy = PolicyNet(policy_cfg or PolicyConfig(d_joint=var.cfg.d_joint, image_size=env_cfg.image_size,
                                                      seed=seed))
    opt = nx.Adam(policy.parameters(), lr=ppo.lr, max_grad_norm=ppo.max_grad_norm)
    rng = np.random.default_rng([seed, 61])
    workers = [EnvWorker(env_cfg, np.random.default_rng([seed, i, 53]), goal_sampler) for i in range(ppo.num_envs)]
    cache = VarCache(var)
    hidden = policy.initial_hidden(ppo.num_envs)
    fresh = np.ones(ppo.num_envs, bool)
    updates = max(1, ppo.total_steps // ppo.horizon)
    scaler = ReturnScaler(ppo.num_envs, ppo.gamma) if ppo.normalize_rewards else None
    metrics = []
    writer = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
    try:
        for update in range(1, updates + 1):
            traj, stats, hidden, fresh = collect_rollout(policy, workers, cache, hidden, ppo, reward_mode, rng, fresh)
            rewards = scaler(traj.rewards, traj.dones) if scaler is not None else traj.rewards
            traj.advantages, traj.returns = compute_gae(rewards, traj.values, traj.dones, traj.last_value,
                                                        ppo.gamma, ppo.lam)
            diag = ppo_update(policy, opt, traj, ppo, rng)
            row = {
                "update": update,
                "steps": update * ppo.horizon,
                "mean_return": float(np.mean(stats.returns)) if stats.returns else float("nan"),
                "success_rate": float(np.mean(stats.successes)) if stats.successes and track_success
                else float("nan"),
                **diag,
            }
            metrics.append(row)
            if writer is not None:
                writer.writerow([row[k] if isinstance(row[k], int) else f"{row[k]:.6f}" for k in METRIC_COLUMNS])
                fh.flush()
            log.info("update %d return %.3f success %.3f entropy %.3f", update, row["mean_return"],
                     row["success_rate"], row["entropy"])
            if checkpoint_dir is not None and ppo.checkpoint_every and update % ppo.checkpoint_every == 0:
                save_policy(policy, Path(checkpoint_dir) / f"policy_{update:05d}.ckpt")
    finally:
        if writer is not None:
            fh.close()
    return RlResult(policy, metrics)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

EVAL_SEED_BASE = 2**30


def run_episodes(env_cfg: EnvConfig, act: Callable, episode_seeds: list[tuple[int, int]],
                 on_step: Callable | None = None) -> list[bool]:
    """Roll out ``act(states, observations, goal_sounds, memory)`` on a batch of
    ``(episode_seed, goal)`` resets until every episode ends."""
    from dataclasses import replace
    env_cfg = replace(env_cfg, terminate_on_success=True)
    starts = [reset(env_cfg, s, goal=g) for s, g in episode_seeds]
    states = [s for s, _, _ in starts]
    obs = [o for _, o, _ in starts]
    goals = [g for _, _, g in starts]
    memory: dict = {}
    live = list(range(len(states)))
    while live:
        actions = act([states[i] for i in live], [obs[i] for i in live], [goals[i] for i in live], live, memory)
        for i, a in zip(list(live), actions):
            states[i], obs[i], _, _ = step(env_cfg, states[i], int(a))
            if on_step is not None:
                on_step(i, states[i], obs[i])
        live = [i for i in live if not states[i].done]
    return [s.success for s in states]


def policy_actor(net: PolicyNet, var: VarModel, greedy: bool = False, seed: int = 0):
    """Batched actor for ``run_episodes``.  Actions are sampled by default;
    argmax decoding tends to lock the recurrent policy into turning loops."""
    cache = VarCache(var)
    rng = np.random.default_rng([seed, 71])

    def act(states, observations, goal_sounds, ids, memory):
        if "h" not in memory:
            memory["h"], memory["c"] = net.initial_hidden(max(ids) + 1 if ids else 0)
            memory["pose"] = [dict() for _ in range(len(memory["h"]))]
        images = [o.image for o in observations]
        keys = [(s.agent, s.heading) for s in states]
        v_image = cache.image_v(images, keys, [memory["pose"][i] for i in ids])
        v_goal = cache.sound_v(goal_sounds)
        robot = np.stack([o.robot_state for o in observations]).astype(np.float32)
        probs, _, (h, c) = policy_forward(net, MdpState(np.stack(images), v_image, v_goal, robot),
                                          (memory["h"][ids], memory["c"][ids]))
        memory["h"][ids], memory["c"][ids] = h, c
        return np.argmax(probs, axis=1) if greedy else _sample(probs, rng)

    return act


def random_actor(seed: int = 0, actions: int = len(ACTIONS)):
    rng = np.random.default_rng([seed, 73])
    return lambda states, *_: rng.integers(actions, size=len(states))


def eval_seeds(intent_count: int, episodes_per_intent: int, seed: int = 0) -> list[tuple[int, int]]:
    return [(EVAL_SEED_BASE + seed * 1_000_003 + g * 10_007 + j, g)
            for g in range(intent_count) for j in range(episodes_per_intent)]


def success_rate(act: Callable, env_cfg: EnvConfig, episodes_per_intent: int = 50, seed: int = 0) -> dict:
    """Fraction of successful episodes per goal intent and overall."""
    if episodes_per_intent < 1:
        raise ValueError("need at least one episode per intent")
    seeds = eval_seeds(env_cfg.intent_count, episodes_per_intent, seed)
    ok = np.array(run_episodes(env_cfg, act, seeds))
    goals = np.array([g for _, g in seeds])
    per_intent = {int(g): float(ok[goals == g].mean()) for g in range(env_cfg.intent_count)}
    return {"overall": float(ok.mean()), "per_intent": per_intent}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_policy(net: PolicyNet, path: str | Path, extra: dict | None = None) -> Path:
    config = {"policy": {**asdict(net.cfg), "conv_channels": list(net.cfg.conv_channels)}}
    if extra:
        config.update(extra)
    return save_checkpoint(path, "policy", config, net.state_dict())


def load_policy(path: str | Path) -> PolicyNet:
    config, tensors = load_checkpoint(path, kind="policy")
    try:
        raw = dict(config["policy"])
        raw["conv_channels"] = tuple(raw["conv_channels"])
        net = PolicyNet(PolicyConfig(**raw))
        net.load_state_dict(tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return net
