"""Egocentric gridworld with colored pillars that emit tone commands.

The agent occupies a cell and faces one of four headings.  Each of the
``intent_count`` objects is a pillar centered in its cell; the camera casts
one ray per image column across a 90 degree field of view and paints a
flat-colored bar whose height falls off with forward distance.  An object
is *heard* when it is the only object within ``hear_distance`` (Euclidean,
between cell centers) and inside the ``hear_cone`` around the heading.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .audio import MfccConfig, WaveSignal, compute_mfcc, empty_mfcc, synth_command

ACTIONS = ("forward", "turn_left", "turn_right", "stay")
FORWARD, TURN_LEFT, TURN_RIGHT, STAY = range(4)
# N, E, S, W with y growing downward
HEADING_VECTORS = np.array([(0, -1), (1, 0), (0, 1), (-1, 0)])

INTENT_COLORS = np.array([
    (220, 40, 40), (40, 180, 60), (50, 80, 230), (235, 200, 30),
    (200, 60, 210), (30, 200, 210), (245, 130, 20), (120, 70, 30),
    (250, 160, 190), (20, 100, 40), (160, 230, 120), (255, 255, 255),
], dtype=np.uint8)
SKY = np.array((150, 170, 190), dtype=np.uint8)
FLOOR = np.array((90, 90, 90), dtype=np.uint8)

PILLAR_RADIUS = 0.35
BAR_SCALE = 0.75  # bar height as a fraction of the image at forward distance 1


class PlacementError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


class RejectionBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    grid_size: int = 9
    intent_count: int = 4
    image_size: int = 64
    max_episode_length: int = 100
    success_hold: int = 5
    hear_distance: float = 2.0
    hear_cone: float = 90.0
    seed: int = 0
    terminate_on_success: bool = True
    forward_success: float = 1.0
    # domain appearance; shift_domain() rewrites these
    shift_seed: int = 0
    color_order: tuple[int, ...] = ()
    sky: tuple[int, int, int] = tuple(int(c) for c in SKY)
    floor: tuple[int, int, int] = tuple(int(c) for c in FLOOR)
    timbre: int = 0
    tone_seed_base: int = 0
    sound_variants: int = 32
    mfcc: MfccConfig = field(default_factory=MfccConfig)

    def __post_init__(self):
        if self.intent_count < 2:
            raise ValueError("need at least two intents")
        if self.intent_count > len(INTENT_COLORS):
            raise ValueError(f"at most {len(INTENT_COLORS)} intents are supported")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not self.max_episode_length > self.success_hold >= 1:
            raise ValueError("need max_episode_length > success_hold >= 1")
        if not 0.0 < self.forward_success <= 1.0:
            raise ValueError("forward_success must lie in (0, 1]")
        if self.color_order and sorted(self.color_order) != list(range(self.intent_count)):
            raise ValueError("color_order must permute the intents")

    @property
    def colors(self) -> np.ndarray:
        order = self.color_order or tuple(range(self.intent_count))
        return INTENT_COLORS[list(order)]


def shift_domain(cfg: EnvConfig, shift_seed: int) -> EnvConfig:
    """A seeded new 'room': deranged object colors, a new floor/sky palette,
    a new tone timbre (speaker), fresh tone seeds, and slippery motion."""
    if shift_seed == 0:
        raise ValueError("shift_seed 0 is reserved for the nominal domain")
    rng = np.random.default_rng([104729, shift_seed])
    m = cfg.intent_count
    while True:
        order = rng.permutation(m)
        if np.all(order != np.arange(m)):
            break
    sky = tuple(int(c) for c in rng.integers(120, 230, 3))
    floor = tuple(int(c) for c in rng.integers(40, 120, 3))
    return replace(
        cfg,
        shift_seed=shift_seed,
        color_order=tuple(int(i) for i in order),
        sky=sky,
        floor=floor,
        timbre=shift_seed,
        tone_seed_base=cfg.tone_seed_base + 1_000_003 * shift_seed,
        forward_success=0.9,
    )


@dataclass(frozen=True)
class EnvState:
    agent: tuple[int, int]
    heading: int
    objects: tuple[tuple[int, int], ...]
    goal: int
    t: int = 0
    hold: int = 0
    episode_seed: int = 0
    done: bool = False
    success: bool = False
    prev_action: int = -1


@dataclass
class Observation:
    image: np.ndarray
    robot_state: np.ndarray
    sound: np.ndarray
    sound_intent: int


@dataclass
class VisualAudioPair:
    image: np.ndarray
    sound: np.ndarray
    intent: int
    wave: WaveSignal | None = None


@dataclass
class UnlabeledPair:
    """Fine-tuning pair: no intent field by construction."""

    image: np.ndarray
    sound: np.ndarray
    wave: WaveSignal | None = None


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _relative(state: EnvState) -> np.ndarray:
    """Object centers minus agent center, shape (M, 2)."""
    return np.asarray(state.objects, dtype=np.float64) - np.asarray(state.agent, dtype=np.float64)


def in_cone(offset: np.ndarray, heading: int, cone_degrees: float) -> np.ndarray:
    offset = np.atleast_2d(offset)
    d = HEADING_VECTORS[heading]
    dist = np.linalg.norm(offset, axis=1)
    cos_half = np.cos(np.radians(cone_degrees / 2.0))
    return (offset @ d) >= dist * cos_half - 1e-9


def heard_objects(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    offset = _relative(state)
    near = np.linalg.norm(offset, axis=1) <= cfg.hear_distance + 1e-9
    return np.flatnonzero(near & in_cone(offset, state.heading, cfg.hear_cone))


def heard_intent(state: EnvState, cfg: EnvConfig) -> int:
    """The single heard intent, or ``intent_count`` (empty) when zero or
    several objects qualify."""
    heard = heard_objects(state, cfg)
    return int(heard[0]) if len(heard) == 1 else cfg.intent_count


def at_goal(state: EnvState, cfg: EnvConfig) -> bool:
    offset = _relative(state)[state.goal]
    return bool(np.max(np.abs(offset)) <= 1 and in_cone(offset, state.heading, cfg.hear_cone)[0])


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def reset(cfg: EnvConfig, episode_seed: int, goal: int | None = None):
    """Start an episode.  Returns ``(state, observation, goal_sound)``."""
    cells = cfg.grid_size * cfg.grid_size
    if cells < cfg.intent_count + 1:
        raise PlacementError(f"{cfg.grid_size}x{cfg.grid_size} grid cannot hold "
                             f"{cfg.intent_count} objects and the agent")
    rng = np.random.default_rng([cfg.seed, episode_seed, 17])
    picks = rng.choice(cells, size=cfg.intent_count + 1, replace=False)
    coords = [(int(p % cfg.grid_size), int(p // cfg.grid_size)) for p in picks]
    heading = int(rng.integers(4))
    sampled_goal = int(rng.integers(cfg.intent_count))
    if goal is None:
        goal = sampled_goal
    elif not 0 <= goal < cfg.intent_count:
        raise ValueError(f"goal {goal} out of range")
    state = EnvState(agent=coords[0], heading=heading, objects=tuple(coords[1:]), goal=goal,
                     episode_seed=episode_seed)
    goal_seed = cfg.tone_seed_base + int(rng.integers(cfg.sound_variants))
    goal_sound = tone_mfcc(goal, goal_seed, cfg)
    return state, observe(state, cfg), goal_sound


def step(cfg: EnvConfig, state: EnvState, action: int):
    """Advance one step.  Returns ``(state, observation, done, success)``."""
    if state.done:
        raise EpisodeDoneError("episode already finished; call reset")
    if not 0 <= action < len(ACTIONS):
        raise ValueError(f"unknown action {action}")
    agent, heading = state.agent, state.heading
    if action == FORWARD:
        moves = True
        if cfg.forward_success < 1.0:
            u = np.random.default_rng([cfg.seed, state.episode_seed, state.t, 29]).random()
            moves = u < cfg.forward_success
        nxt = (agent[0] + int(HEADING_VECTORS[heading][0]), agent[1] + int(HEADING_VECTORS[heading][1]))
        inside = 0 <= nxt[0] < cfg.grid_size and 0 <= nxt[1] < cfg.grid_size
        if moves and inside and nxt not in state.objects:
            agent = nxt
    elif action == TURN_LEFT:
        heading = (heading - 1) % 4
    elif action == TURN_RIGHT:
        heading = (heading + 1) % 4
    moved = replace(state, agent=agent, heading=heading, t=state.t + 1, prev_action=action)
    hold = moved.hold + 1 if at_goal(moved, cfg) else 0
    success = state.success or hold >= cfg.success_hold
    done = (success and cfg.terminate_on_success) or moved.t >= cfg.max_episode_length
    new_state = replace(moved, hold=min(hold, cfg.success_hold), success=success, done=done)
    return new_state, observe(new_state, cfg), done, success


def robot_state(state: EnvState) -> np.ndarray:
    onehot = np.zeros(len(ACTIONS))
    if state.prev_action >= 0:
        onehot[state.prev_action] = 1.0
    return onehot


def observe(state: EnvState, cfg: EnvConfig) -> Observation:
    sound, intent = emit_sound(state, cfg, _emission_seed(state, cfg))
    return Observation(render(state, cfg), robot_state(state), sound, intent)


def _emission_seed(state: EnvState, cfg: EnvConfig) -> int:
    rng = np.random.default_rng([cfg.seed, state.episode_seed, state.t, 31])
    return cfg.tone_seed_base + int(rng.integers(cfg.sound_variants))


# ---------------------------------------------------------------------------
# perception
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4096)
def tone_mfcc(intent: int, tone_seed: int, cfg: EnvConfig) -> np.ndarray:
    out = compute_mfcc(tone_wave(intent, tone_seed, cfg), cfg.mfcc)
    out.flags.writeable = False
    return out


def tone_wave(intent: int, tone_seed: int, cfg: EnvConfig) -> WaveSignal:
    return synth_command(intent, tone_seed, sample_rate=cfg.mfcc.sample_rate, timbre=cfg.timbre)


def emit_sound(state: EnvState, cfg: EnvConfig, seed: int) -> tuple[np.ndarray, int]:
    intent = heard_intent(state, cfg)
    if intent == cfg.intent_count:
        return empty_mfcc(cfg.mfcc), intent
    return tone_mfcc(intent, int(seed), cfg), intent


@lru_cache(maxsize=8)
def _column_offsets(n: int) -> np.ndarray:
    return 2.0 * (np.arange(n) + 0.5) / n - 1.0


def render(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    """Egocentric ``(n, n, 3)`` float32 image in [0, 1]."""
    n = cfg.image_size
    image = np.empty((n, n, 3), dtype=np.uint8)
    image[: n // 2] = cfg.sky
    image[n // 2 :] = cfg.floor

    forward = HEADING_VECTORS[state.heading].astype(np.float64)
    right = np.array([-forward[1], forward[0]])
    rays = forward[None, :] + _column_offsets(n)[:, None] * right[None, :]  # (n, 2)
    offset = _relative(state)  # (M, 2)
    depth = offset @ forward  # forward distance of each pillar center

    a = np.sum(rays * rays, axis=1)[:, None]
    b = -2.0 * rays @ offset.T
    c = np.sum(offset * offset, axis=1)[None, :] - PILLAR_RADIUS ** 2
    disc = b * b - 4.0 * a * c
    hit = (disc >= 0) & (depth[None, :] > 0)
    t = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a), np.inf)
    nearest = np.argmin(t, axis=1)
    visible = np.isfinite(t[np.arange(n), nearest])

    colors = cfg.colors
    for col in np.flatnonzero(visible):
        obj = nearest[col]
        height = min(n, int(round(n * BAR_SCALE / depth[obj])))
        top = (n - height) // 2
        image[top : top + height, col] = colors[obj]
    return image.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# planning oracle
# ---------------------------------------------------------------------------

def shortest_plan(state: EnvState, cfg: EnvConfig) -> list[int]:
    """Breadth-first search over (cell, heading) to the nearest pose that
    counts toward success; empty when already there."""
    start = (state.agent, state.heading)
    if at_goal(state, cfg):
        return []
    blocked = set(state.objects)
    parents: dict = {start: None}
    queue = deque([start])
    while queue:
        pose = queue.popleft()
        (x, y), h = pose
        for action in (FORWARD, TURN_LEFT, TURN_RIGHT):
            if action == FORWARD:
                dx, dy = HEADING_VECTORS[h]
                cell = (x + int(dx), y + int(dy))
                if not (0 <= cell[0] < cfg.grid_size and 0 <= cell[1] < cfg.grid_size) or cell in blocked:
                    continue
                nxt = (cell, h)
            else:
                nxt = ((x, y), (h + (1 if action == TURN_RIGHT else -1)) % 4)
            if nxt in parents:
                continue
            parents[nxt] = (pose, action)
            if at_goal(replace(state, agent=nxt[0], heading=nxt[1]), cfg):
                plan = []
                while parents[nxt] is not None:
                    nxt, act = parents[nxt]
                    plan.append(act)
                return plan[::-1]
            queue.append(nxt)
    raise RuntimeError("goal unreachable")


def oracle_action(state: EnvState, cfg: EnvConfig) -> int:
    plan = shortest_plan(state, cfg)
    return plan[0] if plan else STAY


# ---------------------------------------------------------------------------
# pair collection
# ---------------------------------------------------------------------------

def class_quota(count: int, classes: int) -> list[int]:
    base, extra = divmod(count, classes)
    return [base + (1 if i < extra else 0) for i in range(classes)]


def random_pose(cfg: EnvConfig, rng: np.random.Generator) -> EnvState:
    cells = cfg.grid_size * cfg.grid_size
    picks = rng.choice(cells, size=cfg.intent_count + 1, replace=False)
    coords = [(int(p % cfg.grid_size), int(p // cfg.grid_size)) for p in picks]
    return EnvState(agent=coords[0], heading=int(rng.integers(4)), objects=tuple(coords[1:]), goal=0)


def collect_pairs(cfg: EnvConfig, count: int, seed: int, keep_wave: bool = False) -> list[VisualAudioPair]:
    """Class-balanced ``(image, sound, intent)`` pairs from random poses.

    Each class, the empty intent included, receives ``count // (M + 1)``
    pairs (the remainder goes one each to the lowest classes).  Every heard
    pair carries a freshly seeded tone.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    classes = cfg.intent_count + 1
    quota = class_quota(count, classes)
    rng = np.random.default_rng([cfg.seed, seed, 41])
    pairs: list[VisualAudioPair] = []
    budget = 500 * count
    while sum(quota) > 0:
        budget -= 1
        if budget < 0:
            raise RejectionBudgetError("could not balance classes within the sampling budget")
        state = random_pose(cfg, rng)
        intent = heard_intent(state, cfg)
        if quota[intent] == 0:
            continue
        quota[intent] -= 1
        tone_seed = cfg.tone_seed_base + int(rng.integers(2**31))
        wave = None
        if intent == cfg.intent_count:
            sound = empty_mfcc(cfg.mfcc)
        else:
            wave = tone_wave(intent, tone_seed, cfg)
            sound = compute_mfcc(wave, cfg.mfcc)
        pairs.append(VisualAudioPair(render(state, cfg), sound, intent, wave if keep_wave else None))
    return pairs
