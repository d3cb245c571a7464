from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from soundsight import envsim as E
from soundsight.audio import is_empty_sound

CFG = E.EnvConfig()


def make_state(agent, heading, objects, goal=0):
    return E.EnvState(agent=agent, heading=heading, objects=tuple(objects), goal=goal)


FAR = ((0, 0), (8, 0), (0, 8), (8, 8))


def test_reset_is_deterministic():
    a = E.reset(CFG, 12)
    b = E.reset(CFG, 12)
    assert a[0] == b[0]
    assert a[1].image.tobytes() == b[1].image.tobytes()
    assert a[2].tobytes() == b[2].tobytes()
    assert a[0].t == 0 and not a[1].robot_state.any()


def test_reset_placement_error():
    with pytest.raises(E.PlacementError):
        E.reset(E.EnvConfig(grid_size=3, intent_count=9), 0)
    with pytest.raises(ValueError):
        E.EnvConfig(intent_count=len(E.INTENT_COLORS) + 1)


def test_config_invariants():
    with pytest.raises(ValueError):
        E.EnvConfig(intent_count=1)
    with pytest.raises(ValueError):
        E.EnvConfig(image_size=8)
    with pytest.raises(ValueError):
        E.EnvConfig(max_episode_length=5, success_hold=5)


def test_goal_frequency_is_uniform():
    counts = Counter(E.reset(CFG, s)[0].goal for s in range(1000))
    for intent in range(CFG.intent_count):
        assert abs(counts[intent] / 1000 - 0.25) <= 0.05


def test_turn_left_four_times_restores_heading():
    state = make_state((4, 4), 1, FAR)
    for _ in range(4):
        state, *_ = E.step(CFG, state, E.TURN_LEFT)
    assert state.heading == 1 and state.t == 4


def test_forward_against_wall():
    state = make_state((4, 0), 0, FAR[1:] + ((5, 5),))
    nxt, *_ = E.step(CFG, state, E.FORWARD)
    assert nxt.agent == (4, 0) and nxt.t == 1


def test_forward_blocked_by_object():
    state = make_state((4, 4), 0, ((4, 3),) + FAR[1:])
    nxt, *_ = E.step(CFG, state, E.FORWARD)
    assert nxt.agent == (4, 4)


def test_step_after_done():
    state = replace(make_state((4, 4), 0, FAR), done=True)
    with pytest.raises(E.EpisodeDoneError):
        E.step(CFG, state, E.STAY)


def test_episode_times_out():
    state = make_state((4, 4), 0, FAR, goal=0)
    for _ in range(CFG.max_episode_length):
        state, _, done, success = E.step(CFG, state, E.STAY)
    assert done and not success


def test_success_after_holding():
    state = make_state((4, 4), 0, ((4, 3),) + FAR[1:], goal=0)
    flags = []
    for _ in range(CFG.success_hold):
        state, _, done, success = E.step(CFG, state, E.STAY)
        flags.append(success)
    assert flags == [False] * (CFG.success_hold - 1) + [True]
    assert state.done


def test_training_mode_does_not_terminate_on_success():
    cfg = replace(CFG, terminate_on_success=False)
    state = make_state((4, 4), 0, ((4, 3),) + FAR[1:], goal=0)
    for _ in range(10):
        state, _, done, success = E.step(cfg, state, E.STAY)
    assert success and not done


@pytest.mark.parametrize("seed", range(15))
def test_scripted_oracle_succeeds(seed):
    state, _, _ = E.reset(CFG, seed)
    trace = []
    while not state.done:
        state, _, _, _ = E.step(CFG, state, E.oracle_action(state, CFG))
        trace.append(state)
    assert state.success and state.t < CFG.max_episode_length
    # replay check: the last K poses were all at the goal
    assert all(E.at_goal(s, CFG) for s in trace[-CFG.success_hold:])


def test_transition_determinism_with_slippery_motion():
    cfg = replace(CFG, forward_success=0.5)
    state, *_ = E.reset(cfg, 4)
    runs = []
    for _ in range(2):
        s, trace = state, []
        for a in [0] * 20:
            if s.done:
                break
            s, *_ = E.step(cfg, s, a)
            trace.append(s.agent)
        runs.append(trace)
    assert runs[0] == runs[1]


# -- rendering --------------------------------------------------------------------

def is_background(pixel, cfg=CFG):
    rgb = np.round(pixel * 255).astype(int)
    return (rgb == cfg.sky).all() or (rgb == cfg.floor).all()


def test_render_goal_dead_ahead():
    state = make_state((4, 4), 0, ((4, 3), (0, 0), (8, 8), (0, 8)), goal=0)
    image = E.render(state, CFG)
    n = CFG.image_size
    red = E.INTENT_COLORS[0] / 255
    center = image[:, n // 2 - 2 : n // 2 + 2]
    bar_rows = np.all(np.isclose(center, red, atol=1e-6), axis=2).all(axis=1)
    # geometric oracle: pillar at forward distance 1 spans BAR_SCALE * n rows
    assert bar_rows.sum() == round(E.BAR_SCALE * n) > n / 2


def test_render_bar_shrinks_with_distance():
    heights = []
    for dist in (1, 2, 3):
        state = make_state((4, 5), 0, ((4, 5 - dist), (0, 0), (8, 8), (0, 8)))
        col = E.render(state, CFG)[:, CFG.image_size // 2]
        heights.append(sum(not is_background(p) for p in col))
    assert heights[0] > heights[1] > heights[2] > 0
    assert heights[1] == round(E.BAR_SCALE * CFG.image_size / 2)


def test_render_empty_view_is_background():
    # agent in a corner facing the wall
    state = make_state((0, 0), 0, ((3, 3), (5, 5), (7, 7), (2, 6)))
    image = E.render(state, CFG)
    assert all(is_background(p) for p in image.reshape(-1, 3))


def test_render_is_deterministic_and_in_range():
    state, obs, _ = E.reset(CFG, 9)
    image = E.render(state, CFG)
    assert image.tobytes() == E.render(state, CFG).tobytes()
    assert image.min() >= 0 and image.max() <= 1 and image.shape == (64, 64, 3)


# -- sound emission -----------------------------------------------------------------

def test_emit_adjacent_facing():
    state = make_state((4, 4), 0, ((0, 0), (8, 8), (4, 3), (0, 8)))
    sound, y = E.emit_sound(state, CFG, seed=3)
    assert y == 2 and not is_empty_sound(sound)


def test_emit_two_objects_is_ambiguous():
    state = make_state((4, 4), 0, ((3, 3), (5, 3), (0, 8), (8, 8)))
    sound, y = E.emit_sound(state, CFG, seed=3)
    assert y == CFG.intent_count and is_empty_sound(sound)


def test_emit_far_is_silent():
    state = make_state((4, 4), 0, FAR)
    sound, y = E.emit_sound(state, CFG, seed=3)
    assert y == CFG.intent_count and not sound.any()


def test_emit_behind_is_silent():
    state = make_state((4, 4), 0, ((4, 5),) + FAR[1:])
    assert E.emit_sound(state, CFG, 0)[1] == CFG.intent_count


# -- pair collection ------------------------------------------------------------------

def test_collect_pairs_balance():
    pairs = E.collect_pairs(CFG, 505, seed=2)
    counts = Counter(p.intent for p in pairs)
    assert len(pairs) == 505
    assert all(abs(counts[c] - 101) <= 1 for c in range(5))


def test_collect_pairs_consistency_and_color():
    pairs = E.collect_pairs(CFG, 400, seed=5)
    hits = total = 0
    for p in pairs:
        assert (p.intent == CFG.intent_count) == is_empty_sound(p.sound)
        if p.intent < CFG.intent_count:
            total += 1
            pixels = np.round(p.image.reshape(-1, 3) * 255).astype(int)
            fg = pixels[~(np.all(pixels == CFG.sky, 1) | np.all(pixels == CFG.floor, 1))]
            colors, counts = np.unique(fg, axis=0, return_counts=True)
            hits += int((colors[np.argmax(counts)] == E.INTENT_COLORS[p.intent]).all())
    assert hits / total >= 0.95


def test_collect_pairs_rejects_bad_count():
    with pytest.raises(ValueError):
        E.collect_pairs(CFG, 0, seed=0)


def test_collect_pairs_budget():
    # hearing range too small for anything to be heard
    cfg = replace(CFG, hear_distance=0.5)
    with pytest.raises(E.RejectionBudgetError):
        E.collect_pairs(cfg, 5, seed=0)


# -- domain shift ---------------------------------------------------------------------

def test_shift_domain_changes_appearance():
    shifted = E.shift_domain(CFG, 3)
    assert all(a != b for a, b in zip(shifted.color_order, range(4)))
    assert shifted.timbre == 3 and shifted.forward_success == 0.9
    assert shifted.sky != CFG.sky or shifted.floor != CFG.floor
    assert E.shift_domain(CFG, 3) == shifted
    with pytest.raises(ValueError):
        E.shift_domain(CFG, 0)
