"""Intrinsic rewards read off a frozen VAR++ joint space.

The goal command is encoded once per episode; each step then costs one image
encoding (plus one sound encoding when the current sound is used).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .varmodel import VarModel


@dataclass(frozen=True)
class RewardContext:
    model: VarModel
    goal_v: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.goal_v))
        if norm != 0.0 and abs(norm - 1.0) > 1e-5:
            raise ValueError(f"goal embedding must be zero or unit length, got norm {norm}")


def make_context(model: VarModel, goal_sound: np.ndarray) -> RewardContext:
    goal_v = model.encode_sound(np.asarray(goal_sound)[None]).v[0].astype(np.float64)
    goal_v.flags.writeable = False
    return RewardContext(model, goal_v)


def reward_from_vectors(v_image: np.ndarray, goal_v: np.ndarray, v_sound: np.ndarray | None = None):
    """Dot-product rewards on precomputed joint-space vectors.  Works on a
    single vector or a batch of rows (``goal_v`` may also be batched)."""
    r = np.sum(np.asarray(v_image, np.float64) * goal_v, axis=-1)
    if v_sound is not None:
        r = r + np.sum(np.asarray(v_sound, np.float64) * goal_v, axis=-1)
    return r


def intrinsic_reward(ctx: RewardContext, image: np.ndarray) -> float:
    """``v^I_t . v^S_g``."""
    v_image = ctx.model.encode_image(np.asarray(image)[None]).v[0]
    return float(reward_from_vectors(v_image, ctx.goal_v))


def intrinsic_reward_with_current(ctx: RewardContext, image: np.ndarray, sound: np.ndarray) -> float:
    """``v^I_t . v^S_g + v^S_t . v^S_g``."""
    v_image = ctx.model.encode_image(np.asarray(image)[None]).v[0]
    v_sound = ctx.model.encode_sound(np.asarray(sound)[None]).v[0]
    return float(reward_from_vectors(v_image, ctx.goal_v, v_sound))
