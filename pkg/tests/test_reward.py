import numpy as np
import pytest

from soundsight import reward as R
from soundsight import varmodel as V
from soundsight.checkpoint import file_digest

SMALL = V.VarConfig(image_size=16, frames=12, coefficients=5, d_image=8, d_sound=8, d_joint=4,
                    image_channels=(2, 3), sound_channels=(2,), dtype="float64")


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def test_unit_dot_examples():
    g = unit([1, 2, 3, 4])
    assert R.reward_from_vectors(g, g) == pytest.approx(1.0)
    assert R.reward_from_vectors(np.zeros(4), g) == 0.0
    assert R.reward_from_vectors(g, np.zeros(4)) == 0.0
    assert R.reward_from_vectors(g, g, g) == pytest.approx(2.0)


def test_reward_ranges():
    rng = np.random.default_rng(0)
    for _ in range(200):
        vi, vs, g = (unit(rng.standard_normal(6)) * rng.integers(0, 2) for _ in range(3))
        assert -1 - 1e-12 <= R.reward_from_vectors(vi, g) <= 1 + 1e-12
        assert -2 - 1e-12 <= R.reward_from_vectors(vi, g, vs) <= 2 + 1e-12


def test_context_rejects_non_unit_goal():
    model = V.VarModel(SMALL)
    with pytest.raises(ValueError):
        R.RewardContext(model, np.array([0.5, 0.0, 0.0, 0.0]))


@pytest.fixture(scope="module")
def model():
    return V.VarModel(SMALL)


def test_eq5_is_eq4_plus_sound_term(model):
    rng = np.random.default_rng(1)
    for _ in range(10):
        goal = rng.standard_normal((12, 5)) * 5
        image = rng.uniform(0, 1, (16, 16, 3))
        sound = rng.standard_normal((12, 5)) * 5
        ctx = R.make_context(model, goal)
        vs = model.encode_sound(sound[None]).v[0]
        expected = R.intrinsic_reward(ctx, image) + float(vs @ ctx.goal_v)
        assert abs(R.intrinsic_reward_with_current(ctx, image, sound) - expected) < 1e-9


def test_zero_current_sound_reduces_to_eq4():
    model = V.VarModel(SMALL)
    model.b_sound.bias.data[...] = -50.0  # the empty-sound gate is shut
    rng = np.random.default_rng(2)
    ctx = R.RewardContext(model, unit(rng.standard_normal(4)))
    image = rng.uniform(0, 1, (16, 16, 3))
    zero = np.zeros((12, 5))
    assert not model.encode_sound(zero[None]).v.any()
    assert R.intrinsic_reward_with_current(ctx, image, zero) == R.intrinsic_reward(ctx, image)


def test_reward_calls_leave_model_untouched(tmp_path):
    model = V.VarModel(SMALL)
    before = file_digest(V.save_var(model, tmp_path / "a.ckpt"))
    rng = np.random.default_rng(3)
    ctx = R.make_context(model, rng.standard_normal((12, 5)))
    images = rng.uniform(0, 1, (50, 16, 16, 3))
    for k in range(10_000):
        R.intrinsic_reward(ctx, images[k % 50])
    assert file_digest(V.save_var(model, tmp_path / "b.ckpt")) == before
