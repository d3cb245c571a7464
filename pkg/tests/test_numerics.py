import numpy as np
import pytest

from soundsight import numerics as nx
from soundsight.numerics import Tensor, grad_check


def param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# -- l2_normalize -------------------------------------------------------------

def test_l2_normalize_examples():
    np.testing.assert_allclose(nx.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    np.testing.assert_allclose(nx.l2_normalize(Tensor([0.0, 0.0, 5.0])).data, [0, 0, 1])


def test_l2_normalize_random_direction_preserved():
    v = np.random.default_rng(0).standard_normal(32)
    out = nx.l2_normalize(Tensor(v)).data
    assert abs(np.linalg.norm(out) - 1.0) < 1e-6
    cosine = out @ v / np.linalg.norm(v)
    assert abs(cosine - 1.0) < 1e-12


def test_l2_normalize_degenerate():
    with pytest.raises(nx.DegenerateNormError):
        nx.l2_normalize(Tensor([0.0, 0.0]))
    with pytest.raises(nx.DegenerateNormError):
        nx.l2_normalize(Tensor([1e-13, 0.0]))


# -- grad_check ---------------------------------------------------------------

def test_grad_check_square():
    x = Tensor([3.0], requires_grad=True)
    assert grad_check(lambda: (x * x).sum(), [x]) < 1e-8
    x.grad = None
    (x * x).sum().backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_grad_check_constant():
    x = Tensor([1.5, -2.0], requires_grad=True)
    assert grad_check(lambda: (x * 0.0).sum() + 7.0, [x]) == 0.0


def test_grad_check_rejects_nonfinite():
    x = Tensor([0.0], requires_grad=True)
    with pytest.raises(nx.NonFiniteLossError):
        grad_check(lambda: nx.log(x).sum(), [x])


OPS = {
    "add": lambda r: (lambda a=param(r, 3, 4), b=param(r, 4): ([a, b], lambda: (a + b).sum()))(),
    "sub": lambda r: (lambda a=param(r, 3, 4), b=param(r, 3, 1): ([a, b], lambda: ((a - b) * a).sum()))(),
    "mul": lambda r: (lambda a=param(r, 3, 4), b=param(r, 3, 4): ([a, b], lambda: (a * b).sum()))(),
    "div": lambda r: (lambda a=param(r, 3), b=Tensor(r.uniform(1, 2, 3), requires_grad=True): ([a, b], lambda: (a / b).sum()))(),
    "matmul": lambda r: (lambda a=param(r, 3, 5), b=param(r, 5, 2): ([a, b], lambda: nx.tanh(a @ b).sum()))(),
    "relu": lambda r: (lambda a=param(r, 10): ([a], lambda: (nx.relu(a) * a).sum()))(),
    "sigmoid": lambda r: (lambda a=param(r, 6, scale=3): ([a], lambda: (nx.sigmoid(a) * a).sum()))(),
    "tanh": lambda r: (lambda a=param(r, 6): ([a], lambda: (nx.tanh(a) * a).sum()))(),
    "exp": lambda r: (lambda a=param(r, 5): ([a], lambda: nx.exp(a).sum()))(),
    "log": lambda r: (lambda a=Tensor(r.uniform(0.5, 2.0, 5), requires_grad=True): ([a], lambda: (nx.log(a) * a).sum()))(),
    "logsumexp": lambda r: (lambda a=param(r, 3, 5, scale=4): ([a], lambda: (nx.logsumexp(a, axis=1) * Tensor([1.0, -2.0, 0.5])).sum()))(),
    "log_softmax": lambda r: (lambda a=param(r, 4, 3): ([a], lambda: (nx.log_softmax(a) * Tensor(np.arange(12.0).reshape(4, 3))).sum()))(),
    "dot": lambda r: (lambda a=param(r, 4, 3), b=param(r, 4, 3): ([a, b], lambda: nx.square(nx.dot(a, b)).sum()))(),
    "l2_normalize": lambda r: (lambda a=param(r, 4, 3), w=Tensor(r.standard_normal((4, 3))): ([a], lambda: (nx.l2_normalize(a) * w).sum()))(),
    "concat": lambda r: (lambda a=param(r, 2, 3), b=param(r, 2, 2): ([a, b], lambda: nx.square(nx.concat([a, b], axis=1)).sum()))(),
    "getitem": lambda r: (lambda a=param(r, 5, 4): ([a], lambda: nx.square(a[1:4, ::2]).sum()))(),
    "take_along": lambda r: (lambda a=param(r, 5, 4): ([a], lambda: nx.square(nx.take_along(a, np.array([[0], [3], [1], [1], [2]]), axis=1)).sum()))(),
    "mean": lambda r: (lambda a=param(r, 5, 4): ([a], lambda: nx.square(a.mean(axis=0)).sum()))(),
    "minmax": lambda r: (lambda a=param(r, 8), b=param(r, 8): ([a, b], lambda: (nx.minimum(a, b) * 2 + nx.maximum(a, b) * a).sum()))(),
    "clip": lambda r: (lambda a=param(r, 8): ([a], lambda: (nx.clip(a, -0.5, 0.5) * a).sum()))(),
    "conv2d": lambda r: (lambda x=param(r, 2, 2, 7, 6), w=param(r, 3, 2, 3, 3), b=param(r, 3): ([x, w, b], lambda: nx.square(nx.conv2d(x, w, b, stride=(2, 1))).sum()))(),
    "conv2d_stride2": lambda r: (lambda x=param(r, 1, 3, 9, 9), w=param(r, 2, 3, 3, 3): ([x, w], lambda: nx.tanh(nx.conv2d(x, w, stride=2)).sum()))(),
}


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients(op, seed):
    rng = np.random.default_rng(seed)
    params, f = OPS[op](rng)
    assert grad_check(f, params) < 1e-4


def test_composition_chain_rule():
    # d/dx sigmoid(exp(x)^2) checked against finite differences
    x = Tensor(np.linspace(-1, 1, 7), requires_grad=True)
    f = lambda: nx.sigmoid(nx.square(nx.exp(x))).sum()
    f().backward()
    e = np.exp(x.data)
    s = 1 / (1 + np.exp(-(e ** 2)))
    np.testing.assert_allclose(x.grad, s * (1 - s) * 2 * e * e, rtol=1e-12)
    assert grad_check(f, [x]) < 1e-7


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 8, 7))
    w = rng.standard_normal((4, 3, 3, 2))
    b = rng.standard_normal(4)
    out = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=(2, 3)).data
    oh, ow = (8 - 3) // 2 + 1, (7 - 2) // 3 + 1
    expected = np.zeros((2, 4, oh, ow))
    for n in range(2):
        for o in range(4):
            for i in range(oh):
                for j in range(ow):
                    patch = x[n, :, 2 * i : 2 * i + 3, 3 * j : 3 * j + 2]
                    expected[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_logsumexp_is_stable():
    x = Tensor([[1000.0, 1000.0], [-1000.0, -1001.0]])
    out = nx.logsumexp(x, axis=1).data
    np.testing.assert_allclose(out, [1000 + np.log(2), -1000 + np.log(1 + np.exp(-1))])


def test_no_grad_skips_graph():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_float32_precision_is_respected():
    with nx.default_dtype(np.float32):
        t = Tensor([1.0, 2.0])
        lin = nx.Linear(2, 3, np.random.default_rng(0))
    assert t.dtype == np.float32
    assert lin(t.reshape(1, 2)).dtype == np.float32


# -- Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = nx.AdamState.for_params([p], lr=0.1)
    nx.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_sign_scaled():
    p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
    state = nx.AdamState.for_params([p], lr=0.01)
    nx.adam_step([p], [np.array([0.3, -5.0, 1e-3])], state)
    np.testing.assert_allclose(p.data, [0.99, 1.01, 0.99], atol=1e-6)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        nx.adam_step([p], [np.zeros(2)], nx.AdamState.for_params([p]))


def test_adam_minimizes_quadratic():
    rng = np.random.default_rng(1)
    c = rng.standard_normal(5)
    x = Tensor(rng.standard_normal(5) * 2, requires_grad=True)
    opt = nx.Adam([x], lr=0.03)
    distances = []
    for _ in range(100):
        opt.zero_grad()
        nx.square(x - Tensor(c)).sum().backward()
        opt.step()
        distances.append(np.linalg.norm(x.data - c))
    tail = np.array(distances[10:])
    assert np.all(np.diff(tail) <= 1e-12)
    assert distances[-1] < distances[0] * 0.5
