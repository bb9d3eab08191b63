import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_instance, objective_fixture
from l2cl.graph import build_operator
from l2cl.losses import ContrastScheme
from l2cl.optim import READOUT, AdamState, GradAccumulator, adam_step, backward, finite_diff_check
from oracles import dense_adjacency

seeds = st.integers(0, 2**31 - 1)


class DenseAdam:
    """Textbook Adam over the whole table."""

    def __init__(self, shape, lr):
        self.m, self.v, self.t, self.lr = np.zeros(shape), np.zeros(shape), 0, lr

    def step(self, w, g, b1=0.9, b2=0.999, eps=1e-8):
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return w - self.lr * m_hat / (np.sqrt(v_hat) + eps)


def test_accumulator_sums_duplicates():
    acc = GradAccumulator()
    acc.add(1, [0, 2, 0], np.ones((3, 2)), scale=2.0)
    acc.add(1, [2], np.ones((1, 2)))
    assert acc.dense(1, (3, 2)).tolist() == [[4, 4], [0, 0], [3, 3]]
    rows, vals = acc.rows(1, 3, 2)
    assert rows.tolist() == [0, 2] and vals.tolist() == [[4, 4], [3, 3]]
    other = GradAccumulator().merge(acc, 0.5)
    assert other.dense(1, (3, 2))[0].tolist() == [2, 2]
    assert other.max_layer() == 1


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(0, 4))
def test_backward_matches_explicit_jacobian(seed, depth):
    iset = make_instance(seed, 6, 8, 0.35)
    op = build_operator(iset)
    adj = dense_adjacency(6, 8, iset.pairs())
    rng = np.random.default_rng(seed)
    acc = GradAccumulator()
    expected = np.zeros((14, 3))
    readout = rng.normal(size=(14, 3))
    acc.add(READOUT, np.arange(14), readout)
    for layer in range(depth + 1):
        if rng.random() < 0.6:
            g = rng.normal(size=(14, 3))
            acc.add(layer, np.arange(14), g)
            expected += np.linalg.matrix_power(adj, layer) @ g
    for layer in range(depth + 1):
        expected += np.linalg.matrix_power(adj, layer) @ readout / (depth + 1)
    rows, vals = backward(op, depth, acc, 3)
    dense = np.zeros((14, 3))
    dense[rows] = vals
    assert np.abs(dense - expected).max() < 1e-10


def test_backward_rejects_deep_gradients(toy):
    acc = GradAccumulator()
    acc.add(3, [0], np.ones((1, 2)))
    with pytest.raises(ValueError, match="layer 3"):
        backward(build_operator(toy), 2, acc, 2)


def test_backward_only_returns_touched_rows(toy):
    acc = GradAccumulator()
    acc.add(0, [1], np.ones((1, 2)))
    rows, _ = backward(build_operator(toy), 0, acc, 2)
    assert rows.tolist() == [1]


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_lazy_adam_equals_dense_adam_when_every_row_is_touched(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(5, 3))
    state = AdamState.zeros_like(w, lr=0.01)
    ref, ref_w = DenseAdam(w.shape, 0.01), w.copy()
    for _ in range(20):
        g = rng.normal(size=w.shape)
        adam_step(state, w, np.arange(5), g)
        ref_w = ref.step(ref_w, g)
    assert np.abs(w - ref_w).max() < 1e-12


def test_lazy_adam_leaves_untouched_rows_alone(rng):
    w = rng.normal(size=(4, 2))
    before = w.copy()
    state = AdamState.zeros_like(w)
    adam_step(state, w, np.array([1]), np.ones((1, 2)))
    adam_step(state, w, np.array([2]), np.ones((1, 2)))
    assert np.array_equal(w[[0, 3]], before[[0, 3]])
    assert state.t == 2 and (state.m[0] == 0).all()
    # first step of Adam moves by lr * sign(g)
    assert np.allclose(before[1] - w[1], 1e-3, rtol=1e-6)


def test_adam_rejects_non_finite(rng):
    w = rng.normal(size=(3, 2))
    g = np.array([[0.0, np.nan]])
    with pytest.raises(FloatingPointError, match="row 2"):
        adam_step(AdamState.zeros_like(w), w, np.array([2]), g)


def test_adam_first_steps_by_hand():
    w = np.array([[1.0]])
    s = AdamState.zeros_like(w, lr=0.1)
    adam_step(s, w, np.array([0]), np.array([[2.0]]))
    assert w[0, 0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8))
    adam_step(s, w, np.array([0]), np.array([[-1.0]]))
    m = (0.9 * 0.2 - 0.1) / (1 - 0.81)
    v = (0.999 * 0.004 + 0.001) / (1 - 0.999 ** 2)
    assert w[0, 0] == pytest.approx(1.0 - 0.1 - 0.1 * m / (np.sqrt(v) + 1e-8), rel=1e-7)


def test_finite_diff_check_on_quadratic():
    w = np.array([[1.0, -2.0], [0.5, 3.0]])
    assert finite_diff_check(lambda x: float(np.sum(x ** 3)), w, 3 * w ** 2, order=4) < 1e-9
    assert finite_diff_check(lambda x: float(np.sum(x ** 3)), w, 3 * w ** 2 + 1) > 0.1
    with pytest.raises(TypeError):
        finite_diff_check(lambda x: 0.0, w.astype(np.float32), w)


@pytest.mark.parametrize("scheme", [None, *ContrastScheme])
def test_full_objective_gradient(scheme):
    for seed in range(3):
        loss_fn, grad_fn, w = objective_fixture(seed, scheme)
        assert finite_diff_check(loss_fn, w, grad_fn(w), order=4) < 1e-5


def test_adam_first_step_is_signed_lr(rng):
    w = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 3))
    state = AdamState.zeros_like(w, lr=0.01)
    before = w.copy()
    adam_step(state, w, np.arange(4), g)
    assert np.allclose(before - w, 0.01 * np.sign(g), rtol=1e-5)


def test_backward_single_edge():
    from l2cl.data import InteractionSet
    # one edge: A has unit weights, so layer 1 swaps the two rows
    op = build_operator(InteractionSet(1, 1, [0], [0]))
    acc = GradAccumulator()
    acc.add(1, np.array([0]), np.array([[1.0, 2.0]]))
    rows, g = backward(op, 1, acc, 2)
    assert rows.tolist() == [1]
    assert g.tolist() == [[1.0, 2.0]]
