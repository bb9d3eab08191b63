import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import make_instance
from l2cl.data import NegativeSampler, TrainBatch
from l2cl.graph import build_operator
from l2cl.losses import (CLHyper, ContrastScheme, bpr_loss, cl_heterogeneous, cl_homogeneous, cosine_sim, infonce,
                         l2_reg, one_hop_cl, scheme_loss, total_loss)
from l2cl.model import LayerStack, forward, init_embeddings
from l2cl.optim import READOUT

seeds = st.integers(0, 2**31 - 1)


def rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


def instance(seed, depth=3, batch=6):
    iset = make_instance(seed)
    op = build_operator(iset)
    table = init_embeddings(iset.num_users, iset.num_items, 4, seed=seed)
    stack = forward(table, op, depth)
    b = NegativeSampler(iset).sample(batch, np.random.default_rng(seed))
    return iset, stack, b


def test_cosine():
    assert cosine_sim(np.array([1.0, 0]), np.array([0, 2.0])) == 0.0
    assert cosine_sim(np.array([1.0, 1]), np.array([3.0, 3])) == pytest.approx(1.0)
    assert cosine_sim(np.zeros(2), np.ones(2)) == 0.0


@settings(max_examples=60, deadline=None)
@given(seeds, st.floats(0.05, 2.0))
def test_infonce_matches_double_loop(seed, tau):
    rng = np.random.default_rng(seed)
    a, c = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    pos = rng.integers(4, size=5)
    got = infonce(a, c, pos, tau).value
    want = oracles.infonce(a.tolist(), [c[p].tolist() for p in pos], c.tolist(), tau)
    assert rel(got, want) < 1e-10


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_infonce_scale_invariant(seed, s1, s2):
    rng = np.random.default_rng(seed)
    a, c = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    pos = rng.integers(6, size=4)
    assert rel(infonce(a * s1, c * s2, pos, 0.1).value, infonce(a, c, pos, 0.1).value) < 1e-10


@pytest.mark.parametrize("tau", [1e-3, 1e-4])
def test_infonce_small_temperature_stays_finite(tau, rng):
    # logits of order 1/tau would overflow a naive exp
    a, c = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    pos = np.array([0, 1, 2, 3])
    res = infonce(a, c, pos, tau)
    assert math.isfinite(res.value)
    assert np.isfinite(res.grad_anchors).all() and np.isfinite(res.grad_candidates).all()
    ua = a / np.linalg.norm(a, axis=1, keepdims=True)
    uc = c / np.linalg.norm(c, axis=1, keepdims=True)
    logits = ua @ uc.T / tau
    shift = logits.max(axis=1)
    lse = shift + np.log(np.exp(logits - shift[:, None]).sum(axis=1))
    assert rel(res.value, float(np.sum(lse - logits[np.arange(4), pos]))) < 1e-10


def test_infonce_single_candidate_is_zero():
    a = np.array([[1.0, 0.0]])
    res = infonce(a, a, np.array([0]), 0.1)
    assert res.value == pytest.approx(0.0, abs=1e-12)


def test_infonce_zero_vector_is_finite():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    c = np.array([[0.0, 1.0], [1.0, 1.0]])
    res = infonce(a, c, np.array([0, 1]), 0.1)
    assert math.isfinite(res.value) and (res.grad_anchors[0] == 0).all()
    with pytest.raises(ValueError):
        infonce(a, c, np.array([0, 1]), 0.0)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_infonce_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a, c = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    pos = rng.integers(5, size=3)
    res = infonce(a, c, pos, 0.2)
    h = 1e-6
    for arr, grad in ((a, res.grad_anchors), (c, res.grad_candidates)):
        for idx in np.ndindex(*arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = infonce(a, c, pos, 0.2).value
            arr[idx] = orig - h
            down = infonce(a, c, pos, 0.2).value
            arr[idx] = orig
            assert abs((up - down) / (2 * h) - grad[idx]) < 1e-6 * max(1.0, abs(grad[idx]))


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from(list(ContrastScheme)), st.floats(0.0, 1.0), st.sampled_from([0.1, 0.5]))
def test_scheme_matches_scalar_oracle(seed, scheme, alpha, tau):
    iset, stack, b = instance(seed)
    got = scheme_loss(scheme, stack, b.users, b.pos_items, tau, alpha, train=iset).value
    want = oracles.scheme(scheme.value, stack.layers, b.users.tolist(), b.pos_items.tolist(), stack.num_users,
                          tau, alpha)
    assert rel(got, want) < 1e-10


def test_scheme_depth_requirements():
    _, stack, b = instance(0, depth=1)
    for scheme in ContrastScheme:
        if scheme.required_depth > 1:
            with pytest.raises(ValueError, match="needs depth"):
                scheme_loss(scheme, stack, b.users, b.pos_items, 0.1, 0.5)
        else:
            scheme_loss(scheme, stack, b.users, b.pos_items, 0.1, 0.5)
    assert [s.required_depth for s in ContrastScheme] == [0, 1, 1, 2, 3]
    assert ContrastScheme.parse("u0_i1") is ContrastScheme.U0_I1
    with pytest.raises(ValueError, match="unknown contrast scheme"):
        ContrastScheme.parse("U2_I2")


def test_one_hop_alpha_reductions():
    iset, stack, b = instance(3)
    both = one_hop_cl(stack, b.users, b.pos_items, 0.1, 0.5)
    users_only = one_hop_cl(stack, b.users, b.pos_items, 0.1, 1.0)
    items_only = one_hop_cl(stack, b.users, b.pos_items, 0.1, 0.0)
    assert users_only.value == pytest.approx(cl_heterogeneous(stack, 1, 0, b.users, b.pos_items, 0.1).value)
    assert items_only.value == pytest.approx(both.parts["item_side"] * 2)
    assert both.value == pytest.approx(0.5 * users_only.value + 0.5 * items_only.value)


def test_one_hop_rejects_non_edges():
    iset, stack, _ = instance(4)
    absent = [(u, i) for u in range(5) for i in range(7) if not iset.contains([u], [i])[0]]
    if absent:
        u, i = absent[0]
        with pytest.raises(ValueError, match="not an observed"):
            one_hop_cl(stack, np.array([u]), np.array([i]), 0.1, 0.5, train=iset)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_bpr_matches_oracle(seed):
    _, stack, b = instance(seed, batch=10)
    got = bpr_loss(stack.readout, b, stack.num_users).value
    assert rel(got, oracles.bpr(stack.readout, b.triples, stack.num_users)) < 1e-10


def test_bpr_extreme_margins_are_stable():
    emb = np.array([[100.0], [1.0], [-1.0]])
    b = TrainBatch(np.array([0, 0]), np.array([0, 1]), np.array([1, 0]))
    out = bpr_loss(emb, b, 1)
    assert out.value == pytest.approx(200.0)
    g = out.grad.dense(READOUT, (3, 1))
    assert np.isfinite(g).all()


def test_l2_reg_counts_each_row_once():
    table = np.arange(6.0).reshape(3, 2)
    out = l2_reg(table, np.array([0, 2]))
    assert out.value == 0 + 1 + 16 + 25
    assert out.grad.dense(0, (3, 2)).tolist() == [[0, 2], [0, 0], [8, 10]]


def test_total_loss_composition():
    iset, stack, b = instance(5)
    hyper = CLHyper(tau=0.2, alpha=0.3, lambda1=0.7, lambda2=0.01)
    out = total_loss(stack, b, ContrastScheme.U0_U2, hyper)
    p = out.parts
    assert out.value == pytest.approx(p["bpr"] + 0.7 * p["cl"] + 0.01 * p["reg"])
    base = total_loss(stack, b, ContrastScheme.U0_U2, CLHyper(lambda1=0.0, lambda2=0.01))
    assert base.parts["cl"] == 0.0
    assert base.value == pytest.approx(p["bpr"] + 0.01 * p["reg"])


def test_hyper_validation():
    with pytest.raises(ValueError):
        CLHyper(tau=0)
    with pytest.raises(ValueError):
        CLHyper(alpha=1.5)
    with pytest.raises(ValueError):
        CLHyper(lambda1=-1)


@pytest.mark.parametrize("scheme", [None, *ContrastScheme])
def test_value_only_path_agrees(scheme):
    _, stack, b = instance(9)
    hyper = CLHyper(lambda1=0.3, lambda2=0.01)
    full = total_loss(stack, b, scheme, hyper)
    fast = total_loss(stack, b, scheme, hyper, need_grad=False)
    assert fast.value == full.value and fast.parts == full.parts
    assert fast.grad.keys() == []


def test_hand_values():
    b = TrainBatch(np.array([0]), np.array([0]), np.array([1]))
    tie = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
    assert bpr_loss(tie, b, 1).value == pytest.approx(math.log(2), rel=1e-12)
    margin = np.array([[1.0], [20.0], [0.0]])
    assert bpr_loss(margin, b, 1).value == pytest.approx(2.061153618e-9, rel=1e-8)
    assert cosine_sim(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(1 / math.sqrt(2))

    anchor = np.array([[1.0, 0.0]])
    assert infonce(anchor, np.array([[0.0, 1.0], [0.0, -1.0]]), np.array([0]), 0.1).value == \
        pytest.approx(math.log(2))
    far = infonce(anchor, np.array([[2.0, 0.0], [-3.0, 0.0]]), np.array([0]), 0.1).value
    assert far == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)


def test_infonce_uniform_logits():
    # identical candidates: every logit equal, value = pairs * ln(unique candidates)
    stack = LayerStack([np.ones((7, 3))], 3)
    out = cl_homogeneous(stack, 0, 0, np.array([0, 1, 2, 1]), 0.1)
    assert out.value == pytest.approx(4 * math.log(3))


def test_infonce_large_logit_shift():
    rng = np.random.default_rng(0)
    a, c = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    pos = np.array([0, 2, 4])
    # a 1e-4 temperature shifts every logit by up to 1e4; value must equal the stable reference
    for tau in (1e-3, 1e-4):
        res = infonce(a * 1e6, c * 1e6, pos, tau)
        ref = infonce(a, c, pos, tau)
        assert res.value == pytest.approx(ref.value, rel=1e-9)


def test_infonce_non_negative(rng):
    for _ in range(20):
        a, c = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
        assert infonce(a, c, rng.integers(6, size=4), 0.2).value >= 0.0


def test_one_hop_single_edge_graph_is_zero():
    from l2cl.data import InteractionSet
    iset = InteractionSet(1, 1, [0], [0])
    stack = forward(init_embeddings(1, 1, 3, seed=0), build_operator(iset), 1)
    assert one_hop_cl(stack, np.array([0]), np.array([0]), 0.1, 0.5).value == 0.0


def test_u0_u2_substitution():
    _, stack, b = instance(2)
    same = LayerStack([stack.layers[0], stack.layers[1], stack.layers[0].copy()], stack.num_users)
    got = scheme_loss(ContrastScheme.U0_U2, same, b.users, b.pos_items, 0.1, 0.4).value
    users = cl_homogeneous(same, 0, 0, b.users, 0.1).value
    items = cl_homogeneous(same, 0, 0, b.pos_items + same.num_users, 0.1).value
    assert got == pytest.approx(0.4 * users + 0.6 * items, rel=1e-12)


def test_u0_i1_dispatch_is_one_hop():
    iset, stack, b = instance(6)
    a = scheme_loss(ContrastScheme.U0_I1, stack, b.users, b.pos_items, 0.1, 0.3)
    c = one_hop_cl(stack, b.users, b.pos_items, 0.1, 0.3)
    assert a.value == c.value


def test_total_loss_reductions():
    _, stack, b = instance(8)
    plain = total_loss(stack, b, ContrastScheme.U0_I1, CLHyper(lambda1=0, lambda2=0))
    assert plain.value == bpr_loss(stack.readout, b, stack.num_users).value
    zero = LayerStack([np.zeros_like(l) for l in stack.layers], stack.num_users)
    assert total_loss(zero, b, None, CLHyper(lambda2=1.0)).parts["reg"] == 0.0
