import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from l2cl.toy import random_bipartite, toy_interactions, toy_split  # noqa: E402


@pytest.fixture
def toy():
    return toy_interactions()


@pytest.fixture
def toy_data():
    return toy_split()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_instance(seed, num_users=5, num_items=7, density=0.4):
    return random_bipartite(num_users, num_items, density, np.random.default_rng(seed))


def objective_fixture(seed, scheme, num_users=5, num_items=7, dim=4, batch=6):
    """A random toy instance with a fixed batch, and closures for the full objective.

    Returns (loss_fn, grad_fn, weight) where loss_fn(weight) -> float and
    grad_fn(weight) -> dense gradient w.r.t. the layer-0 table.
    """
    from l2cl.data import NegativeSampler
    from l2cl.graph import build_operator
    from l2cl.losses import CLHyper
    from l2cl.losses import total_loss
    from l2cl.model import forward, init_embeddings
    from l2cl.optim import backward

    iset = make_instance(seed, num_users, num_items)
    op = build_operator(iset)
    rng = np.random.default_rng(seed)
    b = NegativeSampler(iset).sample(batch, rng)
    depth = max(scheme.required_depth, 1) if scheme is not None else 2
    hyper = CLHyper(tau=float(rng.choice([0.1, 0.2, 0.5])), alpha=float(rng.uniform()),
                    lambda1=0.5 if scheme is not None else 0.0, lambda2=0.01)
    weight = init_embeddings(num_users, num_items, dim, seed=seed).weight

    def loss_fn(w):
        return total_loss(forward(w, op, depth), b, scheme, hyper, train=iset, need_grad=False).value

    def grad_fn(w):
        out = total_loss(forward(w, op, depth), b, scheme, hyper, train=iset)
        rows, vals = backward(op, depth, out.grad, dim)
        dense = np.zeros_like(w)
        dense[rows] = vals
        return dense

    return loss_fn, grad_fn, weight


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
