import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from matgen import ndmath as nd

shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3)


def test_broadcast_shape_trailing_rule():
    assert nd.broadcast_shape((3, 1, 5), (4, 5)) == (3, 4, 5)
    assert nd.broadcast_shape((), (2, 3)) == (2, 3)


def test_broadcast_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        nd.broadcast_shape((2, 3), (4,))


@given(shapes, shapes, shapes)
def test_broadcast_associative(a, b, c):
    try:
        left = nd.broadcast_shape(nd.broadcast_shape(a, b), c)
    except ValueError:
        left = None
    try:
        right = nd.broadcast_shape(a, nd.broadcast_shape(b, c))
    except ValueError:
        right = None
    assert left == right


def test_elementwise_identities():
    x = nd.tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert torch.equal(nd.elementwise(x, torch.zeros_like(x), "add"), x)
    assert torch.equal(nd.elementwise(x, torch.ones_like(x), "mul"), x)
    with pytest.raises(ValueError):
        nd.elementwise(x, x, "div")


def test_square_gradient():
    x = nd.tensor([1.0, 2.0, 3.0], requires_grad=True)
    nd.elementwise(x, x, "mul").sum().backward()
    assert torch.equal(x.grad, torch.tensor([2.0, 4.0, 6.0], dtype=nd.DTYPE))


def test_shared_subexpression_accumulates():
    x = nd.tensor([0.3, -1.2], requires_grad=True)
    g = torch.tanh(x)
    (g + g).sum().backward()
    expected = 2 * (1 - torch.tanh(x.detach()) ** 2)
    assert torch.allclose(x.grad, expected, rtol=0, atol=1e-15)


def test_matmul_identity_and_errors():
    a = nd.tensor(np.arange(12.0).reshape(3, 4))
    assert torch.equal(nd.matmul(a, torch.eye(4, dtype=nd.DTYPE)), a)
    assert torch.equal(nd.matmul(torch.eye(3, dtype=nd.DTYPE), a), a)
    with pytest.raises(ValueError, match="inner"):
        nd.matmul(a, a)


@pytest.mark.parametrize("seed", range(10))
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = nd.tensor(rng.normal(size=(4, 4))), nd.tensor(rng.normal(size=(4, 4)))
    assert nd.grad_check(lambda x: nd.matmul(x, b).sin().sum(), a, eps=1e-4) < 1e-5
    assert nd.grad_check(lambda x: nd.matmul(a, x).sin().sum(), b, eps=1e-4) < 1e-5


def test_conv2d_sizes_and_identity():
    x = nd.tensor(np.random.default_rng(1).normal(size=(1, 2, 8, 8)))
    ident = torch.zeros(2, 2, 1, 1, dtype=nd.DTYPE)
    ident[0, 0] = ident[1, 1] = 1.0
    assert torch.equal(nd.conv2d(x, ident), x)
    k = nd.tensor(np.ones((3, 2, 4, 4)))
    assert nd.conv2d(x, k, stride=2, pad=1).shape == (1, 3, 4, 4)
    assert nd.conv_output_size(8, 4, 2, 1) == 4


def test_conv2d_rejects_empty_output():
    x = torch.zeros(1, 1, 2, 2, dtype=nd.DTYPE)
    with pytest.raises(ValueError):
        nd.conv2d(x, torch.zeros(1, 1, 3, 3, dtype=nd.DTYPE))


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    x = nd.tensor(rng.normal(size=(1, 1, 5, 5)))
    k = nd.tensor(rng.normal(size=(2, 1, 3, 3)))
    assert nd.grad_check(lambda w: (nd.conv2d(x, w, 1, 1) ** 2).sum(), k) < 1e-4
    assert nd.grad_check(lambda v: (nd.conv2d(v, k, 2, 1) ** 2).sum(), x) < 1e-4


def test_softmax_values():
    out = nd.softmax(nd.tensor([2.0, 2.0, 2.0, 2.0]))
    assert torch.allclose(out, torch.full((4,), 0.25, dtype=nd.DTYPE), atol=1e-15)
    sat = nd.softmax(nd.tensor([1000.0, 0.0]))
    assert torch.isfinite(sat).all()
    assert abs(sat[0].item() - 1.0) < 1e-9 and sat[1].item() < 1e-9
    with pytest.raises(ValueError):
        nd.softmax(nd.tensor([1.0]), axis=3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_distribution(values):
    out = nd.softmax(nd.tensor(values))
    assert (out >= 0).all() and (out <= 1).all()
    assert abs(out.sum().item() - 1.0) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    x = nd.tensor(rng.normal(size=(3, 5)))
    w = nd.tensor(rng.normal(size=(3, 5)))
    assert nd.grad_check(lambda v: (nd.softmax(v, axis=1) * w).sum(), x) < 1e-5


def test_grad_check_oracles():
    x = nd.tensor(np.random.default_rng(3).normal(size=6))
    assert nd.grad_check(lambda v: (v**2).sum(), x) < 1e-7
    assert nd.grad_check(lambda v: v.sum() * 0 + 3.0, x) == 0.0
    with pytest.raises(ValueError, match="finite"):
        nd.grad_check(lambda v: v.sum() / 0.0, x)


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, v):
            return (v**2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(6, dtype=nd.DTYPE)

    x = nd.tensor(np.linspace(0.5, 2.0, 6))
    assert nd.grad_check(Wrong.apply, x) > 0.1


def test_ops_deterministic():
    rng = np.random.default_rng(5)
    x, k = nd.tensor(rng.normal(size=(1, 2, 6, 6))), nd.tensor(rng.normal(size=(3, 2, 3, 3)))
    assert torch.equal(nd.conv2d(x, k, 1, 1), nd.conv2d(x, k, 1, 1))
