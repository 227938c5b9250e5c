import numpy as np
import pytest

from cgcd import autodiff as ad


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(3))
def test_primitive_chain_matches_numeric(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 5))

    def loss_of(warr):
        x = ad.leaf(warr)
        y = ad.normalize_rows(x)
        z = ad.softmax_rows(ad.matmul(y, ad.transpose(y)) * 2.0)
        return ad.nsum(ad.log(z) * ad.exp(y @ ad.constant(rng2_w))).item()

    rng2_w = np.random.default_rng(99).standard_normal((5, 4))

    def analytic(warr):
        x = ad.leaf(warr)
        y = ad.normalize_rows(x)
        z = ad.softmax_rows(ad.matmul(y, ad.transpose(y)) * 2.0)
        loss = ad.nsum(ad.log(z) * ad.exp(y @ ad.constant(rng2_w)))
        ad.backward(loss)
        return x.grad

    a = analytic(w.copy())
    n = numeric_grad(lambda arr: loss_of(arr), w.copy())
    assert np.allclose(a, n, rtol=1e-5, atol=1e-7)


def test_broadcast_add_unbroadcasts_bias():
    x = ad.leaf(np.ones((3, 4)))
    b = ad.leaf(np.arange(4.0))
    loss = ad.nsum((x + b) * 2.0)
    ad.backward(loss)
    assert b.grad.shape == (4,)
    assert np.array_equal(b.grad, np.full(4, 6.0))


def test_take_cols_scatters_gradient():
    x = ad.leaf(np.arange(12.0).reshape(3, 4))
    loss = ad.nsum(ad.take_cols(x, 1, 3))
    ad.backward(loss)
    expected = np.zeros((3, 4))
    expected[:, 1:3] = 1.0
    assert np.array_equal(x.grad, expected)


def test_stop_grad_blocks_backward():
    x = ad.leaf(np.array([1.0, 2.0]))
    loss = ad.nsum(ad.stop_grad(x) * x)
    ad.backward(loss)
    assert np.array_equal(x.grad, np.array([1.0, 2.0]))  # only the live branch


def test_normalize_rejects_zero_vector():
    with pytest.raises(ad.DegenerateVectorError):
        ad.normalize_rows(ad.constant(np.zeros((1, 3))))


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.backward(ad.constant(np.ones(3)))


def test_shared_subexpression_accumulates():
    x = ad.leaf(np.array([3.0]))
    y = x * x  # dy/dx = 2x via two paths
    ad.backward(ad.nsum(y))
    assert np.allclose(x.grad, [6.0])
