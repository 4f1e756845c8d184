import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cptdst import autodiff as ad
from cptdst.errors import ContractError, NonFiniteError


def leaf(rng, *shape):
    return ad.Tensor(rng.normal(size=shape), requires_grad=True)


def test_square_gradient():
    x = ad.Tensor(3.0, requires_grad=True)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_uniform_cross_entropy_value_and_gradient():
    V = 7
    logits = ad.Tensor(np.zeros((1, V)), requires_grad=True)
    loss = ad.cross_entropy(logits, np.array([2]))
    assert loss.item() == pytest.approx(math.log(V))
    ad.backward(loss)
    expected = np.full(V, 1.0 / V)
    expected[2] -= 1.0
    np.testing.assert_allclose(logits.grad[0], expected, atol=1e-15)


def test_backward_rejects_non_scalar(rng):
    x = leaf(rng, 3)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_backward_rejects_non_finite_loss():
    x = ad.Tensor(np.array([0.0]), requires_grad=True)
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
        ad.backward(ad.tsum(ad.log(x)))


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 2, 2)
    with ad.no_grad():
        y = x @ x
    assert not y.requires_grad


OPS = {
    "add_broadcast": lambda a, b, r: ad.tsum((a + ad.tsum(b, axis=0)) * r),
    "sub_mul": lambda a, b, r: ad.tsum((a - b) * a * r),
    "matmul": lambda a, b, r: ad.tsum((a @ ad.transpose(b, (1, 0))) * ad.Tensor(np.ones((3, 3)))),
    "exp_log": lambda a, b, r: ad.tsum(ad.log(ad.exp(a) + 1.0) * r),
    "tanh_relu_gelu": lambda a, b, r: ad.tsum((ad.tanh(a) + ad.relu(b) + ad.gelu(a)) * r),
    "power": lambda a, b, r: ad.tsum(ad.power(a * a + 1.0, 1.5) * r),
    "softmax": lambda a, b, r: ad.tsum(ad.softmax(a, axis=-1) * r),
    "layer_norm": lambda a, b, r: ad.tsum(ad.layer_norm(a, ad.tsum(b, axis=0) * 0.5 + 1.0, ad.mean(b, axis=0)) * r),
    "concat_gather": lambda a, b, r: ad.tsum(ad.gather_rows(ad.concat([a, b], 0), np.array([[0, 5], [5, 2]])) ** 2),
    "reshape_mean": lambda a, b, r: ad.mean(ad.reshape(a * b, (4, 3)) * ad.reshape(r, (4, 3))),
    "cross_entropy": lambda a, b, r: ad.cross_entropy(a * b, np.array([0, 3, 1]), np.array([1.0, 0.5, 2.0])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_each_op_matches_finite_differences(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    r = ad.Tensor(rng.normal(size=(3, 4)))
    err = ad.finite_difference_check(lambda: OPS[name](a, b, r), [a, b])
    assert err < 1e-6, name


def test_attention_matches_finite_differences(rng):
    q, k, v = leaf(rng, 2, 2, 3, 4), leaf(rng, 2, 2, 5, 4), leaf(rng, 2, 2, 5, 4)
    mask = np.zeros((2, 1, 1, 5))
    mask[1, ..., 3:] = -1e9
    w = ad.Tensor(rng.normal(size=(2, 2, 3, 4)))
    assert ad.finite_difference_check(lambda: ad.tsum(ad.attention(q, k, v, mask) * w), [q, k, v]) < 1e-6


def test_attention_equals_composed_softmax(rng):
    q, k, v = leaf(rng, 1, 2, 3, 4), leaf(rng, 1, 2, 5, 4), leaf(rng, 1, 2, 5, 4)
    fused = ad.attention(q, k, v).data
    scores = (q * 0.5) @ ad.transpose(k, (0, 1, 3, 2))
    composed = (ad.softmax(scores) @ v).data
    np.testing.assert_allclose(fused, composed, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 5))
def test_random_two_layer_network(seed, batch, hidden):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.normal(size=(batch, 3)))
    w1, b1 = leaf(rng, 3, hidden), leaf(rng, hidden)
    w2 = leaf(rng, hidden, 4)
    targets = rng.integers(0, 4, size=batch)
    fn = lambda: ad.cross_entropy(ad.linear(ad.tanh(ad.linear(x, w1, b1)), w2), targets)
    assert ad.finite_difference_check(fn, [w1, b1, w2]) < 1e-4


def test_linear_model_is_exact(rng):
    w = leaf(rng, 5)
    x = rng.normal(size=5)
    assert ad.finite_difference_check(lambda: ad.tsum(w * x), [w]) < 1e-8


def test_finite_difference_rejects_bad_epsilon(rng):
    w = leaf(rng, 2)
    for eps in (0.0, -1e-5, 1e-2):
        with pytest.raises(ContractError):
            ad.finite_difference_check(lambda: ad.tsum(w * w), [w], epsilon=eps)


def test_finite_difference_detects_nondeterminism(rng):
    w = leaf(rng, 2)
    noise = np.random.default_rng(0)
    with pytest.raises(ContractError):
        ad.finite_difference_check(lambda: ad.tsum(w * noise.normal()), [w])


def test_apply_update_plain_step():
    p = ad.Tensor(np.array(1.0), requires_grad=True)
    p.grad = np.array(2.0)
    ad.apply_update([ad.ParamGroup("p", [p])], 0.1)
    assert p.data == pytest.approx(0.8)
    assert p.grad is None


def test_apply_update_two_steps_on_square():
    p = ad.Tensor(np.array(1.0), requires_grad=True)
    group = ad.ParamGroup("p", [p])
    for _ in range(2):
        ad.backward(p * p)
        ad.apply_update([group], 0.1)
    assert p.data == pytest.approx(0.64)


def test_frozen_group_untouched_and_gets_no_grad(rng):
    w, f = leaf(rng, 3), leaf(rng, 3)
    live, frozen = ad.ParamGroup("live", [w]), ad.ParamGroup("frozen", [f], frozen=True)
    before = f.data.tobytes()
    ad.backward(ad.tsum(w * f))
    assert f.grad is None and w.grad is not None
    f.grad = np.ones(3)
    ad.Adam(0.1).step([live, frozen])
    assert f.data.tobytes() == before
    assert f.grad is None


def test_missing_gradient_on_live_group(rng):
    w = leaf(rng, 3)
    with pytest.raises(ContractError):
        ad.apply_update([ad.ParamGroup("w", [w])], 0.1)


def test_adam_first_step_oracle():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = np.array([0.5, -4.0])
    p.grad = g.copy()
    ad.Adam(0.01, clip_norm=None).step([ad.ParamGroup("p", [p])])
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01], atol=1e-9)


def test_clipping_bounds_global_norm():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    ad.SGD(1.0, clip_norm=1.0).step([ad.ParamGroup("p", [p])])
    np.testing.assert_allclose(p.data, [-0.6, -0.8])


def test_loss_is_deterministic(rng):
    x = rng.normal(size=(4, 6))
    w = leaf(rng, 6, 3)
    run = lambda: ad.cross_entropy(ad.Tensor(x) @ w, np.array([0, 1, 2, 0])).item()
    assert run() == run()
