import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cada import nn
from cada.nn import Tensor

from .gradcheck import numeric_grad, rel_err


def naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[a, c, i * stride + p, j * stride + q] * w[o, c, p, q]
                    out[a, o, i, j] = acc
    return out


# conv2d ---------------------------------------------------------------------------

def test_conv_identity():
    out = nn.conv2d(Tensor([[[[5.0]]]]), Tensor([[[[1.0]]]]), Tensor([0.0]))
    assert out.data.tolist() == [[[[5.0]]]]


def test_conv_sum():
    out = nn.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_matches_loop_oracle(f64, rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = nn.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1)
    ref = naive_conv(x, w, b, 2, 1)
    assert out.shape == ref.shape == (1, 3, 3, 3)
    assert np.abs(out.data - ref).max() < 1e-5


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="channel"):
        nn.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="larger"):
        nn.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.integers(1, 5),
       stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_shape_law(h, w, k, stride, pad):
    if k > h + 2 * pad or k > w + 2 * pad:
        return
    out = nn.conv2d(Tensor(np.zeros((2, 1, h, w))), Tensor(np.zeros((3, 1, k, k))), Tensor(np.zeros(3)),
                    stride=stride, pad=pad)
    assert out.shape == (2, 3, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


# pooling / upsampling ---------------------------------------------------------------

def test_pool_max_avg_small():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert nn.pool2d(x, 2, "max").data.item() == 4.0
    assert nn.pool2d(x, 2, "avg").data.item() == 2.5


def test_pool_matches_window_scan(rng):
    x = rng.normal(size=(1, 1, 8, 8))
    out = nn.pool2d(Tensor(x), 4, "max").data
    ref = np.array([[x[0, 0, i:i + 4, j:j + 4].max() for j in (0, 4)] for i in (0, 4)])
    assert np.array_equal(out[0, 0], ref.astype(out.dtype))


def test_pool_rejects_non_divisible():
    with pytest.raises(ValueError):
        nn.pool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)


@settings(max_examples=30, deadline=None)
@given(k=st.sampled_from([1, 2, 4, 8]), mult_h=st.integers(1, 4), mult_w=st.integers(1, 4))
def test_pool_shape_law(k, mult_h, mult_w):
    out = nn.pool2d(Tensor(np.zeros((1, 2, k * mult_h, k * mult_w))), k, "max")
    assert out.shape == (1, 2, mult_h, mult_w)


def test_max_pool_routes_gradient_to_argmax():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    nn.pool2d(x, 2, "max").sum().backward()
    assert x.grad.tolist() == [[[[0, 0], [0, 1]]]]
    y = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    nn.pool2d(y, 2, "avg").sum().backward()
    assert np.allclose(y.grad, 0.25)


def test_upsample_examples(rng):
    assert nn.upsample2d(Tensor([[[[1.0]]]]), 2).data.tolist() == [[[[1, 1], [1, 1]]]]
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert np.array_equal(nn.upsample2d(x, 1).data, x.data)
    r = rng.normal(size=(1, 1, 3, 3))
    up = nn.upsample2d(Tensor(r), 3).data
    for i in range(9):
        for j in range(9):
            assert up[0, 0, i, j] == np.float32(r[0, 0, i // 3, j // 3])


# batch norm --------------------------------------------------------------------------

def _bn(x, gamma, beta, mode="train"):
    c = x.shape[1]
    rm, rv = np.zeros(c), np.ones(c)
    return nn.batch_norm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, mode=mode), rm, rv


def test_bn_constant_input_is_zero():
    out, _, _ = _bn(np.full((2, 3, 4, 4), 7.0), np.ones(3), np.zeros(3))
    assert np.all(out.data == 0)


def test_bn_affine_shift(f64, rng):
    x = rng.normal(size=(4, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out, _, _ = _bn(x, np.ones(2), np.full(2, 5.0))
    assert np.abs(out.data.mean(axis=(0, 2, 3)) - 5.0).max() < 1e-4


def test_bn_statistics(f64, rng):
    x = rng.normal(3.0, 2.5, size=(4, 3, 6, 6))
    out, rm, rv = _bn(x, np.ones(3), np.zeros(3))
    assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.data.var(axis=(0, 2, 3)) - 1).max() < 1e-3
    # running stats moved by momentum 0.1 toward the batch statistics
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    m = 4 * 36
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_bn_eval_uses_running_stats(f64, rng):
    x = rng.normal(size=(2, 2, 3, 3))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 9.0])
    out = nn.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, mode="eval")
    ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    assert np.allclose(out.data, ref)
    assert rm.tolist() == [1.0, -1.0]


def test_bn_needs_two_values_in_train():
    with pytest.raises(ValueError):
        _bn(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2))


# pointwise ----------------------------------------------------------------------------

def test_pointwise_values():
    assert nn.relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    assert nn.leaky_relu(Tensor([-10.0])).data.item() == pytest.approx(-2.0)
    assert nn.sigmoid(Tensor([0.0])).data.item() == 0.5
    assert nn.pointwise(Tensor([-10.0]), "leaky_relu").data.item() == pytest.approx(-2.0)


def test_no_overflow_on_large_inputs():
    x = Tensor(np.array([-1e3, -50.0, 0.0, 50.0, 1e3]))
    assert np.all(np.isfinite(nn.sigmoid(x).data))
    assert np.isfinite(nn.bce_logits_loss(x, 0).item())
    assert np.isfinite(nn.bce_logits_loss(x, 1).item())
    logits = Tensor(np.array([1e3, -1e3, 0.0]).reshape(1, 3, 1, 1))
    assert np.isfinite(nn.softmax_ce_loss(logits, np.array([[[1]]])).item())
    assert np.all(np.isfinite(nn.softmax(logits).data))


# losses ---------------------------------------------------------------------------------

def test_ce_uniform_and_confident():
    logits = Tensor(np.zeros((1, 3, 2, 2)))
    assert nn.softmax_ce_loss(logits, np.zeros((1, 2, 2), int)).item() == pytest.approx(math.log(3), abs=1e-6)
    big = np.zeros((1, 3, 1, 1))
    big[0, 1] = 60.0
    assert nn.softmax_ce_loss(Tensor(big), np.array([[[1]]])).item() < 1e-12


def test_ce_matches_pixel_sum(f64, rng):
    logits = rng.normal(size=(2, 3, 4, 4))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    total = 0.0
    for n in range(2):
        for i in range(4):
            for j in range(4):
                z = logits[n, :, i, j]
                total += -(z[labels[n, i, j]] - math.log(sum(math.exp(v) for v in z)))
    assert abs(nn.softmax_ce_loss(Tensor(logits), labels).item() - total / 32) < 1e-5


def test_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        nn.softmax_ce_loss(Tensor(np.zeros((1, 3, 1, 1))), np.array([[[3]]]))


def test_mse_examples(f64, rng):
    assert nn.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert nn.mse_loss(Tensor([0.0, 0.0]), Tensor([1.0, 3.0])).item() == 5.0
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ref = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / 12
    assert nn.mse_loss(Tensor(a), Tensor(b)).item() == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        nn.mse_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_bce_examples(f64, rng):
    zeros = Tensor(np.zeros((2, 1, 3, 3)))
    assert abs(nn.bce_logits_loss(zeros, 0).item() - math.log(2)) < 1e-7
    assert abs(nn.bce_logits_loss(zeros, 1).item() - math.log(2)) < 1e-7
    assert nn.bce_logits_loss(Tensor(np.full(4, 50.0)), 1).item() < 1e-20
    x = rng.normal(0, 3, size=(2, 1, 4, 4))
    s = 1 / (1 + np.exp(-x))
    assert abs(nn.bce_logits_loss(Tensor(x), 0).item() - np.mean(-np.log(1 - s))) < 1e-5


def test_bce_zero_logits_float32():
    with nn.precision(np.float32):
        v = nn.bce_logits_loss(Tensor(np.zeros(7)), 1).item()
    assert abs(v - math.log(2)) < 1e-7


# backward -------------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    w = Tensor(np.zeros((2, 3)), requires_grad=True)
    w.sum().backward()
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_backward_quadratic():
    w = Tensor([2.0], requires_grad=True)
    nn.mse_loss(w, Tensor([0.0])).backward()
    assert w.grad.tolist() == [4.0]


def test_backward_accumulates_and_needs_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    w.sum().backward()
    w.sum().backward()
    assert w.grad.tolist() == [2.0, 2.0]
    with pytest.raises(ValueError):
        (w * 2.0).backward()


def test_nonfinite_is_an_error():
    with pytest.raises(FloatingPointError):
        Tensor([1.0]) * np.inf


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with nn.no_grad():
        y = w * 3.0
    assert not y.requires_grad


def test_two_layer_conv_net_gradients(f64, rng):
    x = rng.normal(size=(2, 2, 6, 6))
    ps = nn.ParamSet()
    ps.add("w1", rng.normal(size=(3, 2, 3, 3)) * 0.5)
    ps.add("b1", rng.normal(size=3) * 0.1)
    ps.add("g", rng.uniform(0.5, 1.5, size=3))
    ps.add("be", rng.normal(size=3) * 0.1)
    ps.add("w2", rng.normal(size=(2, 3, 4, 4)) * 0.5)
    ps.add("b2", rng.normal(size=2) * 0.1)
    labels = rng.integers(0, 2, size=(2, 3, 3))

    def loss_tensor():
        h = nn.conv2d(Tensor(x), ps["w1"], ps["b1"], stride=1, pad=1)
        h = nn.batch_norm2d(h, ps["g"], ps["be"], np.zeros(3), np.ones(3))
        h = nn.leaky_relu(h)
        h = nn.pool2d(h, 2, "avg")
        h = nn.upsample2d(h, 2)
        h = nn.conv2d(h, ps["w2"], ps["b2"], stride=2, pad=1)
        return nn.softmax_ce_loss(h, labels) + nn.bce_logits_loss(h, 1) * 0.5

    ps.zero_grad()
    loss_tensor().backward()
    for name, t in ps.items():
        fd = numeric_grad(lambda: loss_tensor().item(), t.data)
        if name == "b1":
            # a bias feeding batch norm cancels out of the normalized output
            assert np.abs(t.grad).max() < 1e-12 and np.abs(fd).max() < 1e-8
        else:
            assert rel_err(t.grad, fd) < 1e-3, name


# optimizers / schedule ----------------------------------------------------------------

def _single(value, grad):
    ps = nn.ParamSet()
    ps.add("w", np.array([value]))
    ps["w"].grad = np.array([grad])
    return ps


def test_sgd_step(f64):
    ps = _single(1.0, 2.0)
    nn.opt_step(ps, nn.sgd(0.1, momentum=0.0), 0.1)
    assert ps["w"].data.item() == pytest.approx(0.8)
    assert ps.step == 1


def test_sgd_momentum_accumulates(f64):
    ps = _single(0.0, 1.0)
    st_ = nn.sgd(1.0, momentum=0.9)
    nn.opt_step(ps, st_, 1.0)
    nn.opt_step(ps, st_, 1.0)
    assert ps["w"].data.item() == pytest.approx(-(1 + 1.9))


@pytest.mark.parametrize("g", [1e-3, 1.0, 250.0, -7.0])
def test_adam_first_step_closed_form(f64, g):
    ps = _single(0.5, g)
    nn.opt_step(ps, nn.adam(0.01), 0.01)
    # bias-corrected first step moves by lr * g / (|g| + eps)
    expected = 0.5 - 0.01 * g / (abs(g) + 1e-8)
    assert abs(ps["w"].data.item() - expected) < 1e-6


def test_zero_lr_is_identity(f64):
    for state in (nn.sgd(0.1), nn.adam(0.1)):
        ps = _single(3.0, 5.0)
        nn.opt_step(ps, state, 0.0)
        assert ps["w"].data.item() == 3.0


def test_missing_grad_is_an_error():
    ps = nn.ParamSet()
    ps.add("w", np.zeros(2))
    with pytest.raises(ValueError):
        nn.opt_step(ps, nn.sgd(0.1), 0.1)


def test_poly_lr():
    assert nn.poly_lr(1e-4, 0, 100) == 1e-4
    assert nn.poly_lr(1e-4, 100, 100) == 0.0
    assert nn.poly_lr(1e-4, 50, 100) == pytest.approx(5.359e-5, rel=1e-3)
    assert nn.poly_lr(1e-4, 50, 100) == pytest.approx(1e-4 * 0.5 ** 0.9, rel=1e-12)
    with pytest.raises(ValueError):
        nn.poly_lr(1e-4, 101, 100)


def test_paramset_names_unique_and_ordered():
    ps = nn.ParamSet()
    ps.add("b", np.zeros(1))
    ps.add("a", np.zeros(1))
    assert list(ps) == ["b", "a"]
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(1))


def test_determinism(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    a = nn.conv2d(Tensor(x), Tensor(w), pad=1).data
    b = nn.conv2d(Tensor(x), Tensor(w), pad=1).data
    assert a.tobytes() == b.tobytes()
