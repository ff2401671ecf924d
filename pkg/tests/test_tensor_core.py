import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reaps.tensor_core import (
    SGD,
    LSTMParams,
    OptimizerState,
    ShapeError,
    Tensor,
    avg_pool_rect,
    backward,
    bilinear_resize,
    conv2d,
    global_avg_pool,
    gradcheck,
    linear,
    lstm_cell,
    max_pool2d,
    no_grad,
    relu,
    sgd_momentum_step,
    softmax_cross_entropy,
)
from reaps.tensor_core import nn as nn_mod
from reaps.tensor_core.gradcheck import relative_error

from oracles import (
    avg_pool_loops,
    bilinear_pixel,
    conv2d_loops,
    lstm_step_scalar,
    matmul_loops,
    max_pool_loops,
    softmax_ce_loops,
    spatial_sum_loops,
)


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a), requires_grad=True, dtype=dtype)


# ---- autodiff engine -------------------------------------------------------


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    y = x * x + x * 3.0
    y.sum().backward()
    assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)


def test_backward_twice_accumulates_into_leaves():
    x = leaf([1.0, 2.0])
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_non_scalar_backward_needs_explicit_grad():
    x = leaf(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        backward(x * 2.0)
    backward(x * 2.0, grad=np.ones((2, 2)))
    np.testing.assert_allclose(x.grad, 2.0)


def test_detach_stops_gradient():
    x = leaf([3.0])
    y = x.detach() * x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(3.0)  # only the non-detached factor contributes


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert y._ctx is None and not y.requires_grad


def test_deep_chain_does_not_recurse():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        leaf(np.ones((2, 3))) @ leaf(np.ones((4, 5)))


# ---- forward values against loop oracles -----------------------------------

CONV_CASES = [
    ((2, 3, 6, 5), (4, 3, 3, 3), 1, 1),
    ((1, 2, 7, 7), (3, 2, 3, 3), 2, 0),
    ((3, 1, 5, 8), (2, 1, 3, 3), 1, 0),
    ((1, 4, 4, 4), (5, 4, 3, 3), 2, 1),
]


@pytest.mark.parametrize("xs,ws,stride,pad", CONV_CASES)
def test_conv2d_matches_loops(xs, ws, stride, pad):
    rng = np.random.default_rng(hash((xs, ws)) % 2**32)
    x, w, b = rng.normal(size=xs), rng.normal(size=ws), rng.normal(size=ws[0])
    got = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), stride, pad)
    np.testing.assert_allclose(got.data, conv2d_loops(x, w, b, stride, pad), atol=1e-10)


def test_conv2d_float32_within_oracle_tolerance():
    rng = np.random.default_rng(3)
    x, w, b = rng.uniform(0, 1, (2, 16, 8, 8)), rng.normal(0, 0.1, (8, 16, 3, 3)), rng.normal(size=8)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    assert got.dtype == np.float32
    assert np.abs(got - conv2d_loops(x, w, b, 1, 1)).max() <= 1e-5


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("shape,k,stride", [((2, 3, 6, 6), 2, 2), ((1, 2, 7, 5), 3, 2), ((2, 1, 4, 6), 2, 1)])
def test_max_pool_matches_loops(shape, k, stride):
    x = np.random.default_rng(1).normal(size=shape)
    got = max_pool2d(Tensor(x, dtype=np.float64), k, stride).data
    np.testing.assert_array_equal(got, max_pool_loops(x, k, stride))


def test_max_pool_tie_routes_gradient_to_first_max():
    x = leaf(np.array([[[[1.0, 1.0], [0.0, 1.0]]]]))
    max_pool2d(x, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


@pytest.mark.parametrize("shape", [(2, 3, 4, 5), (1, 8, 8, 8), (3, 1, 2, 7)])
def test_global_pool_matches_loops(shape):
    x = np.random.default_rng(2).normal(size=shape)
    s = global_avg_pool(Tensor(x, dtype=np.float64), "sum").data
    m = global_avg_pool(Tensor(x, dtype=np.float64), "mean").data
    np.testing.assert_allclose(s, spatial_sum_loops(x), atol=1e-12)
    np.testing.assert_allclose(m, spatial_sum_loops(x) / (shape[2] * shape[3]), atol=1e-12)


@pytest.mark.parametrize("shape,kh,kw", [((3, 4, 8), 4, 1), ((2, 8, 8), 8, 2), ((5, 2, 6), 1, 3)])
def test_avg_pool_rect_matches_loops(shape, kh, kw):
    x = np.random.default_rng(4).normal(size=shape)
    got = avg_pool_rect(Tensor(x[None], dtype=np.float64), kh, kw).data[0]
    np.testing.assert_allclose(got, avg_pool_loops(x, kh, kw), atol=1e-12)


def test_avg_pool_rect_divisibility():
    with pytest.raises(ShapeError):
        avg_pool_rect(Tensor(np.zeros((1, 1, 4, 6))), 4, 4)


@pytest.mark.parametrize("n,d,k", [(3, 5, 2), (1, 7, 4), (6, 2, 3)])
def test_linear_matches_loops(n, d, k):
    rng = np.random.default_rng(n * d * k)
    x, w, b = rng.normal(size=(n, d)), rng.normal(size=(d, k)), rng.normal(size=k)
    got = linear(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(got, matmul_loops(x, w) + b, atol=1e-12)


def test_softmax_ce_matches_loops_and_is_shift_invariant():
    rng = np.random.default_rng(5)
    z, y = rng.normal(0, 3, (4, 6)), np.array([0, 5, 2, 2])
    got = float(softmax_cross_entropy(Tensor(z, dtype=np.float64), y).data)
    assert got == pytest.approx(softmax_ce_loops(z, y), abs=1e-12)
    shifted = float(softmax_cross_entropy(Tensor(z + 1000.0, dtype=np.float64), y).data)
    assert shifted == pytest.approx(got, abs=1e-9)


def test_softmax_ce_huge_logits_stay_finite():
    z = Tensor(np.array([[1e4, -1e4, 0.0]]), dtype=np.float32)
    assert np.isfinite(softmax_cross_entropy(z, [1]).data)


def test_softmax_ce_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@pytest.mark.parametrize("shape,out", [((2, 4, 5), (7, 9)), ((1, 6, 6), (3, 3)), ((3, 5, 2), (5, 8))])
def test_bilinear_matches_pixel_oracle(shape, out):
    x = np.random.default_rng(6).uniform(size=shape)
    got = bilinear_resize(Tensor(x, dtype=np.float64), *out).data
    np.testing.assert_allclose(got, bilinear_pixel(x, *out), atol=1e-12)


def test_bilinear_identity_and_constant():
    x = np.random.default_rng(7).uniform(size=(2, 5, 6))
    np.testing.assert_allclose(bilinear_resize(Tensor(x, dtype=np.float64), 5, 6).data, x, atol=1e-12)
    c = np.full((1, 3, 4), 0.25)
    np.testing.assert_allclose(bilinear_resize(Tensor(c, dtype=np.float64), 9, 2).data, 0.25, atol=1e-12)


def test_lstm_cell_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    d, h = 3, 2
    p = LSTMParams.init(d, h, rng, np.float64)
    x, h0, c0 = rng.normal(size=(1, d)), rng.normal(size=(1, h)), rng.normal(size=(1, h))
    h1, c1 = lstm_cell(Tensor(x, dtype=np.float64), Tensor(h0, dtype=np.float64), Tensor(c0, dtype=np.float64), p)
    eh, ec = lstm_step_scalar(x[0], h0[0], c0[0], p.w_x.data, p.w_h.data, p.b.data)
    np.testing.assert_allclose(h1.data[0], eh, atol=1e-12)
    np.testing.assert_allclose(c1.data[0], ec, atol=1e-12)


def test_lstm_zero_weights_give_half_gated_state():
    p = LSTMParams(*(Tensor(np.zeros(s), dtype=np.float64) for s in [(2, 8), (2, 8), (8,)]))
    h, c = lstm_cell(*(Tensor(np.zeros((1, 2)), dtype=np.float64) for _ in range(3)), p)
    np.testing.assert_array_equal(c.data, 0.0)
    np.testing.assert_array_equal(h.data, 0.0)


# ---- gradients --------------------------------------------------------------


def test_gradcheck_relu_away_from_kink():
    x = np.array([-1.5, -0.2, 0.3, 2.0])
    rep = gradcheck(lambda t: (relu(t) * relu(t)).sum(), [x])
    assert rep.passed, str(rep)


def test_relative_error_floor():
    err = relative_error(np.array([1e-12]), np.array([-1e-12]), floor=1e-5)
    assert err[0] < 1e-6


def test_gradcheck_negative_control(monkeypatch):
    """A deliberately wrong backward must be caught."""
    original = nn_mod.Linear.backward

    def broken(self, grad):
        gx, gw, gb = original(self, grad)
        return gx, gw * 1.01, gb

    monkeypatch.setattr(nn_mod.Linear, "backward", broken)
    rng = np.random.default_rng(0)
    inputs = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)]
    rep = gradcheck(lambda x, w, b: (linear(x, w, b) * linear(x, w, b)).sum(), inputs)
    assert not rep.passed
    assert rep.max_rel_error[1] > 1e-3


def test_registry_all_pass():
    from reaps.verify import registry, run_checks

    checks = [c for c in registry() if "graph" not in c.name]
    results = run_checks(checks)
    bad = [(r.name, r.worst) for r in results if not r.passed]
    assert not bad


def test_registry_catches_injected_conv_bug(monkeypatch):
    from reaps.verify import registry, run_checks

    original = nn_mod.Conv2d.backward

    def broken(self, grad):
        gx, gw, gb = original(self, grad)
        return gx, gw, gb * 0.0

    monkeypatch.setattr(nn_mod.Conv2d, "backward", broken)
    results = run_checks([c for c in registry() if c.name == "conv2d(pad1)"])
    assert not results[0].passed


# ---- optimizer ----------------------------------------------------------------


def test_sgd_first_step_is_plain_gradient_step():
    p = leaf([1.0, -2.0])
    p.grad = np.array([0.5, 1.0])
    sgd_momentum_step({"p": p}, OptimizerState(learning_rate=0.1))
    np.testing.assert_allclose(p.data, [0.95, -2.1])


def test_sgd_momentum_two_step_recurrence():
    p = leaf([0.0])
    opt = SGD({"p": p}, lr=0.1, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    assert p.data[0] == pytest.approx(-0.29)


def test_sgd_zero_momentum_is_plain_sgd():
    p = leaf([1.0])
    opt = SGD({"p": p}, lr=0.5, momentum=0.0)
    for g in (1.0, 2.0):
        p.grad = np.array([g])
        opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.5 * 3.0)


def test_sgd_skips_params_without_grad():
    p, q = leaf([1.0]), leaf([1.0])
    p.grad = np.array([1.0])
    opt = SGD({"p": p, "q": q}, lr=0.1)
    opt.step()
    assert q.data[0] == 1.0 and "q" not in opt.state.velocity


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0.0}, {"learning_rate": 0.1, "momentum": 1.0}])
def test_optimizer_state_validates(kwargs):
    with pytest.raises(ValueError):
        OptimizerState(**kwargs)


# ---- properties ----------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(1, 6), w=st.integers(1, 6), oh=st.integers(1, 9), ow=st.integers(1, 9), seed=st.integers(0, 999)
)
def test_bilinear_convexity(h, w, oh, ow, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (1, h, w))
    y = bilinear_resize(Tensor(x, dtype=np.float64), oh, ow).data
    assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12


@settings(max_examples=25, deadline=None)
@given(b=st.integers(1, 3), c=st.integers(1, 3), hw=st.integers(2, 6), seed=st.integers(0, 999))
def test_max_pool_output_is_an_input_element(b, c, hw, seed):
    x = np.random.default_rng(seed).normal(size=(b, c, hw, hw))
    y = max_pool2d(Tensor(x, dtype=np.float64), 2).data
    assert np.isin(y, x).all()


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 5), k=st.integers(2, 6), seed=st.integers(0, 999))
def test_ce_gradient_rows_sum_to_zero(n, k, seed):
    rng = np.random.default_rng(seed)
    z = leaf(rng.normal(size=(n, k)))
    softmax_cross_entropy(z, rng.integers(0, k, n)).backward()
    np.testing.assert_allclose(z.grad.sum(axis=1), 0.0, atol=1e-12)
