import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _helpers import naive_conv1d, numeric_grad, rel_err
from tuckersfda.layers import (
    AdaptiveAvgPool1d, BatchNorm1d, Context, Conv1d, Dropout, FactorizedConv1d, FactorizedLinear,
    Flatten, Linear, MacCounter, MaxPool1d, ReLU, conv1d, factorized_conv1d,
)
from tuckersfda.tensor import TuckerFactors, multi_mode_product, reconstruct


def orth(rng, rows, cols):
    return np.linalg.qr(rng.normal(size=(rows, cols)))[0][:, :cols]


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2), (1, 3)])
def test_conv1d_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 11))
    w = rng.normal(size=(4, 3, 3))
    got, _ = conv1d(x, w, stride, padding)
    np.testing.assert_allclose(got, naive_conv1d(x, w, stride, padding), atol=1e-12)


def test_conv1d_channel_mismatch():
    with pytest.raises(ValueError):
        conv1d(np.zeros((1, 2, 5)), np.zeros((1, 3, 2)))
    with pytest.raises(ValueError):
        conv1d(np.zeros((1, 2, 2)), np.zeros((1, 2, 5)))


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(1, 3),
       st.integers(0, 2), st.booleans(), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_factorized_conv_equals_reconstructed_kernel(n, c_in, c_out, k, stride, pad, with_v2, seed):
    rng = np.random.default_rng(seed)
    r_out = rng.integers(1, c_out + 1)
    r_in = rng.integers(1, c_in + 1) if with_v2 else c_in
    core = rng.normal(size=(r_out, r_in, k))
    v1 = rng.normal(size=(c_out, r_out))
    v2 = rng.normal(size=(c_in, r_in)) if with_v2 else None
    x = rng.normal(size=(n, c_in, k + 6))
    got, _ = factorized_conv1d(x, core, v1, v2, None, stride, pad)
    w = reconstruct(TuckerFactors(core, [v1, v2, None]))
    want, _ = conv1d(x, w, stride, pad)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_identity_factors_reduce_to_plain_conv():
    rng = np.random.default_rng(1)
    core = rng.normal(size=(3, 2, 4))
    layer = FactorizedConv1d("f", core, np.eye(3), np.eye(2), padding=1)
    x = rng.normal(size=(2, 2, 9))
    y, _ = layer.forward(x, False, Context())
    np.testing.assert_allclose(y, naive_conv1d(x, core, 1, 1), atol=1e-12)


def test_rank_one_toy_core_is_a_scalar_filter():
    rng = np.random.default_rng(2)
    filt = rng.normal(size=7)
    v1 = np.array([[0.5], [-2.0], [1.0]])
    layer = FactorizedConv1d("toy", filt.reshape(1, 1, 7), v1, np.ones((1, 1)), padding=3)
    x = rng.normal(size=(1, 1, 20))
    y, _ = layer.forward(x, False, Context())
    filtered = np.correlate(np.pad(x[0, 0], 3), filt, mode="valid")
    np.testing.assert_allclose(y[0], v1 @ filtered[None, :], atol=1e-12)


def test_factorized_layer_weight_property():
    rng = np.random.default_rng(3)
    core, v1, v2 = rng.normal(size=(2, 3, 5)), orth(rng, 6, 2), orth(rng, 4, 3)
    layer = FactorizedConv1d("f", core, v1, v2)
    np.testing.assert_allclose(layer.weight(), multi_mode_product(core, [v1, v2, None]))
    assert (layer.c_out, layer.c_in, layer.kernel, layer.ranks) == (6, 4, 5, (2, 3))


def test_factorized_conv_shape_checks():
    with pytest.raises(ValueError):
        FactorizedConv1d("f", np.zeros((2, 3, 5)), np.zeros((6, 3)), None)
    with pytest.raises(ValueError):
        FactorizedConv1d("f", np.zeros((2, 3, 5)), np.zeros((6, 2)), np.zeros((4, 2)))


# -- gradient checks -----------------------------------------------------------------

def check_layer_grads(layer, x, train=True, tol=1e-4, ctx_rng=None):
    rng = np.random.default_rng(99)
    y, cache = layer.forward(x, train, Context(ctx_rng))
    probe = rng.normal(size=y.shape)

    def f():
        # dropout masks depend on the rng, so reseed per evaluation
        yy, _ = layer.forward(x, train, Context(None if ctx_rng is None else np.random.default_rng(5)))
        return float((yy * probe).sum())

    if ctx_rng is not None:
        y, cache = layer.forward(x, train, Context(np.random.default_rng(5)))
    gx, grads = layer.backward(probe, cache)
    assert rel_err(gx, numeric_grad(f, x)) < tol
    stores = dict(layer.params)
    if layer.adapter is not None:
        stores.update({f"adapter.{k}": v for k, v in layer.adapter.params.items()})
    for k, p in stores.items():
        assert rel_err(grads[k], numeric_grad(f, p)) < tol, k
    return grads


def layer_cases():
    rng = np.random.default_rng(4)
    yield Conv1d("c", 3, 4, 3, stride=2, padding=1, bias=True, rng=rng), rng.normal(size=(2, 3, 9))
    yield (FactorizedConv1d("fc", rng.normal(size=(2, 3, 3)), orth(rng, 5, 2), orth(rng, 4, 3),
                            rng.normal(size=5), stride=1, padding=1), rng.normal(size=(2, 4, 8)))
    yield (FactorizedConv1d("fc1", rng.normal(size=(2, 1, 4)), orth(rng, 3, 2), None, None, stride=2),
           rng.normal(size=(2, 1, 10)))
    yield BatchNorm1d("bn", 3), rng.normal(size=(4, 3, 5))
    yield ReLU("r"), rng.normal(size=(2, 3, 5))
    yield MaxPool1d("mp", 2, 2, 1), rng.normal(size=(2, 3, 9))
    yield AdaptiveAvgPool1d("ap", 3), rng.normal(size=(2, 3, 8))
    yield Flatten("fl"), rng.normal(size=(2, 3, 4))
    yield Linear("lin", 6, 4, bias=True, rng=rng), rng.normal(size=(3, 6))
    yield (FactorizedLinear("flin", rng.normal(size=(2, 3)), orth(rng, 5, 2), orth(rng, 6, 3),
                            rng.normal(size=5)), rng.normal(size=(3, 6)))


@pytest.mark.parametrize("case", list(layer_cases()), ids=lambda c: c[0].kind + ":" + c[0].name)
def test_layer_gradients_train(case):
    layer, x = case
    bn = isinstance(layer, BatchNorm1d)
    if bn:
        layer.params["weight"] = np.array([0.7, 1.3, 1.1])
        layer.params["bias"] = np.array([0.1, -0.2, 0.3])
    check_layer_grads(layer, x, train=True)


def test_batchnorm_gradients_eval_and_2d():
    rng = np.random.default_rng(5)
    bn = BatchNorm1d("bn", 3)
    bn.buffers["running_mean"] = rng.normal(size=3)
    bn.buffers["running_var"] = rng.uniform(0.5, 2, 3)
    check_layer_grads(bn, rng.normal(size=(2, 3, 4)), train=False)
    check_layer_grads(BatchNorm1d("bn2", 4), rng.normal(size=(5, 4)), train=True)


def test_dropout_gradient_and_eval_identity():
    rng = np.random.default_rng(6)
    d = Dropout("d", 0.3)
    x = rng.normal(size=(3, 2, 5))
    check_layer_grads(d, x, train=True, ctx_rng=np.random.default_rng(5))
    y, _ = d.forward(x, False, Context())
    np.testing.assert_array_equal(y, x)


def test_batchnorm_eval_uses_running_stats_and_train_updates_them():
    rng = np.random.default_rng(7)
    bn = BatchNorm1d("bn", 2, momentum=0.5)
    bn.buffers["running_mean"] = np.array([1.0, -1.0])
    bn.buffers["running_var"] = np.array([4.0, 0.25])
    x = rng.normal(size=(6, 2, 3))
    y, _ = bn.forward(x, False, Context())
    np.testing.assert_allclose(y, (x - np.array([1, -1])[None, :, None]) / np.sqrt(np.array([4, .25]) + 1e-5)[None, :, None])
    bn.forward(x, True, Context())
    mu = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2), ddof=1)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.5 * np.array([1, -1]) + 0.5 * mu)
    np.testing.assert_allclose(bn.buffers["running_var"], 0.5 * np.array([4, .25]) + 0.5 * var)


def test_batchnorm_needs_more_than_one_value():
    with pytest.raises(ValueError):
        BatchNorm1d("bn", 2).forward(np.zeros((1, 2)), True, Context())


def test_maxpool_padding_never_wins():
    mp = MaxPool1d("mp", 2, 2, 1)
    x = -np.ones((1, 1, 4))
    y, _ = mp.forward(x, False, Context())
    np.testing.assert_array_equal(y, -np.ones((1, 1, 3)))


def test_adaptive_avgpool_bins():
    ap = AdaptiveAvgPool1d("ap", 2)
    x = np.arange(5, dtype=float).reshape(1, 1, 5)
    y, _ = ap.forward(x, False, Context())
    # torch bins for L=5, out=2: [0,3) and [2,5)
    np.testing.assert_allclose(y[0, 0], [1.0, 3.0])


# -- MAC instrumentation -------------------------------------------------------------

@pytest.mark.parametrize("case", list(layer_cases()), ids=lambda c: c[0].kind + ":" + c[0].name)
def test_instrumented_macs_match_formula(case):
    layer, x = case
    counter = MacCounter()
    layer.forward(x, False if isinstance(layer, BatchNorm1d) else True, Context(None, counter))
    expected = 0 if isinstance(layer, BatchNorm1d) else layer.macs(x.shape[1:])
    assert counter.by_layer.get(layer.name, 0) == expected


def test_conv_mac_formula_by_hand():
    c = Conv1d("c", 3, 4, 5, stride=2, padding=2, bias=False)
    # L' = (20 + 4 - 5)//2 + 1 = 10
    assert c.macs((3, 20)) == 4 * 3 * 5 * 10
    f = FactorizedConv1d("f", np.zeros((2, 1, 5)), np.zeros((4, 2)), np.zeros((3, 1)), stride=2, padding=2)
    assert f.macs((3, 20)) == 3 * 1 * 20 + 2 * 1 * 5 * 10 + 4 * 2 * 10
