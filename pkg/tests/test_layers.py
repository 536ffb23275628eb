import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skip2lora.errors import ContractViolation
from skip2lora.layers import (BatchNormLayer, ComputeType as CT, FcLayer, LoraAdapter, ReLU,
                              SoftmaxCrossEntropy)

from conftest import assert_bitwise

F32 = np.float32


def m(x):
    return np.array(x, dtype=F32)


def fd_grad(f, x, h=1e-3):
    """Central differences of scalar f at float64 array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in np.ndindex(x.shape):
        o = x[j]
        x[j] = o + h
        fp = f(x)
        x[j] = o - h
        fm = f(x)
        x[j] = o
        g[j] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


# ---------------------------------------------------------------- FC

def test_fc_forward_examples():
    fc = FcLayer(m([[1, -1], [2, 0]]), m([0, 1]))
    assert np.array_equal(fc.forward(m([[1, 2]])), [[5, 0]])
    assert np.array_equal(fc.forward(np.zeros((3, 2), F32)), np.tile([0, 1], (3, 1)))
    ident = FcLayer(np.eye(3, dtype=F32), np.zeros(3, F32))
    x = m([[0.5, -1, 2], [3, 4, 5]])
    assert_bitwise(ident.forward(x), x)


def _fc_example():
    x = m([[1, 2]])
    W = m([[1, -1], [2, 0]])
    gy = m([[1, -1]])
    # oracle: L = sum(gy * (x W + b)) differentiated numerically
    gW = fd_grad(lambda w: float(np.sum(gy * (x @ w))), W)
    gb = fd_grad(lambda b: float(np.sum(gy * (x @ W + b))), np.zeros(2))
    gx = fd_grad(lambda xx: float(np.sum(gy * (xx @ W))), x)
    return x, W, gy, gW, gb, gx


def test_fc_backward_full_matches_fd_oracle():
    x, W, gy, gW, gb, gx = _fc_example()
    fc = FcLayer(W, np.zeros(2))
    fc.forward(x)
    out = fc.backward(gy, CT.FC_YWBX)
    np.testing.assert_allclose(fc.gW, gW, rtol=1e-6)
    np.testing.assert_allclose(fc.gb, gb, rtol=1e-6)
    np.testing.assert_allclose(out, gx, rtol=1e-6)
    assert np.array_equal(fc.gW, [[1, -1], [2, -2]])
    assert np.array_equal(fc.gb, [1, -1])
    assert np.array_equal(out, [[2, 2]])


def test_fc_backward_yx_leaves_param_grads():
    x, W, gy, _, _, gx = _fc_example()
    fc = FcLayer(W, np.zeros(2))
    fc.gW[...] = 7
    fc.gb[...] = 9
    fc.forward(x)
    out = fc.backward(gy, CT.FC_YX)
    np.testing.assert_allclose(out, gx, rtol=1e-6)
    assert (fc.gW == 7).all() and (fc.gb == 9).all()


def test_fc_backward_zero_gy():
    fc = FcLayer(m([[1, -1], [2, 0]]), m([0, 1]))
    fc.forward(m([[1, 2]]))
    assert fc.backward(np.zeros((1, 2), F32), CT.FC_YWB) is None
    assert not fc.gW.any() and not fc.gb.any()


@pytest.mark.parametrize("ct", [CT.FC_YWBX, CT.FC_YWB, CT.FC_YBX, CT.FC_YB, CT.FC_YX])
def test_fc_gating_soundness(ct):
    rng = np.random.default_rng(0)
    fc = FcLayer(rng.standard_normal((4, 3)), rng.standard_normal(3))
    fc.gW[...] = rng.standard_normal(fc.gW.shape)
    fc.gb[...] = rng.standard_normal(fc.gb.shape)
    gW0, gb0 = fc.gW.copy(), fc.gb.copy()
    W0, b0 = fc.W.copy(), fc.b.copy()
    fc.forward(rng.standard_normal((2, 4)))
    gx = fc.backward(rng.standard_normal((2, 3)).astype(F32), ct)
    assert (gx is not None) == ct.input_grad
    assert np.array_equal(fc.gW, gW0) != ct.weight_grad
    assert np.array_equal(fc.gb, gb0) != ct.bias_grad
    assert_bitwise(fc.W, W0)
    assert_bitwise(fc.b, b0)


def test_fc_backward_errors():
    fc = FcLayer(np.eye(2), np.zeros(2))
    fc.forward(np.ones((1, 2)))
    with pytest.raises(ContractViolation):
        fc.backward(np.ones((1, 2)), CT.FC_Y)
    with pytest.raises(ContractViolation):
        fc.backward(np.ones((1, 2)), CT.LORA_YW)
    fresh = FcLayer(np.eye(2), np.zeros(2))
    with pytest.raises(ContractViolation):
        fresh.backward(np.ones((1, 2)), CT.FC_YWB)


def test_fc_update_examples():
    fc = FcLayer(m([[1]]), m([0]))
    fc.forward(m([[1]]))
    fc.backward(m([[2]]), CT.FC_YWB)
    fc.update(0.1, True, False)
    assert fc.W[0, 0] == F32(0.8)

    fc = FcLayer(m([[1.3]]), m([0.7]))
    W0, b0 = fc.W.copy(), fc.b.copy()
    fc.update(0.1, False, False)
    assert_bitwise(fc.W, W0)
    assert_bitwise(fc.b, b0)

    fc = FcLayer(np.zeros((1, 2)), m([1, 1]))
    fc.forward(m([[0]]))
    fc.backward(m([[1, -1]]), CT.FC_YB)
    fc.update(1.0, False, True)
    assert np.array_equal(fc.b, [0, 2])


def test_fc_update_without_grad_rejected():
    fc = FcLayer(m([[1]]), m([0]))
    with pytest.raises(ContractViolation):
        fc.update(0.1, True, False)
    fc.forward(m([[1]]))
    fc.backward(m([[1]]), CT.FC_YB)
    with pytest.raises(ContractViolation):
        fc.update(0.1, True, True)


# ---------------------------------------------------------------- LoRA

def test_lora_forward_examples():
    ad = LoraAdapter(m([[1], [1]]), m([[2, 3]]), 1, 1)
    yb = ad.forward(m([[1, 2]]))
    assert np.array_equal(ad.y_A, [[3]])
    assert np.array_equal(yb, [[6, 9]])
    fresh = LoraAdapter.init(5, 4, 2, np.random.default_rng(0), 1, 1)
    assert not fresh.forward(np.random.default_rng(1).standard_normal((3, 5))).any()
    assert not ad.forward(np.zeros((2, 2), F32)).any()


def _lora_fd():
    x = np.array([[1.0, 2.0]])
    WA = np.array([[1.0], [1.0]])
    WB = np.array([[2.0, 3.0]])
    gy = np.array([[1.0, 1.0]])
    L = lambda xx, a, b: float(np.sum(gy * (xx @ a @ b)))
    return dict(
        gW_A=fd_grad(lambda a: L(x, a, WB), WA),
        gW_B=fd_grad(lambda b: L(x, WA, b), WB),
        gx_A=fd_grad(lambda xx: L(xx, WA, WB), x),
    )


def test_lora_backward_ywx_matches_fd():
    oracle = _lora_fd()
    ad = LoraAdapter(m([[1], [1]]), m([[2, 3]]), 1, 1)
    ad.forward(m([[1, 2]]))
    gx = ad.backward(m([[1, 1]]), CT.LORA_YWX)
    np.testing.assert_allclose(ad.gW_B, oracle["gW_B"], rtol=1e-6)
    np.testing.assert_allclose(ad.gW_A, oracle["gW_A"], rtol=1e-6)
    np.testing.assert_allclose(gx, oracle["gx_A"], rtol=1e-6)
    assert np.array_equal(ad.gW_B, [[3, 3]])
    assert np.array_equal(ad.gW_A, [[5], [10]])
    assert np.array_equal(gx, [[5, 5]])


def test_lora_backward_yw_returns_nothing():
    ad = LoraAdapter(m([[1], [1]]), m([[2, 3]]), 1, 3)
    ad.forward(m([[1, 2]]))
    assert ad.backward(m([[1, 1]]), CT.LORA_YW) is None
    assert np.array_equal(ad.gW_B, [[3, 3]])
    assert np.array_equal(ad.gW_A, [[5], [10]])


def test_lora_backward_zero_gy_and_errors():
    ad = LoraAdapter(m([[1], [1]]), m([[2, 3]]), 1, 1)
    with pytest.raises(ContractViolation):
        ad.backward(m([[1, 1]]), CT.LORA_YW)
    ad.forward(m([[1, 2]]))
    ad.backward(np.zeros((1, 2), F32), CT.LORA_YWX)
    assert not ad.gW_A.any() and not ad.gW_B.any()
    with pytest.raises(ContractViolation):
        ad.backward(m([[1, 1]]), CT.NONE)


def test_lora_update_examples():
    ad = LoraAdapter(m([[1], [1]]), m([[0, 0]]), 1, 1)
    ad.gW_B[...] = [[3, 3]]
    ad.gW_A[...] = [[5], [10]]
    ad._fresh = True
    ad.update(0.1)
    assert np.array_equal(ad.W_B, m([[-0.3, -0.3]]))
    assert np.array_equal(ad.W_A, [[0.5], [0]])
    with pytest.raises(ContractViolation):
        ad.update(0.1)
    ad2 = LoraAdapter(m([[1.7], [-2]]), m([[0.3, 4]]), 1, 1)
    ad2.forward(m([[1, 2]]))
    ad2.backward(m([[1, 1]]), CT.LORA_YW)
    before = ad2.W_A.copy(), ad2.W_B.copy()
    ad2.update(0.0)
    assert_bitwise(ad2.W_A, before[0])
    assert_bitwise(ad2.W_B, before[1])


# ---------------------------------------------------------------- BN

def test_bn_frozen_example():
    bn = BatchNormLayer(1, eps=0.0)
    bn.gamma[...] = 2
    bn.beta[...] = 1
    assert np.array_equal(bn.forward(m([[1]])), [[3]])
    gx = bn.backward(m([[1]]), train_affine=False)
    assert np.array_equal(gx, [[2]])


def test_bn_identity_when_unit_stats():
    bn = BatchNormLayer(3, eps=0.0)
    x = m([[0.5, -1, 2], [3, 4, 5]])
    assert_bitwise(bn.forward(x), x)
    gy = m([[1, 2, 3], [4, 5, 6]])
    assert_bitwise(bn.backward(gy, False), gy)


def test_bn_zero_gy():
    bn = BatchNormLayer(2)
    bn.forward(m([[1, 2], [3, 4]]))
    gx = bn.backward(np.zeros((2, 2), F32), train_affine=True)
    assert not gx.any() and not bn.ggamma.any() and not bn.gbeta.any()


def test_bn_train_stats_normalises():
    bn = BatchNormLayer(1, eps=0.0)
    bn.training = True
    y = bn.forward(m([[-1], [1]]))
    assert abs(float(y.mean())) < 1e-7
    assert abs(float(y.var()) - 1.0) < 1e-6
    # running stats moved by momentum 0.1: mean 0, unbiased var 2
    assert bn.running_mean[0] == 0.0
    assert bn.running_var[0] == pytest.approx(0.9 * 1 + 0.1 * 2)


def test_bn_train_stats_needs_two_rows():
    bn = BatchNormLayer(2)
    bn.training = True
    with pytest.raises(ContractViolation):
        bn.forward(m([[1, 2]]))


def test_bn_frozen_purity():
    rng = np.random.default_rng(0)
    bn = BatchNormLayer(4)
    bn.running_mean[...] = rng.standard_normal(4)
    bn.running_var[...] = rng.uniform(0.5, 2, 4)
    state = [t.copy() for t in (bn.gamma, bn.beta, bn.running_mean, bn.running_var)]
    x = rng.standard_normal((3, 4)).astype(F32)
    assert_bitwise(bn.forward(x), bn.forward(x))
    for a, b in zip(state, (bn.gamma, bn.beta, bn.running_mean, bn.running_var)):
        assert_bitwise(a, b)


def test_bn_mode_mismatch_rejected():
    bn = BatchNormLayer(2)
    bn.forward(m([[1, 2], [3, 4]]))
    bn.training = True
    with pytest.raises(ContractViolation):
        bn.backward(m([[1, 1], [1, 1]]), False)


@pytest.mark.parametrize("training", [False, True])
def test_bn_gradients_match_fd(training):
    rng = np.random.default_rng(11)
    B, M = 4, 5
    x = rng.standard_normal((B, M))
    gy = rng.standard_normal((B, M))
    gamma = rng.uniform(0.5, 1.5, M)
    beta = rng.standard_normal(M)
    rm, rv = rng.standard_normal(M) * 0.3, rng.uniform(0.5, 1.5, M)
    eps = 1e-5

    def f64(xx, g, b):
        if training:
            mu, var = xx.mean(0), xx.var(0)
        else:
            mu, var = rm, rv
        return float(np.sum(gy * (g * (xx - mu) / np.sqrt(var + eps) + b)))

    bn = BatchNormLayer(M)
    bn.gamma[...] = gamma
    bn.beta[...] = beta
    bn.running_mean[...] = rm
    bn.running_var[...] = rv
    bn.training = training
    bn.forward(x)
    gx = bn.backward(gy, train_affine=True)
    assert rel_err(gx, fd_grad(lambda v: f64(v, gamma, beta), x)) <= 1e-2
    assert rel_err(bn.ggamma, fd_grad(lambda v: f64(x, v, beta), gamma)) <= 1e-2
    assert rel_err(bn.gbeta, fd_grad(lambda v: f64(x, gamma, v), beta)) <= 1e-2


# ---------------------------------------------------------------- ReLU / CE

def test_relu_examples():
    r = ReLU()
    assert np.array_equal(r.forward(m([[-1, 2]])), [[0, 2]])
    assert np.array_equal(r.backward(m([[5, 5]])), [[0, 5]])
    x = m([[0.5, 3]])
    assert_bitwise(r.forward(x), x)
    assert_bitwise(r.backward(x), x)
    assert np.array_equal(r.forward(m([[0]])), [[0]])
    assert np.array_equal(r.backward(m([[1]])), [[0]])


def test_cel_uniform():
    ce = SoftmaxCrossEntropy()
    loss = ce.forward(m([[0, 0, 0]]), [0])
    assert loss == pytest.approx(math.log(3), rel=1e-7)
    np.testing.assert_allclose(ce.backward(), [[1 / 3 - 1, 1 / 3, 1 / 3]], rtol=1e-6)


def test_cel_dominant_logit():
    # scalar oracle: -log softmax = log(1 + e^-10)
    oracle = math.log1p(math.exp(-10.0))
    ce = SoftmaxCrossEntropy()
    assert ce.forward(m([[10, 0]]), [0]) == pytest.approx(oracle, rel=1e-4)
    assert oracle == pytest.approx(4.54e-5, rel=1e-3)


@settings(max_examples=30, deadline=None)
@given(B=st.integers(1, 6), C=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_cel_gradient_rows_sum_to_zero(B, C, seed):
    rng = np.random.default_rng(seed)
    logits = (rng.standard_normal((B, C)) * 5).astype(F32)
    labels = rng.integers(0, C, B)
    ce = SoftmaxCrossEntropy()
    ce.forward(logits, labels)
    assert np.all(np.abs(ce.p.sum(axis=1) - 1) <= 1e-5)
    assert np.all(np.abs(ce.backward().sum(axis=1)) <= 1e-6)


def test_cel_gradient_matches_fd():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((3, 4))
    labels = np.array([0, 3, 1])

    def loss(z):
        z = z - z.max(axis=1, keepdims=True)
        return float(np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(3), labels]))

    ce = SoftmaxCrossEntropy()
    ce.forward(logits, labels)
    assert rel_err(ce.backward(), fd_grad(loss, logits)) <= 1e-2


def test_cel_label_out_of_range():
    with pytest.raises(ContractViolation):
        SoftmaxCrossEntropy().forward(m([[0, 0]]), [2])


@settings(max_examples=20, deadline=None)
@given(B=st.integers(1, 4), N=st.integers(1, 8), M=st.integers(1, 8), R=st.integers(1, 2),
       seed=st.integers(0, 10_000))
def test_fc_and_lora_grads_match_fd(B, N, M, R, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, N))
    W = rng.standard_normal((N, M))
    b = rng.standard_normal(M)
    WA = rng.standard_normal((N, R))
    WB = rng.standard_normal((R, M))
    gy = rng.standard_normal((B, M))
    fc = FcLayer(W, b)
    fc.forward(x)
    gx = fc.backward(gy, CT.FC_YWBX)
    assert rel_err(fc.gW, fd_grad(lambda w: np.sum(gy * (x @ w + b)), W)) <= 1e-2
    assert rel_err(fc.gb, fd_grad(lambda v: np.sum(gy * (x @ W + v)), b)) <= 1e-2
    assert rel_err(gx, fd_grad(lambda v: np.sum(gy * (v @ W + b)), x)) <= 1e-2
    ad = LoraAdapter(WA, WB, 1, 1)
    ad.forward(x)
    gxa = ad.backward(gy, CT.LORA_YWX)
    assert rel_err(ad.gW_A, fd_grad(lambda a: np.sum(gy * (x @ a @ WB)), WA)) <= 1e-2
    assert rel_err(ad.gW_B, fd_grad(lambda v: np.sum(gy * (x @ WA @ v)), WB)) <= 1e-2
    assert rel_err(gxa, fd_grad(lambda v: np.sum(gy * (v @ WA @ WB)), x)) <= 1e-2
