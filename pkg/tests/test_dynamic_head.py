import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iouesa import tensor as T
from iouesa.dynamic_head import (ChannelMaskHeads, DynamicConv, DynamicParamsGen, ObjectEmbeddings, apply_dcw,
                                 dcw_masks, dynamic_conv, flatten_rois, generate_dynamic_params,
                                 project_embeddings, update_query)
from iouesa.errors import DimensionError
from iouesa.layers import FFN, LayerNorm, Linear
from iouesa.tensor import Tensor, grad_check

# BLAS may reorder a dot product; the naive loops agree to the last couple of bits
ROUNDING = 1e-13


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_params_zero_query_and_homogeneity():
    rng = np.random.default_rng(0)
    gen = DynamicParamsGen.init(8, 8, 2, 8, rng, "g")
    p1, p2 = generate_dynamic_params(Tensor(np.zeros((1, 8))), gen)
    assert p1.shape == (1, 8, 2) and p2.shape == (1, 2, 8)
    assert not p1.data.any() and not p2.data.any()
    q = rng.normal(size=(1, 8))
    a1, a2 = generate_dynamic_params(Tensor(q), gen)
    b1, b2 = generate_dynamic_params(Tensor(2 * q), gen)
    np.testing.assert_allclose(b1.data, 2 * a1.data, atol=ROUNDING)
    np.testing.assert_allclose(b2.data, 2 * a2.data, atol=ROUNDING)


def test_params_match_per_row_loop():
    rng = np.random.default_rng(1)
    gen = DynamicParamsGen.init(6, 6, 3, 6, rng, "g")
    gen.proj.b.data = rng.normal(size=gen.proj.b.shape)
    q = rng.normal(size=(4, 6))
    p1, p2 = generate_dynamic_params(Tensor(q), gen)
    W, b = gen.proj.W.data, gen.proj.b.data
    for i in range(4):
        flat = [sum(q[i, a] * W[a, k] for a in range(6)) + b[k] for k in range(W.shape[1])]
        np.testing.assert_allclose(p1.data[i].reshape(-1), flat[:18], atol=ROUNDING)
        np.testing.assert_allclose(p2.data[i].reshape(-1), flat[18:], atol=ROUNDING)
    with pytest.raises(DimensionError):
        generate_dynamic_params(Tensor(np.zeros((4, 5))), gen)


def test_dynamic_conv_zero_input_and_shape():
    rng = np.random.default_rng(2)
    conv = DynamicConv.init(8, 8, 2, 8, rng, "c")
    q = Tensor(rng.normal(size=(3, 8)))
    assert not conv(q, Tensor(np.zeros((3, 9, 8)))).data.any()
    assert conv(q, Tensor(rng.normal(size=(3, 9, 8)))).shape == (3, 9, 8)
    with pytest.raises(DimensionError):
        conv(q, Tensor(np.zeros((2, 9, 8))))


def test_dynamic_conv_hand_evaluation():
    eps = 1e-5
    r = Tensor([[[1.0, 2.0]]])
    p1 = Tensor([[[1.0, 0.0], [0.0, -1.0]]])
    p2 = Tensor([[[2.0, 1.0], [0.0, 3.0]]])
    # r @ P1 = [1, -2]; mean -0.5, var 2.25
    a = 1.5 / math.sqrt(2.25 + eps)
    # relu keeps [a, 0]; @ P2 = [2a, a]; mean 1.5a, var 0.25a^2
    b = 0.5 * a / math.sqrt(0.25 * a * a + eps)
    out = dynamic_conv(r, p1, p2).data
    np.testing.assert_allclose(out[0, 0], [b, 0.0], atol=1e-12)


def test_masks_examples_and_naive_oracle():
    rng = np.random.default_rng(3)
    heads = ChannelMaskHeads.init(6, 2, rng, "m")
    for p in heads.parameters():
        p.data = np.zeros_like(p.data)
    m_c, m_r = dcw_masks(Tensor(rng.normal(size=(3, 6))), heads)
    assert np.array_equal(m_c.data, np.full((3, 6), 0.5)) and np.array_equal(m_r.data, m_c.data)

    heads = ChannelMaskHeads.init(6, 2, rng, "m")
    for p in heads.parameters():
        p.data = rng.normal(size=p.shape)
    q = rng.normal(size=(3, 6))
    q[2] = q[0]
    m_c, m_r = dcw_masks(Tensor(q), heads)
    assert np.array_equal(m_c.data[0], m_c.data[2]) and np.array_equal(m_r.data[0], m_r.data[2])
    for mask, head in ((m_c, heads.cls_head), (m_r, heads.reg_head)):
        W1, b1, W2, b2 = head.fc1.W.data, head.fc1.b.data, head.fc2.W.data, head.fc2.b.data
        for i in range(3):
            hidden = [max(0.0, sum(q[i, a] * W1[a, k] for a in range(6)) + b1[k]) for k in range(2)]
            expected = [sigmoid(sum(hidden[k] * W2[k, c] for k in range(2)) + b2[c]) for c in range(6)]
            np.testing.assert_allclose(mask.data[i], expected, atol=ROUNDING)
        assert np.all((mask.data > 0) & (mask.data < 1))


def test_apply_dcw_examples():
    r = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    assert apply_dcw(r, Tensor([[0.5, 1.0]])).data.tolist() == [[[0.5, 2.0], [1.5, 4.0]]]
    assert np.array_equal(apply_dcw(r, Tensor(np.ones((1, 2)))).data, r.data)
    assert not apply_dcw(r, Tensor(np.zeros((1, 2)))).data.any()
    with pytest.raises(DimensionError):
        apply_dcw(r, Tensor(np.ones((1, 3))))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 3), st.floats(0.0, 0.5))
def test_apply_dcw_is_monotone_per_channel(seed, c, bump):
    rng = np.random.default_rng(seed)
    r = Tensor(rng.normal(size=(2, 5, 4)))
    mask = rng.uniform(0, 1, (2, 4))
    bigger = mask.copy()
    bigger[:, c] = np.minimum(1.0, bigger[:, c] + bump)
    a = np.abs(apply_dcw(r, Tensor(mask)).data[:, :, c])
    b = np.abs(apply_dcw(r, Tensor(bigger)).data[:, :, c])
    assert np.all(b >= a)


def test_project_embeddings_examples():
    rng = np.random.default_rng(4)
    W_c, W_r = Linear.init(12, 4, rng, "c"), Linear.init(12, 4, rng, "r")
    zero = Tensor(np.zeros((2, 3, 4)))
    o = project_embeddings(zero, zero, W_c, W_r)
    assert not o.o_c.data.any() and not o.o_r.data.any()

    r_c, r_r = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    o = project_embeddings(Tensor(r_c), Tensor(r_r), W_c, W_r)
    for i in range(2):
        flat = r_c[i].reshape(-1)
        expected = [sum(flat[a] * W_c.W.data[a, k] for a in range(12)) for k in range(4)]
        np.testing.assert_allclose(o.o_c.data[i], expected, atol=ROUNDING)
    before = o.o_c.data.copy()
    W_r.W.data = W_r.W.data + 1.0
    assert np.array_equal(project_embeddings(Tensor(r_c), Tensor(r_r), W_c, W_r).o_c.data, before)


def test_update_query_examples():
    rng = np.random.default_rng(5)
    ffn = FFN.init(4, 8, rng, "f")
    norm = LayerNorm.init(4, "n")
    o_c = rng.normal(size=(3, 4))
    out = update_query(ObjectEmbeddings(Tensor(o_c), Tensor(-o_c)), ffn, norm).data
    zeros = Tensor(np.zeros((3, 4)))
    np.testing.assert_array_equal(out, norm(zeros + ffn(zeros)).data)

    o_r = rng.normal(size=(3, 4))
    out = update_query(ObjectEmbeddings(Tensor(o_c), Tensor(o_r)), ffn, norm).data
    s = o_c + o_r
    h = np.maximum(0, s @ ffn.fc1.W.data + ffn.fc1.b.data) @ ffn.fc2.W.data + ffn.fc2.b.data + s
    manual = (h - h.mean(1, keepdims=True)) / np.sqrt(h.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, manual, atol=1e-12)

    perm = [2, 0, 1]
    permuted = update_query(ObjectEmbeddings(Tensor(o_c[perm]), Tensor(o_r[perm])), ffn, norm).data
    np.testing.assert_array_equal(permuted, out[perm])


def _head(rng, d=8, s2=4):
    conv = DynamicConv.init(d, d, d // 4, d, rng, "conv")
    masks = ChannelMaskHeads.init(d, d // 4, rng, "mask")
    W_c, W_r = Linear.init(s2 * d, d, rng, "pc"), Linear.init(s2 * d, d, rng, "pr")
    return conv, masks, W_c, W_r


def _run(q, r, conv, masks, W_c, W_r):
    feats = conv(q, r)
    m_c, m_r = dcw_masks(q, masks)
    return project_embeddings(apply_dcw(feats, m_c), apply_dcw(feats, m_r), W_c, W_r)


def test_end_to_end_head_grad_check():
    rng = np.random.default_rng(6)
    conv, masks, W_c, W_r = _head(rng)
    q = Tensor(rng.normal(size=(3, 8)))
    r = Tensor(rng.normal(size=(3, 4, 8)))
    c1, c2 = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    params = conv.parameters() + masks.parameters() + W_c.parameters() + W_r.parameters()

    def f(_):
        o = _run(q, r, conv, masks, W_c, W_r)
        return T.tsum(o.o_c * c1) + T.tsum(o.o_r * c2)

    assert grad_check(f, [q, r] + params) < 1e-5


def test_classification_path_ignores_regression_parameters():
    rng = np.random.default_rng(7)
    conv, masks, W_c, W_r = _head(rng)
    q = Tensor(rng.normal(size=(3, 8)))
    r = Tensor(rng.normal(size=(3, 4, 8)))
    base = _run(q, r, conv, masks, W_c, W_r)
    for p in masks.reg_head.parameters() + W_r.parameters():
        p.data = p.data + rng.normal(size=p.shape)
    moved = _run(q, r, conv, masks, W_c, W_r)
    assert np.array_equal(moved.o_c.data, base.o_c.data)
    assert not np.array_equal(moved.o_r.data, base.o_r.data)

    base = moved
    for p in masks.cls_head.parameters() + W_c.parameters():
        p.data = p.data + rng.normal(size=p.shape)
    moved = _run(q, r, conv, masks, W_c, W_r)
    assert np.array_equal(moved.o_r.data, base.o_r.data)


def test_flatten_rois_is_row_major():
    r = np.arange(24, dtype=float).reshape(2, 3, 4)
    assert np.array_equal(flatten_rois(Tensor(r)).data, r.reshape(2, 12))
