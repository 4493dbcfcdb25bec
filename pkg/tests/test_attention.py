"""Attention block tests against loop-based oracles."""

import numpy as np
import pytest

from mute_lab import reference, tensor as T
from mute_lab.attention import (AttentionParams, FfnParams, RelPosTable,
                                cross_attention, ffn_forward, rel_index,
                                rel_index_matrix, relative_self_attention)
from mute_lab.errors import ShapeError
from mute_lab.gradcheck import grad_check
from mute_lab.tensor import Tensor


def make_params(d, heads, seed, clip=3, d_ff=None):
    rng = np.random.default_rng(seed)
    attn = AttentionParams.init(d, heads, rng)
    relpos = RelPosTable.init(clip, d // heads, rng)
    ffn = FfnParams.init(d, d_ff or 2 * d, rng)
    return attn, relpos, ffn


def test_rel_index_clips_offsets():
    assert rel_index(0, 0, 4) == 4
    assert rel_index(0, 3, 4) == 7
    assert rel_index(3, 0, 4) == 1
    assert rel_index(0, 9, 4) == 8
    assert rel_index(9, 0, 4) == 0


def test_rel_index_matrix_values():
    mat = rel_index_matrix(3, 3, 2)
    want = np.array([[2, 3, 4], [1, 2, 3], [0, 1, 2]])
    assert np.array_equal(mat, want)


def test_attention_matches_loop_oracle():
    d, heads, clip = 8, 2, 3
    attn, relpos, _ = make_params(d, heads, seed=1, clip=clip)
    rng = np.random.default_rng(2)
    for trial in range(5):
        n = int(rng.integers(2, 7))
        x = rng.normal(size=(n, d))
        got = relative_self_attention(Tensor(x), attn, relpos).data
        want = reference.self_attention(
            x, attn.wq.data, attn.wk.data, attn.wv.data, attn.wo.data,
            relpos.table.data, clip, heads)
        assert np.allclose(got, want, atol=1e-12), f"trial {trial}"


def test_batched_attention_equals_per_sequence():
    d, heads = 8, 2
    attn, relpos, _ = make_params(d, heads, seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5, d))
    batched = relative_self_attention(Tensor(x), attn, relpos).data
    for b in range(3):
        single = relative_self_attention(Tensor(x[b]), attn, relpos).data
        assert np.allclose(batched[b], single, atol=1e-12)


def test_causal_mask_matches_reference():
    d, heads, clip = 8, 2, 3
    attn, relpos, _ = make_params(d, heads, seed=5, clip=clip)
    rng = np.random.default_rng(6)
    n = 5
    x = rng.normal(size=(n, d))
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    got = relative_self_attention(Tensor(x), attn, relpos, mask=mask).data
    want = reference.self_attention(
        x, attn.wq.data, attn.wk.data, attn.wv.data, attn.wo.data,
        relpos.table.data, clip, heads, causal=True)
    assert np.allclose(got, want, atol=1e-12)


def test_masked_key_gets_zero_weight():
    d, heads = 4, 1
    attn, relpos, _ = make_params(d, heads, seed=7)
    x = Tensor(np.random.default_rng(8).normal(size=(1, 4, d)))
    mask = np.zeros((1, 1, 1, 4), dtype=bool)
    mask[0, 0, 0, 2] = True
    cap = {}
    relative_self_attention(x, attn, relpos, mask=mask, capture=cap)
    weights = cap["weights"]
    assert (weights[0, :, 2] == 0.0).all()
    assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


def test_capture_weights_are_head_averaged_rows():
    d, heads = 8, 2
    attn, relpos, _ = make_params(d, heads, seed=9)
    x = Tensor(np.random.default_rng(10).normal(size=(2, 4, d)))
    cap = {}
    relative_self_attention(x, attn, relpos, capture=cap)
    assert cap["weights"].shape == (2, 4, 4)
    assert np.allclose(cap["weights"].sum(axis=-1), 1.0, atol=1e-12)


def test_cross_attention_matches_loop_oracle():
    d, heads = 8, 2
    attn, _, _ = make_params(d, heads, seed=11)
    rng = np.random.default_rng(12)
    y = rng.normal(size=(3, d))
    enc = rng.normal(size=(5, d))
    got = cross_attention(Tensor(y), Tensor(enc), attn).data
    want = reference.cross_attention(y, enc, attn.wq.data, attn.wk.data,
                                     attn.wv.data, attn.wo.data, heads)
    assert np.allclose(got, want, atol=1e-12)


def test_cross_attention_empty_source_rejected():
    d = 4
    attn, _, _ = make_params(d, 1, seed=13)
    with pytest.raises(ShapeError):
        cross_attention(Tensor(np.zeros((2, d))), Tensor(np.zeros((0, d))),
                        attn)


def test_ffn_matches_manual_evaluation():
    d, d_ff = 6, 10
    _, _, ffn = make_params(d, 2, seed=14, d_ff=d_ff)
    rng = np.random.default_rng(15)
    s = rng.normal(size=(4, d))
    got = ffn_forward(Tensor(s), ffn).data
    hidden = np.maximum(s @ ffn.w1.data + ffn.b1.data, 0.0)
    want = hidden @ ffn.w2.data + ffn.b2.data
    assert np.allclose(got, want, atol=1e-12)


def test_attention_param_validation():
    rng = np.random.default_rng(16)
    with pytest.raises(ShapeError):
        AttentionParams.init(6, 4, rng)
    with pytest.raises(ShapeError):
        RelPosTable.init(0, 4, rng)


def test_attention_gradients_against_finite_differences():
    d, heads, clip = 6, 2, 2
    attn, relpos, _ = make_params(d, heads, seed=17, clip=clip)
    rng = np.random.default_rng(18)
    x0 = rng.normal(size=(4, d))
    probe = Tensor(rng.normal(size=(4, d)))

    def through_x(x):
        return T.sum_(T.mul(relative_self_attention(x, attn, relpos), probe))

    assert grad_check(through_x, Tensor(x0.copy())) < 1e-6

    xc = Tensor(x0)

    def through_wq(w):
        p = AttentionParams(wq=w, wk=attn.wk, wv=attn.wv, wo=attn.wo,
                            heads=heads)
        return T.sum_(T.mul(relative_self_attention(xc, p, relpos), probe))

    assert grad_check(through_wq, Tensor(attn.wq.data.copy())) < 1e-6

    def through_relpos(table):
        r = RelPosTable(clip=clip, table=table)
        return T.sum_(T.mul(relative_self_attention(xc, attn, r), probe))

    assert grad_check(through_relpos, Tensor(relpos.table.data.copy())) < 1e-6


def test_named_parameter_keys():
    attn, relpos, ffn = make_params(8, 2, seed=19)
    names = set(attn.named("blk")) | set(relpos.named("blk")) | set(ffn.named("blk"))
    assert names == {"blk.wq", "blk.wk", "blk.wv", "blk.wo", "blk.relpos",
                     "blk.w1", "blk.b1", "blk.w2", "blk.b2"}
