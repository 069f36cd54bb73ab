import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paracnn.layers import (BiGruCell, CausalConvBlock, Embedding, Linear,
                            MultiHeadSelfAttention, VisualAttention)
from paracnn.tensor import RngState, ShapeError, Tensor, grad_check


def rng_for(tag):
    return RngState(1234).child(tag)


class TestCausalConvBlock:
    def test_identity_configuration(self):
        # kernel 2, linear half selects the current frame, gate forced wide open
        conv = CausalConvBlock(rng_for(1), 2, 2, 2, residual=False)
        conv.weight.data[:] = 0.0
        for c in range(2):
            conv.weight.data[c, c, 1] = 1.0  # tap 1 = current frame
        conv.bias.data[:] = 0.0
        conv.bias.data[2:] = 50.0  # sigmoid(50) ~ 1
        x = rng_for(2).normal((1, 5, 2))
        out = conv(Tensor(x)).data
        assert np.allclose(out, x, atol=1e-12)

    def test_previous_plus_current_sum(self):
        # kernel 2, linear half sums previous and current frame of one channel
        conv = CausalConvBlock(rng_for(3), 1, 1, 2, residual=False)
        conv.weight.data[:] = 0.0
        conv.weight.data[0, 0, 0] = 1.0
        conv.weight.data[0, 0, 1] = 1.0
        conv.bias.data[:] = 0.0
        conv.bias.data[1] = 50.0
        out = conv(Tensor(np.array([[[1.0], [2.0], [3.0]]]))).data
        assert np.allclose(out.reshape(-1), [1.0, 3.0, 5.0], atol=1e-12)

    def test_causality_bit_exact(self):
        conv = CausalConvBlock(rng_for(4), 3, 3, 3)
        x = rng_for(5).normal((1, 7, 3))
        base = conv(Tensor(x)).data.copy()
        for t in range(7):
            bumped = x.copy()
            bumped[0, t, :] += 1.0
            out = conv(Tensor(bumped)).data
            assert np.array_equal(out[0, :t], base[0, :t])
            assert not np.allclose(out[0, t:], base[0, t:])

    def test_stacked_causality(self):
        blocks = [CausalConvBlock(rng_for(6 + i), 4, 4, 3) for i in range(3)]

        def run(arr):
            h = Tensor(arr)
            for b in blocks:
                h = b(h)
            return h.data

        x = rng_for(10).normal((1, 6, 4))
        base = run(x)
        bumped = x.copy()
        bumped[0, 4, 0] += 0.1
        out = run(bumped)
        assert np.array_equal(out[0, :4], base[0, :4])

    def test_residual_only_when_channels_match(self):
        assert CausalConvBlock(rng_for(11), 4, 4, 2).residual
        assert not CausalConvBlock(rng_for(12), 4, 6, 2).residual

    def test_channel_mismatch_raises(self):
        conv = CausalConvBlock(rng_for(13), 4, 4, 2)
        with pytest.raises(ShapeError):
            conv(Tensor(np.zeros((1, 3, 5))))

    def test_gradcheck(self):
        conv = CausalConvBlock(rng_for(14), 3, 3, 2)
        x = Tensor(rng_for(15).normal((1, 4, 3)), requires_grad=True)
        assert grad_check(lambda t: (conv(t) * conv(t)).sum(), x) < 1e-4
        assert grad_check(lambda w: conv(Tensor(rng_for(16).normal((1, 4, 3)))).pow(2).sum(),
                          conv.weight) < 1e-4


class TestEmbedding:
    def test_lookup_goes_through_both_maps(self):
        emb = Embedding(rng_for(20), 5, 4)
        row = emb([2]).data
        manual = emb.table.data[2] @ emb.l1.W.data + emb.l1.b.data
        manual = manual @ emb.l2.W.data + emb.l2.b.data
        assert np.allclose(row[0], manual, atol=1e-12)

    def test_out_of_range_index(self):
        emb = Embedding(rng_for(21), 5, 4)
        with pytest.raises(IndexError):
            emb([5])

    def test_gradient_reaches_table(self):
        emb = Embedding(rng_for(22), 5, 4)
        emb(np.array([1, 1, 3])).sum().backward()
        assert emb.table.grad is not None
        assert np.all(emb.table.grad[0] == 0)
        assert np.any(emb.table.grad[1] != 0)


class TestVisualAttention:
    def test_single_region(self):
        att = VisualAttention(rng_for(30), 4, 5, 3)
        V = Tensor(rng_for(31).normal((1, 5)))
        ctx, w = att(Tensor(rng_for(32).normal((4,))), V)
        assert np.allclose(w.data, [1.0])
        assert np.allclose(ctx.data, V.data[0], atol=1e-12)

    def test_identical_regions_ignore_query(self):
        att = VisualAttention(rng_for(33), 4, 5, 3)
        row = rng_for(34).normal((5,))
        V = Tensor(np.tile(row, (4, 1)))
        c1, _ = att(Tensor(rng_for(35).normal((4,))), V)
        c2, _ = att(Tensor(rng_for(36).normal((4,))), V)
        assert np.allclose(c1.data, row, atol=1e-12)
        assert np.allclose(c2.data, row, atol=1e-12)

    def test_matches_direct_formula(self):
        att = VisualAttention(rng_for(37), 4, 5, 3)
        h = rng_for(38).normal((4,))
        V = rng_for(39).normal((3, 5))
        ctx, w = att(Tensor(h), Tensor(V))
        scores = np.array([att.v.data[:, 0] @ np.tanh(h @ att.Wh.data + V[r] @ att.Wv.data)
                           for r in range(3)])
        e = np.exp(scores - scores.max())
        w_direct = e / e.sum()
        assert np.allclose(w.data, w_direct, atol=1e-12)
        assert np.allclose(ctx.data, w_direct @ V, atol=1e-12)

    def test_weights_are_simplex_batched(self):
        att = VisualAttention(rng_for(40), 4, 5, 3)
        h = Tensor(rng_for(41).normal((2, 6, 4)))
        V = Tensor(rng_for(42).normal((2, 3, 5)))
        _, w = att(h, V)
        assert np.all(w.data >= 0)
        assert np.allclose(w.data.sum(-1), 1.0)

    def test_region_mask_zeroes_weights(self):
        att = VisualAttention(rng_for(43), 4, 5, 3)
        h = Tensor(rng_for(44).normal((1, 2, 4)))
        V = Tensor(rng_for(45).normal((1, 3, 5)))
        _, w = att(h, V, region_mask=np.array([[1.0, 1.0, 0.0]]))
        assert np.all(w.data[..., 2] < 1e-12)

    def test_gradcheck(self):
        att = VisualAttention(rng_for(46), 3, 4, 3)
        V = Tensor(rng_for(47).normal((3, 4)))
        x = Tensor(rng_for(48).normal((3,)), requires_grad=True)
        assert grad_check(lambda t: att(t, V)[0].sum(), x) < 1e-4


class TestMultiHeadSelfAttention:
    def test_single_position(self):
        mha = MultiHeadSelfAttention(rng_for(50), 6, 2)
        x = rng_for(51).normal((1, 6))
        out = mha(Tensor(x)).data
        manual = x @ mha.wv.W.data + mha.wv.b.data
        manual = manual @ mha.wo.W.data + mha.wo.b.data
        assert np.allclose(out, manual, atol=1e-12)
        assert np.allclose(mha.attention_weights(Tensor(x)), 1.0)

    def test_rows_sum_to_one(self):
        mha = MultiHeadSelfAttention(rng_for(52), 8, 4)
        w = mha.attention_weights(Tensor(rng_for(53).normal((5, 8))))
        assert np.allclose(w.sum(-1), 1.0)

    def test_output_shape_matches_input(self):
        mha = MultiHeadSelfAttention(rng_for(54), 8, 2)
        x = Tensor(rng_for(55).normal((3, 5, 8)))
        assert mha(x).shape == (3, 5, 8)

    def test_single_head_matches_direct_formula(self):
        mha = MultiHeadSelfAttention(rng_for(56), 2, 1)
        x = rng_for(57).normal((3, 2))
        q = x @ mha.wq.W.data + mha.wq.b.data
        k = x @ mha.wk.W.data  # key projection carries no bias
        v = x @ mha.wv.W.data + mha.wv.b.data
        scores = q @ k.T / np.sqrt(2)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        direct = (attn @ v) @ mha.wo.W.data + mha.wo.b.data
        assert np.allclose(mha(Tensor(x)).data, direct, atol=1e-12)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ShapeError):
            MultiHeadSelfAttention(rng_for(58), 6, 4)

    def test_gradcheck(self):
        mha = MultiHeadSelfAttention(rng_for(59), 4, 2)
        x = Tensor(rng_for(60).normal((3, 4)), requires_grad=True)
        assert grad_check(lambda t: (mha(t) * mha(t)).sum(), x) < 1e-4


class TestBiGruCell:
    def test_zero_input_zero_bias_stays_zero(self):
        gru = BiGruCell(rng_for(70), 3, 2)
        for name, p in gru.named_parameters().items():
            if name.endswith(("bz", "br", "bh")):
                p.data[:] = 0.0
        outs, final = gru(Tensor(np.zeros((4, 3))))
        assert np.all(outs.data == 0)
        assert np.all(final.data == 0)

    def test_single_step_directions(self):
        gru = BiGruCell(rng_for(71), 3, 2)
        x = rng_for(72).normal((1, 3))
        outs, final = gru(Tensor(x))
        # T=1: each direction sees the same single frame
        h0 = Tensor(np.zeros((1, 2)))
        f = gru.fwd.step(Tensor(x), h0).data
        b = gru.bwd.step(Tensor(x), h0).data
        assert np.allclose(final.data, np.concatenate([f[0], b[0]]), atol=1e-12)

    def test_two_step_recurrence_oracle(self):
        gru = BiGruCell(rng_for(73), 2, 1)
        x = rng_for(74).normal((2, 2))

        def step(params, xt, h):
            Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh = params
            z = 1 / (1 + np.exp(-(xt @ Wz + h @ Uz + bz)))
            r = 1 / (1 + np.exp(-(xt @ Wr + h @ Ur + br)))
            cand = np.tanh(xt @ Wh + (r * h) @ Uh + bh)
            return (1 - z) * h + z * cand

        def params_of(d):
            return tuple(p.data for p in (d.Wz, d.Uz, d.bz, d.Wr, d.Ur, d.br, d.Wh, d.Uh, d.bh))

        hf = np.zeros(1)
        for t in range(2):
            hf = step(params_of(gru.fwd), x[t], hf)
        hb = np.zeros(1)
        for t in reversed(range(2)):
            hb = step(params_of(gru.bwd), x[t], hb)
        _, final = gru(Tensor(x))
        assert np.allclose(final.data, np.concatenate([hf, hb]), atol=1e-12)

    def test_reversal_identity(self):
        # forward pass over reversed input == backward pass over original,
        # once the direction parameter sets are swapped
        gru = BiGruCell(rng_for(75), 3, 2)
        swapped = BiGruCell(rng_for(76), 3, 2)
        swapped.fwd, swapped.bwd = gru.bwd, gru.fwd
        x = rng_for(77).normal((5, 3))
        outs, _ = gru(Tensor(x))
        outs_sw, _ = swapped(Tensor(x[::-1].copy()))
        fwd_half = outs.data[:, 2:]          # backward direction of original
        sw_half = outs_sw.data[::-1, :2]     # forward direction over reversed input
        assert np.allclose(fwd_half, sw_half, atol=1e-12)

    def test_gradcheck(self):
        gru = BiGruCell(rng_for(78), 3, 2)
        x = Tensor(rng_for(79).normal((4, 3)), requires_grad=True)
        assert grad_check(lambda t: gru(t)[1].pow(2).sum(), x) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(0, 7))
def test_conv_causality_property(seed, length, pos):
    rng = RngState(seed)
    conv = CausalConvBlock(rng.child(1), 2, 2, 3)
    t = pos % length
    x = rng.child(2).normal((1, length, 2))
    bumped = x.copy()
    bumped[0, t] += rng.child(3).normal((2,))
    a = conv(Tensor(x)).data
    b = conv(Tensor(bumped)).data
    assert np.array_equal(a[0, :t], b[0, :t])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_layer_gradchecks_random_property(seed):
    rng = RngState(seed)
    lin = Linear(rng.child(1), 3, 2)
    x = Tensor(rng.child(2).normal((4, 3)) * 0.5, requires_grad=True)
    assert grad_check(lambda t: lin(t).tanh().sum(), x) < 1e-4
