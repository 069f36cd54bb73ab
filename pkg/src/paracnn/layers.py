"""Neural building blocks on top of the tensor engine.

All parameters are float64 Tensors initialized uniform(-1/sqrt(fan_in),
+1/sqrt(fan_in)) from a seeded RngState, and every layer exposes
``named_parameters()`` so optimizers and checkpoints see one flat registry.
"""

from __future__ import annotations

import numpy as np

from .tensor import RngState, ShapeError, Tensor, concat, gather_rows, stack

MASK_NEG = 1e9


def _param(rng: RngState, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Layer:
    """Base for parameterized blocks: nested parameter registry plus grad reset."""

    def named_parameters(self) -> dict:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Layer):
                for sub, p in val.named_parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        for sub, p in item.named_parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
            elif isinstance(val, dict):
                for key, item in val.items():
                    if isinstance(item, Layer):
                        for sub, p in item.named_parameters().items():
                            out[f"{name}.{key}.{sub}"] = p
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()


class Linear(Layer):
    def __init__(self, rng: RngState, in_dim: int, out_dim: int, bias: bool = True):
        self.W = _param(rng, (in_dim, out_dim), in_dim)
        if bias:
            self.b = _param(rng, (out_dim,), in_dim)

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim > 2
        lead = x.shape[:-1]
        if squeeze:
            # flatten leading dims so the weight gradient is one 2-D GEMM
            x = x.reshape(-1, x.shape[-1])
        out = x @ self.W
        if hasattr(self, "b"):
            out = out + self.b
        return out.reshape(lead + (self.W.shape[1],)) if squeeze else out


class CausalConvBlock(Layer):
    """Gated causal 1-D convolution: left zero-padding, A * sigmoid(B) halves.

    Output at position t depends on inputs at positions <= t only. The
    weight tensor is laid out [2*out_channels, in_channels, kernel] and the
    pre-activation splits into a linear half A and a gate half B. A residual
    connection applies when in_channels == out_channels.
    """

    def __init__(self, rng: RngState, in_channels: int, out_channels: int, kernel_size: int,
                 residual: bool = True):
        if kernel_size < 1:
            raise ShapeError("kernel_size must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.residual = residual and in_channels == out_channels
        fan_in = in_channels * kernel_size
        self.weight = _param(rng, (2 * out_channels, in_channels, kernel_size), fan_in)
        self.bias = _param(rng, (2 * out_channels,), fan_in)

    def __call__(self, x: Tensor) -> Tensor:
        """x: [..., T, in_channels] -> [..., T, out_channels]."""
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[-1]}")
        T = x.shape[-2]
        k = self.kernel_size
        pad = Tensor(np.zeros(x.shape[:-2] + (k - 1, self.in_channels)))
        xp = concat([pad, x], axis=-2)
        # window tap tau sees the frame (k-1-tau) steps in the past; stacking
        # the taps on the channel axis turns the convolution into one GEMM
        taps = []
        for tau in range(k):
            sl = [slice(None)] * xp.ndim
            sl[-2] = slice(tau, tau + T)
            taps.append(xp[tuple(sl)])
        windows = concat(taps, axis=-1)  # [..., T, k*in]
        w_flat = self.weight.transpose((2, 1, 0)).reshape(k * self.in_channels,
                                                          2 * self.out_channels)
        lead = windows.shape[:-1]
        pre = windows.reshape(-1, k * self.in_channels) @ w_flat
        pre = pre.reshape(lead + (2 * self.out_channels,)) + self.bias
        a = pre[..., : self.out_channels]
        b = pre[..., self.out_channels:]
        out = a * b.sigmoid()
        if self.residual:
            out = out + x
        return out


class Embedding(Layer):
    """Token lookup table followed by two trainable linear maps."""

    def __init__(self, rng: RngState, vocab_size: int, dim: int):
        self.vocab_size = vocab_size
        self.dim = dim
        self.table = _param(rng, (vocab_size, dim), dim)
        self.l1 = Linear(rng, dim, dim)
        self.l2 = Linear(rng, dim, dim)

    def __call__(self, indices) -> Tensor:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab_size):
            raise IndexError(f"token index out of range [0, {self.vocab_size})")
        looked = gather_rows(self.table, idx.reshape(-1))
        out = self.l2(self.l1(looked))
        return out.reshape(idx.shape + (self.dim,))


class VisualAttention(Layer):
    """Additive soft attention over region features.

    weights_r = softmax_r( v . tanh(W_h h + W_v V_r) ), context = sum_r weights_r V_r.
    """

    def __init__(self, rng: RngState, query_dim: int, region_dim: int, attn_dim: int):
        self.Wh = _param(rng, (query_dim, attn_dim), query_dim)
        self.Wv = _param(rng, (region_dim, attn_dim), region_dim)
        self.v = _param(rng, (attn_dim, 1), attn_dim)

    def __call__(self, h: Tensor, regions: Tensor, region_mask=None):
        """h: [d] with regions [R, d_v], or h: [B, T, d] with regions [B, R, d_v].

        Returns (context, weights); weights form a probability simplex over
        regions (masked regions get weight 0).
        """
        if h.ndim == 1:
            ctx, w = self._batched(h.reshape(1, 1, h.shape[0]),
                                   regions.reshape((1,) + regions.shape), region_mask)
            return ctx.reshape(ctx.shape[-1:]), w.reshape(w.shape[-1:])
        return self._batched(h, regions, region_mask)

    def _batched(self, h: Tensor, regions: Tensor, region_mask):
        B, T, _ = h.shape
        R = regions.shape[-2]
        hw = (h @ self.Wh).reshape(B, T, 1, self.Wh.shape[1])
        vw = (regions @ self.Wv).reshape(B, 1, R, self.Wv.shape[1])
        scores = ((hw + vw).tanh() @ self.v).reshape(B, T, R)
        if region_mask is not None:
            m = np.asarray(region_mask, dtype=np.float64).reshape(B, 1, R)
            scores = scores + Tensor((m - 1.0) * MASK_NEG)
        weights = scores.softmax(axis=-1)
        context = weights @ regions
        return context, weights


class MultiHeadSelfAttention(Layer):
    """Full (non-causal) scaled dot-product self-attention with H heads."""

    def __init__(self, rng: RngState, dim: int, heads: int):
        if dim % heads != 0:
            raise ShapeError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.wq = Linear(rng, dim, dim)
        # a key bias shifts every score in a row equally, which softmax
        # ignores; the parameter would be exactly gradient-free
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        """x: [T, d] or [B, T, d]; key_mask flags which positions may be attended."""
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        B, T, d = x.shape
        H = self.heads
        dh = d // H

        def split(t):
            return t.reshape(B, T, H, dh).transpose((0, 2, 1, 3))  # [B, H, T, dh]

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))  # [B, H, T, T]
        if key_mask is not None:
            m = np.asarray(key_mask, dtype=np.float64).reshape(B, 1, 1, T)
            scores = scores + Tensor((m - 1.0) * MASK_NEG)
        attn = scores.softmax(axis=-1)
        out = (attn @ v).transpose((0, 2, 1, 3)).reshape(B, T, d)
        out = self.wo(out)
        return out.reshape(T, d) if squeeze else out

    def attention_weights(self, x: Tensor, key_mask=None) -> np.ndarray:
        """Per-head attention rows (for invariant checks), shape [B, H, T, T]."""
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        B, T, d = x.shape
        H = self.heads
        dh = d // H
        q = self.wq(x).reshape(B, T, H, dh).transpose((0, 2, 1, 3))
        k = self.wk(x).reshape(B, T, H, dh).transpose((0, 2, 1, 3))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if key_mask is not None:
            m = np.asarray(key_mask, dtype=np.float64).reshape(B, 1, 1, T)
            scores = scores + Tensor((m - 1.0) * MASK_NEG)
        return scores.softmax(axis=-1).data


class GruDirection(Layer):
    """One direction of a gated recurrent layer (update, reset, candidate)."""

    def __init__(self, rng: RngState, in_dim: int, hidden: int):
        self.hidden = hidden
        self.Wz = _param(rng, (in_dim, hidden), in_dim)
        self.Uz = _param(rng, (hidden, hidden), hidden)
        self.bz = _param(rng, (hidden,), hidden)
        self.Wr = _param(rng, (in_dim, hidden), in_dim)
        self.Ur = _param(rng, (hidden, hidden), hidden)
        self.br = _param(rng, (hidden,), hidden)
        self.Wh = _param(rng, (in_dim, hidden), in_dim)
        self.Uh = _param(rng, (hidden, hidden), hidden)
        self.bh = _param(rng, (hidden,), hidden)

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        z = (x @ self.Wz + h @ self.Uz + self.bz).sigmoid()
        r = (x @ self.Wr + h @ self.Ur + self.br).sigmoid()
        cand = (x @ self.Wh + (r * h) @ self.Uh + self.bh).tanh()
        return (1.0 - z) * h + z * cand

    def run(self, seq: Tensor) -> list:
        """seq: [B, T, d] -> list of T hidden states [B, hidden].

        Input projections are hoisted out of the recurrence (one GEMM per
        gate over the whole sequence) so the loop only carries the h terms.
        """
        B, T, d = seq.shape
        flat = seq.reshape(B * T, d)
        xz = (flat @ self.Wz + self.bz).reshape(B, T, self.hidden)
        xr = (flat @ self.Wr + self.br).reshape(B, T, self.hidden)
        xh = (flat @ self.Wh + self.bh).reshape(B, T, self.hidden)
        h = Tensor(np.zeros((B, self.hidden)))
        outs = []
        for t in range(T):
            z = (xz[:, t, :] + h @ self.Uz).sigmoid()
            r = (xr[:, t, :] + h @ self.Ur).sigmoid()
            cand = (xh[:, t, :] + (r * h) @ self.Uh).tanh()
            h = (1.0 - z) * h + z * cand
            outs.append(h)
        return outs


class BiGruCell(Layer):
    """Bidirectional gated recurrent layer used by the Wasserstein critic."""

    def __init__(self, rng: RngState, in_dim: int, hidden: int):
        self.hidden = hidden
        self.fwd = GruDirection(rng, in_dim, hidden)
        self.bwd = GruDirection(rng, in_dim, hidden)

    def __call__(self, seq: Tensor):
        """seq: [T, d] or [B, T, d] -> (outputs [.., T, 2h], final [.., 2h])."""
        squeeze = seq.ndim == 2
        if squeeze:
            seq = seq.reshape((1,) + seq.shape)
        B, T, _ = seq.shape
        f_states = self.fwd.run(seq)
        rev = seq[:, ::-1, :]
        b_states_rev = self.bwd.run(rev)
        b_states = b_states_rev[::-1]
        per_pos = [concat([f, b], axis=-1) for f, b in zip(f_states, b_states)]
        outputs = stack(per_pos, axis=1)  # [B, T, 2h]
        final = concat([f_states[-1], b_states_rev[-1]], axis=-1)
        if squeeze:
            return outputs.reshape(T, 2 * self.hidden), final.reshape(2 * self.hidden)
        return outputs, final
