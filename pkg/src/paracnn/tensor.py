"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every quantity in the generator, the critic and the losses is a ``Tensor``
holding float64 data by default, so finite-difference gradient checks are
meaningful. Each operation records a backward closure; ``Tensor.backward``
walks the tape in reverse topological order and accumulates gradients into
every ``requires_grad`` ancestor.

Broadcasting is restricted to numpy's trailing-dimension alignment; anything
else fails with a ``ShapeError``.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyLossError(ValueError):
    """A masked reduction was requested with zero unmasked positions."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        if x.dtype != np.float64 and x.dtype != np.float32:
            return x.astype(np.float64)
        return x
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing over broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    if grad.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")
    return grad


def _check_broadcast(sa: tuple, sb: tuple):
    """Accept only trailing-dimension alignment; reject anything fancier."""
    for a, b in zip(reversed(sa), reversed(sb)):
        if a != b and a != 1 and b != 1:
            raise ShapeError(f"shapes {sa} and {sb} do not broadcast on trailing dimensions")


class Tensor:
    """Node in a dynamic computation graph: values plus accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- autodiff --------------------------------------------------------------

    def backward(self, grad=None):
        """Backpropagate from this node; defaults to d(self)/d(self) = 1 for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        # Iterative topological sort; graph depth can exceed the recursion limit.
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_broadcast(self.shape, other.shape)
            data = self.data + other.data
            a, b = self, other

            def bw(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.shape))

            return Tensor._from_op(data, (a, b), bw)
        data = self.data + other
        a = self

        def bw_s(g):
            a._accumulate(g)

        return Tensor._from_op(data, (a,), bw_s)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._from_op(-self.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_broadcast(self.shape, other.shape)
            data = self.data * other.data
            a, b = self, other

            def bw(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.shape))

            return Tensor._from_op(data, (a, b), bw)
        scale = float(other)
        a = self
        return Tensor._from_op(self.data * scale, (a,), lambda g: a._accumulate(g * scale))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            _check_broadcast(self.shape, other.shape)
            data = self.data / other.data
            a, b = self, other

            def bw(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

            return Tensor._from_op(data, (a, b), bw)
        return self * (1.0 / float(other))

    def pow(self, exponent: float) -> "Tensor":
        a = self
        e = float(exponent)
        data = self.data ** e
        return Tensor._from_op(data, (a,), lambda g: a._accumulate(g * e * a.data ** (e - 1.0)))

    # -- structural ops ----------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul requires operands with ndim >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        _check_broadcast(a.shape[:-2], b.shape[:-2])
        data = a.data @ b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

        return Tensor._from_op(data, (a, b), bw)

    __matmul__ = matmul

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = self.data.reshape(shape)
        return Tensor._from_op(data, (a,), lambda g: a._accumulate(g.reshape(a.shape)))

    def transpose(self, axes) -> "Tensor":
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        data = self.data.transpose(axes)
        return Tensor._from_op(data, (a,), lambda g: a._accumulate(g.transpose(inv)))

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(axes)

    def __getitem__(self, key) -> "Tensor":
        a = self
        data = self.data[key]

        def bw(g):
            full = np.zeros_like(a.data)
            full[key] = g
            a._accumulate(full)

        return Tensor._from_op(data, (a,), bw)

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        _check_broadcast(self.shape, shape)
        a = self
        data = np.broadcast_to(self.data, shape).copy()
        return Tensor._from_op(data, (a,), lambda g: a._accumulate(_unbroadcast(g, a.shape)))

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._from_op(data, (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        """Maximum along one axis; gradient routes to the first argmax on ties."""
        a = self
        data = self.data.max(axis=axis, keepdims=keepdims)
        amax = self.data.argmax(axis=axis)

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(amax, axis), g, axis=axis)
            a._accumulate(full)

        return Tensor._from_op(data, (a,), bw)

    # -- nonlinearities ------------------------------------------------------------

    def sigmoid(self) -> "Tensor":
        a = self
        y = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._from_op(y, (a,), lambda g: a._accumulate(g * y * (1.0 - y)))

    def tanh(self) -> "Tensor":
        a = self
        y = np.tanh(self.data)
        return Tensor._from_op(y, (a,), lambda g: a._accumulate(g * (1.0 - y * y)))

    def relu(self) -> "Tensor":
        a = self
        y = np.maximum(self.data, 0.0)
        return Tensor._from_op(y, (a,), lambda g: a._accumulate(g * (a.data > 0.0)))

    def exp(self) -> "Tensor":
        a = self
        y = np.exp(self.data)
        return Tensor._from_op(y, (a,), lambda g: a._accumulate(g * y))

    def log(self) -> "Tensor":
        a = self
        return Tensor._from_op(np.log(self.data), (a,), lambda g: a._accumulate(g / a.data))

    def softmax(self, axis: int = -1) -> "Tensor":
        """Numerically stabilized softmax; output sums to 1 along ``axis``."""
        a = self
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))

        return Tensor._from_op(y, (a,), bw)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse

        def bw(g):
            soft = np.exp(y)
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

        return Tensor._from_op(y, (a,), bw)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# -- free functions ---------------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise ShapeError(f"concat rank mismatch: {ref} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._from_op(data, tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = [t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]`` for a 2-D table; duplicates accumulate on backward."""
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    a = table
    data = table.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, a.shape[1]))
        a._accumulate(full)

    return Tensor._from_op(data, (a,), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` is [..., V]; ``targets`` holds class indices with the leading
    shape of ``logits``; ``mask`` flags which positions count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} != logits leading shape {logits.shape[:-1]}")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target index out of range [0, {vocab})")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != targets.shape:
            raise ShapeError(f"mask shape {mask.shape} != targets shape {targets.shape}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyLossError("cross_entropy over an all-masked batch")

    a = logits
    flat = logits.data.reshape(-1, vocab)
    shifted = flat - flat.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    tflat = targets.reshape(-1)
    mflat = mask.reshape(-1)
    picked = logp[np.arange(tflat.size), tflat]
    loss = -(picked * mflat).sum() / n

    def bw(g):
        soft = np.exp(logp)
        dflat = soft.copy()
        dflat[np.arange(tflat.size), tflat] -= 1.0
        dflat *= (mflat / n)[:, None]
        a._accumulate(float(g) * dflat.reshape(a.shape))

    return Tensor._from_op(np.asarray(loss), (a,), bw)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` must map ``x`` to a scalar Tensor and be re-invocable (it is called
    once per perturbed coordinate). Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


class RngState:
    """Deterministic random source: one seed, documented PCG64 streams.

    The same (seed, spawn key) pair yields a bit-identical sample stream on
    every run and platform. Substreams for independent concerns (parameter
    init, data shuffling, noise) come from ``child`` with fixed integer tags.
    """

    ALGORITHM = "pcg64"

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key)))

    def child(self, tag: int) -> "RngState":
        return RngState(self.seed, self._key + (int(tag),))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)
