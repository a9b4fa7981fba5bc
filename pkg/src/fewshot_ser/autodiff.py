"""Reverse-mode automatic differentiation on dense float64 tensors.

The tape is built from a small set of primitives whose backward rules are
themselves expressed with the same primitives, so gradients are ordinary
graph nodes and can be differentiated again (needed for second-order
meta-gradients). Everything is float64 and deterministic.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(ValueError):
    """Malformed use of the tape (non-scalar loss, detached params, ...)."""


# Toggled off only inside finite-difference probing where overflow is the
# caller's problem, never during training.
_CHECK_FINITE = True


class Tensor:
    """Dense float64 array node on the autodiff tape.

    Tensors are immutable once created: ops return new tensors and never
    write into `data` of their inputs.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, check=True):
        arr = np.asarray(data, dtype=np.float64)
        # a finite array always has a finite sum at these magnitudes; a sum
        # that overflows means training diverged anyway. Structure-only ops
        # skip the scan; ops that can create non-finite values keep it, so
        # divergence still surfaces within a step.
        if check and _CHECK_FINITE and not np.isfinite(arr.sum()):
            raise NonFiniteError("non-finite values in tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, check=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # arithmetic sugar; scalars become constant nodes
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.data.ndim - len(shape)
    if extra > 0:
        grad = tsum(grad, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = tsum(grad, axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data + b.data,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        check=False,
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data - b.data,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)),
        check=False,
    )


def neg(a):
    a = _as_tensor(a)
    return Tensor(-a.data, _parents=(a,), _vjp=lambda g: (neg(g),), check=False)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data * b.data,
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(mul(g, b), a.shape),
            _unbroadcast(mul(g, a), b.shape),
        ),
        check=False,
    )


def div(a, b):
    return mul(a, powi(_as_tensor(b), -1.0))


def powi(a, exponent):
    """a ** exponent for a constant real exponent."""
    a = _as_tensor(a)
    e = float(exponent)
    return Tensor(
        a.data**e,
        _parents=(a,),
        _vjp=lambda g: (mul(g, mul(powi(a, e - 1.0), e)),),
    )


def exp(a):
    a = _as_tensor(a)
    # the vjp recomputes exp(a) instead of capturing the output tensor: a
    # closure holding its own node forms a reference cycle that pins the
    # whole upstream tape until a (rare) generational GC pass
    return Tensor(np.exp(a.data), _parents=(a,), _vjp=lambda g: (mul(g, exp(a)),))


def log(a):
    a = _as_tensor(a)
    return Tensor(np.log(a.data), _parents=(a,), _vjp=lambda g: (div(g, a),))


def sqrt(a):
    return powi(a, 0.5)


def relu(a):
    a = _as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64), check=False)
    return Tensor(
        a.data * mask.data, _parents=(a,), _vjp=lambda g: (mul(g, mask),), check=False
    )


def maximum_const(a, floor):
    """Elementwise max(a, floor) for a scalar constant floor."""
    a = _as_tensor(a)
    mask = Tensor((a.data > floor).astype(np.float64))
    return Tensor(
        np.maximum(a.data, floor), _parents=(a,), _vjp=lambda g: (mul(g, mask),)
    )


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return Tensor(
        a.data.reshape(shape),
        _parents=(a,),
        _vjp=lambda g: (reshape(g, old),),
        check=False,
    )


def permute(a, axes):
    a = _as_tensor(a)
    inv = tuple(np.argsort(axes))
    return Tensor(
        np.transpose(a.data, axes),
        _parents=(a,),
        _vjp=lambda g: (permute(g, inv),),
        check=False,
    )


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        ax = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        ax = (axis,)
    else:
        ax = tuple(axis)

    def vjp(g):
        if not keepdims:
            kshape = list(shape)
            for i in ax:
                kshape[i] = 1
            g = reshape(g, tuple(kshape))
        return (expand(g, shape),)

    return Tensor(
        np.sum(a.data, axis=ax, keepdims=keepdims), _parents=(a,), _vjp=vjp, check=False
    )


def expand(a, shape):
    a = _as_tensor(a)
    return Tensor(
        np.broadcast_to(a.data, shape).copy(),
        _parents=(a,),
        _vjp=lambda g: (_unbroadcast(g, a.shape),),
        check=False,
    )


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]

    def vjp_graph(g):
        out = []
        start = 0
        for t in tensors:
            out.append(narrow(g, axis, start, t.shape[axis]))
            start += t.shape[axis]
        return tuple(out)

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        _vjp=vjp_graph,
        check=False,
    )


def narrow(a, axis, start, length):
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        return (pad_zeros(g, axis, start, a.shape[axis] - start - length),)

    return Tensor(a.data[idx], _parents=(a,), _vjp=vjp, check=False)


def pad_zeros(a, axis, before, after):
    a = _as_tensor(a)
    pad = [(0, 0)] * a.data.ndim
    pad[axis] = (before, after)

    def vjp(g):
        return (narrow(g, axis, before, a.shape[axis]),)

    return Tensor(np.pad(a.data, pad), _parents=(a,), _vjp=vjp, check=False)


# ---------------------------------------------------------------------------
# linear-algebra primitives


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        ga = matmul(g, swap_last(b))
        gb = matmul(swap_last(a), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return Tensor(a.data @ b.data, _parents=(a, b), _vjp=vjp, check=False)


def swap_last(a):
    a = _as_tensor(a)
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, tuple(axes))


# ---------------------------------------------------------------------------
# convolution / pooling primitives

# im2col and col2im form a linear adjoint pair, so conv backward (and its
# backward, for second-order meta-gradients) falls out of matmul's rule.


def _patch_view(padded, ph, pw, out_h, out_w):
    b, c, _, _ = padded.shape
    s = padded.strides
    shape = (b, c, out_h, out_w, ph, pw)
    strides = (s[0], s[1], s[2], s[3], s[2], s[3])
    return np.lib.stride_tricks.as_strided(padded, shape=shape, strides=strides)


def im2col(a, patch, pad):
    """(B,C,H,W) -> (B, H'*W', C*ph*pw) with stride 1."""
    a = _as_tensor(a)
    ph, pw = patch
    b, c, h, w = a.shape
    out_h, out_w = h + 2 * pad - ph + 1, w + 2 * pad - pw + 1
    padded = np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = (
        _patch_view(padded, ph, pw, out_h, out_w)
        .transpose(0, 2, 3, 1, 4, 5)
        .reshape(b, out_h * out_w, c * ph * pw)
        .copy()
    )

    def vjp(g):
        return (col2im(g, (b, c, h, w), patch, pad),)

    return Tensor(cols, _parents=(a,), _vjp=vjp, check=False)


def col2im(cols, img_shape, patch, pad):
    """Adjoint of im2col: scatter-add patches back into an image."""
    cols = _as_tensor(cols)
    ph, pw = patch
    b, c, h, w = img_shape
    out_h, out_w = h + 2 * pad - ph + 1, w + 2 * pad - pw + 1
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    patches = cols.data.reshape(b, out_h, out_w, c, ph, pw)
    for dy in range(ph):
        for dx in range(pw):
            padded[:, :, dy : dy + out_h, dx : dx + out_w] += patches[
                :, :, :, :, dy, dx
            ].transpose(0, 3, 1, 2)
    img = padded[:, :, pad : pad + h, pad : pad + w].copy()

    def vjp(g):
        return (im2col(g, patch, pad),)

    return Tensor(img, _parents=(cols,), _vjp=vjp, check=False)


def max_pool2(a):
    """2x2 max pooling with stride 2; odd trailing row/col dropped.

    Ties go to the lowest row-major index inside the window.
    """
    a = _as_tensor(a)
    b, c, h, w = a.shape
    h2, w2 = h // 2, w // 2
    d = a.data
    q00 = d[:, :, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    q01 = d[:, :, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    q10 = d[:, :, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    q11 = d[:, :, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    out = np.maximum(np.maximum(q00, q01), np.maximum(q10, q11))
    m00 = q00 == out
    m01 = (q01 == out) & ~m00
    m10 = (q10 == out) & ~m00 & ~m01
    m11 = (q11 == out) & ~m00 & ~m01 & ~m10
    full_mask = np.zeros((b, c, h, w))
    full_mask[:, :, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2] = m00
    full_mask[:, :, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2] = m01
    full_mask[:, :, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2] = m10
    full_mask[:, :, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2] = m11
    mask_t = Tensor(full_mask, check=False)

    def vjp(g):
        up = upsample2(g, (h, w))
        return (mul(up, mask_t),)

    return Tensor(out, _parents=(a,), _vjp=vjp, check=False)


def upsample2(a, out_hw):
    """Nearest 2x repeat, zero-padded to out_hw; adjoint of sum_pool2."""
    a = _as_tensor(a)
    b, c, h2, w2 = a.shape
    h, w = out_hw
    rep = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    out = np.zeros((b, c, h, w))
    out[:, :, : 2 * h2, : 2 * w2] = rep

    def vjp(g):
        return (sum_pool2(g),)

    return Tensor(out, _parents=(a,), _vjp=vjp, check=False)


def sum_pool2(a):
    a = _as_tensor(a)
    b, c, h, w = a.shape
    h2, w2 = h // 2, w // 2
    win = a.data[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2)
    out = win.sum(axis=(3, 5))

    def vjp(g):
        return (upsample2(g, (h, w)),)

    return Tensor(out, _parents=(a,), _vjp=vjp, check=False)


def _pool_matrix(n_in, n_out):
    """Averaging matrix (n_out, n_in) with adaptive index ranges."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -(-((i + 1) * n_in) // n_out)  # ceil
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(a, out_hw):
    """Average pool (B,C,H,W) to (B,C,oh,ow) via constant pooling matrices."""
    a = _as_tensor(a)
    b, c, h, w = a.shape
    oh, ow = out_hw
    ph = Tensor(_pool_matrix(h, oh))
    pw = Tensor(_pool_matrix(w, ow).T)
    flat = reshape(a, (b * c, h, w))
    pooled = matmul(matmul(expand(reshape(ph, (1, oh, h)), (b * c, oh, h)), flat), pw)
    return reshape(pooled, (b, c, oh, ow))


# ---------------------------------------------------------------------------
# backward


def _topo(loss):
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt, build_graph=False):
    """Gradients of a scalar `loss` w.r.t. each tensor in `wrt`.

    Returns a dict id(tensor) -> gradient Tensor. With build_graph=True the
    gradients stay connected to the tape and can be differentiated again.
    Tensors in `wrt` that the loss does not reach get zero gradients.
    """
    if loss.data.ndim != 0 and loss.size != 1:
        raise GraphError("loss must be a scalar")
    keep = {id(t) for t in wrt}
    grads = {id(loss): Tensor(np.ones_like(loss.data))}
    for node in reversed(_topo(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._vjp is not None:
            for p, pg in zip(node._parents, node._vjp(g)):
                if not p.requires_grad or pg is None:
                    continue
                if not build_graph:
                    # drop the grad's own tape eagerly so memory stays flat
                    pg = pg.detach()
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else add(acc, pg)
        if id(node) not in keep:
            del grads[id(node)]
    out = {}
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        elif not build_graph:
            g = g.detach()
        out[id(t)] = g
    return out


def grad_of(loss, wrt, build_graph=False):
    """Like backward() but returns gradients as a list aligned with `wrt`."""
    table = backward(loss, wrt, build_graph=build_graph)
    return [table[id(t)] for t in wrt]
