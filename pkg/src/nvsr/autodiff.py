"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records every differentiable operation in execution order; backward()
replays the records in exact reverse, accumulating gradients additively.
Tensors without a tape are constants. Single precision is the default;
float64 exists for finite-difference gradient checking.
"""
from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """Dense n-dimensional value, optionally attached to a Tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, taped={self.tape is not None})"


def as_tensor(x, dtype=np.float32):
    """Wrap arrays/scalars as constant Tensors; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of operations for one backward pass.

    Not thread-safe: a tape must only be written from one thread. Gradients
    are available through grad() after backward() has run.
    """

    def __init__(self):
        self._ops = []       # (out_node, input_nodes, backward_fn)
        self._n = 0
        self._grads = None

    def leaf(self, array):
        """Register a parameter array as a differentiable leaf."""
        t = Tensor(array, self, self._n)
        self._n += 1
        return t

    def wrap(self, params):
        """Wrap a dict of name -> array into a dict of leaf Tensors."""
        return {k: self.leaf(v) for k, v in params.items()}

    def record(self, out_data, inputs, backward):
        """Append an op. backward(g) returns one gradient per taped input."""
        out = Tensor(out_data, self, self._n)
        self._n += 1
        nodes = tuple(t.node for t in inputs)
        self._ops.append((out.node, nodes, backward))
        return out

    def backward(self, loss):
        """Accumulate d(loss)/dx for every node reachable from loss."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss is not attached to this tape")
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
        grads = [None] * self._n
        grads[loss.node] = np.ones_like(loss.data)
        # gradients may alias each other or the upstream array, so accumulate
        # out-of-place; stored arrays are never mutated
        for out_node, in_nodes, bwd in reversed(self._ops):
            g = grads[out_node]
            if g is None:
                continue
            for node, gi in zip(in_nodes, bwd(g)):
                if node is None or gi is None:
                    continue
                if grads[node] is None:
                    grads[node] = gi
                else:
                    grads[node] = grads[node] + gi
        self._grads = grads

    def grad(self, t):
        """Gradient for a taped tensor; zeros if it never reached the loss."""
        if self._grads is None:
            raise RuntimeError("backward() has not been run")
        if t.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        g = self._grads[t.node]
        if g is None:
            return np.zeros_like(t.data)
        return g


def _taped(*tensors):
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _node_or_none(t):
    return t if t.tape is not None else _Const(t)


class _Const:
    """Stand-in input whose gradient is discarded."""

    __slots__ = ("node",)

    def __init__(self, t):
        self.node = None


def _binary_shapes(op, a, b):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeMismatch(op, a.shape, b.shape)


def _reduce_to(g, shape):
    # collapse a broadcast gradient back onto a size-1 operand
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape).astype(g.dtype)


def _ewise(op_name, a, b, fwd, da, db):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(op_name, a, b)
    out = fwd(a.data, b.data)
    tape = _taped(a, b)
    if tape is None:
        return Tensor(out)

    def backward(g):
        ga = _reduce_to(da(g, a.data, b.data), a.shape) if a.tape is not None else None
        gb = _reduce_to(db(g, a.data, b.data), b.shape) if b.tape is not None else None
        return ga, gb

    return tape.record(out, (_node_or_none(a), _node_or_none(b)), backward)


def add(a, b):
    return _ewise("add", a, b, lambda x, y: x + y,
                  lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _ewise("sub", a, b, lambda x, y: x - y,
                  lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _ewise("mul", a, b, lambda x, y: x * y,
                  lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, c):
    """Multiply by a python-float constant."""
    a = as_tensor(a)
    out = a.data * a.data.dtype.type(c)
    if a.tape is None:
        return Tensor(out)
    return a.tape.record(out, (a,), lambda g: (g * a.data.dtype.type(c),))


def _unary(a, fwd, grad_from_cache):
    a = as_tensor(a)
    out, cache = fwd(a.data)
    if a.tape is None:
        return Tensor(out)
    return a.tape.record(out, (a,), lambda g: (grad_from_cache(g, cache),))


def relu(a):
    return _unary(a, lambda x: (np.maximum(x, 0), x > 0), lambda g, m: g * m)


def softplus(a):
    # log(1 + e^x), stable for large |x|; d/dx = sigmoid(x)
    def fwd(x):
        out = np.logaddexp(x.dtype.type(0), x)
        return out, x

    def bwd(g, x):
        return g / (1 + np.exp(-x))

    return _unary(a, fwd, bwd)


def sigmoid(a):
    def fwd(x):
        out = 1 / (1 + np.exp(-x))
        return out, out

    return _unary(a, fwd, lambda g, s: g * s * (1 - s))


def exp(a):
    def fwd(x):
        out = np.exp(x)
        return out, out

    return _unary(a, fwd, lambda g, e: g * e)


def absval(a):
    return _unary(a, lambda x: (np.abs(x), np.sign(x)), lambda g, s: g * s)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data
    tape = _taped(a, b)
    if tape is None:
        return Tensor(out)

    def backward(g):
        ga = g @ b.data.T if a.tape is not None else None
        gb = a.data.T @ g if b.tape is not None else None
        return ga, gb

    return tape.record(out, (_node_or_none(a), _node_or_none(b)), backward)


def linear(x, w, b):
    """Fused x @ w + b for a batch of row vectors; b broadcasts over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch("linear", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeMismatch("linear bias", b.shape, (w.shape[1],))
    out = x.data @ w.data + b.data
    tape = _taped(x, w, b)
    if tape is None:
        return Tensor(out)

    def backward(g):
        gx = g @ w.data.T if x.tape is not None else None
        gw = x.data.T @ g if w.tape is not None else None
        gb = g.sum(axis=0) if b.tape is not None else None
        return gx, gw, gb

    return tape.record(out, (_node_or_none(x), _node_or_none(w), _node_or_none(b)), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeMismatch("concat", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    tape = _taped(*tensors)
    if tape is None:
        return Tensor(out)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i, t in enumerate(tensors):
            if t.tape is None:
                outs.append(None)
                continue
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(outs)

    return tape.record(out, tuple(_node_or_none(t) for t in tensors), backward)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    if a.tape is None:
        return Tensor(out)
    orig = a.shape
    return a.tape.record(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes):
    a = as_tensor(a)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    if a.tape is None:
        return Tensor(out)
    inv = np.argsort(axes)
    return a.tape.record(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def tsum(a):
    """Sum all elements to a scalar."""
    a = as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    if a.tape is None:
        return Tensor(out)
    return a.tape.record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype) if g.shape != a.shape else g,))


def tmean(a):
    return scale(tsum(a), 1.0 / a.size)


def mean_axes(a, axes):
    """Mean over the given axes, keeping the rest."""
    a = as_tensor(a)
    axes = tuple(ax % a.ndim for ax in axes)
    out = a.data.mean(axis=axes)
    if a.tape is None:
        return Tensor(out)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    expand = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(expand) / n, a.shape).astype(a.dtype),)

    return a.tape.record(out, (a,), backward)


def bilinear_sample2d(plane, u, v):
    """Sample a [N,N,C] plane at one continuous (u, v), clamped to the grid.

    Differentiable w.r.t. plane values only; (u, v) are treated as constants.
    """
    out = bilinear_gather(plane, np.asarray([u], dtype=np.float64), np.asarray([v], dtype=np.float64))
    return reshape(out, (plane.shape[2],))


def bilinear_gather(plane, us, vs):
    """Batched bilinear sampling of a [N,N,C] plane -> [B,C].

    u indexes the first grid axis, v the second. Out-of-range coordinates
    clamp to the border; gradients scatter-add into the 4 touched cells.
    """
    plane = as_tensor(plane)
    if plane.ndim != 3:
        raise ShapeMismatch("bilinear_gather", plane.shape)
    if not (np.all(np.isfinite(us)) and np.all(np.isfinite(vs))):
        raise ValueError("bilinear_gather: non-finite sample coordinates")
    n0, n1, _ = plane.shape
    us = np.clip(us, 0.0, n0 - 1.0)
    vs = np.clip(vs, 0.0, n1 - 1.0)
    i0 = np.minimum(np.floor(us).astype(np.int64), n0 - 2) if n0 > 1 else np.zeros_like(us, dtype=np.int64)
    j0 = np.minimum(np.floor(vs).astype(np.int64), n1 - 2) if n1 > 1 else np.zeros_like(vs, dtype=np.int64)
    fu = (us - i0).astype(plane.dtype)[:, None]
    fv = (vs - j0).astype(plane.dtype)[:, None]
    i1 = np.minimum(i0 + 1, n0 - 1)
    j1 = np.minimum(j0 + 1, n1 - 1)

    p = plane.data
    w00 = (1 - fu) * (1 - fv)
    w01 = (1 - fu) * fv
    w10 = fu * (1 - fv)
    w11 = fu * fv
    out = w00 * p[i0, j0] + w01 * p[i0, j1] + w10 * p[i1, j0] + w11 * p[i1, j1]
    if plane.tape is None:
        return Tensor(out)

    def backward(g):
        gp = np.zeros_like(p)
        np.add.at(gp, (i0, j0), g * w00)
        np.add.at(gp, (i0, j1), g * w01)
        np.add.at(gp, (i1, j0), g * w10)
        np.add.at(gp, (i1, j1), g * w11)
        return (gp,)

    return plane.tape.record(out, (plane,), backward)


def conv2d(x, w, b, padding="same"):
    """2D cross-correlation of x [Cin,H,W] with w [Cout,Cin,kh,kw] plus bias.

    Same-size zero padding; kernel sides must be odd.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeMismatch("conv2d channels", x.shape, w.shape)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    if b.shape != (cout,):
        raise ShapeMismatch("conv2d bias", b.shape, (cout,))
    if padding != "same":
        raise ValueError("conv2d: only same-padding is supported")
    ph, pw = kh // 2, kw // 2

    xp = np.zeros((cin, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    xp[:, ph:ph + h, pw:pw + wd] = x.data
    # im2col: [H*W, Cin*kh*kw]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h * wd, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T + b.data).T.reshape(cout, h, wd)
    tape = _taped(x, w, b)
    if tape is None:
        return Tensor(out)

    def backward(g):
        gmat = g.reshape(cout, h * wd).T  # [H*W, Cout]
        gw = (gmat.T @ cols).reshape(w.shape) if w.tape is not None else None
        gb = g.sum(axis=(1, 2)) if b.tape is not None else None
        gx = None
        if x.tape is not None:
            gcols = (gmat @ wmat).reshape(h, wd, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, di:di + h, dj:dj + wd] += gcols[:, :, :, di, dj].transpose(2, 0, 1)
            gx = np.ascontiguousarray(gxp[:, ph:ph + h, pw:pw + wd])
        return gx, gw, gb

    return tape.record(out, (_node_or_none(x), _node_or_none(w), _node_or_none(b)), backward)


def _shuffle_fwd(data, r):
    c2, h, w = data.shape
    c = c2 // (r * r)
    return data.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)


def _shuffle_inv(data, r):
    c, hr, wr = data.shape
    h, w = hr // r, wr // r
    return data.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w)


def pixel_shuffle_upsample(x, r):
    """Rearrange [C*r*r, H, W] -> [C, rH, rW] (sub-pixel upsampling)."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] % (r * r) != 0:
        raise ShapeMismatch(f"pixel_shuffle(r={r})", x.shape)
    out = np.ascontiguousarray(_shuffle_fwd(x.data, r))
    if x.tape is None:
        return Tensor(out)
    return x.tape.record(out, (x,), lambda g: (np.ascontiguousarray(_shuffle_inv(g, r)),))


def pixel_unshuffle(x, r):
    """Exact inverse of pixel_shuffle_upsample."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] % r != 0 or x.shape[2] % r != 0:
        raise ShapeMismatch(f"pixel_unshuffle(r={r})", x.shape)
    out = np.ascontiguousarray(_shuffle_inv(x.data, r))
    if x.tape is None:
        return Tensor(out)
    return x.tape.record(out, (x,), lambda g: (np.ascontiguousarray(_shuffle_fwd(g, r)),))


def finite_difference_grads(f, params, h=1e-6):
    """Central finite differences of scalar f(params) w.r.t. each array.

    f takes a dict of plain float64 arrays and returns a python float.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp = f(params)
            flat[i] = orig - step
            fm = f(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        grads[name] = g
    return grads


def check_gradients(build_loss, params, h=1e-6):
    """Compare tape gradients against central finite differences.

    build_loss(tape, tensors) must return a scalar Tensor. Returns the
    maximum relative error across all parameters, where each parameter's
    error is normalized by its largest gradient magnitude.
    """
    params64 = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    tape = Tape()
    tensors = tape.wrap(params64)
    loss = build_loss(tape, tensors)
    tape.backward(loss)
    analytic = {k: tape.grad(t) for k, t in tensors.items()}

    def eval_loss(p):
        t2 = Tape()
        return build_loss(t2, t2.wrap(p)).item()

    numeric = finite_difference_grads(eval_loss, params64, h=h)
    worst = 0.0
    for k in params64:
        a, n = analytic[k], numeric[k]
        denom = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
        worst = max(worst, float(np.abs(a - n).max() / denom))
    return worst
