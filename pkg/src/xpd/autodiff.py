"""Minimal reverse-mode autodiff on numpy arrays.

Every network block, loss, and distillation operator in this package is a
composition of the primitives below, so one finite-difference check per
primitive (see tests) plus the module-level checks in :mod:`xpd.gradcheck`
covers the whole computation graph. float64 is used for gradient checking,
float32 for training.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "conv2d",
    "pad_replicate",
    "resize_bilinear",
    "sigmoid",
    "softplus",
    "relu",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "clip",
    "power",
    "reshape",
    "permute",
    "concat",
    "gather",
    "tsum",
    "tmean",
    "Adam",
]


class Tensor:
    """A numpy array plus the tape machinery needed for backprop.

    ``parents`` holds the input tensors, ``_backward`` the closure that
    scatters ``self.grad`` into them. Tensors built from inputs that do not
    require gradients carry no tape and are effectively constants.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    # -- convenience -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather(self, idx)

    # -- backprop ----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate gradients of ``self`` into every upstream tensor."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no tape")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None


def constant(data, dtype=None):
    return Tensor(np.ascontiguousarray(data, dtype=dtype))


def parameter(data, dtype=None):
    return Tensor(np.ascontiguousarray(np.array(data, dtype=dtype, copy=True)),
                  requires_grad=True)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suppresses tape construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _make(data, parents, backward):
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=tuple(parents), backward=backward if req else None)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b):
    """Matrix product with matching (broadcast-free) batch dims."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def power(a, p: float):
    a = _as_tensor(a)
    out_data = a.data ** p

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / np.sqrt(a.data))

    return _make(out_data, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(out_data, (a,), backward)


def absolute(a):
    a = _as_tensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return _make(out_data, (a,), backward)


def clip(a, lo, hi):
    a = _as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        inside = np.ones_like(a.data)
        if lo is not None:
            inside = inside * (a.data >= lo)
        if hi is not None:
            inside = inside * (a.data <= hi)
        _accumulate(a, g * inside)

    return _make(out_data, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softplus(a):
    a = _as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return _make(out_data, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def permute(a, axes):
    a = _as_tensor(a)
    out_data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(a, g.transpose(inv))

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def gather(a, idx):
    """Numpy-style indexing; backward scatter-adds into the source."""
    a = _as_tensor(a)
    out_data = a.data[idx]

    def backward(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _make(out_data, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------

def _conv_out_size(n, k, stride, dilation, pad):
    eff = (k - 1) * dilation + 1
    return (n + 2 * pad - eff) // stride + 1


def _im2col(x, kh, kw, stride, dilation, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (eh, ew), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv2d_raw(x, w, stride, dilation, pad):
    b = x.shape[0]
    co = w.shape[0]
    cols, ho, wo = _im2col(x, w.shape[2], w.shape[3], stride, dilation, pad)
    out = cols @ w.reshape(co, -1).T
    return out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)


def conv2d(x, w, b=None, stride=1, dilation=1, pad=0):
    """2-D convolution (cross-correlation), NCHW layout, zero padding.

    ``w`` is (C_out, C_in, kh, kw). Supports stride and dilation; the
    backward pass recovers the input gradient with the zero-stuffing trick so
    everything stays a BLAS matmul. The im2col buffer is kept alive for the
    weight gradient and freed with the tape.
    """
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D tensors, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    kh, kw = w.shape[2], w.shape[3]
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    if x.shape[2] + 2 * pad < eh or x.shape[3] + 2 * pad < ew:
        raise ShapeError(f"conv2d input {x.shape} too small for kernel footprint ({eh}, {ew})")
    bsz = x.shape[0]
    co = w.shape[0]
    cols, ho, wo = _im2col(x.data, kh, kw, stride, dilation, pad)
    out_data = (cols @ w.data.reshape(co, -1).T).reshape(bsz, ho, wo, co).transpose(0, 3, 1, 2)
    if b is not None:
        b = _as_tensor(b)
        out_data = out_data + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        _, _, hi, wi = x.data.shape
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
            _accumulate(w, (gm.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            ho, wo = g.shape[2], g.shape[3]
            hs = (ho - 1) * stride + 1
            ws = (wo - 1) * stride + 1
            stuffed = np.zeros((bsz, co, hs, ws), dtype=g.dtype)
            stuffed[:, :, ::stride, ::stride] = g
            rh = (hi + 2 * pad - eh) % stride
            rw = (wi + 2 * pad - ew) % stride
            ph, pw = eh - 1 - pad, ew - 1 - pad
            stuffed = np.pad(stuffed, ((0, 0), (0, 0), (ph, ph + rh), (pw, pw + rw)))
            wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            _accumulate(x, _conv2d_raw(stuffed, wf, 1, dilation, 0))

    return _make(out_data, parents, backward)


def pad_replicate(x, p: int):
    """Replicate-pad the two trailing (spatial) axes by ``p`` pixels."""
    x = _as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    ri = np.clip(np.arange(-p, h + p), 0, h - 1)
    ci = np.clip(np.arange(-p, w + p), 0, w - 1)
    out_data = x.data[..., ri[:, None], ci[None, :]]

    def backward(g):
        if not x.requires_grad:
            return
        buf = np.zeros_like(x.data)
        np.add.at(buf, (..., ri[:, None], ci[None, :]), g)
        _accumulate(x, buf)

    return _make(out_data, (x,), backward)


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Dense 1-D bilinear interpolation matrix (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m[np.arange(n_out), i0] += 1.0 - frac
    m[np.arange(n_out), i1] += frac
    return m


def resize_bilinear(x, out_hw):
    """Bilinear resize of an NCHW tensor, expressed as two dense matmuls."""
    x = _as_tensor(x)
    ho, wo = out_hw
    r = _resize_matrix(x.shape[-2], ho, x.data.dtype)
    c = _resize_matrix(x.shape[-1], wo, x.data.dtype)
    out_data = np.einsum("oi,bcij,pj->bcop", r, x.data, c, optimize=True)

    def backward(g):
        _accumulate(x, np.einsum("oi,bcop,pj->bcij", r, g, c, optimize=True))

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a list of parameter tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** self.t)
            vhat = v / (1.0 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
