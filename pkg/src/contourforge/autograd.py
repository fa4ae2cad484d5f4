"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray together with the closure that routes its
output gradient to its parents. ``backward()`` topologically sorts the graph
once and runs the closures in reverse order; gradients accumulate with ``+=``
so shared subexpressions and repeated backward calls behave the usual way.

Convolutions are evaluated by kernel-tap accumulation: a k x k kernel is
k*k shifted channel-mixing products, each a single tensordot. The backward
pass is the exact mirror (scatter-add into the padded buffer), which makes
the op its own adjoint up to float rounding and keeps memory at one padded
copy of the input instead of an unfolded patch matrix.

Dtype policy: ops preserve the dtype of their inputs. Training runs float32;
tests and gradient checking build float64 graphs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / probing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    # keep numpy from consuming Tensor operands elementwise; binary ops with
    # ndarrays must fall back to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = data if isinstance(data, np.ndarray) else np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate gradients into every reachable leaf.

        The graph is consumed: each interior node's closure, parent
        links, and gradient are released as soon as they have been used.
        Backward closures capture their own output tensor, so without
        this teardown every training step would leave a reference cycle
        holding the full activation set until a gen-2 GC pass.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
        # iterative depth-first topological sort; recursion would overflow on
        # deep training graphs
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        _accum(self, grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
            if node._parents:
                node._backward = None
                node._parents = ()
                node.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, k):
        return power(self, k)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data + b.data, (a, b))
    if out.requires_grad:

        def bw():
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(out.grad, b.data.shape))

        out._backward = bw
    return out


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data * b.data, (a, b))
    if out.requires_grad:

        def bw():
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

        out._backward = bw
    return out


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data / b.data, (a, b))
    if out.requires_grad:

        def bw():
            _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

        out._backward = bw
    return out


def neg(a):
    a = _wrap(a)
    out = _make(-a.data, (a,))
    if out.requires_grad:
        out._backward = lambda: _accum(a, -out.grad)
    return out


def power(a, k):
    a = _wrap(a)
    k = float(k)
    out = _make(a.data**k, (a,))
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * k * a.data ** (k - 1))
    return out


def log(a):
    a = _wrap(a)
    out = _make(np.log(a.data), (a,))
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad / a.data)
    return out


def exp(a):
    a = _wrap(a)
    out = _make(np.exp(a.data), (a,))
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * out.data)
    return out


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input sits inside the
    (inclusive) interval."""
    a = _wrap(a)
    out = _make(np.clip(a.data, lo, hi), (a,))
    if out.requires_grad:
        mask = (a.data >= lo) & (a.data <= hi)
        out._backward = lambda: _accum(a, out.grad * mask)
    return out


def relu(a):
    a = _wrap(a)
    out = _make(np.maximum(a.data, 0), (a,))
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * (a.data > 0))
    return out


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a):
    a = _wrap(a)
    s = _sigmoid_stable(a.data)
    out = _make(s, (a,))
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * s * (1.0 - s))
    return out


def softplus(a):
    a = _wrap(a)
    z = a.data
    out = _make(np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z))), (a,))
    if out.requires_grad:
        s = _sigmoid_stable(z)
        out._backward = lambda: _accum(a, out.grad * s)
    return out


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:

        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

        out._backward = bw
    return out


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        scale = a.data.size / out.data.size

        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape) / scale)

        out._backward = bw
    return out


def reshape(a, shape):
    a = _wrap(a)
    out = _make(a.data.reshape(shape), (a,))
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad.reshape(a.data.shape))
    return out


# ---------------------------------------------------------------------------
# convolution


def _resolve_pad(padding, k: int, dilation: int) -> int:
    if padding in (0, "valid"):
        return 0
    if padding == "same":
        if k % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel")
        return dilation * (k - 1) // 2
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        return int(padding)
    raise ValueError(f"bad padding: {padding!r}")


def conv2d(x, w, b=None, dilation: int = 1, padding=0):
    """2d cross-correlation, stride 1, square kernel, optional dilation.

    x: (N, Cin, H, W), w: (Cout, Cin, k, k), b: (Cout,) or None.
    Output extent: H + 2*pad - dilation*(k-1).
    """
    x, w = _wrap(x), _wrap(w)
    xd, wd = x.data, w.data
    n, cin, h, wdim = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if kh != kw:
        raise ValueError("kernel must be square")
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    p = _resolve_pad(padding, kh, dilation)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    hp, wp = xp.shape[2], xp.shape[3]
    ho = hp - dilation * (kh - 1)
    wo = wp - dilation * (kw - 1)
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"receptive field {dilation * (kh - 1) + 1} exceeds padded input {hp}x{wp}"
        )
    acc = np.zeros((n, ho, wo, cout), dtype=xd.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u * dilation : u * dilation + ho, v * dilation : v * dilation + wo]
            acc += np.tensordot(xs, wd[:, :, u, v], axes=([1], [1]))
    outd = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        outd += b.data.reshape(1, -1, 1, 1)
        parents.append(b)
    out = _make(outd, parents)
    if out.requires_grad:

        def bw():
            g = out.grad
            if b is not None and b.requires_grad:
                _accum(b, g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                dw = np.empty_like(wd)
                for u in range(kh):
                    for v in range(kw):
                        xs = xp[
                            :, :, u * dilation : u * dilation + ho, v * dilation : v * dilation + wo
                        ]
                        dw[:, :, u, v] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                _accum(w, dw)
            if x.requires_grad:
                gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
                dxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
                for u in range(kh):
                    for v in range(kw):
                        dxp[
                            :, u * dilation : u * dilation + ho, v * dilation : v * dilation + wo, :
                        ] += gt @ wd[:, :, u, v]
                dx = dxp.transpose(0, 3, 1, 2)
                _accum(x, dx[:, :, p : p + h, p : p + wdim] if p else dx)

        out._backward = bw
    return out


def conv_transpose2d(x, w, b=None, stride: int = 2):
    """Transposed convolution (the adjoint of a strided valid conv).

    x: (N, Cin, H, W), w: (Cin, Cout, k, k).
    Output extent: (H-1)*stride + k; with k == stride == 2 that is 2H.
    """
    x, w = _wrap(x), _wrap(w)
    xd, wd = x.data, w.data
    n, cin, h, wdim = xd.shape
    cin_w, cout, kh, kw = wd.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    ho = (h - 1) * stride + kh
    wo = (wdim - 1) * stride + kw
    acc = np.zeros((n, ho, wo, cout), dtype=xd.dtype)
    for u in range(kh):
        for v in range(kw):
            acc[:, u : u + (h - 1) * stride + 1 : stride, v : v + (wdim - 1) * stride + 1 : stride, :] += np.tensordot(
                xd, wd[:, :, u, v], axes=([1], [0])
            )
    outd = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        outd += b.data.reshape(1, -1, 1, 1)
        parents.append(b)
    out = _make(outd, parents)
    if out.requires_grad:

        def bw():
            g = out.grad
            if b is not None and b.requires_grad:
                _accum(b, g.sum(axis=(0, 2, 3)))
            need_dw = w.requires_grad
            need_dx = x.requires_grad
            dw = np.empty_like(wd) if need_dw else None
            dxa = np.zeros((n, h, wdim, cin), dtype=g.dtype) if need_dx else None
            for u in range(kh):
                for v in range(kw):
                    gs = g[:, :, u : u + (h - 1) * stride + 1 : stride, v : v + (wdim - 1) * stride + 1 : stride]
                    if need_dw:
                        dw[:, :, u, v] = np.tensordot(xd, gs, axes=([0, 2, 3], [0, 2, 3]))
                    if need_dx:
                        dxa += np.tensordot(gs, wd[:, :, u, v], axes=([1], [1]))
            if need_dw:
                _accum(w, dw)
            if need_dx:
                _accum(x, np.ascontiguousarray(dxa.transpose(0, 3, 1, 2)))

        out._backward = bw
    return out


def maxpool2d(x):
    """2x2 max pooling, stride 2. Odd extents are floored: the last row or
    column is cropped before pooling and receives zero gradient. Ties route
    the gradient to the first maximum in row-major window order."""
    x = _wrap(x)
    xd = x.data
    n, c, h, wdim = xd.shape
    ho, wo = h // 2, wdim // 2
    if ho == 0 or wo == 0:
        raise ValueError(f"input too small to pool: {h}x{wdim}")
    xc = xd[:, :, : ho * 2, : wo * 2]
    win = np.ascontiguousarray(
        xc.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, ho, wo, 4)
    out = _make(win.max(axis=-1), (x,))
    if out.requires_grad:
        idx = win.argmax(axis=-1)

        def bw():
            g = out.grad
            buf = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
            np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
            dxc = (
                buf.reshape(n, c, ho, wo, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, ho * 2, wo * 2)
            )
            if (h, wdim) != (ho * 2, wo * 2):
                dx = np.zeros_like(xd)
                dx[:, :, : ho * 2, : wo * 2] = dxc
            else:
                dx = dxc
            _accum(x, dx)

        out._backward = bw
    return out


def concat_crop(tensors):
    """Center-crop every input to the elementwise-minimum spatial extent and
    concatenate along channels. Odd margins keep the extra row/column off the
    bottom/right (offset = (extent - target) // 2)."""
    ts = [_wrap(t) for t in tensors]
    if len(ts) < 2:
        raise ValueError("concat_crop needs at least two tensors")
    n = ts[0].data.shape[0]
    if any(t.data.shape[0] != n for t in ts):
        raise ValueError("batch dimensions differ")
    th = min(t.data.shape[2] for t in ts)
    tw = min(t.data.shape[3] for t in ts)
    offs = [((t.data.shape[2] - th) // 2, (t.data.shape[3] - tw) // 2) for t in ts]
    parts = [
        t.data[:, :, oh : oh + th, ow : ow + tw] for t, (oh, ow) in zip(ts, offs)
    ]
    out = _make(np.concatenate(parts, axis=1), ts)
    if out.requires_grad:

        def bw():
            g = out.grad
            c0 = 0
            for t, (oh, ow) in zip(ts, offs):
                c = t.data.shape[1]
                if t.requires_grad:
                    dt = np.zeros_like(t.data)
                    dt[:, :, oh : oh + th, ow : ow + tw] = g[:, c0 : c0 + c]
                    _accum(t, dt)
                c0 += c

        out._backward = bw
    return out


def dropout(x, rate: float, rng: np.random.Generator, training: bool = True):
    """Inverted dropout: kept activations scale by 1/(1-rate) so the
    expectation is unchanged; eval mode and rate 0 are exact identities."""
    x = _wrap(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1): {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    keep /= 1.0 - rate
    out = _make(x.data * keep, (x,))
    if out.requires_grad:
        out._backward = lambda: _accum(x, out.grad * keep)
    return out


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool, momentum: float = 0.1, eps: float = 1e-5):
    """Channelwise batch normalization with affine parameters.

    Training normalizes with biased batch statistics and folds them into the
    running buffers in place (running variance uses the unbiased estimate);
    eval normalizes with the buffers. gamma/beta are (C,) tensors.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    xd = x.data
    n, c, h, wdim = xd.shape
    gshape = (1, c, 1, 1)
    gd = gamma.data.reshape(gshape)
    bd = beta.data.reshape(gshape)
    if training:
        m = n * h * wdim
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = np.mean(xc * xc, axis=(0, 2, 3), keepdims=True)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = xc * ivar
        unbiased = var.ravel() * (m / (m - 1)) if m > 1 else var.ravel()
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.ravel()
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = np.asarray(running_mean, dtype=xd.dtype).reshape(gshape)
        ivar = 1.0 / np.sqrt(np.asarray(running_var, dtype=xd.dtype).reshape(gshape) + eps)
        xhat = (xd - mu) * ivar
    out = _make(gd * xhat + bd, (x, gamma, beta))
    if out.requires_grad:

        def bw():
            g = out.grad
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * gd
                if training:
                    m = n * h * wdim
                    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    _accum(x, (ivar / m) * (m * dxhat - s1 - xhat * s2))
                else:
                    _accum(x, dxhat * ivar)

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# losses and metrics


def bce_loss(pred, target, eps: float = 1e-7):
    """Mean binary cross-entropy on probabilities, clipped to
    [eps, 1-eps] before the logs. Saturated predictions therefore yield a
    finite loss and a zero (blocked) gradient."""
    pred = _wrap(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    p = clip(pred, eps, 1.0 - eps)
    return neg(tmean(t * log(p) + (1.0 - t) * log(1.0 - p)))


def bce_from_logits(logits, target):
    """Mean binary cross-entropy taking raw logits: softplus(z) - y*z,
    evaluated in the overflow-free form. Equals bce_loss(sigmoid(z), y)
    away from saturation but keeps useful gradients everywhere."""
    z = _wrap(logits)
    zd = z.data
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=zd.dtype)
    val = np.mean(np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd))))
    out = _make(np.asarray(val, dtype=zd.dtype), (z,))
    if out.requires_grad:
        out._backward = lambda: _accum(z, out.grad * (_sigmoid_stable(zd) - y) / zd.size)
    return out


def dice_coef(pred, target, smooth: float = 1.0) -> float:
    """Soft Dice coefficient (2*intersection + s)/(sum_p + sum_t + s) as a
    plain float; a monitoring metric, not a training loss."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    inter = float((p * t).sum())
    denom = float(p.sum()) + float(t.sum()) + smooth
    return (2.0 * inter + smooth) / denom
