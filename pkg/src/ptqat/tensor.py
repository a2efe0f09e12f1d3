"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that has at least one input with ``requires_grad`` appends a node to
an implicit tape: the node is stamped with a monotonically increasing id, so
sorting reachable nodes by id recovers the forward order and ``backward``
walks it strictly in reverse. Ops whose inputs are all constant record
nothing, which is how frozen layers avoid paying for weight gradients.
"""

import itertools
import math

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant instead")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    # -- differentiation ---------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(t) into ``t.grad`` for every tracked ``t``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        nodes = _reachable(self)
        pending = {self._id: np.asarray(grad, dtype=np.float64)}
        for node in nodes:
            g = pending.pop(node._id, None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg


def _reachable(root):
    """Tracked nodes reachable from ``root``, newest first."""
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def tape(root):
    """Op names of the recorded graph behind ``root`` in forward order."""
    return [t.op for t in reversed(_reachable(root)) if t.op != "leaf"]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, op, backward):
    """Wrap ``data`` as the output of ``op``; records a tape node if needed.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return make_node(a.data + b.data, (a, b), "add", backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return make_node(a.data * b.data, (a, b), "mul", backward)


def neg(a):
    return make_node(-a.data, (a,), "neg", lambda g: (-g,))


def reshape(a, shape):
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {src} as {tuple(shape)}") from None
    return make_node(data, (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return make_node(data, (a,), "transpose", lambda g: (g.transpose(inv),))


def tsum(a, axis=None, keepdims=False):
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", backward)


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def relu(x):
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v**3))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return make_node(out, (x,), "gelu", backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), "softmax", backward)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), "log_softmax", backward)


def layernorm(x, axis=-1, eps=1e-5):
    """Normalise to zero mean / unit variance along ``axis`` (no affine part)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_node(xhat, (x,), "layernorm", backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        da = db = None
        if a.requires_grad:
            da = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            db = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return da, db

    return make_node(out, (a, b), "matmul", backward)


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is [out, in]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[1])
    out = x2 @ w.data.T
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[0],))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        dx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        dw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return dx, dw
        db = g2.sum(axis=0) if b.requires_grad else None
        return dx, dw, db

    return make_node(out, parents, "linear", backward)


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, stride=1, pad=0, bias=None):
    """2-D cross-correlation with zero padding; x [N,C,H,W], w [K,C,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, ck, kh, kw = w.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {ck} ({x.shape} vs {w.shape})")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _kernels.im2col(xp, kh, kw, stride, oh, ow)
    w2 = w.data.reshape(k, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, k, oh, ow)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g3 = g.reshape(n, k, oh * ow)
        dx = dw = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3)
            dxp = _kernels.col2im(dcols, c, h + 2 * pad, wd + 2 * pad, kh, kw, stride, oh, ow)
            dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        if w.requires_grad:
            gk = g3.transpose(1, 0, 2).reshape(k, -1)
            ck2 = cols.transpose(1, 0, 2).reshape(cols.shape[1], -1)
            dw = (gk @ ck2.T).reshape(w.shape)
        if bias is None:
            return dx, dw
        return dx, dw, (g3.sum(axis=(0, 2)) if bias.requires_grad else None)

    return make_node(out, parents, "conv2d", backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [N, C]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits, axis=1)
    picked = logp.data[np.arange(n), labels]
    loss = -picked.mean()

    def backward(g):
        d = np.zeros_like(logp.data)
        d[np.arange(n), labels] = -g / n
        return (d,)

    return make_node(np.asarray(loss), (logp,), "nll", backward)


def mse_loss(a, b):
    """Mean squared elementwise difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = 2.0 * g * diff / n
        return (d if a.requires_grad else None, -d if b.requires_grad else None)

    return make_node(np.asarray((diff * diff).mean()), (a, b), "mse", backward)
