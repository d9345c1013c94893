"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records its inputs and a backward rule on the output
tensor. :func:`backward` walks the recorded graph from a scalar root in reverse
topological order and accumulates gradients into every ``requires_grad`` leaf.

Binary elementwise ops require equal shapes; the only broadcast allowed is a
0-d tensor (or Python number) against any shape. Use :func:`expand` for
anything else.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from hve.errors import ContractError, DomainError, ShapeError

ACOSH_CLAMP = 1e-12

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._consumed = False
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(root):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``root``.

    A root can be differentiated once; build a new graph for another pass.
    """
    if not isinstance(root, Tensor) or root.data.size != 1:
        shape = root.shape if isinstance(root, Tensor) else type(root).__name__
        raise ContractError(f"backward() needs a scalar root, got shape {shape}")
    if root._consumed:
        raise ContractError("backward() already ran on this root; rebuild the graph first")
    if not root.requires_grad:
        raise ContractError("backward() root does not depend on any requires_grad tensor")
    root._consumed = True

    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# elementwise


def _binary_shapes(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _fit(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_fit(g, sa), _fit(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_fit(g, sa), _fit(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (_fit(g * bd, sa), _fit(g * ad, sb)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _fit(g / bd, sa), _fit(-g * out / bd, sb)

    return Tensor._result(out, (a, b), back, "div")


def neg(x):
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c):
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,), "scale")


def tanh(x):
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x):
    y = expit(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x):
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softplus(x):
    xd = x.data
    return Tensor._result(np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),), "softplus")


def exp(x):
    y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log: input must be strictly positive")
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x):
    if np.any(x.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    y = np.sqrt(x.data)
    return Tensor._result(y, (x,), lambda g: (g / (2.0 * y),), "sqrt")


def acosh(x):
    """Inverse hyperbolic cosine.

    Inputs in ``[1 - 1e-12, 1)`` are clamped to 1; anything lower raises
    :class:`DomainError`. The gradient at 1 is taken as 0.
    """
    xd = x.data
    if np.any(xd < 1.0 - ACOSH_CLAMP):
        raise DomainError(f"acosh: input {xd.min()!r} below 1")
    xc = np.maximum(xd, 1.0)
    y = np.arccosh(xc)
    inside = xc > 1.0
    denom = np.sqrt(np.where(inside, xc * xc - 1.0, 1.0))
    dy = np.where(inside, 1.0 / denom, 0.0)
    return Tensor._result(y, (x,), lambda g: (g * dy,), "acosh")


_UNARY = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softplus": softplus,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "acosh": acosh,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op, *args):
    """Dispatch by name: ``elementwise("tanh", x)``, ``elementwise("scale", x, 2.0)``."""
    if op == "scale":
        return scale(*args)
    if op in _UNARY:
        return _UNARY[op](*args)
    if op in _BINARY:
        return _BINARY[op](*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    """Matrix product for 1-D/2-D operands (vectors act as row/column)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: expected 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    a2 = ad.reshape(1, -1) if ad.ndim == 1 else ad
    b2 = bd.reshape(-1, 1) if bd.ndim == 1 else bd

    def back(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(ad.shape) if a.requires_grad else None
        gb = (a2.T @ g2).reshape(bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), back, "matmul")


def transpose(x):
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got {x.shape}")
    return Tensor._result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def reshape(x, shape):
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def expand(x, shape):
    """Broadcast ``x`` to ``shape`` (numpy rules); gradients are summed back."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return Tensor._result(out, (x,), back, "expand")


def index(x, idx):
    """Differentiable ``x[idx]`` (basic or integer-array indexing)."""
    src = x.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(x.data[idx], (x,), back, "index")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref) if ref else 0
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._result(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


# --------------------------------------------------------------------------
# reductions


def _axes(x, axis):
    return None if axis is None else (axis % x.ndim,)


def sum_(x, axis=None):
    src = x.shape
    ax = _axes(x, axis)

    def back(g):
        if ax is not None:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._result(np.asarray(x.data.sum(axis=ax)), (x,), back, "sum")


def mean(x, axis=None):
    if x.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise ShapeError(f"mean: empty reduction over shape {x.shape}")
    src = x.shape
    ax = _axes(x, axis)
    count = x.size if ax is None else src[ax[0]]

    def back(g):
        if ax is not None:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, src).copy(),)

    return Tensor._result(np.asarray(x.data.mean(axis=ax)), (x,), back, "mean")


def l2norm(x, axis=None):
    """Euclidean norm; the gradient at a zero vector is defined as zero."""
    ax = _axes(x, axis)
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=ax, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def back(g):
        if ax is not None:
            g = np.expand_dims(g, ax)
        return (np.where(n > 0, g * xd / safe, 0.0),)

    out = n.reshape(()) if ax is None else np.squeeze(n, axis=ax)
    return Tensor._result(out, (x,), back, "l2norm")


def reduce(op, x, axis=None):
    ops = {"sum": sum_, "mean": mean, "l2norm": l2norm}
    if op not in ops:
        raise ValueError(f"unknown reduction {op!r}")
    return ops[op](x, axis)


# --------------------------------------------------------------------------
# normalisation


def softmax(x, axis=-1):
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), back, "softmax")


def log_softmax(x, axis=-1):
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), back, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis with population variance, then scale and shift."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm: need at least 2 features, got {x.shape}")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    gd = gamma.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbeta = g.sum(axis=lead) if lead else g.copy()
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return Tensor._result(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


# --------------------------------------------------------------------------
# convolution


def conv2d(x, kernels, bias):
    """Valid, stride-1 cross-correlation of a ``c_in×h×w`` input."""
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: expected c×h×w input and 4-D kernels, got {x.shape}, {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: kernel channels {kc} != input channels {c_in}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kh}×{kw} larger than input {h}×{w}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    oh, ow = h - kh + 1, w - kw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(1, 2))  # c_in×oh×ow×kh×kw
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, oh * ow)
    kmat = kernels.data.reshape(c_out, -1)
    out = (kmat @ cols + bias.data[:, None]).reshape(c_out, oh, ow)

    def back(g):
        g2 = g.reshape(c_out, oh * ow)
        dk = (g2 @ cols.T).reshape(kernels.shape) if kernels.requires_grad else None
        db = g2.sum(axis=1)
        dx = None
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(c_in, kh, kw, oh, ow)
            dx = np.zeros((c_in, h, w))
            for i in range(kh):
                for j in range(kw):
                    dx[:, i:i + oh, j:j + ow] += dcols[:, i, j]
        return dx, dk, db

    return Tensor._result(out, (x, kernels, bias), back, "conv2d")


# --------------------------------------------------------------------------
# stochastic


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return mul(x, Tensor(mask))
