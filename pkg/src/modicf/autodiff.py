"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operations the models in this package need: dense
matmul, elementwise arithmetic with restricted broadcasting, reductions,
concat/slicing, and a handful of nonlinearities. Gradients accumulate by
summation over fan-out; a tape is built eagerly and consumed by a single
backward() sweep.

Broadcasting is deliberately limited to the two cases the models use,
scalar-with-tensor and row-vector-with-matrix. Anything else raises
ShapeError rather than silently following numpy semantics.
"""

import contextlib
import threading

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_state = threading.local()


def _grad_on():
    return getattr(_state, "grad_enabled", True)


def set_default_dtype(name):
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {name!r}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default dtype (e.g. 'float64' for tight oracle checks)."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (per-thread, pure evaluation)."""
    saved = _grad_on()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = saved


class Tensor:
    """A dense array plus optional gradient tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad) and _grad_on()
        self.grad = None
        self._backward = None
        self._parents = ()
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn):
    """Assemble a result node; record the tape only when some parent needs it."""
    requires = _grad_on() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires
    out.grad = None
    out._consumed = False
    if requires:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True)
    else:
        tensor.grad += grad


def backward(loss):
    """Run the reverse sweep from a scalar loss.

    Returns a dict mapping every reached leaf tensor with requires_grad to its
    gradient array. Tape buffers are released afterwards; calling backward a
    second time on the same loss raises.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.ndim != 0:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise RuntimeError("backward already called on this graph")
    if not loss.requires_grad:
        loss._consumed = True
        return {}

    # iterative topological order (graphs can be deep)
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    leaves = {}
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        elif node.requires_grad:
            leaves[id(node)] = (node, node.grad)
        if node is not loss:
            node.grad = None if node._backward is not None else node.grad
        node._consumed = True
        node._backward = None
        node._parents = ()
    return {t: g for t, g in leaves.values()}


# ---------------------------------------------------------------------------
# shape discipline


def _broadcast_check(a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"unsupported broadcast between shapes {sa} and {sb}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape == ():
        return grad.sum()
    # row vector broadcast over a matrix
    return grad.sum(axis=0)


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b)
    data = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b)
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b)
    data = a.data / b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    na, nb = a.data.ndim, b.data.ndim
    if na not in (1, 2) or nb not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {na}-D and {nb}-D")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def bwd(g):
        if na == 2 and nb == 2:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        elif na == 1 and nb == 2:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, np.outer(a.data, g))
        elif na == 2 and nb == 1:
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)
        else:  # 1-D . 1-D -> scalar
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

    return _make(data, (a, b), bwd)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _make(a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    orig = a.data.shape
    return _make(data.copy(), (a,), lambda g: _accumulate(a, g.reshape(orig)))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is not None and a.data.shape[axis] == 0:
        raise ShapeError("reduction over an empty axis")
    if axis is None and a.data.size == 0:
        raise ShapeError("reduction over an empty tensor")
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(data, tuple(tensors), bwd)


def _slice(a, key):
    a = as_tensor(a)
    data = a.data[key]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        _accumulate(a, buf)

    return _make(data.copy(), (a,), bwd)


def scale_rows(a, scale):
    """Multiply row i of a matrix by scale[i] (explicit column broadcast)."""
    a, scale = as_tensor(a), as_tensor(scale)
    if a.data.ndim != 2 or scale.data.shape != (a.data.shape[0],):
        raise ShapeError(
            f"scale_rows expects (n, m) and (n,), got {a.data.shape} and {scale.data.shape}"
        )
    col = scale.data[:, None]
    data = a.data * col

    def bwd(g):
        _accumulate(a, g * col)
        _accumulate(scale, (g * a.data).sum(axis=1))

    return _make(data, (a, scale), bwd)


def take_rows(a, idx):
    """Gather rows by integer index; backward scatter-adds (duplicates allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _make(data.copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a):
    a = as_tensor(a)
    data = _sigmoid_np(a.data)
    return _make(data, (a,), lambda g: _accumulate(a, g * data * (1.0 - data)))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(a):
    """Numerically stable log(sigmoid(x))."""
    a = as_tensor(a)
    data = -np.logaddexp(0.0, -a.data).astype(a.data.dtype)
    return _make(data, (a,), lambda g: _accumulate(a, g * _sigmoid_np(-a.data)))


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: _accumulate(a, g * (1.0 - data * data)))


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * factor, (a,), lambda g: _accumulate(a, g * factor))


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: _accumulate(a, g * data))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    data = np.sqrt(a.data)

    def bwd(g):
        if np.any(data == 0):
            raise DomainError("sqrt gradient at zero")
        _accumulate(a, g * 0.5 / data)

    return _make(data, (a,), bwd)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (g - dot))

    return _make(data, (a,), bwd)


def l2norm(a, axis=None, keepdims=False):
    """Euclidean norm along an axis. Zero-norm slices receive zero gradient."""
    a = as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=keepdims)
    data = np.sqrt(sq)

    def bwd(g):
        n = data if keepdims or axis is None else np.expand_dims(data, axis)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        _accumulate(a, np.where(n > 0, gg * a.data / safe, 0.0).astype(a.data.dtype))

    return _make(data, (a,), bwd)


def cosine_similarity(a, b, axis=-1):
    a, b = as_tensor(a), as_tensor(b)
    num = sum_(mul(a, b), axis=axis)
    return div(num, mul(l2norm(a, axis=axis), l2norm(b, axis=axis)))


def mse(a, b):
    """Mean squared error over all elements."""
    d = sub(a, b)
    return mean(mul(d, d))


def check_finite(t, what="value"):
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite {what} encountered")
    return t
