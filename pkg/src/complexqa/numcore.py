"""A small dense-tensor library with tape-based reverse-mode differentiation.

Only the operations the graph model needs are provided.  Every op returns a
new :class:`Tensor`; inputs are never modified.  Non-finite results raise
:class:`~complexqa.errors.NumericError` at the op that produced them.

Default precision is float32.  ``ParamStore.astype(np.float64)`` gives a
64-bit copy for finite-difference gradient checks.
"""

import contextlib
import zlib
from collections import OrderedDict

import numpy as np

from . import kernels
from .errors import GraphCycle, NumericError, ShapeMismatch

DEFAULT_DTYPE = np.float32
LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True
_activation_log = None
_finite_checks = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def record_activation_patterns():
    """Collect the sign pattern of every LeakyReLU input evaluated in the block.

    Finite-difference checks use this to tell whether a perturbation moved
    any pre-activation across the kink at zero.
    """
    global _activation_log
    previous = _activation_log
    _activation_log = []
    try:
        yield _activation_log
    finally:
        _activation_log = previous


@contextlib.contextmanager
def finite_checks(enabled):
    """Turn the per-op NaN/Inf check on or off inside the block."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    try:
        yield
    finally:
        _finite_checks = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        # float arrays keep their precision; lists, scalars and ints get the default
        if dtype is None and (arr.dtype.kind != "f" or not isinstance(data, (np.ndarray, np.generic))):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name!r})"

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check(arr, op):
    # a NaN/Inf anywhere makes the sum non-finite; confirm before raising
    # because the sum of large finite values can overflow on its own
    if _finite_checks and not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite output from {op}")
    return arr


def _make(data, parents, backward_fn, op):
    out = Tensor(_check(data, op), dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    out.name = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, dtype=as_tensor(a).dtype)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c):
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {old} -> {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).astype(a.dtype),)

    return _make(out, (a,), bw, "sum")


def mean(a):
    n = a.data.size
    out = np.asarray(a.data.sum() / n, dtype=a.dtype)
    return _make(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(out, tensors, bw, "concat")


def slice_cols(a, start, stop):
    """Columns ``start:stop`` of a 2-D tensor."""
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeMismatch(f"slice_cols: {a.shape}[:, {start}:{stop}]")

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), (a,), bw, "slice")


def gather_rows(a, index):
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def bw(g):
        return (kernels.segment_sum(g, index, n),)

    return _make(a.data[index], (a,), bw, "gather")


def segment_sum(values, segment_ids, num_segments):
    """Row sums per segment: ``out[s] = sum(values[r] for r with ids[r] == s)``."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != values.shape[0]:
        raise ShapeMismatch(f"segment_sum: {values.shape[0]} rows vs {ids.shape[0]} ids")
    out = kernels.segment_sum(values.data, ids, num_segments)
    return _make(out, (values,), lambda g: (g[ids],), "segment_sum")


def segment_mean(values, segment_ids, num_segments):
    ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(ids, minlength=num_segments).astype(values.dtype)
    counts = np.maximum(counts, 1).reshape((-1,) + (1,) * (values.data.ndim - 1))
    return mul(segment_sum(values, ids, num_segments), Tensor(1.0 / counts, dtype=values.dtype))


def segment_max(values, segment_ids, num_segments):
    ids = np.asarray(segment_ids, dtype=np.int64)
    out, arg = kernels.segment_max(values.data, ids, num_segments)

    def bw(g):
        grad = np.zeros(values.shape, dtype=values.dtype)
        flat_g = g.reshape(g.shape[0], -1)
        flat_arg = arg.reshape(arg.shape[0], -1)
        gv = grad.reshape(grad.shape[0], -1)
        cols = np.broadcast_to(np.arange(flat_g.shape[1]), flat_g.shape)
        ok = flat_arg >= 0
        gv[flat_arg[ok], cols[ok]] += flat_g[ok]
        return (grad,)

    return _make(out.astype(values.dtype), (values,), bw, "segment_max")


def segment_softmax(scores, segment_ids, num_segments):
    """Softmax over the rows of each segment, independently per column."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    x = scores.data
    seg_max, _ = kernels.segment_max(x, ids, num_segments)
    z = np.exp(x - seg_max[ids])
    denom = kernels.segment_sum(z, ids, num_segments)
    w = z / denom[ids]

    def bw(g):
        dot = kernels.segment_sum(g * w, ids, num_segments)
        return (w * (g - dot[ids]),)

    return _make(w, (scores,), bw, "segment_softmax")


# ---------------------------------------------------------------------------
# activations and normalization
# ---------------------------------------------------------------------------

def sigmoid(a):
    half = a.dtype.type(0.5)
    out = half + half * np.tanh(half * a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def leaky_relu(a, slope=LEAKY_SLOPE):
    if _activation_log is not None:
        _activation_log.append(a.data > 0)
    slope = a.dtype.type(slope)
    factor = np.where(a.data > 0, a.dtype.type(1), slope).astype(a.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def softmax_rows(a):
    """Softmax along the last axis."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    z = np.exp(x)
    out = z / z.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def batch_norm(x, gamma, beta, state, train, momentum=BN_MOMENTUM, eps=BN_EPS, update_stats=True):
    """Normalize over rows.

    ``state`` holds ``running_mean`` / ``running_var`` arrays.  In training the
    batch statistics (biased variance) are used and, unless ``update_stats`` is
    false, the running buffers are replaced by new arrays with the unbiased
    variance blended in.  Eval mode uses the running buffers only.
    """
    data = x.data
    n = data.shape[0]
    if train:
        mu = data.mean(axis=0)
        var = data.var(axis=0)
        if update_stats:
            unbiased = var * n / (n - 1) if n > 1 else var
            state["running_mean"] = ((1 - momentum) * state["running_mean"] + momentum * mu).astype(
                state["running_mean"].dtype
            )
            state["running_var"] = ((1 - momentum) * state["running_var"] + momentum * unbiased).astype(
                state["running_var"].dtype
            )
    else:
        mu = state["running_mean"].astype(data.dtype)
        var = state["running_var"].astype(data.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(data.dtype)
    xhat = (data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        g_gamma = (g * xhat).sum(axis=0)
        g_beta = g.sum(axis=0)
        gx_hat = g * gamma.data
        if train:
            gx = inv_std / n * (n * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0))
        else:
            gx = gx_hat * inv_std
        return gx.astype(data.dtype), g_gamma, g_beta

    return _make(out.astype(data.dtype), (x, gamma, beta), bw, "batch_norm")


def dropout(x, rate, rng, train):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    mask = keep / x.dtype.type(1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def dropout_rng(seed, site, step):
    """Generator keyed by (seed, dropout site, step); ``site`` may be a string."""
    if isinstance(site, str):
        site = zlib.crc32(site.encode("utf-8"))
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(site), int(step)])


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root):
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key, 0)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphCycle("tape contains a cycle")
        state[key] = 1
        stack.append((node, True))
        for parent in node.parents:
            pmark = state.get(id(parent), 0)
            if pmark == 1:
                raise GraphCycle("tape contains a cycle")
            if pmark == 0 and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {node.name}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# parameter storage
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered named parameters, non-trainable buffers and the RNG seed."""

    def __init__(self, seed=0, dtype=DEFAULT_DTYPE):
        self.params = OrderedDict()
        self.buffers = OrderedDict()
        self.seed = int(seed)
        self.counter = 0
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(self.seed)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        return self.params[name]

    def add_buffer(self, name, value):
        if name in self.buffers:
            raise KeyError(f"duplicate buffer {name}")
        self.buffers[name] = np.asarray(value, dtype=self.dtype)

    def uniform(self, name, shape, bound):
        return self.add(name, self._rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self):
        return OrderedDict(
            (n, np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in self.params.items()
        )

    def num_parameters(self):
        return int(np.sum([p.data.size for p in self.params.values()]))

    def astype(self, dtype):
        """Independent copy with every parameter and buffer cast to ``dtype``."""
        out = ParamStore(self.seed, dtype)
        out.counter = self.counter
        for n, p in self.params.items():
            out.add(n, p.data.astype(dtype))
        for n, b in self.buffers.items():
            out.add_buffer(n, b.astype(dtype))
        return out

    def copy(self):
        return self.astype(self.dtype)

    def state_arrays(self):
        """Parameters then buffers as an ordered ``name -> ndarray`` map."""
        out = OrderedDict((n, p.data) for n, p in self.params.items())
        out.update((f"buffer:{n}", b) for n, b in self.buffers.items())
        return out

    def load_arrays(self, arrays):
        for n, p in self.params.items():
            src = np.asarray(arrays[n])
            if src.shape != p.data.shape:
                raise ShapeMismatch(f"{n}: expected {p.data.shape}, got {src.shape}")
            p.data = src.astype(self.dtype).copy()
        for n in self.buffers:
            src = np.asarray(arrays[f"buffer:{n}"])
            self.buffers[n] = src.astype(self.dtype).copy()


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

def _pattern(loss_fn):
    with record_activation_patterns() as log:
        value = float(loss_fn().data)
    return value, (np.concatenate([a.ravel() for a in log]) if log else np.zeros(0, bool))


def check_gradients(loss_fn, params, h=1e-4, min_h=1e-8, names=None, floor=1e-6):
    """Compare backprop gradients with central differences, entry by entry.

    ``loss_fn`` takes no arguments and returns a scalar tensor built from
    ``params``.  A stencil whose two sides see a different LeakyReLU sign
    pattern than the base point straddles a kink, where the difference
    quotient is not a derivative estimate; those entries are retried with the
    step divided by ten until the pattern holds or ``min_h`` is reached.

    Returns ``{name: {"max_error", "kinked", "size"}}`` where ``max_error`` is
    ``max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf, floor)``
    over the tensor.  The floor keeps tensors whose true gradient is exactly
    zero (a bias feeding straight into batch norm) from dividing round-off by
    round-off.
    """
    params.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = params.grads()
    report = {}
    with no_grad(), finite_checks(False):
        _, base = _pattern(loss_fn)
        for name, tensor in params.params.items():
            if names is not None and name not in names:
                continue
            flat = tensor.data.reshape(-1)
            numeric = np.zeros(flat.size)
            kinked = 0
            for i in range(flat.size):
                old = flat[i]
                step = h
                while True:
                    flat[i] = old + step
                    fp, pp = _pattern(loss_fn)
                    flat[i] = old - step
                    fm, pm = _pattern(loss_fn)
                    flat[i] = old
                    smooth = np.array_equal(pp, base) and np.array_equal(pm, base)
                    if smooth or step / 10 < min_h:
                        break
                    step /= 10
                if step != h:
                    kinked += 1
                numeric[i] = (fp - fm) / (2 * step)
            a = analytic[name].reshape(-1).astype(np.float64)
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
            err = float(np.abs(a - numeric).max(initial=0.0) / scale)
            report[name] = {"max_error": err, "kinked": kinked, "size": int(flat.size)}
    return report
