"""Dense float64 tensors with tape-based reverse-mode differentiation.

Each differentiable primitive computes its output with numpy and, when any
input requires a gradient, appends a node to the calling thread's
ComputationTape. `backward` walks the tape in reverse and accumulates
gradients into leaf tensors; `grad` does the same sweep but hands the
gradients back instead of storing them.

Broadcasting follows numpy, so trailing-dimension and scalar broadcasts
(the only ones the model uses) work out of the box; gradients are summed
back to the input shape.
"""

import threading
from contextlib import contextmanager

import numpy as np

from errors import DomainError, ShapeError, UsageError

MASK_FILL = -1e9
GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    """A float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} dims={self.dims} requires_grad={self.requires_grad}>"

    @property
    def dims(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single value, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_tape=False):
        backward(self, retain_tape=retain_tape)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


##############################################################################
# Tape


class Node:
    """One recorded primitive: output, inputs and the local gradient rule."""

    __slots__ = ("op", "output", "inputs", "backward")

    def __init__(self, op, output, inputs, backward):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward = backward


class ComputationTape:
    """Ordered record of primitives; each node's inputs precede it."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        if self.consumed:
            self.nodes = []
            self.consumed = False
        self.nodes.append(node)

    def clear(self):
        self.nodes = []
        self.consumed = False


_local = threading.local()


def current_tape():
    """Tape of the calling thread (one tape per thread)."""

    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = ComputationTape()
    return tape


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""

    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(op, data, inputs, backward_fn):
    needs_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        current_tape().record(Node(op, out, inputs, backward_fn))
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after a numpy broadcast."""

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_dims(op, a, b):
    try:
        return np.broadcast_shapes(a.dims, b.dims)
    except ValueError:
        raise ShapeError(op, [a.dims, b.dims]) from None


##############################################################################
# Reverse sweep


def _sweep(loss, retain_tape):
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        dims = loss.dims if isinstance(loss, Tensor) else ()
        raise UsageError(f"reverse sweep needs a scalar loss, got dims {dims}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    tape = current_tape()
    if not tape.nodes or tape.consumed:
        raise UsageError("reverse sweep over an empty tape")

    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g_in in zip(node.inputs, node.backward(g_out)):
            if g_in is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in
                tensors[key] = inp
    if not retain_tape:
        tape.nodes = []
        tape.consumed = True
    return {key: (tensors[key], g) for key, g in grads.items() if key not in produced}


def backward(loss, retain_tape=False):
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf."""

    for leaf, g in _sweep(loss, retain_tape).values():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad(loss, inputs, retain_tape=False):
    """Return d(loss)/d(input) for each input without touching `.grad`."""

    swept = _sweep(loss, retain_tape)
    out = []
    for tensor in inputs:
        entry = swept.get(id(tensor))
        out.append(np.zeros_like(tensor.data) if entry is None else entry[1])
    return out


##############################################################################
# Arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("add", a, b)

    def back(g):
        return _unbroadcast(g, a.dims), _unbroadcast(g, b.dims)

    return _result("add", a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.dims), _unbroadcast(-g, b.dims)

    return _result("sub", a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.dims), _unbroadcast(g * a.data, b.dims)

    return _result("mul", a.data * b.data, (a, b), back)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.dims[-1] != b.dims[-2]:
        raise ShapeError("matmul", [a.dims, b.dims])
    try:
        np.broadcast_shapes(a.dims[:-2], b.dims[:-2])
    except ValueError:
        raise ShapeError("matmul", [a.dims, b.dims], "batch dims") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.dims), _unbroadcast(gb, b.dims)

    return _result("matmul", np.matmul(a.data, b.data), (a, b), back)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.dims).copy(),)

    return _result("sum", out, (a,), back)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.dims[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def reshape(a, dims):
    a = as_tensor(a)
    try:
        out = a.data.reshape(dims)
    except ValueError:
        raise ShapeError("reshape", [a.dims, tuple(dims)]) from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.dims),))


def transpose(a, axes):
    a = as_tensor(a)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", [a.dims, tuple(axes)], "axes must permute all dims")
    inverse = np.argsort(axes)
    return _result("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", [t.dims for t in tensors]) from None
    bounds = np.cumsum([t.dims[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", out, tuple(tensors), back)


def take(a, indices, axis=-1):
    """Index select along `axis` (np.take semantics)."""

    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim > 1:
        raise ShapeError("take", [a.dims, indices.shape], "indices must be a scalar or 1-D")
    size = a.dims[axis]
    if indices.size and (indices.min() < -size or indices.max() >= size):
        raise ShapeError("take", [a.dims, indices.shape], f"index out of range for axis {axis}")
    out = np.take(a.data, indices, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        return (full,)

    return _result("take", out, (a,), back)


##############################################################################
# Elementwise nonlinearities


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()!r})")
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError(f"fractional power {p} of negative value")
    if p < 0 and np.any(a.data == 0):
        raise DomainError(f"negative power {p} of zero")
    out = a.data ** p
    return _result("power", out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def sigmoid(a):
    a = as_tensor(a)
    z = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    """log(sigmoid(a)) without overflow for large |a|."""

    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    z = np.exp(-np.abs(a.data))
    # d/da log sigmoid(a) = sigmoid(-a)
    slope = np.where(a.data >= 0, z / (1.0 + z), 1.0 / (1.0 + z))
    return _result("log_sigmoid", out, (a,), lambda g: (g * slope,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1.0 - out ** 2),))


def gelu(a):
    """GELU, tanh approximation."""

    a = as_tensor(a)
    x = a.data
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        d_inner = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _result("gelu", out, (a,), back)


def relu(a):
    a = as_tensor(a)
    on = a.data > 0
    return _result("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def abs(a):
    a = as_tensor(a)
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a, floor):
    """max(a, floor); the gradient is zero where the floor is active."""

    a = as_tensor(a)
    keep = a.data >= floor
    return _result("clamp_min", np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


##############################################################################
# Normalisations and masked reductions


def _softmax_back(out, axis):
    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return back


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", out, (a,), _softmax_back(out, axis))


def masked_softmax(a, mask, axis=-1):
    """Softmax over entries where `mask` is true; masked entries are exactly 0."""

    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, a.dims)
    except ValueError:
        raise ShapeError("masked_softmax", [a.dims, mask.shape]) from None
    if not np.all(mask.any(axis=axis)):
        raise DomainError("masked_softmax: a row has no unmasked entry")
    logits = np.where(mask, a.data, MASK_FILL)
    e = np.exp(logits - logits.max(axis=axis, keepdims=True))
    e = np.where(mask, e, 0.0)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result("masked_softmax", out, (a,), _softmax_back(out, axis))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then scale by `gain` and shift by `bias`."""

    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.dims[-1]
    if gain.dims != (width,) or bias.dims != (width,):
        raise ShapeError("layer_norm", [x.dims, gain.dims, bias.dims])
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gain.data + bias.data

    def back(g):
        gx = g * gain.data
        dx = inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", out, (x, gain, bias), back)


def masked_mean(x, mask, axis):
    """Mean of `x` along `axis` over positions where `mask` is true.

    `mask` covers the leading dims of `x` up to and including `axis`;
    trailing feature dims are broadcast.
    """

    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    axis = axis % x.ndim
    if mask.shape != x.dims[:mask.ndim] or mask.ndim <= axis:
        raise ShapeError("masked_mean", [x.dims, mask.shape])
    m = mask.reshape(mask.shape + (1,) * (x.ndim - mask.ndim))
    count = m.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise DomainError("masked_mean: empty mask")
    out = np.where(m, x.data, 0.0).sum(axis=axis, keepdims=True) / count

    def back(g):
        g = np.expand_dims(g, axis)
        return (np.where(m, g / count, 0.0),)

    return _result("masked_mean", np.squeeze(out, axis=axis), (x,), back)
