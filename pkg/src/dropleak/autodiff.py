"""Tape-based reverse-mode differentiation over float64 numpy buffers.

Every primitive's vector-Jacobian product is itself written in terms of
primitives, so a backward pass run with ``create_graph=True`` records its own
computation on the tape and can be differentiated again. That is what the
gradient-matching attack needs: the gradient of a distance between gradients.

Usage::

    with Tape() as tape:
        x = tape.watch(np.array([3.0]))
        y = (x * x).sum()
        (dx,) = backward(y, [x], create_graph=True)
        (ddx,) = backward(dx.sum(), [x])
"""

import threading
from contextlib import contextmanager

import numpy as np

from . import _kernels


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class UnknownOpError(AutodiffError, KeyError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


_state = threading.local()


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.recording = True
    return _state.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def recording(enabled):
    """Enable or suspend node recording on the active tape."""
    _stack()
    prev = _state.recording
    _state.recording = enabled
    try:
        yield
    finally:
        _state.recording = prev


class Node:
    __slots__ = ("op", "inputs", "attrs", "out")

    def __init__(self, op, inputs, attrs, out):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.out = out


class Tape:
    """Append-only record of primitive applications.

    Parents of node ``i`` always have indices below ``i``. ``reset`` drops all
    nodes; tensors recorded before a reset become plain constants.
    """

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()

    def __len__(self):
        return len(self.nodes)

    def watch(self, value):
        """Place ``value`` on the tape as a differentiable leaf."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        t = Tensor(data)
        t.tape = self
        t.gen = self.generation
        t.node = len(self.nodes)
        self.nodes.append(Node("leaf", (), {}, t))
        return t

    def reset(self):
        self.nodes = []
        self.generation += 1

    def checkpoint(self):
        return len(self.nodes)

    def truncate(self, marker):
        """Discard every node recorded after ``checkpoint()`` returned ``marker``."""
        for node in self.nodes[marker:]:
            node.out.tape = None
            node.out.node = None
        del self.nodes[marker:]

    def replay(self):
        """Recompute every node's value from the leaves; returns the value list."""
        values = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.out.data)
                continue
            args = [values[t.node] if self.owns(t) else t.data for t in node.inputs]
            values.append(OPS[node.op].forward(*args, **node.attrs))
        return values

    def owns(self, t):
        return t.tape is self and t.gen == self.generation and t.node is not None


class Tensor:
    """A float64 array, optionally bound to a node on a tape."""

    __slots__ = ("data", "tape", "node", "gen")
    __array_priority__ = 100

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = None
        self.node = None
        self.gen = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def live(self):
        return self.tape is not None and self.tape.owns(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        tag = f", node={self.node}" if self.live else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return record("add", [self, other])

    def __radd__(self, other):
        return record("add", [other, self])

    def __sub__(self, other):
        return record("sub", [self, other])

    def __rsub__(self, other):
        return record("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return record("scale", [self], factor=float(other))
        return record("mul", [self, other])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return record("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return record("matmul", [self, other])

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value):
    """A tensor that never joins a tape."""
    return Tensor(value.data if isinstance(value, Tensor) else value)


# ---------------------------------------------------------------------------
# primitive registry

class Op:
    """A primitive: numpy forward, tensor-level vjp, optional shape check."""

    def __init__(self, name, forward, vjp, check=None):
        self.name = name
        self.forward = forward
        self.vjp = vjp
        self.check = check


OPS = {}


def primitive(name, check=None):
    def register(vjp):
        def deco(forward):
            OPS[name] = Op(name, forward, vjp, check)
            return forward
        return deco
    return register


def record(op, inputs, **attrs):
    """Evaluate primitive ``op`` eagerly and append it to the active tape.

    A node is recorded only when recording is enabled and at least one input
    lives on the active tape; otherwise the result is a constant.
    """
    try:
        opdef = OPS[op]
    except KeyError:
        raise UnknownOpError(f"unknown op {op!r}") from None
    tensors = [as_tensor(i) for i in inputs]
    if opdef.check is not None:
        opdef.check(op, [t.shape for t in tensors], attrs)
    value = opdef.forward(*[t.data for t in tensors], **attrs)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and _state.recording and any(tape.owns(t) for t in tensors):
        out.tape = tape
        out.gen = tape.generation
        out.node = len(tape.nodes)
        tape.nodes.append(Node(op, tuple(tensors), attrs, out))
    return out


def _broadcastable(op, shapes, attrs):
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {shapes[0]} and {shapes[1]} do not broadcast") from None


def _matmul_check(op, shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError(f"{op}: shapes {a} and {b} are not aligned")


def _reshape_check(op, shapes, attrs):
    if int(np.prod(shapes[0])) != int(np.prod(attrs["shape"])):
        raise ShapeError(f"{op}: cannot reshape {shapes[0]} to {attrs['shape']}")


def _im2col_check(op, shapes, attrs):
    if len(shapes[0]) != 4:
        raise ShapeError(f"{op}: expected (N, C, H, W) input, got {shapes[0]}")


def sum_to(x, shape):
    """Reduce ``x`` by summation to a shape it was broadcast from."""
    if x.shape == tuple(shape):
        return x
    return record("sum_to", [x], shape=tuple(shape))


def broadcast_to(x, shape):
    if x.shape == tuple(shape):
        return x
    return record("broadcast_to", [x], shape=tuple(shape))


def _sum_to_np(a, shape):
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1)
    out = a.sum(axis=axes, keepdims=True) if axes else a
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


@primitive("add", _broadcastable)(lambda g, ins, out: (sum_to(g, ins[0].shape), sum_to(g, ins[1].shape)))
def _add(a, b):
    return a + b


@primitive("sub", _broadcastable)(lambda g, ins, out: (sum_to(g, ins[0].shape), sum_to(-g, ins[1].shape)))
def _sub(a, b):
    return a - b


@primitive("mul", _broadcastable)(
    lambda g, ins, out: (sum_to(g * ins[1], ins[0].shape), sum_to(g * ins[0], ins[1].shape)))
def _mul(a, b):
    return a * b


@primitive("scale")(lambda g, ins, out, factor: (g * factor,))
def _scale(a, factor):
    return a * factor


@primitive("matmul", _matmul_check)(lambda g, ins, out: (g @ transpose(ins[1]), transpose(ins[0]) @ g))
def _matmul(a, b):
    return a @ b


def _transpose_vjp(g, ins, out, axes):
    return (transpose(g, tuple(np.argsort(axes))),)


@primitive("transpose")(_transpose_vjp)
def _transpose(a, axes):
    return np.ascontiguousarray(a.transpose(axes))


@primitive("reshape", _reshape_check)(lambda g, ins, out, shape: (reshape(g, ins[0].shape),))
def _reshape(a, shape):
    return a.reshape(shape)


def _sum_vjp(g, ins, out, axis, keepdims):
    shape = ins[0].shape
    if not keepdims:
        kept = list(shape)
        axes = range(len(shape)) if axis is None else ([axis] if isinstance(axis, int) else axis)
        for ax in axes:
            kept[ax % len(shape)] = 1
        g = reshape(g, tuple(kept))
    return (broadcast_to(g, shape),)


@primitive("sum")(_sum_vjp)
def _sum(a, axis, keepdims):
    return np.asarray(a.sum(axis=axis, keepdims=keepdims))


@primitive("broadcast_to")(lambda g, ins, out, shape: (sum_to(g, ins[0].shape),))
def _broadcast_to(a, shape):
    return np.ascontiguousarray(np.broadcast_to(a, shape))


@primitive("sum_to")(lambda g, ins, out, shape: (broadcast_to(g, ins[0].shape),))
def _sum_to(a, shape):
    return _sum_to_np(a, shape)


@primitive("exp")(lambda g, ins, out: (g * out,))
def _exp(a):
    return np.exp(a)


@primitive("sigmoid")(lambda g, ins, out: (g * (out * (1.0 - out)),))
def _sigmoid(a):
    # split by sign so neither branch overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _lse_vjp(g, ins, out, axis):
    return (broadcast_to(g, ins[0].shape) * exp(ins[0] - out),)


@primitive("logsumexp")(_lse_vjp)
def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def _im2col_vjp(g, ins, out, k, stride, pad):
    return (record("col2im", [g], x_shape=ins[0].shape, k=k, stride=stride, pad=pad),)


@primitive("im2col", _im2col_check)(_im2col_vjp)
def _im2col(x, k, stride, pad):
    return _kernels.im2col(x, k, stride, pad)


def _col2im_vjp(g, ins, out, x_shape, k, stride, pad):
    return (record("im2col", [g], k=k, stride=stride, pad=pad),)


@primitive("col2im")(_col2im_vjp)
def _col2im(cols, x_shape, k, stride, pad):
    return _kernels.col2im(cols, x_shape, k, stride, pad)


def _take_vjp(g, ins, out, index):
    return (record("scatter", [g], shape=ins[0].shape, index=index),)


@primitive("take")(_take_vjp)
def _take(a, index):
    return a.reshape(-1)[list(index)]


@primitive("scatter")(lambda g, ins, out, shape, index: (record("take", [g], index=index),))
def _scatter(a, shape, index):
    out = np.zeros(int(np.prod(shape)))
    np.add.at(out, list(index), a.reshape(-1))
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# functional surface

def add(a, b):
    return record("add", [a, b])


def mul(a, b):
    return record("mul", [a, b])


def matmul(a, b):
    return record("matmul", [a, b])


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    return record("transpose", [a], axes=tuple(int(i) for i in axes))


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    a = as_tensor(a)
    if -1 in shape:
        shape = a.data.reshape(shape).shape
    return record("reshape", [a], shape=shape)


def tsum(a, axis=None, keepdims=False):
    return record("sum", [a], axis=axis, keepdims=keepdims)


def exp(a):
    return record("exp", [a])


def sigmoid(a):
    return record("sigmoid", [a])


def logsumexp(a, axis=-1):
    """``log(sum(exp(a)))`` along ``axis``, keeping the reduced dim."""
    return record("logsumexp", [a], axis=axis)


def take(a, index):
    """Gather entries of the flattened tensor at integer positions ``index``."""
    return record("take", [a], index=tuple(int(i) for i in np.atleast_1d(index)))


def im2col(x, k, stride, pad):
    return record("im2col", [x], k=k, stride=stride, pad=pad)


def conv2d(x, weight, bias, stride=1, pad=0):
    """2-D cross-correlation of (N, C, H, W) input with (OC, C, k, k) weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    oc, wc, k, k2 = weight.shape
    if wc != c or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {weight.shape} disagree")
    oh = _kernels.conv_out_size(h, k, stride, pad)
    ow = _kernels.conv_out_size(w, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    cols = im2col(x, k, stride, pad)
    y = reshape(weight, (oc, c * k * k)) @ cols
    if bias is not None:
        y = y + reshape(bias, (oc, 1))
    y = reshape(y, (oc, n, oh, ow))
    return transpose(y, (1, 0, 2, 3))


# ---------------------------------------------------------------------------
# differentiation

def backward(output, targets, create_graph=False):
    """Gradients of scalar ``output`` with respect to each tensor in ``targets``.

    Returns a list aligned with ``targets``. A target that does not influence
    ``output`` gets an exact zero tensor. With ``create_graph`` the returned
    gradients are recorded on the tape and can be differentiated again.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    tape = output.tape
    if tape is None or not tape.owns(output):
        return [constant(np.zeros(t.shape)) for t in targets]
    wanted = {}
    for pos, t in enumerate(targets):
        if tape.owns(t):
            wanted.setdefault(t.node, []).append(pos)
    result = [None] * len(targets)
    pending = {output.node: Tensor(np.ones(output.shape))}
    nodes = tape.nodes
    with recording(create_graph):
        for i in range(output.node, -1, -1):
            g = pending.pop(i, None)
            if g is None:
                continue
            if i in wanted:
                for pos in wanted[i]:
                    result[pos] = g
            node = nodes[i]
            if node.op == "leaf":
                continue
            grads = OPS[node.op].vjp(g, node.inputs, node.out, **node.attrs)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not tape.owns(t):
                    continue
                prev = pending.get(t.node)
                pending[t.node] = gi if prev is None else prev + gi
    for pos, t in enumerate(targets):
        if result[pos] is None:
            result[pos] = constant(np.zeros(t.shape))
    return result


def grad(f, x, create_graph=False):
    """Gradient of scalar function ``f`` at array ``x`` as a numpy array."""
    with Tape() as tape:
        xt = tape.watch(np.array(x, dtype=np.float64))
        (g,) = backward(f(xt), [xt], create_graph=create_graph)
        return g.data.copy()


def grad_check(f, x, eps=1e-5):
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The relative error per element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = grad(f, x)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(constant(x)).item()
        flat[i] = orig - eps
        fm = f(constant(x)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite value while probing element {i}")
        num_flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
