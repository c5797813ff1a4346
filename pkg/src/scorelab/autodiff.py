"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every primitive's vector-Jacobian product is itself written with primitives,
so a backward pass run with ``create_graph=True`` is recorded on the tape like
any forward computation and can be differentiated again.  This is what the
second-order objectives (exact score matching, sliced score matching) and the
energy-form networks (score = grad of a scalar) rely on.

Usage::

    with Tape():
        x = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        y = scale(sqnorm(x), 0.5)
        (gx,) = backward(y, [x])
"""

import threading
import weakref
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor", "Tape", "record", "backward", "grad", "jacobian_row",
    "no_grad", "checked", "set_checked", "as_tensor", "constant",
    "add", "sub", "mul", "scale", "neg", "matmul", "add_bias", "tanh",
    "sigmoid", "softplus", "tsum", "inner", "sqnorm", "concat",
    "transpose", "reshape", "broadcast_to", "sum_to", "slice_axis",
    "pad_axis",
]


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.checked = False
        self.tapes = []
        self.default_tape = None


_state = _State()


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """Wrap ``x`` as a tensor that never receives gradients."""
    return Tensor(x)


class _Node:
    __slots__ = ("index", "kind", "inputs", "attrs", "out_data", "_out", "__weakref__")

    def __init__(self, index, kind, inputs, attrs, out):
        self.index = index
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.out_data = out.data
        self._out = weakref.ref(out)

    @property
    def output(self):
        return self._out()


class Tape:
    """Append-only record of primitive applications.

    Nodes are appended in execution order, so each node's operands always
    precede it.  Entering the tape as a context manager makes it the active
    tape for the current thread.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def _append(self, kind, inputs, attrs, out):
        node = _Node(len(self.nodes), kind, inputs, attrs, out)
        node_tape = weakref.ref(self)
        self.nodes.append(node)
        out.node = (node_tape, node)
        return node

    def replay(self):
        """Re-run every node forward from its recorded operands.

        Returns True when every recomputed output matches the recorded one
        bit for bit.
        """
        fresh = {}
        for node in self.nodes:
            arrays = []
            for t in node.inputs:
                arrays.append(fresh.get(_key(t), t.data) if _on_tape(t, self) else t.data)
            out = _OPS[node.kind][0](*arrays, **node.attrs)
            if out.shape != node.out_data.shape or not np.array_equal(out, node.out_data, equal_nan=True):
                return False
            fresh[node.index] = out
        return True


def current_tape():
    if _state.tapes:
        return _state.tapes[-1]
    if _state.default_tape is None:
        _state.default_tape = Tape()
    return _state.default_tape


def reset_default_tape():
    _state.default_tape = None


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def _grad_mode(enabled):
    prev = _state.grad_enabled
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_checked(flag: bool):
    """Turn NaN/Inf detection on every primitive on or off."""
    _state.checked = bool(flag)


@contextmanager
def checked(flag=True):
    prev = _state.checked
    _state.checked = flag
    try:
        yield
    finally:
        _state.checked = prev


def _key(t):
    # node index for recorded tensors, negative id for leaves
    return t.node[1].index if t.node is not None else ~id(t)


def _on_tape(t, tape):
    return t.node is not None and t.node[0]() is tape


# ---------------------------------------------------------------- primitives

_OPS = {}


def record(kind, *operands, **attrs):
    """Apply primitive ``kind`` and register the result on the active tape."""
    try:
        fwd, _ = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    inputs = tuple(as_tensor(o) for o in operands)
    out = Tensor(fwd(*(t.data for t in inputs), **attrs))
    if _state.checked and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite output from {kind}")
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape()._append(kind, inputs, attrs, out)
    return out


def _same_shape(a, b, kind):
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _broadcast_shape(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _fwd_add(a, b):
    _broadcast_shape(a, b, "add")
    return a + b


def _vjp_add(g, inputs, out, attrs, needs):
    a, b = inputs
    return (sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None)


_OPS["add"] = (_fwd_add, _vjp_add)


def _fwd_bias(a, b):
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match {a.shape}")
    return a + b


_OPS["bias_add"] = (_fwd_bias, _vjp_add)


def _fwd_sub(a, b):
    _broadcast_shape(a, b, "sub")
    return a - b


def _vjp_sub(g, inputs, out, attrs, needs):
    a, b = inputs
    return (sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None)


_OPS["sub"] = (_fwd_sub, _vjp_sub)


def _fwd_mul(a, b):
    _broadcast_shape(a, b, "mul")
    return a * b


def _vjp_mul(g, inputs, out, attrs, needs):
    a, b = inputs
    return (sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None)


_OPS["mul"] = (_fwd_mul, _vjp_mul)

_OPS["scale"] = (lambda a, c: a * c,
                 lambda g, inputs, out, attrs, needs: (scale(g, attrs["c"]),))
_OPS["neg"] = (lambda a: -a, lambda g, inputs, out, attrs, needs: (neg(g),))


def _fwd_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b


def _vjp_matmul(g, inputs, out, attrs, needs):
    a, b = inputs
    return (matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None)


_OPS["matmul"] = (_fwd_matmul, _vjp_matmul)
_OPS["transpose"] = (lambda a: a.T, lambda g, inputs, out, attrs, needs: (transpose(g),))


def _vjp_tanh(g, inputs, out, attrs, needs):
    return (sub(g, mul(g, mul(out, out))),)


_OPS["tanh"] = (np.tanh, _vjp_tanh)


def _sigmoid(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _vjp_sigmoid(g, inputs, out, attrs, needs):
    return (mul(g, sub(out, mul(out, out))),)


_OPS["sigmoid"] = (_sigmoid, _vjp_sigmoid)
_OPS["softplus"] = (lambda a: np.logaddexp(0.0, a),
                    lambda g, inputs, out, attrs, needs: (mul(g, sigmoid(inputs[0])),))


def _fwd_sum(a, axis, keepdims):
    return np.asarray(a.sum(axis=axis, keepdims=keepdims))


def _vjp_sum(g, inputs, out, attrs, needs):
    shape = inputs[0].shape
    axis = attrs["axis"]
    if not attrs["keepdims"]:
        g = reshape(g, _kept_shape(shape, axis))
    return (broadcast_to(g, shape),)


def _kept_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


_OPS["sum"] = (_fwd_sum, _vjp_sum)


def _fwd_inner(a, b, axis):
    if a.shape != b.shape:
        raise DimensionError(f"inner: shapes {a.shape} and {b.shape} differ")
    return np.asarray((a * b).sum(axis=axis))


def _vjp_inner(g, inputs, out, attrs, needs):
    a, b = inputs
    g = reshape(g, _kept_shape(a.shape, attrs["axis"]))
    return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)


_OPS["inner"] = (_fwd_inner, _vjp_inner)


def _vjp_sqnorm(g, inputs, out, attrs, needs):
    (a,) = inputs
    g = reshape(g, _kept_shape(a.shape, attrs["axis"]))
    return (scale(mul(g, a), 2.0),)


_OPS["sqnorm"] = (lambda a, axis: np.asarray((a * a).sum(axis=axis)), _vjp_sqnorm)
_OPS["reshape"] = (lambda a, shape: a.reshape(shape),
                   lambda g, inputs, out, attrs, needs: (reshape(g, inputs[0].shape),))


def _fwd_broadcast(a, shape):
    return np.array(np.broadcast_to(a, shape))


_OPS["broadcast_to"] = (_fwd_broadcast,
                        lambda g, inputs, out, attrs, needs: (sum_to(g, inputs[0].shape),))


def _sum_to_array(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1)
    out = a.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


_OPS["sum_to"] = (_sum_to_array,
                  lambda g, inputs, out, attrs, needs: (broadcast_to(g, inputs[0].shape),))


def _fwd_slice(a, start, stop, axis):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return np.array(a[tuple(idx)])


def _vjp_slice(g, inputs, out, attrs, needs):
    n = inputs[0].shape[attrs["axis"]]
    return (pad_axis(g, attrs["start"], n - attrs["stop"], attrs["axis"]),)


_OPS["slice"] = (_fwd_slice, _vjp_slice)


def _fwd_pad(a, before, after, axis):
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    return np.pad(a, widths)


def _vjp_pad(g, inputs, out, attrs, needs):
    n = inputs[0].shape[attrs["axis"]]
    return (slice_axis(g, attrs["before"], attrs["before"] + n, attrs["axis"]),)


_OPS["pad"] = (_fwd_pad, _vjp_pad)


def _fwd_concat(*arrays, axis):
    try:
        return np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None


def _vjp_concat(g, inputs, out, attrs, needs):
    axis = attrs["axis"]
    grads, start = [], 0
    for t, need in zip(inputs, needs):
        stop = start + t.shape[axis]
        grads.append(slice_axis(g, start, stop, axis) if need else None)
        start = stop
    return tuple(grads)


_OPS["concat"] = (_fwd_concat, _vjp_concat)


# ------------------------------------------------------------ public helpers

def add(a, b):
    return record("add", a, b)


def sub(a, b):
    return record("sub", a, b)


def mul(a, b):
    return record("mul", a, b)


def scale(a, c):
    return record("scale", a, c=float(c))


def neg(a):
    return record("neg", a)


def matmul(a, b):
    """Matrix product; a 1-D operand is treated as a row or column vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 2 and b.ndim == 1:
        return reshape(record("matmul", a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    if a.ndim == 1 and b.ndim == 2:
        return reshape(record("matmul", reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    return record("matmul", a, b)


def add_bias(a, b):
    return record("bias_add", a, b)


def tanh(a):
    return record("tanh", a)


def sigmoid(a):
    return record("sigmoid", a)


def softplus(a):
    return record("softplus", a)


def tsum(a, axis=None, keepdims=False):
    return record("sum", a, axis=axis, keepdims=keepdims)


def inner(a, b, axis=None):
    """Inner product; with ``axis=-1`` one product per row."""
    return record("inner", a, b, axis=axis)


def sqnorm(a, axis=None):
    return record("sqnorm", a, axis=axis)


def concat(tensors, axis=0):
    return record("concat", *tensors, axis=axis)


def transpose(a):
    return record("transpose", a)


def reshape(a, shape):
    return record("reshape", a, shape=tuple(shape))


def broadcast_to(a, shape):
    return record("broadcast_to", a, shape=tuple(shape))


def sum_to(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return record("sum_to", a, shape=tuple(shape))


def slice_axis(a, start, stop, axis=-1):
    a = as_tensor(a)
    return record("slice", a, start=start, stop=stop, axis=axis % a.ndim)


def pad_axis(a, before, after, axis=-1):
    a = as_tensor(a)
    return record("pad", a, before=before, after=after, axis=axis % a.ndim)


# ------------------------------------------------------------------ backward

def backward(output, wrt, create_graph=False):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the backward computation is recorded on the
    output's tape, so the returned gradients are differentiable.  A tensor in
    ``wrt`` that ``output`` does not depend on gets a zero gradient.
    """
    output = as_tensor(output)
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    zeros = [Tensor(np.zeros_like(t.data)) for t in wrt]
    if output.node is None:
        return zeros
    tape_ref, out_node = output.node
    tape = tape_ref()
    if tape is None:
        raise ContractError("output's tape has been released")

    nodes = tape.nodes[: out_node.index + 1]
    targets = {_key(t) for t in wrt if t.node is None or _on_tape(t, tape)}
    # forward sweep: which nodes depend on any target
    live = set(targets)
    for node in nodes:
        if node.index not in live and any(_key(t) in live for t in node.inputs if _on_tape(t, tape) or t.node is None):
            live.add(node.index)
    if out_node.index not in live:
        return zeros

    grads = {out_node.index: Tensor(np.ones_like(output.data))}
    found = {}
    with _grad_mode(create_graph), _active(tape):
        for node in reversed(nodes):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.index in targets:
                found[node.index] = g
            needs = [_key(t) in live and (t.node is None or _on_tape(t, tape)) for t in node.inputs]
            if not any(needs):
                continue
            out = node.output
            if out is None:
                out = Tensor(node.out_data)
            parts = _OPS[node.kind][1](g, node.inputs, out, node.attrs, needs)
            for t, need, part in zip(node.inputs, needs, parts):
                if not need or part is None:
                    continue
                k = _key(t)
                if t.node is None:
                    found[k] = add(found[k], part) if k in found else part
                else:
                    grads[k] = add(grads[k], part) if k in grads else part
    result = []
    for t, z in zip(wrt, zeros):
        g = found.get(_key(t))
        result.append(z if g is None else g)
    return result


@contextmanager
def _active(tape):
    _state.tapes.append(tape)
    try:
        yield
    finally:
        _state.tapes.pop()


def grad(output, wrt, create_graph=False):
    """Single-tensor convenience wrapper around :func:`backward`."""
    return backward(output, [wrt], create_graph=create_graph)[0]


def jacobian_row(s, x, i):
    """Row ``i`` of the Jacobian of ``s`` with respect to ``x``.

    For a batch ``s`` of shape (B, d) computed row-wise from ``x`` of shape
    (B, d), returns the (B, d) tensor of per-sample gradients of ``s[:, i]``.
    The result stays on the tape, so it can be differentiated again.
    """
    d = s.shape[-1]
    if not 0 <= i < d:
        raise IndexError(f"component {i} out of range for output dimension {d}")
    comp = slice_axis(s, i, i + 1, axis=-1)
    return grad(tsum(comp), x, create_graph=True)
