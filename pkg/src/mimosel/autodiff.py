"""Reverse-mode automatic differentiation on 64-bit numpy arrays.

A :class:`Tape` records every primitive applied to tape-bound tensors and
replays the chain rule backwards on demand.  Operations whose inputs are all
constants (no tape) are folded eagerly and leave no trace, so the same forward
code serves both training (leaf parameters on a tape) and deployment
(parameters wrapped as constants).

Complex quantities are represented as :class:`ComplexPair` (two real tensors),
so every derivative stays real-valued and can be checked directly against
finite differences.

Thread model: a tape is single-writer while the graph is built and while
``gradients`` runs.  Parameter snapshots (plain numpy arrays) are immutable
from the engine's point of view and may be read concurrently.
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ContractError,
    DimensionError,
    FormatError,
    NumericalError,
    StateError,
)

__all__ = [
    "Tape",
    "Tensor",
    "ComplexPair",
    "BatchNormState",
    "AdamState",
    "record_primitive",
    "concat",
    "conv2d",
    "batch_norm",
    "logdet_hermitian_pd",
    "gradients",
    "adam_step",
    "save_params",
    "load_params",
    "PRIMITIVE_KINDS",
]


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Node:
    """One recorded operation: kind, input node ids and the saved closures."""

    __slots__ = ("kind", "input_ids", "backward_fn", "forward_fn", "value")

    def __init__(self, kind, input_ids, backward_fn, forward_fn, value):
        self.kind = kind
        self.input_ids = input_ids
        self.backward_fn = backward_fn
        self.forward_fn = forward_fn
        self.value = value


class Tape:
    """Append-only operation record plus a registry of named leaf tensors."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Tensor] = {}

    def _append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, name, value):
        """Register a named trainable leaf and return its tensor."""
        if name in self.params:
            raise ContractError(f"duplicate leaf name {name!r}")
        data = _as_f64(value).copy()
        node_id = self._append(Node("leaf", (), None, None, data))
        t = Tensor(data, self, node_id)
        self.params[name] = t
        return t

    def constant(self, value):
        """Wrap a value as a constant tensor (participates in no gradient)."""
        return Tensor(_as_f64(value), None, None)

    def replay(self, leaf_values=None):
        """Re-execute the recorded graph, optionally with new leaf values.

        Returns a list of output arrays, one per node, in recording order.
        Batch-norm nodes replay with the statistics saved at record time and
        do not touch running state again.
        """
        leaf_values = leaf_values or {}
        name_by_id = {t.node_id: n for n, t in self.params.items()}
        values: list[np.ndarray] = []
        for node_id, node in enumerate(self.nodes):
            if node.kind == "leaf":
                name = name_by_id.get(node_id)
                if name is not None and name in leaf_values:
                    values.append(_as_f64(leaf_values[name]))
                else:
                    values.append(node.value)
            else:
                inputs = [values[i] if i is not None else None for i in node.input_ids]
                values.append(node.forward_fn(*inputs))
        return values


class Tensor:
    """A float64 array, optionally attached to a tape node.

    ``data`` is row-major float64; ``tape``/``node_id`` are ``None`` for
    constants.  Arithmetic sugar routes through :func:`record_primitive`.
    """

    __slots__ = ("data", "tape", "node_id")

    # make numpy defer binary ops to our reflected methods
    __array_ufunc__ = None

    def __init__(self, data, tape=None, node_id=None):
        self.data = _as_f64(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        kind = "const" if self.tape is None else f"node {self.node_id}"
        return f"Tensor(shape={self.data.shape}, {kind})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return record_primitive("add", (self, other))

    def __radd__(self, other):
        return record_primitive("add", (other, self))

    def __sub__(self, other):
        return record_primitive("sub", (self, other))

    def __rsub__(self, other):
        return record_primitive("sub", (other, self))

    def __mul__(self, other):
        return record_primitive("elementwise-mul", (self, other))

    def __rmul__(self, other):
        return record_primitive("elementwise-mul", (other, self))

    def __neg__(self):
        return record_primitive("elementwise-mul", (self, -1.0))

    def __matmul__(self, other):
        return record_primitive("matmul", (self, other))

    def __rmatmul__(self, other):
        return record_primitive("matmul", (other, self))

    def __getitem__(self, index):
        return record_primitive("slice", (self,), index=index)

    def transpose(self, axes=None):
        return record_primitive("transpose", (self,), axes=axes)

    def reshape(self, shape):
        return record_primitive("reshape", (self,), shape=shape)

    def sum(self, axis=None, keepdims=False):
        return record_primitive("reduce-sum", (self,), axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return record_primitive("reduce-mean", (self,), axis=axis, keepdims=keepdims)

    def exp(self):
        return record_primitive("exp", (self,))

    def log(self):
        return record_primitive("log", (self,))

    def sqrt(self):
        return record_primitive("sqrt", (self,))

    def reciprocal(self):
        return record_primitive("reciprocal", (self,))

    def relu(self):
        return record_primitive("relu", (self,))

    def sigmoid(self):
        return record_primitive("sigmoid", (self,))

    def softmax(self, axis):
        return record_primitive("softmax-over-axis", (self,), axis=axis)

    def abs(self):
        return record_primitive("abs", (self,))

    def sin(self):
        return record_primitive("sin", (self,))

    def cos(self):
        return record_primitive("cos", (self,))

    def max_with(self, const):
        return record_primitive("max-with-const", (self,), const=const)


def _lift(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(_as_f64(value))


def _common_tape(tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _stable_softmax(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _check_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")


def _swap_last(a):
    return np.swapaxes(a, -1, -2)


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _reduce_backward(grad, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad, in_shape).copy()
    if not keepdims:
        kept = list(in_shape)
        for a in axis:
            kept[a] = 1
        grad = grad.reshape(kept)
    return np.broadcast_to(grad, in_shape).copy()


# Forward rule and backward-closure builder per primitive kind.  Each entry
# maps (input arrays, attrs) -> (output array, backward(g) -> per-input grads).
def _prim_add(inputs, attrs):
    a, b = inputs
    out = a + b

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, backward


def _prim_sub(inputs, attrs):
    a, b = inputs
    out = a - b

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return out, backward


def _prim_mul(inputs, attrs):
    a, b = inputs
    out = a * b

    def backward(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, backward


def _prim_matmul(inputs, attrs):
    a, b = inputs
    _check_matmul(a, b)
    out = a @ b

    def backward(g):
        ga = _unbroadcast(g @ _swap_last(b), a.shape)
        gb = _unbroadcast(_swap_last(a) @ g, b.shape)
        return ga, gb

    return out, backward


def _prim_transpose(inputs, attrs):
    (a,) = inputs
    axes = attrs.get("axes")
    out = np.transpose(a, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return out, backward


def _prim_reshape(inputs, attrs):
    (a,) = inputs
    shape = attrs["shape"]
    try:
        out = a.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {a.shape} -> {shape}: {exc}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return out, backward


def _prim_slice(inputs, attrs):
    (a,) = inputs
    index = attrs["index"]
    out = a[index]

    def backward(g):
        ga = np.zeros_like(a)
        ga[index] = g
        return (ga,)

    return np.ascontiguousarray(out), backward


def _prim_concat(inputs, attrs):
    axis = attrs.get("axis", 0)
    if not inputs:
        raise ContractError("concat requires at least one input")
    ref = inputs[0].ndim
    for x in inputs:
        if x.ndim != ref:
            raise DimensionError(
                f"concat rank mismatch: {[x.shape for x in inputs]}"
            )
    out = np.concatenate(inputs, axis=axis)
    sizes = [x.shape[axis] for x in inputs]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return out, backward


def _prim_reduce_sum(inputs, attrs):
    (a,) = inputs
    axis = _normalize_axis(attrs.get("axis"), a.ndim)
    keepdims = attrs.get("keepdims", False)
    out = a.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_reduce_backward(g, a.shape, axis, keepdims),)

    return np.asarray(out), backward


def _prim_reduce_mean(inputs, attrs):
    (a,) = inputs
    axis = _normalize_axis(attrs.get("axis"), a.ndim)
    keepdims = attrs.get("keepdims", False)
    out = a.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[i] for i in axis]))

    def backward(g):
        return (_reduce_backward(g / count, a.shape, axis, keepdims),)

    return np.asarray(out), backward


def _prim_exp(inputs, attrs):
    (a,) = inputs
    out = np.exp(a)

    def backward(g):
        return (g * out,)

    return out, backward


def _prim_log(inputs, attrs):
    (a,) = inputs
    out = np.log(a)

    def backward(g):
        return (g / a,)

    return out, backward


def _prim_sqrt(inputs, attrs):
    (a,) = inputs
    out = np.sqrt(a)

    def backward(g):
        return (g * 0.5 / out,)

    return out, backward


def _prim_reciprocal(inputs, attrs):
    (a,) = inputs
    out = 1.0 / a

    def backward(g):
        return (-g * out * out,)

    return out, backward


def _prim_relu(inputs, attrs):
    (a,) = inputs
    out = np.maximum(a, 0.0)

    def backward(g):
        return (g * (a > 0.0),)

    return out, backward


def _prim_sigmoid(inputs, attrs):
    (a,) = inputs
    out = _stable_sigmoid(a)

    def backward(g):
        return (g * out * (1.0 - out),)

    return out, backward


def _prim_softmax(inputs, attrs):
    (a,) = inputs
    axis = attrs["axis"]
    out = _stable_softmax(a, axis)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return out, backward


def _prim_abs(inputs, attrs):
    (a,) = inputs
    out = np.abs(a)

    def backward(g):
        return (g * np.sign(a),)

    return out, backward


def _prim_max_with_const(inputs, attrs):
    (a,) = inputs
    c = float(attrs["const"])
    out = np.maximum(a, c)

    def backward(g):
        return (g * (a > c),)

    return out, backward


def _prim_sin(inputs, attrs):
    (a,) = inputs
    out = np.sin(a)

    def backward(g):
        return (g * np.cos(a),)

    return out, backward


def _prim_cos(inputs, attrs):
    (a,) = inputs
    out = np.cos(a)

    def backward(g):
        return (-g * np.sin(a),)

    return out, backward


_PRIMS = {
    "add": (_prim_add, 2),
    "sub": (_prim_sub, 2),
    "elementwise-mul": (_prim_mul, 2),
    "matmul": (_prim_matmul, 2),
    "transpose": (_prim_transpose, 1),
    "reshape": (_prim_reshape, 1),
    "slice": (_prim_slice, 1),
    "concat": (_prim_concat, None),
    "reduce-sum": (_prim_reduce_sum, 1),
    "reduce-mean": (_prim_reduce_mean, 1),
    "exp": (_prim_exp, 1),
    "log": (_prim_log, 1),
    "sqrt": (_prim_sqrt, 1),
    "reciprocal": (_prim_reciprocal, 1),
    "relu": (_prim_relu, 1),
    "sigmoid": (_prim_sigmoid, 1),
    "softmax-over-axis": (_prim_softmax, 1),
    "abs": (_prim_abs, 1),
    "max-with-const": (_prim_max_with_const, 1),
    "sin": (_prim_sin, 1),
    "cos": (_prim_cos, 1),
}

PRIMITIVE_KINDS = tuple(_PRIMS) + ("floor",)


def record_primitive(kind, inputs, **attrs):
    """Apply primitive ``kind`` to ``inputs`` and record it if any is on a tape.

    Inputs may be tensors, numpy arrays or python scalars; non-tensors are
    treated as constants.  ``floor`` is restricted to constants since its
    derivative is zero almost everywhere and would silently kill gradients.
    """
    tensors = tuple(_lift(x) for x in inputs)
    if kind == "floor":
        if any(t.tape is not None for t in tensors):
            raise ContractError("floor is a const-only primitive")
        (a,) = tensors
        return Tensor(np.floor(a.data))
    if kind not in _PRIMS:
        raise ContractError(f"unknown primitive kind {kind!r}")
    rule, arity = _PRIMS[kind]
    if arity is not None and len(tensors) != arity:
        raise DimensionError(f"{kind} expects {arity} inputs, got {len(tensors)}")

    datas = tuple(t.data for t in tensors)
    try:
        out, backward = rule(datas, attrs)
    except (DimensionError, ContractError):
        raise
    except ValueError as exc:
        raise DimensionError(
            f"{kind}: incompatible shapes {[d.shape for d in datas]}: {exc}"
        ) from None

    tape = _common_tape(tensors)
    if tape is None:
        return Tensor(out)

    input_ids = tuple(t.node_id if t.tape is not None else None for t in tensors)

    def forward_fn(*new_inputs):
        replay_in = tuple(
            d if new is None else new for d, new in zip(datas, new_inputs)
        )
        return rule(replay_in, attrs)[0]

    node_id = tape._append(Node(kind, input_ids, backward, forward_fn, out))
    return Tensor(out, tape, node_id)


def concat(tensors, axis=0):
    return record_primitive("concat", tuple(tensors), axis=axis)


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


def conv2d(x, kernel, bias):
    """Same-padded stride-1 2-D cross-correlation plus per-channel bias.

    ``x`` is ``(h, w, c_in)`` or ``(batch, h, w, c_in)``; ``kernel`` is
    ``(k, k, c_in, c_out)`` with odd ``k``; ``bias`` is ``(c_out,)``.  Output
    spatial shape equals input spatial shape.
    """
    x, kernel, bias = _lift(x), _lift(kernel), _lift(bias)
    xd, wd, bd = x.data, kernel.data, bias.data
    batched = xd.ndim == 4
    if xd.ndim == 3:
        xd4 = xd[None]
    elif xd.ndim == 4:
        xd4 = xd
    else:
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {xd.shape}")
    if wd.ndim != 4 or wd.shape[0] != wd.shape[1]:
        raise DimensionError(f"conv2d kernel must be (k, k, c_in, c_out), got {wd.shape}")
    k = wd.shape[0]
    if k % 2 == 0:
        raise DimensionError(f"conv2d requires an odd kernel size for same padding, got {k}")
    if wd.shape[2] != xd4.shape[3]:
        raise DimensionError(
            f"conv2d channel mismatch: input {xd.shape} vs kernel {wd.shape}"
        )
    c_out = wd.shape[3]
    if bd.shape != (c_out,):
        raise DimensionError(f"conv2d bias must be ({c_out},), got {bd.shape}")

    b, h, w = xd4.shape[:3]
    c_in = xd4.shape[3]
    p = (k - 1) // 2

    def forward(xd_, wd_, bd_):
        xd4_ = xd_[None] if xd_.ndim == 3 else xd_
        xp = np.pad(xd4_, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (b,h,w,cin,k,k)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
            b, h, w, k * k * c_in
        )
        out = cols @ wd_.reshape(k * k * c_in, c_out) + bd_
        return cols, (out if xd_.ndim == 4 else out[0])

    cols, out = forward(xd, wd, bd)

    tape = _common_tape((x, kernel, bias))
    if tape is None:
        return Tensor(out)

    def backward(g):
        g4 = g[None] if not batched else g
        gb = g4.sum(axis=(0, 1, 2))
        gmat = g4.reshape(-1, c_out)
        gw = (cols.reshape(-1, k * k * c_in).T @ gmat).reshape(k, k, c_in, c_out)
        gcols = (gmat @ wd.reshape(k * k * c_in, c_out).T).reshape(b, h, w, k, k, c_in)
        gxp = np.zeros((b, h + 2 * p, w + 2 * p, c_in))
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, p : p + h, p : p + w, :]
        return (gx if batched else gx[0]), gw, gb

    def forward_fn(xn, wn, bn):
        return forward(
            xd if xn is None else xn,
            wd if wn is None else wn,
            bd if bn is None else bn,
        )[1]

    ids = tuple(t.node_id if t.tape is not None else None for t in (x, kernel, bias))
    node_id = tape._append(Node("conv2d", ids, backward, forward_fn, out))
    return Tensor(out, tape, node_id)


# --------------------------------------------------------------------------
# Batch normalization
# --------------------------------------------------------------------------


class BatchNormState:
    """Running per-channel mean/variance; empty until the first train batch."""

    def __init__(self, mean=None, var=None):
        self.mean = None if mean is None else _as_f64(mean).copy()
        self.var = None if var is None else _as_f64(var).copy()

    @property
    def initialized(self):
        return self.mean is not None

    def copy(self):
        return BatchNormState(self.mean, self.var)


_BN_EPS = 1e-12


def batch_norm(x, scale, shift, mode, state, momentum=0.9, update_stats=True):
    """Normalize per final-axis channel; affine transform by scale/shift.

    ``mode`` is ``"train"`` (batch statistics over all leading axes, first
    axis is the batch and must have size >= 2) or ``"infer"`` (running
    statistics from ``state``).  Train mode folds the batch statistics into
    ``state`` with the given momentum unless ``update_stats`` is false (used
    when evaluating a frozen network in its training-phase form).
    """
    x, scale, shift = _lift(x), _lift(scale), _lift(shift)
    xd, sd, bd = x.data, scale.data, shift.data
    if xd.ndim < 2:
        raise DimensionError(f"batch_norm input must be >=2-D, got {xd.shape}")
    c = xd.shape[-1]
    if sd.shape != (c,) or bd.shape != (c,):
        raise DimensionError(
            f"batch_norm scale/shift must be ({c},), got {sd.shape}/{bd.shape}"
        )
    axes = tuple(range(xd.ndim - 1))

    if mode == "train":
        if xd.shape[0] < 2:
            raise ContractError("batch_norm train mode requires batch size >= 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            if not state.initialized:
                state.mean = mu.copy()
                state.var = var.copy()
            else:
                state.mean = momentum * state.mean + (1.0 - momentum) * mu
                state.var = momentum * state.var + (1.0 - momentum) * var
    elif mode == "infer":
        if not state.initialized:
            raise StateError("batch_norm infer mode with empty running statistics")
        mu = state.mean
        var = state.var
    else:
        raise ContractError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")

    istd = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (xd - mu) * istd
    out = xhat * sd + bd

    tape = _common_tape((x, scale, shift))
    if tape is None:
        return Tensor(out)

    n = int(np.prod([xd.shape[i] for i in axes]))

    def backward(g):
        dscale = (g * xhat).sum(axis=axes)
        dshift = g.sum(axis=axes)
        if mode == "train":
            gm = g.mean(axis=axes)
            gxm = (g * xhat).mean(axis=axes)
            dx = (sd * istd) * (g - gm - xhat * gxm)
        else:
            dx = g * (sd * istd)
        return dx, dscale, dshift

    def forward_fn(xn, sn, bn):
        xd_ = xd if xn is None else xn
        sd_ = sd if sn is None else sn
        bd_ = bd if bn is None else bn
        # replay uses the statistics captured at record time
        return (xd_ - mu) * istd * sd_ + bd_

    ids = tuple(t.node_id if t.tape is not None else None for t in (x, scale, shift))
    node_id = tape._append(Node("batch_norm", ids, backward, forward_fn, out))
    return Tensor(out, tape, node_id)


# --------------------------------------------------------------------------
# Complex pairs and the Hermitian log-determinant
# --------------------------------------------------------------------------


class ComplexPair:
    """A complex array stored as two equal-shape real tensors."""

    __slots__ = ("re", "im")

    def __init__(self, re, im):
        re, im = _lift(re), _lift(im)
        if re.shape != im.shape:
            raise DimensionError(f"ComplexPair parts disagree: {re.shape} vs {im.shape}")
        self.re = re
        self.im = im

    @property
    def shape(self):
        return self.re.shape

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z, dtype=np.complex128)
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    def to_complex(self):
        return self.re.data + 1j * self.im.data

    def __add__(self, other):
        return ComplexPair(self.re + other.re, self.im + other.im)

    def __sub__(self, other):
        return ComplexPair(self.re - other.re, self.im - other.im)

    def __matmul__(self, other):
        if isinstance(other, ComplexPair):
            return ComplexPair(
                self.re @ other.re - self.im @ other.im,
                self.re @ other.im + self.im @ other.re,
            )
        other = _lift(other)
        return ComplexPair(self.re @ other, self.im @ other)

    def __rmatmul__(self, other):
        other = _lift(other)
        return ComplexPair(other @ self.re, other @ self.im)

    def scale(self, factor):
        return ComplexPair(self.re * factor, self.im * factor)

    def h(self):
        """Hermitian transpose (swap the last two axes, conjugate)."""
        ndim = len(self.shape)
        axes = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
        return ComplexPair(self.re.transpose(axes), -self.im.transpose(axes))

    def abs2(self):
        return self.re * self.re + self.im * self.im

    def modulus(self):
        return self.abs2().sqrt()

    def frobenius_norm2(self):
        """Squared Frobenius norm over the last two axes."""
        return self.abs2().sum(axis=(-2, -1))


def logdet_hermitian_pd(m):
    """Natural-log determinant of a Hermitian positive-definite complex matrix.

    ``m`` is a :class:`ComplexPair` of shape ``(..., n, n)``.  The forward
    pass runs Cholesky on the real embedding ``[[Re, -Im], [Im, Re]]`` whose
    log-determinant is exactly twice the complex one.  The backward pass uses
    ``d logdet(M) = trace(inv(M) dM)``, which for independent real/imaginary
    entries reads ``d/dRe = Re(inv(M))`` and ``d/dIm = Im(inv(M))``.

    Raises :class:`NumericalError` when the factorization fails.
    """
    if not isinstance(m, ComplexPair):
        raise ContractError("logdet_hermitian_pd expects a ComplexPair")
    re_t, im_t = m.re, m.im
    red, imd = re_t.data, im_t.data
    if red.ndim < 2 or red.shape[-1] != red.shape[-2]:
        raise DimensionError(f"logdet needs square matrices, got {red.shape}")

    def forward(red_, imd_):
        # project onto the Hermitian part: exact for Hermitian inputs, and it
        # makes every real/imaginary entry an independent argument so the
        # trace(inv(M) dM) backward matches finite differences entrywise
        res = 0.5 * (red_ + np.swapaxes(red_, -1, -2))
        ims = 0.5 * (imd_ - np.swapaxes(imd_, -1, -2))
        top = np.concatenate([res, -ims], axis=-1)
        bot = np.concatenate([ims, res], axis=-1)
        emb = np.concatenate([top, bot], axis=-2)
        try:
            chol = np.linalg.cholesky(emb)
        except np.linalg.LinAlgError:
            raise NumericalError(
                "logdet_hermitian_pd: Cholesky failed, matrix not positive definite"
            ) from None
        diag = np.diagonal(chol, axis1=-2, axis2=-1)
        return np.log(diag).sum(axis=-1)

    out = forward(red, imd)

    tape = _common_tape((re_t, im_t))
    if tape is None:
        return Tensor(out)

    def backward(g):
        res = 0.5 * (red + np.swapaxes(red, -1, -2))
        ims = 0.5 * (imd - np.swapaxes(imd, -1, -2))
        inv = np.linalg.inv(res + 1j * ims)
        gexp = np.asarray(g)[..., None, None]
        return gexp * inv.real, gexp * inv.imag

    def forward_fn(rn, imn):
        return forward(red if rn is None else rn, imd if imn is None else imn)

    ids = tuple(t.node_id if t.tape is not None else None for t in (re_t, im_t))
    node_id = tape._append(Node("logdet_hermitian_pd", ids, backward, forward_fn, out))
    return Tensor(out, tape, node_id)


# --------------------------------------------------------------------------
# Gradients and the optimizer
# --------------------------------------------------------------------------


def gradients(loss, params):
    """Reverse-mode gradients of a scalar ``loss`` for each named parameter.

    ``params`` maps names to leaf tensors (typically ``tape.params``).
    Parameters the loss does not reach receive zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.data.shape}")
    grads = {name: np.zeros_like(t.data) for name, t in params.items()}
    if loss.tape is None:
        return grads

    tape = loss.tape
    adjoint: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.data)
    }
    for node_id in range(loss.node_id, -1, -1):
        g = adjoint.pop(node_id, None)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.kind == "leaf" or node.backward_fn is None:
            adjoint[node_id] = g  # keep for the parameter sweep below
            continue
        for input_id, gin in zip(node.input_ids, node.backward_fn(g)):
            if input_id is None or gin is None:
                continue
            if input_id in adjoint:
                adjoint[input_id] = adjoint[input_id] + gin
            else:
                adjoint[input_id] = gin

    for name, t in params.items():
        if t.tape is tape and t.node_id in adjoint:
            grads[name] = np.asarray(adjoint[t.node_id])
    return grads


class AdamState:
    """Per-parameter first/second moment accumulators plus the step count."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(v) for name, v in params.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.items()}


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; mutates ``params`` and ``state``.

    Raises :class:`NumericalError` naming the parameter if its gradient is
    not finite.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in state.m:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {params[name].shape} "
                f"for {name!r}"
            )
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = state.m[name] / (1.0 - b1**t)
        vhat = state.v[name] / (1.0 - b2**t)
        params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


# --------------------------------------------------------------------------
# Named-parameter file ("MBM1")
# --------------------------------------------------------------------------

_MAGIC = b"MBM1"


def save_params(path, params):
    """Write named float64 arrays: magic, LE u32 count, then per entry a
    length-prefixed UTF-8 name, u32 rank, u32 dims and raw LE float64 data."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = _as_f64(value)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_params(path):
    """Read a file written by :func:`save_params`; bit-exact round trip."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset, count, what):
        if offset + count > len(blob):
            raise FormatError(f"truncated parameter file while reading {what}", offset)
        return blob[offset : offset + count]

    if need(0, 4, "magic") != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}", 0)
    (count,) = struct.unpack("<I", need(4, 4, "entry count"))
    offset = 8
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(offset, 4, "name length"))
        offset += 4
        name = need(offset, name_len, "name").decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack("<I", need(offset, 4, "rank"))
        offset += 4
        dims = []
        for _ in range(rank):
            (d,) = struct.unpack("<I", need(offset, 4, "dims"))
            dims.append(d)
            offset += 4
        nbytes = int(np.prod(dims, dtype=np.int64)) * 8 if dims else 8
        raw = need(offset, nbytes, f"data of {name!r}")
        offset += nbytes
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    if offset != len(blob):
        raise FormatError("trailing bytes after last entry", offset)
    return params
