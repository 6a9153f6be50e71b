"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive records a node whose vector-Jacobian product is itself written
in terms of primitives. Running ``gradient(..., create_graph=True)`` therefore
records the backward pass on the same tape, so the result can be differentiated
again (double backward). That is all a Hessian-vector product needs.

Example::

    tape = Tape()
    x = tape.leaf([3.0, 4.0])
    loss = 0.5 * (x * x).sum()
    (g,) = gradient(loss, [x])          # array([3., 4.])
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericalError",
    "TapeExhausted",
    "Tape",
    "Variable",
    "constant",
    "as_variable",
    "no_record",
    "record",
    "PRIMITIVES",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "tanh",
    "exp",
    "log",
    "sum",
    "mean",
    "broadcast_to",
    "sum_to",
    "gather",
    "scatter",
    "im2col",
    "col2im",
    "conv2d",
    "stop_gradient",
    "gradient",
    "hessian_gradient_product",
]

DEFAULT_MAX_NODES = 5_000_000


class ShapeError(ValueError):
    """Operand shapes are invalid for a primitive."""


class NumericalError(FloatingPointError):
    """A value that must be finite is NaN or infinite."""


class TapeExhausted(MemoryError):
    """The tape reached its node budget."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_record():
    """Evaluate primitives eagerly without appending anything to a tape."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextmanager
def _record_mode(flag: bool):
    prev = _recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


class _Node:
    __slots__ = ("name", "inputs", "vjp", "output")

    def __init__(self, name, inputs, vjp, output):
        self.name = name
        self.inputs = inputs
        self.vjp = vjp
        self.output = output


class Tape:
    """Append-only record of primitive applications.

    A node's inputs always precede it, so walking the node list backwards is a
    valid reverse topological order. A tape belongs to the thread that created
    it.
    """

    def __init__(self, max_nodes: int = DEFAULT_MAX_NODES):
        self.nodes: list[_Node] = []
        self.max_nodes = max_nodes
        self._owner = threading.get_ident()

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: _Node) -> int:
        if threading.get_ident() != self._owner:
            raise RuntimeError("a Tape must only be used from the thread that created it")
        if len(self.nodes) >= self.max_nodes:
            raise TapeExhausted(f"tape exceeded {self.max_nodes} nodes")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, requires_grad: bool = True) -> "Variable":
        """Register an input (e.g. a parameter tensor) on this tape."""
        if not requires_grad:
            return constant(value)
        v = Variable(value, requires_grad=True)
        v.tape = self
        v.index = self._append(_Node("leaf", (), None, v))
        return v


class Variable:
    """A float64 array, optionally tracked on a tape."""

    __slots__ = ("value", "tape", "index", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape: Tape | None = None
        self.index: int | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f", node={self.index}" if self.requires_grad else ""
        return f"Variable({self.value!r}{tag})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def constant(value) -> Variable:
    return Variable(value, requires_grad=False)


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else constant(x)


def _record(name: str, inputs: tuple[Variable, ...], value: np.ndarray, vjp: Callable) -> Variable:
    out = Variable(value)
    if not _recording():
        return out
    tape = None
    for v in inputs:
        if v.requires_grad:
            if tape is None:
                tape = v.tape
            elif v.tape is not tape:
                raise ValueError(f"{name}: inputs live on different tapes")
    if tape is None:
        return out
    out.requires_grad = True
    out.tape = tape
    out.index = tape._append(_Node(name, inputs, vjp, out))
    return out


def _broadcast_shape(name: str, a: Variable, b: Variable) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- primitives


def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape("add", a, b)

    def vjp(g, out):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _record("add", (a, b), a.value + b.value, vjp)


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape("sub", a, b)

    def vjp(g, out):
        return sum_to(g, a.shape), neg(sum_to(g, b.shape))

    return _record("sub", (a, b), a.value - b.value, vjp)


def neg(a) -> Variable:
    a = as_variable(a)
    return _record("neg", (a,), -a.value, lambda g, out: (neg(g),))


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape("mul", a, b)

    def vjp(g, out):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), a.value * b.value, vjp)


def div(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape("div", a, b)

    def vjp(g, out):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, out), b)), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", (a, b), a.value / b.value, vjp)


def matmul(a, b) -> Variable:
    """Matrix product of two 2-D operands."""
    a, b = as_variable(a), as_variable(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, out):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), a.value @ b.value, vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Variable:
    a = as_variable(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _record(
        "transpose", (a,), np.transpose(a.value, axes), lambda g, out: (transpose(g, inverse),)
    )


def reshape(a, shape: Sequence[int]) -> Variable:
    a = as_variable(a)
    try:
        value = a.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _record("reshape", (a,), value, lambda g, out: (reshape(g, a.shape),))


def relu(a) -> Variable:
    a = as_variable(a)
    active = (a.value > 0).astype(np.float64)
    # the derivative mask is piecewise constant, so second derivatives vanish
    return _record("relu", (a,), a.value * active, lambda g, out: (mul(g, active),))


def tanh(a) -> Variable:
    a = as_variable(a)

    def vjp(g, out):
        return (mul(g, sub(1.0, mul(out, out))),)

    return _record("tanh", (a,), np.tanh(a.value), vjp)


def exp(a) -> Variable:
    a = as_variable(a)
    return _record("exp", (a,), np.exp(a.value), lambda g, out: (mul(g, out),))


def log(a) -> Variable:
    a = as_variable(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _record("log", (a,), value, lambda g, out: (div(g, a),))


def sum(a, axis=None, keepdims: bool = False) -> Variable:  # noqa: A001
    a = as_variable(a)
    value = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g, out):
        if axis is not None and not keepdims:
            g = reshape(g, np.sum(a.value, axis=axis, keepdims=True).shape)
        return (broadcast_to(g, a.shape),)

    return _record("sum", (a,), value, vjp)


def mean(a, axis=None, keepdims: bool = False) -> Variable:
    a = as_variable(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def broadcast_to(a, shape: Sequence[int]) -> Variable:
    a = as_variable(a)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _record("broadcast_to", (a,), value, lambda g, out: (sum_to(g, a.shape),))


def _sum_to_array(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
    )
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


def sum_to(a, shape: Sequence[int]) -> Variable:
    """Reduce ``a`` to ``shape`` by summing broadcast axes (adjoint of broadcast_to)."""
    a = as_variable(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        ok = len(shape) <= a.ndim and np.broadcast_shapes(shape, a.shape) == a.shape
    except ValueError:
        ok = False
    if not ok:
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")
    return _record(
        "sum_to", (a,), _sum_to_array(a.value, shape), lambda g, out: (broadcast_to(g, a.shape),)
    )


def gather(a, index) -> Variable:
    """Pick one entry per row along the last axis: ``out[i, 0] = a[i, index[i]]``."""
    a = as_variable(a)
    idx = np.asarray(index, dtype=np.int64).reshape(-1, 1)
    if a.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather: shapes {a.shape} and {np.shape(index)} do not align")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"gather: index out of range for {a.shape[1]} columns")
    value = np.take_along_axis(a.value, idx, axis=1)
    return _record("gather", (a,), value, lambda g, out: (scatter(g, idx, a.shape),))


def scatter(a, index, shape: Sequence[int]) -> Variable:
    """Adjoint of ``gather``: place row values into a zero array of ``shape``."""
    a = as_variable(a)
    idx = np.asarray(index, dtype=np.int64).reshape(-1, 1)
    shape = tuple(shape)
    if a.shape != (shape[0], 1) or idx.shape[0] != shape[0]:
        raise ShapeError(f"scatter: value shape {a.shape} does not match target {shape}")
    value = np.zeros(shape)
    np.put_along_axis(value, idx, a.value, axis=1)
    return _record("scatter", (a,), value, lambda g, out: (gather(g, idx),))


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col_array(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    col = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = img[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def _col2im_array(col: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad + stride - 1, w + 2 * pad + stride - 1))
    for i in range(kh):
        for j in range(kw):
            img[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += col[:, :, i, j]
    return img[:, :, pad : h + pad, pad : w + pad]


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Variable:
    """Unfold (N, C, H, W) patches into rows of shape (N*OH*OW, C*kh*kw)."""
    x = as_variable(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected a 4-D input, got shape {x.shape}")
    if _conv_out(x.shape[2], kh, stride, pad) < 1 or _conv_out(x.shape[3], kw, stride, pad) < 1:
        raise ShapeError(f"im2col: kernel {(kh, kw)} larger than padded input {x.shape}")
    xshape = x.shape
    return _record(
        "im2col",
        (x,),
        _im2col_array(x.value, kh, kw, stride, pad),
        lambda g, out: (col2im(g, xshape, kh, kw, stride, pad),),
    )


def col2im(col, xshape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Variable:
    """Adjoint of ``im2col``: sum patch rows back into an image of ``xshape``."""
    col = as_variable(col)
    xshape = tuple(xshape)
    n, c, h, w = xshape
    expect = (n * _conv_out(h, kh, stride, pad) * _conv_out(w, kw, stride, pad), c * kh * kw)
    if col.shape != expect:
        raise ShapeError(f"col2im: columns {col.shape} do not match image {xshape} (want {expect})")
    return _record(
        "col2im",
        (col,),
        _col2im_array(col.value, xshape, kh, kw, stride, pad),
        lambda g, out: (im2col(g, kh, kw, stride, pad),),
    )


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Variable:
    """2-D cross-correlation lowered to im2col + matmul. ``weight`` is (O, C, kh, kw)."""
    x, weight = as_variable(x), as_variable(weight)
    if weight.ndim != 4 or x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, _, h, w = x.shape
    o, c, kh, kw = weight.shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)
    out = matmul(cols, transpose(reshape(weight, (o, c * kh * kw))))
    out = transpose(reshape(out, (n, oh, ow, o)), (0, 3, 1, 2))
    if bias is not None:
        out = add(out, reshape(bias, (1, o, 1, 1)))
    return out


def stop_gradient(a) -> Variable:
    """Same value, but a constant for every later differentiation."""
    return constant(as_variable(a).value)


PRIMITIVES: dict[str, Callable[..., Variable]] = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "broadcast_to": broadcast_to,
    "sum_to": sum_to,
    "gather": gather,
    "index": gather,
    "scatter": scatter,
    "im2col": im2col,
    "col2im": col2im,
    "conv2d": conv2d,
}


def record(primitive: str, *inputs, **attrs) -> Variable:
    """Apply a primitive by name, e.g. ``record("add", x, y)``."""
    try:
        fn = PRIMITIVES[primitive]
    except KeyError:
        raise ValueError(f"unknown primitive {primitive!r}") from None
    return fn(*inputs, **attrs)


# ------------------------------------------------------------ differentiation


def gradient(
    output: Variable,
    wrt: Sequence[Variable],
    create_graph: bool = False,
    grad_output=None,
):
    """Reverse-mode derivative of ``output`` with respect to each of ``wrt``.

    ``output`` must be a scalar unless ``grad_output`` (a cotangent with the
    output's shape) is given. Inputs that ``output`` does not depend on get a
    zero gradient. With ``create_graph`` the results are Variables recorded on
    the tape; otherwise they are plain arrays.
    """
    wrt = list(wrt)
    if grad_output is None:
        if output.shape != ():
            raise ShapeError(f"gradient: output must be a scalar, got shape {output.shape}")
        seed = np.ones(())
    else:
        seed = np.asarray(grad_output, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"gradient: grad_output {seed.shape} does not match output {output.shape}")

    tape = output.tape
    for v in wrt:
        if not isinstance(v, Variable) or not v.requires_grad:
            raise ValueError("gradient: every target must be a tracked Variable")
        if tape is not None and v.tape is not tape:
            raise ValueError("gradient: target is not on the output's tape")

    found: dict[int, Variable] = {}
    if output.requires_grad and wrt:
        wanted = {v.index for v in wrt}
        lowest = min(wanted)
        grads: dict[int, Variable] = {output.index: constant(seed)}
        with _record_mode(create_graph):
            for i in range(output.index, lowest - 1, -1):
                g = grads.pop(i, None)
                if g is None:
                    continue
                if i in wanted:
                    found[i] = g
                node = tape.nodes[i]
                if node.vjp is None or i == lowest:
                    continue
                for inp, ig in zip(node.inputs, node.vjp(g, node.output)):
                    if ig is None or not inp.requires_grad:
                        continue
                    prev = grads.get(inp.index)
                    grads[inp.index] = ig if prev is None else add(prev, ig)

    result = []
    for v in wrt:
        g = found.get(v.index)
        if g is None:
            g = constant(np.zeros(v.shape))
        result.append(g if create_graph else g.value)
    return result


def _describe_batch(batch) -> str:
    for attr in ("fingerprint", "name"):
        tag = getattr(batch, attr, None)
        if tag:
            return f"{attr}={tag}"
    return f"{type(batch).__name__} at 0x{id(batch):x}"


def hessian_gradient_product(loss_fn, params: Sequence, batch, wrt: Sequence[bool] | None = None,
                             return_grad: bool = False):
    """Compute ``H g`` where ``g`` and ``H`` are the loss gradient and Hessian.

    ``loss_fn(variables, batch)`` receives one Variable per entry of ``params``
    and must return a scalar Variable. ``wrt`` selects the tensors that make up
    the differentiated vector; the rest enter as constants and get zero rows.
    The product is the gradient of ``g . stop_gradient(g)``; the Hessian is
    never formed.
    """
    wrt = [True] * len(params) if wrt is None else list(wrt)
    tape = Tape()
    inputs = [tape.leaf(p) if w else constant(p) for p, w in zip(params, wrt)]
    leaves = [v for v in inputs if v.requires_grad]
    loss = loss_fn(inputs, batch)
    if not np.all(np.isfinite(loss.value)):
        raise NumericalError(f"loss is not finite ({loss.value}) on batch {_describe_batch(batch)}")
    grads = gradient(loss, leaves, create_graph=True)
    flow = None
    for g in grads:
        term = sum(mul(g, stop_gradient(g)))
        flow = term if flow is None else add(flow, term)
    hg_sel = gradient(flow, leaves) if leaves else []
    hg, g_out = [], []
    it = iter(zip(hg_sel, grads))
    for p, w in zip(params, wrt):
        if w:
            h, g = next(it)
            hg.append(h)
            g_out.append(g.value)
        else:
            hg.append(np.zeros(np.shape(p)))
            g_out.append(np.zeros(np.shape(p)))
    if return_grad:
        return hg, g_out, float(loss.value)
    return hg
