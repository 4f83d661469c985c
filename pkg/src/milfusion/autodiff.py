"""Dense float64 tensors with a define-by-run reverse-mode tape.

Design choices, deliberately boring:
  * row-major flat storage; every operation copies, there are no views,
    no strides and no broadcasting;
  * a tape is rebuilt for every forward pass and is confined to one thread
    (distinct tapes may run concurrently);
  * softmax subtracts the max before exponentiating; log raises a DomainError
    instead of clamping, so silent NaN sources cannot appear.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, DomainError


def _flat(values, shape=None):
    """Coerce to (1-D float64 copy, shape tuple), validating positive dims."""
    arr = np.asarray(values, dtype=np.float64)
    if shape is None:
        shape = arr.shape
    shape = tuple(int(d) for d in shape)
    if any(d <= 0 for d in shape):
        raise DimensionError(f"tensor dimensions must be positive, got {list(shape)}")
    n = 1
    for d in shape:
        n *= d
    if arr.size != n:
        raise DimensionError(
            f"{arr.size} values do not fill shape {list(shape)} (needs {n})"
        )
    return arr.reshape(-1).copy(), shape


class TapeNode:
    """One recorded operation.

    ``grad_fn`` maps the output gradient to one gradient per input (the saved
    forward values live in its closure); ``None`` marks a leaf.
    """

    __slots__ = ("kind", "input_ids", "shape", "grad_fn")

    def __init__(self, kind, input_ids, shape, grad_fn):
        self.kind = kind
        self.input_ids = input_ids
        self.shape = shape
        self.grad_fn = grad_fn


class Tape:
    """Append-only operation record; node ids are topologically ordered."""

    def __init__(self):
        self.nodes = []
        self.gradients = {}

    def _record(self, kind, input_ids, shape, grad_fn):
        self.nodes.append(TapeNode(kind, input_ids, shape, grad_fn))
        return len(self.nodes) - 1

    def leaf(self, values, shape=None):
        """Register a differentiable leaf (a trainable parameter)."""
        data, shp = _flat(values, shape)
        nid = self._record("leaf", (), shp, None)
        return Tensor(data, shp, self, nid)

    def grad(self, tensor):
        """Gradient of the last backward() w.r.t. ``tensor`` (a leaf or op output)."""
        if tensor.tape is not self or tensor.node_id is None:
            raise ContractError("tensor was not recorded on this tape")
        if tensor.node_id not in self.gradients:
            raise ContractError("no gradient recorded; run backward() first")
        return self.gradients[tensor.node_id]


class Tensor:
    """Dense float64 tensor; shape is immutable; optionally attached to a tape."""

    __slots__ = ("data", "shape", "tape", "node_id")

    def __init__(self, data, shape, tape=None, node_id=None):
        self.data = data  # 1-D float64, row-major
        self.shape = shape
        self.tape = tape
        self.node_id = node_id

    @staticmethod
    def const(values, shape=None):
        """A constant (non-differentiable) tensor."""
        data, shp = _flat(values, shape)
        return Tensor(data, shp)

    @property
    def size(self):
        return self.data.size

    def value(self):
        """Shaped copy of the data."""
        return self.data.reshape(self.shape).copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {list(self.shape)}")
        return float(self.data[0])

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={list(self.shape)}{tag})"


def _shared_tape(*tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands were recorded on different tapes")
    return tape


def _emit(kind, data, shape, inputs, grad_fn):
    tape = _shared_tape(*inputs)
    if tape is None:
        return Tensor(data, shape)
    nid = tape._record(kind, tuple(t.node_id for t in inputs), shape, grad_fn)
    return Tensor(data, shape, tape, nid)


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {list(a.shape)} and {list(b.shape)} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, a.shape, (a, b), lambda g: (g, g))


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, a.shape, (a, b), lambda g: (bd * g, ad * g))


def neg(x):
    return _emit("neg", -x.data, x.shape, (x,), lambda g: (-g,))


def tanh(x):
    y = np.tanh(x.data)
    return _emit("tanh", y, x.shape, (x,), lambda g: ((1.0 - y * y) * g,))


def exp(x):
    y = np.exp(x.data)
    return _emit("exp", y, x.shape, (x,), lambda g: (y * g,))


def log(x):
    if np.any(x.data <= 0.0):
        raise DomainError(f"log: non-positive input (min={x.data.min()!r})")
    xd = x.data
    return _emit("log", np.log(xd), x.shape, (x,), lambda g: (g / xd,))


def relu(x):
    mask = x.data > 0.0
    return _emit("relu", np.where(mask, x.data, 0.0), x.shape, (x,), lambda g: (np.where(mask, g, 0.0),))


def sigmoid(x):
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    y[~pos] = e / (1.0 + e)
    return _emit("sigmoid", y, x.shape, (x,), lambda g: (y * (1.0 - y) * g,))


def recip(x):
    if np.any(x.data == 0.0):
        raise DomainError("recip: zero input")
    y = 1.0 / x.data
    return _emit("recip", y, x.shape, (x,), lambda g: (-(y * y) * g,))


def scalar_mul(c, x):
    """Multiply every element of ``x`` by a scalar.

    ``c`` may be a Python number (constant) or a size-1 Tensor, in which case
    the gradient flows into the scalar as well.
    """
    if isinstance(c, Tensor):
        if c.size != 1:
            raise DimensionError(f"scalar_mul: scalar has shape {list(c.shape)}")
        c0 = float(c.data[0])
        xd = x.data
        return _emit(
            "scalar_mul",
            c0 * xd,
            x.shape,
            (c, x),
            lambda g: (np.array([np.dot(g, xd)]), c0 * g),
        )
    c0 = float(c)
    return _emit("scalar_mul", c0 * x.data, x.shape, (x,), lambda g: (c0 * g,))


_ELEMENTWISE = {}


def elementwise(op_kind, *args):
    """Dispatch an elementwise op by name: tanh, exp, log, neg, add, mul, scalar_mul."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op kind: {op_kind!r}") from None
    return fn(*args)


_ELEMENTWISE.update(
    {"tanh": tanh, "exp": exp, "log": log, "neg": neg, "add": add, "mul": mul,
     "scalar_mul": scalar_mul}
)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b):
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul needs [m,k] x [k,n], got {list(a.shape)} x {list(b.shape)}"
        )
    m, k = a.shape
    n = b.shape[1]
    A = a.data.reshape(m, k)
    B = b.data.reshape(k, n)
    need_a = a.tape is not None
    need_b = b.tape is not None

    def grad_fn(g):
        G = g.reshape(m, n)
        ga = (G @ B.T).reshape(-1) if need_a else None
        gb = (A.T @ G).reshape(-1) if need_b else None
        return (ga, gb)

    return _emit("matmul", (A @ B).reshape(-1), (m, n), (a, b), grad_fn)


def transpose(x):
    if len(x.shape) != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {list(x.shape)}")
    m, k = x.shape
    y = x.data.reshape(m, k).T.copy().reshape(-1)
    return _emit("transpose", y, (k, m), (x,), lambda g: (g.reshape(k, m).T.copy().reshape(-1),))


def reshape(x, shape):
    shape = tuple(int(d) for d in shape)
    if any(d <= 0 for d in shape):
        raise DimensionError(f"reshape target has non-positive dims: {list(shape)}")
    n = 1
    for d in shape:
        n *= d
    if n != x.size:
        raise DimensionError(f"cannot reshape {list(x.shape)} into {list(shape)}")
    return _emit("reshape", x.data.copy(), shape, (x,), lambda g: (g.copy(),))


def concat(parts):
    """Concatenate 1-D tensors into one 1-D tensor."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of an empty sequence")
    for p in parts:
        if len(p.shape) != 1:
            raise DimensionError(f"concat needs 1-D tensors, got {list(p.shape)}")
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]].copy() for i in range(len(sizes)))

    data = np.concatenate([p.data for p in parts])
    return _emit("concat", data, (int(offsets[-1]),), tuple(parts), grad_fn)


def total(x):
    """Sum of all elements, as a shape-[1] tensor."""
    n = x.size
    return _emit("sum", np.array([x.data.sum()]), (1,), (x,), lambda g: (np.full(n, g[0]),))


def pick(x, index):
    """Extract one element of a 1-D tensor as a shape-[1] tensor."""
    if len(x.shape) != 1:
        raise DimensionError(f"pick needs a 1-D tensor, got {list(x.shape)}")
    index = int(index)
    if not 0 <= index < x.shape[0]:
        raise ContractError(f"pick index {index} out of range for length {x.shape[0]}")
    n = x.size

    def grad_fn(g):
        out = np.zeros(n)
        out[index] = g[0]
        return (out,)

    return _emit("pick", np.array([x.data[index]]), (1,), (x,), grad_fn)


def softmax(x):
    """Softmax over a 1-D tensor, computed with max-subtraction."""
    if len(x.shape) != 1:
        raise DimensionError(f"softmax needs a 1-D tensor, got {list(x.shape)}")
    z = x.data - x.data.max()
    e = np.exp(z)
    y = e / e.sum()
    return _emit("softmax", y, x.shape, (x,), lambda g: (y * (g - np.dot(g, y)),))


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape, loss):
    """Populate ``tape.gradients`` with d(loss)/d(node) for reachable nodes.

    Every leaf gets an entry (zeros when unreachable). Calling backward twice
    on the same tape recomputes the same gradients.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise ContractError("loss tensor was not recorded on this tape")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")

    adjoint = {loss.node_id: np.ones(1)}
    reached = {}
    for nid in range(loss.node_id, -1, -1):
        g = adjoint.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        reached[nid] = g
        if node.grad_fn is None:
            continue
        for iid, ig in zip(node.input_ids, node.grad_fn(g)):
            if iid is None or ig is None:
                continue
            acc = adjoint.get(iid)
            adjoint[iid] = ig if acc is None else acc + ig

    tape.gradients = {}
    for nid, node in enumerate(tape.nodes):
        g = reached.get(nid)
        if g is not None:
            tape.gradients[nid] = Tensor(g.copy(), node.shape)
        elif node.grad_fn is None:  # unreachable leaf: zero gradient
            n = 1
            for d in node.shape:
                n *= d
            tape.gradients[nid] = Tensor(np.zeros(n), node.shape)
    return tape.gradients
