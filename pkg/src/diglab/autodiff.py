"""Tape-based reverse-mode automatic differentiation on small dense arrays.

Every operation is recorded as a node on a :class:`Tape`. Calling
:func:`backward` walks the tape in reverse and accumulates vector-Jacobian
products. With ``create_graph=True`` the VJPs are themselves recorded on the
tape, so the returned gradients are ordinary nodes that can be differentiated
again (double backprop). This is what lets an objective contain a gradient
norm such as ||dD/dx||_2 and still be optimized w.r.t. network parameters.

All values are float64 arrays of rank 2; scalars live as shape (1, 1).
A tape is confined to a single thread; concurrent runs use separate tapes.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base error for tape construction and differentiation."""


class ShapeError(AutodiffError):
    """Operand shapes do not conform for the requested primitive."""


#: Differentiable primitives a tape can record (besides "leaf").
PRIMITIVES = frozenset({
    "add", "sub", "mul", "matmul", "tanh", "sigmoid", "softplus", "exp",
    "log", "max_with_constant", "sum", "mean", "square", "sqrt", "l2_norm",
    "scalar_mul", "broadcast_add", "transpose", "reciprocal",
})

_BINARY = {"add", "sub", "mul", "matmul", "broadcast_add"}
_NEEDS_CONST = {"scalar_mul", "max_with_constant"}


def _as_value(x) -> np.ndarray:
    """Coerce input to a rank-2 float64 array ((1,1) for scalars)."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a.ndim != 2:
        raise ShapeError(f"arrays must have rank <= 2, got shape {a.shape}")
    return a


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _forward(prim: str, vals: list[np.ndarray], const) -> np.ndarray:
    if prim == "add" or prim == "broadcast_add":
        return vals[0] + vals[1]
    if prim == "sub":
        return vals[0] - vals[1]
    if prim == "mul":
        return vals[0] * vals[1]
    if prim == "matmul":
        return vals[0] @ vals[1]
    if prim == "tanh":
        return np.tanh(vals[0])
    if prim == "sigmoid":
        return _stable_sigmoid(vals[0])
    if prim == "softplus":
        return np.logaddexp(0.0, vals[0])
    if prim == "exp":
        return np.exp(vals[0])
    if prim == "log":
        return np.log(vals[0])
    if prim == "max_with_constant":
        return np.maximum(vals[0], const)
    if prim == "sum":
        if const is None:
            return vals[0].sum().reshape(1, 1)
        return vals[0].sum(axis=const, keepdims=True)
    if prim == "mean":
        return vals[0].mean().reshape(1, 1)
    if prim == "square":
        return vals[0] * vals[0]
    if prim == "sqrt":
        return np.sqrt(vals[0])
    if prim == "l2_norm":
        return np.array([[np.linalg.norm(vals[0])]])
    if prim == "scalar_mul":
        return vals[0] * const
    if prim == "transpose":
        return vals[0].T
    if prim == "reciprocal":
        return 1.0 / vals[0]
    raise AutodiffError(f"unknown primitive {prim!r}")


def _check_shapes(prim: str, vals: list[np.ndarray], const) -> None:
    if prim in _BINARY:
        a, b = vals[0].shape, vals[1].shape
        if prim in ("add", "sub"):
            if a != b:
                raise ShapeError(f"{prim}: shapes {a} and {b} must match exactly")
        elif prim == "matmul":
            if a[1] != b[0]:
                raise ShapeError(f"matmul: inner dimensions of {a} and {b} differ")
        else:  # mul, broadcast_add follow numpy broadcasting over rank-2
            ok = all(da == db or da == 1 or db == 1 for da, db in zip(a, b))
            if not ok:
                raise ShapeError(f"{prim}: shapes {a} and {b} do not broadcast")
    if prim in _NEEDS_CONST and const is None:
        raise AutodiffError(f"{prim} requires a constant argument")
    if prim == "sum" and const not in (None, 0, 1):
        raise AutodiffError(f"sum: axis must be None, 0 or 1, got {const!r}")


class Node:
    """One recorded operation: primitive name, input nodes, cached value."""

    __slots__ = ("nid", "prim", "inputs", "value", "const")

    def __init__(self, nid, prim, inputs, value, const=None):
        self.nid = nid
        self.prim = prim
        self.inputs = inputs
        self.value = value
        self.const = const

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        """Scalar value of a (1,1) node."""
        if self.value.size != 1:
            raise ShapeError(f"item() on non-scalar node of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Node({self.nid}, {self.prim}, shape={self.shape})"


class Tape:
    """Append-only record of primitive operations with cached values.

    Node ids are topologically ordered by construction (inputs always have
    smaller ids), so a single reverse sweep suffices for backpropagation.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._transpose_memo: dict[int, Node] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> Node:
        """Record an input/constant node holding ``value``."""
        node = Node(len(self.nodes), "leaf", (), _as_value(value))
        self.nodes.append(node)
        return node

    def scalar(self, x: float) -> Node:
        return self.leaf(np.array([[float(x)]]))

    def record(self, prim: str, inputs, const=None) -> Node:
        """Record ``prim`` applied to ``inputs`` and return the new node.

        ``const`` carries the primitive's non-differentiable parameter:
        the factor of ``scalar_mul``, the threshold of ``max_with_constant``,
        or the axis of ``sum``.
        """
        if prim not in PRIMITIVES:
            raise AutodiffError(f"unknown primitive {prim!r}")
        inputs = tuple(inputs)
        vals = [n.value for n in inputs]
        _check_shapes(prim, vals, const)
        try:
            value = _forward(prim, vals, const)
        except ValueError as e:
            shapes = ", ".join(str(v.shape) for v in vals)
            raise ShapeError(f"{prim}: cannot apply to shapes {shapes}: {e}") from e
        node = Node(len(self.nodes), prim, inputs, value, const)
        self.nodes.append(node)
        return node

    # Thin wrappers; these are the vocabulary the rest of the library uses.
    def add(self, a, b):
        return self.record("add", (a, b))

    def sub(self, a, b):
        return self.record("sub", (a, b))

    def mul(self, a, b):
        return self.record("mul", (a, b))

    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def tanh(self, a):
        return self.record("tanh", (a,))

    def sigmoid(self, a):
        return self.record("sigmoid", (a,))

    def softplus(self, a):
        return self.record("softplus", (a,))

    def exp(self, a):
        return self.record("exp", (a,))

    def log(self, a):
        return self.record("log", (a,))

    def max_with_constant(self, a, c: float):
        return self.record("max_with_constant", (a,), const=float(c))

    def sum(self, a, axis=None):
        return self.record("sum", (a,), const=axis)

    def mean(self, a):
        return self.record("mean", (a,))

    def square(self, a):
        return self.record("square", (a,))

    def sqrt(self, a):
        return self.record("sqrt", (a,))

    def l2_norm(self, a):
        return self.record("l2_norm", (a,))

    def scalar_mul(self, a, c: float):
        return self.record("scalar_mul", (a,), const=float(c))

    def broadcast_add(self, a, b):
        return self.record("broadcast_add", (a, b))

    def reciprocal(self, a):
        return self.record("reciprocal", (a,))

    def transpose(self, a) -> Node:
        """Transpose, memoized per input node (parameter matrices are
        transposed many times per step otherwise)."""
        cached = self._transpose_memo.get(a.nid)
        if cached is not None:
            return cached
        node = self.record("transpose", (a,))
        self._transpose_memo[a.nid] = node
        return node

    def replay(self) -> bool:
        """Recompute every node from its inputs; True iff values match bit-for-bit."""
        for n in self.nodes:
            if n.prim == "leaf":
                continue
            redo = _forward(n.prim, [i.value for i in n.inputs], n.const)
            if redo.shape != n.value.shape or not np.array_equal(redo, n.value):
                return False
        return True


def record(tape: Tape, prim: str, inputs, const=None) -> Node:
    """Module-level alias for :meth:`Tape.record`."""
    return tape.record(prim, inputs, const)


# --- backward pass ---------------------------------------------------------
#
# VJP formulas are written once against a tiny "ops" adapter. In graph mode
# the adapter records nodes on the tape (so gradients stay differentiable);
# in raw mode it runs the identical numpy expressions directly. Both modes
# therefore produce bit-identical numbers.


class _GraphOps:
    def __init__(self, tape: Tape):
        self.t = tape

    @staticmethod
    def lift(node):
        return node

    @staticmethod
    def value(ref):
        return ref.value

    def const(self, arr):
        return self.t.leaf(arr)

    def add(self, a, b):
        return self.t.add(a, b)

    def sub(self, a, b):
        return self.t.sub(a, b)

    def mul(self, a, b):
        return self.t.mul(a, b)

    def matmul(self, a, b):
        return self.t.matmul(a, b)

    def square(self, a):
        return self.t.square(a)

    def sigmoid(self, a):
        return self.t.sigmoid(a)

    def reciprocal(self, a):
        return self.t.reciprocal(a)

    def scalar_mul(self, a, c):
        return self.t.scalar_mul(a, c)

    def transpose(self, a):
        return self.t.transpose(a)

    def sum_axis(self, a, axis):
        return self.t.sum(a, axis=axis)

    def fill(self, shape, scalar_ref):
        zeros = self.t.leaf(np.zeros(shape))
        return self.t.broadcast_add(zeros, scalar_ref)


class _RawOps:
    @staticmethod
    def lift(node):
        return node.value

    @staticmethod
    def value(ref):
        return ref

    @staticmethod
    def const(arr):
        return arr

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def square(a):
        return a * a

    @staticmethod
    def sigmoid(a):
        return _stable_sigmoid(a)

    @staticmethod
    def reciprocal(a):
        return 1.0 / a

    @staticmethod
    def scalar_mul(a, c):
        return a * c

    @staticmethod
    def transpose(a):
        return a.T

    @staticmethod
    def sum_axis(a, axis):
        return a.sum(axis=axis, keepdims=True)

    @staticmethod
    def fill(shape, scalar_ref):
        return np.zeros(shape) + scalar_ref


def _unbroadcast(ops, g, target_shape):
    """Sum ``g`` over axes the forward pass broadcast away."""
    shape = ops.value(g).shape
    if shape == target_shape:
        return g
    for axis in (0, 1):
        if target_shape[axis] == 1 and ops.value(g).shape[axis] != 1:
            g = ops.sum_axis(g, axis)
    return g


def _vjp(ops, node: Node, g):
    """Adjoint contributions of ``node`` to each of its inputs.

    Returns a list aligned with ``node.inputs``; ``None`` marks a zero
    contribution. ``g`` is the adjoint of ``node`` itself.
    """
    prim = node.prim
    ins = node.inputs
    if prim == "add":
        return [g, g]
    if prim == "broadcast_add":
        return [_unbroadcast(ops, g, ins[0].shape),
                _unbroadcast(ops, g, ins[1].shape)]
    if prim == "sub":
        return [g, ops.scalar_mul(g, -1.0)]
    if prim == "mul":
        ga = _unbroadcast(ops, ops.mul(g, ops.lift(ins[1])), ins[0].shape)
        gb = _unbroadcast(ops, ops.mul(g, ops.lift(ins[0])), ins[1].shape)
        return [ga, gb]
    if prim == "matmul":
        return [ops.matmul(g, ops.transpose(ops.lift(ins[1]))),
                ops.matmul(ops.transpose(ops.lift(ins[0])), g)]
    if prim == "tanh":
        y = ops.lift(node)
        return [ops.sub(g, ops.mul(g, ops.square(y)))]
    if prim == "sigmoid":
        y = ops.lift(node)
        return [ops.mul(g, ops.sub(y, ops.square(y)))]
    if prim == "softplus":
        return [ops.mul(g, ops.sigmoid(ops.lift(ins[0])))]
    if prim == "exp":
        return [ops.mul(g, ops.lift(node))]
    if prim == "log":
        return [ops.mul(g, ops.reciprocal(ops.lift(ins[0])))]
    if prim == "max_with_constant":
        # Subgradient 0 exactly at the kink (strict inequality).
        mask = (ins[0].value > node.const).astype(np.float64)
        return [ops.mul(g, ops.const(mask))]
    if prim == "sum":
        return [ops.fill(ins[0].shape, g)]
    if prim == "mean":
        return [ops.fill(ins[0].shape, ops.scalar_mul(g, 1.0 / ins[0].value.size))]
    if prim == "square":
        return [ops.mul(g, ops.scalar_mul(ops.lift(ins[0]), 2.0))]
    if prim == "sqrt":
        return [ops.mul(g, ops.scalar_mul(ops.reciprocal(ops.lift(node)), 0.5))]
    if prim == "l2_norm":
        # Zero-vector subgradient convention: gradient is the zero vector.
        if node.value[0, 0] == 0.0:
            return [ops.const(np.zeros(ins[0].shape))]
        s = ops.mul(g, ops.reciprocal(ops.lift(node)))
        return [ops.mul(ops.lift(ins[0]), s)]
    if prim == "scalar_mul":
        return [ops.scalar_mul(g, node.const)]
    if prim == "transpose":
        return [ops.transpose(g)]
    if prim == "reciprocal":
        y = ops.lift(node)
        return [ops.scalar_mul(ops.mul(g, ops.square(y)), -1.0)]
    raise AutodiffError(f"no VJP for primitive {prim!r}")


def backward(tape: Tape, output: Node, wrt, create_graph: bool = False) -> dict:
    """Gradients of the scalar ``output`` w.r.t. each node in ``wrt``.

    Returns a dict keyed by node id. With ``create_graph=True`` the values
    are tape nodes (differentiable again); otherwise plain float64 arrays.
    A ``wrt`` node the output does not depend on gets a zero array of the
    node's shape.
    """
    if output.value.size != 1:
        raise AutodiffError(
            f"backward requires a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    n = output.nid + 1

    # Nodes the output depends on (reverse reachability from output).
    reach = bytearray(n)
    reach[output.nid] = 1
    nodes = tape.nodes
    for nid in range(output.nid, -1, -1):
        if reach[nid]:
            for inp in nodes[nid].inputs:
                reach[inp.nid] = 1

    # Nodes that (transitively) feed some wrt node's adjoint path; an
    # adjoint only matters for nodes on a path from output to a wrt node.
    feeds = bytearray(n)
    for w in wrt:
        if w.nid < n:
            feeds[w.nid] = 1
    for nid in range(n):
        node = nodes[nid]
        if feeds[nid]:
            continue
        for inp in node.inputs:
            if feeds[inp.nid]:
                feeds[nid] = 1
                break

    ops = _GraphOps(tape) if create_graph else _RawOps()
    active = [reach[i] and feeds[i] for i in range(n)]
    wrt_ids = {w.nid for w in wrt}
    adjoint: dict[int, object] = {}
    if active[output.nid]:
        adjoint[output.nid] = ops.const(np.ones((1, 1)))

    for nid in range(output.nid, -1, -1):
        if not active[nid]:
            continue
        g = adjoint.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        if nid in wrt_ids:
            # Keep the accumulated adjoint for result extraction.
            adjoint[nid] = g
        if not node.inputs:
            continue
        contribs = _vjp(ops, node, g)
        for inp, contrib in zip(node.inputs, contribs):
            if contrib is None or not active[inp.nid]:
                continue
            prev = adjoint.get(inp.nid)
            adjoint[inp.nid] = contrib if prev is None else ops.add(prev, contrib)

    grads = {}
    for w in wrt:
        g = adjoint.get(w.nid)
        if g is None:
            zero = np.zeros(w.shape)
            grads[w.nid] = tape.leaf(zero) if create_graph else zero
        else:
            grads[w.nid] = g
    return grads
