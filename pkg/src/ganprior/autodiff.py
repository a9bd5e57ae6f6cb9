"""Reverse-mode automatic differentiation on a dynamically recorded tape.

Every :class:`Node` holds a float64 numpy value (a 0-d array for scalars) and
is appended to the :class:`Tape` that created it, so tape order is already a
topological order and :func:`backward` is a single reverse sweep.

Second derivatives are obtained by tangent propagation: a :class:`Dual`
carries a primal and a tangent whose components may themselves be nodes, so
the directional derivative of a function becomes a node that can be
differentiated again by :func:`backward`.  This is all the gradient-penalty
term of a WGAN-GP critic needs.

Primitives: ``+ - * /``, :func:`tanh`, :func:`sigmoid`, :func:`relu`,
:func:`leaky_relu`, :func:`exp`, :func:`log`, :func:`sqrt`, :func:`power`,
plus the array helpers :func:`matmul`, :func:`dense`, :func:`sum`,
:func:`mean` and indexing.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, NonFiniteError

LEAKY_SLOPE = 0.2


class Tape:
    """Ordered record of nodes with a checkpoint for cheap truncation.

    Leaves created before :meth:`checkpoint` (typically network weights)
    survive :meth:`reset`; everything recorded afterwards is discarded.
    """

    def __init__(self):
        self.nodes = []
        self._mark = 0

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, op="leaf"):
        return Node(self, _as_array(value), (), op)

    def checkpoint(self):
        self._mark = len(self.nodes)
        return self._mark

    def reset(self):
        del self.nodes[self._mark:]


class Node:
    __slots__ = ("value", "grad", "parents", "op", "tape", "index")

    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, tape, value, parents=(), op="leaf"):
        self.value = value
        self.grad = None
        self.parents = parents
        self.op = op
        self.tape = tape
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, value={self.value!r})"

    def __float__(self):
        return float(self.value)

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


class Dual:
    """Primal/tangent pair for forward-mode propagation.

    A ``None`` tangent stands for an exact zero and is never materialised.
    """

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None

    def __init__(self, primal, tangent=None):
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"Dual({self.primal!r}, {self.tangent!r})"

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


# ---------------------------------------------------------------------------
# helpers


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def value_of(x):
    """Numeric value of a node, dual (primal part) or plain array."""
    if isinstance(x, Dual):
        return value_of(x.primal)
    if isinstance(x, Node):
        return x.value
    return _as_array(x)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands live on different tapes")
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _all_finite(v):
    # a finite sum implies finite entries; only fall back to the full scan otherwise
    return bool(np.isfinite(v.sum())) or bool(np.all(np.isfinite(v)))


def _record(op, value, parents, tape):
    value = _as_array(value)
    if not _all_finite(value):
        raise NonFiniteError(f"primitive '{op}' produced a non-finite value")
    return Node(tape, value, tuple(parents), op)


def _split(x):
    if isinstance(x, Dual):
        return x.primal, x.tangent
    return x, None


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _tmul(t, factor):
    return None if t is None else mul(t, factor)


def _is_dual(*xs):
    return any(isinstance(x, Dual) for x in xs)


# ---------------------------------------------------------------------------
# binary primitives


def add(a, b):
    if _is_dual(a, b):
        (ap, at), (bp, bt) = _split(a), _split(b)
        return Dual(add(ap, bp), _tadd(at, bt))
    tape = _tape_of(a, b)
    if tape is None:
        return _as_array(a) + _as_array(b)
    av, bv = value_of(a), value_of(b)
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(g, s)))
    return _record("add", av + bv, parents, tape)


def neg(a):
    if isinstance(a, Dual):
        return Dual(neg(a.primal), None if a.tangent is None else neg(a.tangent))
    if isinstance(a, Node):
        return _record("neg", -a.value, [(a, lambda g: -g)], a.tape)
    return -_as_array(a)


def sub(a, b):
    if _is_dual(a, b):
        (ap, at), (bp, bt) = _split(a), _split(b)
        return Dual(sub(ap, bp), _tadd(at, None if bt is None else neg(bt)))
    tape = _tape_of(a, b)
    if tape is None:
        return _as_array(a) - _as_array(b)
    av, bv = value_of(a), value_of(b)
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(-g, s)))
    return _record("sub", av - bv, parents, tape)


def mul(a, b):
    if _is_dual(a, b):
        (ap, at), (bp, bt) = _split(a), _split(b)
        return Dual(mul(ap, bp), _tadd(_tmul(at, bp), _tmul(bt, ap)))
    tape = _tape_of(a, b)
    if tape is None:
        return _as_array(a) * _as_array(b)
    av, bv = value_of(a), value_of(b)
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(g * bv, av.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(g * av, bv.shape)))
    return _record("mul", av * bv, parents, tape)


def div(a, b):
    if _is_dual(a, b):
        (ap, at), (bp, bt) = _split(a), _split(b)
        q = div(ap, bp)
        tangent = None if at is None else div(at, bp)
        if bt is not None:
            tangent = _tadd(tangent, neg(div(mul(q, bt), bp)))
        return Dual(q, tangent)
    bv = value_of(b)
    if np.any(bv == 0.0):
        raise DomainError("primitive 'div': division by zero")
    tape = _tape_of(a, b)
    av = value_of(a)
    if tape is None:
        return av / bv
    out = av / bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(g / bv, av.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(-g * out / bv, bv.shape)))
    return _record("div", out, parents, tape)


# ---------------------------------------------------------------------------
# unary primitives


def _unary(op, x, fn, dfn, dual_rule):
    """Shared plumbing: ``fn`` maps value, ``dfn(value, out)`` is f'."""
    if isinstance(x, Dual):
        return dual_rule(x)
    if isinstance(x, Node):
        xv = x.value
        out = fn(xv)
        return _record(op, out, [(x, lambda g: g * dfn(xv, out))], x.tape)
    return fn(_as_array(x))


def tanh(x):
    def rule(d):
        t = tanh(d.primal)
        return Dual(t, _tmul(d.tangent, sub(1.0, mul(t, t))))

    return _unary("tanh", x, np.tanh, lambda v, o: 1.0 - o * o, rule)


def _sigmoid(v):
    # numerically stable in both tails
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    def rule(d):
        s = sigmoid(d.primal)
        return Dual(s, _tmul(d.tangent, mul(s, sub(1.0, s))))

    return _unary("sigmoid", x, _sigmoid, lambda v, o: o * (1.0 - o), rule)


def relu(x):
    def rule(d):
        mask = (value_of(d.primal) > 0).astype(np.float64)
        return Dual(relu(d.primal), _tmul(d.tangent, mask))

    return _unary(
        "relu", x, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0).astype(np.float64), rule
    )


def leaky_relu(x, slope=LEAKY_SLOPE):
    def rule(d):
        factor = np.where(value_of(d.primal) > 0, 1.0, slope)
        return Dual(leaky_relu(d.primal, slope), _tmul(d.tangent, factor))

    return _unary(
        "leaky_relu",
        x,
        lambda v: np.where(v > 0, v, slope * v),
        lambda v, o: np.where(v > 0, 1.0, slope),
        rule,
    )


def exp(x):
    def rule(d):
        e = exp(d.primal)
        return Dual(e, _tmul(d.tangent, e))

    return _unary("exp", x, np.exp, lambda v, o: o, rule)


def log(x):
    if np.any(value_of(x) <= 0.0):
        raise DomainError("primitive 'log': non-positive argument")

    def rule(d):
        return Dual(log(d.primal), None if d.tangent is None else div(d.tangent, d.primal))

    return _unary("log", x, np.log, lambda v, o: 1.0 / v, rule)


def sqrt(x):
    if np.any(value_of(x) <= 0.0):
        raise DomainError("primitive 'sqrt': non-positive argument")

    def rule(d):
        s = sqrt(d.primal)
        return Dual(s, None if d.tangent is None else div(d.tangent, mul(2.0, s)))

    return _unary("sqrt", x, np.sqrt, lambda v, o: 0.5 / o, rule)


def power(x, p):
    """``x ** p`` for a constant real exponent ``p``."""
    p = float(p)
    xv = value_of(x)
    if not p.is_integer() and np.any(xv < 0):
        raise DomainError("primitive 'pow': negative base with fractional exponent")
    if p < 0 and np.any(xv == 0):
        raise DomainError("primitive 'pow': zero base with negative exponent")

    def rule(d):
        return Dual(power(d.primal, p), _tmul(d.tangent, mul(p, power(d.primal, p - 1.0))))

    return _unary("pow", x, lambda v: v**p, lambda v, o: p * v ** (p - 1.0), rule)


# ---------------------------------------------------------------------------
# array primitives


def _matmul_vjp(av, bv):
    def ga(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv
        if av.ndim == 1:
            return bv @ g
        if bv.ndim == 1:
            return np.outer(g, bv)
        return g @ bv.T

    def gb(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        if av.ndim == 1:
            return np.outer(av, g)
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return ga, gb


def matmul(a, b):
    if _is_dual(a, b):
        (ap, at), (bp, bt) = _split(a), _split(b)
        tangent = None if at is None else matmul(at, bp)
        if bt is not None:
            tangent = _tadd(tangent, matmul(ap, bt))
        return Dual(matmul(ap, bp), tangent)
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ContractError("matmul supports vectors and matrices only")
    if tape is None:
        return av @ bv
    ga, gb = _matmul_vjp(av, bv)
    parents = []
    if isinstance(a, Node):
        parents.append((a, ga))
    if isinstance(b, Node):
        parents.append((b, gb))
    return _record("matmul", av @ bv, parents, tape)


def dense(x, weight, bias):
    """Fused affine map ``x @ weight + bias``; ``weight`` is (in, out)."""
    if _is_dual(x, weight, bias):
        (xp, xt), (wp, wt), (bp, bt) = _split(x), _split(weight), _split(bias)
        tangent = None if xt is None else matmul(xt, wp)
        if wt is not None:
            tangent = _tadd(tangent, matmul(xp, wt))
        tangent = _tadd(tangent, bt)
        return Dual(dense(xp, wp, bp), tangent)
    tape = _tape_of(x, weight, bias)
    xv, wv, bv = value_of(x), value_of(weight), value_of(bias)
    if xv.shape[-1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise ContractError(
            f"dense: input {xv.shape} incompatible with weight {wv.shape}, bias {bv.shape}"
        )
    out = xv @ wv + bv
    if tape is None:
        return out
    parents = []
    if isinstance(x, Node):
        parents.append((x, lambda g: g @ wv.T))
    if isinstance(weight, Node):
        if xv.ndim == 1:
            parents.append((weight, lambda g: np.outer(xv, g)))
        else:
            parents.append((weight, lambda g: xv.T @ g))
    if isinstance(bias, Node):
        parents.append((bias, lambda g: g if g.ndim == 1 else g.sum(axis=0)))
    return _record("dense", out, parents, tape)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    if isinstance(x, Dual):
        return Dual(sum(x.primal, axis), None if x.tangent is None else sum(x.tangent, axis))
    if isinstance(x, Node):
        xv = x.value

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, xv.shape).copy()

        return _record("sum", xv.sum(axis=axis), [(x, vjp)], x.tape)
    return _as_array(x).sum(axis=axis)


def mean(x, axis=None):
    n = value_of(x).size if axis is None else value_of(x).shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def take(x, idx):
    """Indexing (``x[idx]``) with scatter-add adjoint."""
    if isinstance(x, Dual):
        return Dual(take(x.primal, idx), None if x.tangent is None else take(x.tangent, idx))
    if isinstance(x, Node):
        xv = x.value

        def vjp(g):
            out = np.zeros_like(xv)
            np.add.at(out, idx, g)
            return out

        return _record("take", xv[idx], [(x, vjp)], x.tape)
    return _as_array(x)[idx]


# ---------------------------------------------------------------------------
# reverse pass


def backward(output, seed=None):
    """Populate ``.grad`` on every node recorded up to ``output``.

    ``output`` must be scalar unless an explicit cotangent ``seed`` of the same
    shape is supplied.  Nodes that do not influence ``output`` receive zeros.
    """
    if not isinstance(output, Node):
        raise ContractError("backward needs a Node")
    if seed is None:
        if output.value.size != 1:
            raise ContractError(f"backward on non-scalar output of shape {output.value.shape}")
        seed = np.ones_like(output.value)
    else:
        seed = _as_array(seed)
        if seed.shape != output.value.shape:
            raise ContractError("seed shape does not match output")
    nodes = output.tape.nodes[: output.index + 1]
    for node in nodes:
        node.grad = None
    output.grad = seed
    for node in reversed(nodes):
        g = node.grad
        if g is None:
            continue
        if not _all_finite(g):
            raise NonFiniteError(f"non-finite gradient at primitive '{node.op}'")
        for parent, vjp in node.parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    for node in nodes:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)


def gradient(fn, *args):
    """Value and gradients of scalar ``fn(*nodes)`` at numeric ``args``."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in args]
    out = fn(*leaves)
    backward(out)
    return float(out.value), [leaf.grad for leaf in leaves]


def grad_of_grad_norm(f, v, params, at_zero="error"):
    """Gradient of ``||grad_v f(v, params)||_2`` with respect to ``params``.

    ``f(v, params)`` must be written with this module's primitives and
    return a scalar.  The input gradient ``g`` is found by one reverse sweep;
    the tangent of ``f`` along ``u = g/|g|`` then equals ``|g|`` in value and
    in its first derivative with respect to the parameters, so a second
    reverse sweep on that tangent gives the answer.

    Returns ``(norm, grads)``.  When the input gradient vanishes the norm is
    not differentiable: ``at_zero="error"`` raises :class:`DomainError`,
    ``at_zero="zero"`` returns the zero subgradient.
    """
    if at_zero not in ("error", "zero"):
        raise ContractError(f"at_zero must be 'error' or 'zero', got {at_zero!r}")
    v = _as_array(v)
    params = [_as_array(p) for p in params]

    tape = Tape()
    v_node = tape.leaf(v)
    out = f(v_node, [tape.leaf(p) for p in params])
    if not isinstance(out, Node) or out.value.size != 1:
        raise ContractError("f must return a scalar Node")
    backward(out)
    g = v_node.grad
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        if at_zero == "error":
            raise DomainError("gradient norm is zero; its derivative is undefined")
        return norm, [np.zeros_like(p) for p in params]

    tape = Tape()
    p_nodes = [tape.leaf(p) for p in params]
    out = f(Dual(v, g / norm), p_nodes)
    s = out.tangent if isinstance(out, Dual) else None
    if not isinstance(s, Node):
        # tangent does not depend on the parameters
        return norm, [np.zeros_like(p) for p in params]
    backward(s)
    return norm, [p.grad for p in p_nodes]
