"""Reverse-mode automatic differentiation on an append-only tape.

Nodes hold float64 scalars or numpy arrays; elementwise primitives keep
the scalar semantics (a node carries one value per independent
evaluation point), while a handful of structural ops (matmul, concat,
sum, repeat, reshape, take) exist so dense layers run as BLAS calls
instead of per-scalar Python loops.

Nested differentiation uses a forward tangent channel carried *through*
the reverse tape: every tangent is built out of recorded primitives, so
a directional derivative is itself a node and the outer reverse sweep
differentiates through it (forward-over-reverse).
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erfc, expit

from .errors import ConfigError

Array = Union[float, np.ndarray]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_cdf(x: Array) -> Array:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) * _INV_SQRT2)


def norm_pdf(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x: Array) -> Array:
    """Exact GELU, x * Phi(x) (no tanh approximation)."""
    return x * norm_cdf(x)


def silu(x: Array) -> Array:
    return x * expit(x)


def softplus(x: Array) -> Array:
    return np.logaddexp(0.0, x)


# Elementwise primitives: op -> (arity, value_fn).
_ELEMENTWISE: Dict[str, Tuple[int, Callable]] = {
    "add": (2, lambda a, b: a + b),
    "sub": (2, lambda a, b: a - b),
    "mul": (2, lambda a, b: a * b),
    "div": (2, lambda a, b: a / b),
    "max": (2, np.maximum),
    "neg": (1, lambda a: -a),
    "exp": (1, np.exp),
    "ln": (1, np.log),
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "tanh": (1, np.tanh),
    "gelu": (1, gelu),
    "silu": (1, silu),
    "softplus": (1, softplus),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "pow2": (1, lambda a: a * a),
    "normcdf": (1, norm_cdf),
}

_STRUCTURAL = frozenset({"matmul", "concat", "sum", "repeat", "reshape", "take",
                         "slice1d"})
_LEAF = frozenset({"var", "const"})

# Registered composite kernels: op tag -> (value_fn, vjp_fn).
# value_fn(aux, parent_values) -> value
# vjp_fn(node, adjoint, parent_values) -> sequence of
#     (parent_position, gradient, owned) triples.
_CUSTOM: Dict[str, Tuple[Callable, Callable]] = {}


def register_op(op: str, value_fn: Callable, vjp_fn: Callable) -> None:
    """Register a fused kernel with its explicit reverse rule.

    Lets hot composite functions run as one tape node instead of many
    elementwise primitives; the caller owns the correctness of vjp_fn.
    """
    if op in _ELEMENTWISE or op in _STRUCTURAL or op in _LEAF:
        raise ConfigError(f"op tag {op!r} is reserved")
    _CUSTOM[op] = (value_fn, vjp_fn)


def _local_grads(op: str, value: Array, pvals: Sequence[Array]) -> Tuple[Array, ...]:
    """Analytic partials of an elementwise op w.r.t. its parents."""
    if op == "add":
        return (1.0, 1.0)
    if op == "sub":
        return (1.0, -1.0)
    if op == "mul":
        return (pvals[1], pvals[0])
    if op == "div":
        return (1.0 / pvals[1], -value / pvals[1])
    if op == "max":
        m = np.asarray(pvals[0] >= pvals[1], dtype=np.float64)
        return (m, 1.0 - m)
    if op == "neg":
        return (-1.0,)
    if op == "exp":
        return (value,)
    if op == "ln":
        return (1.0 / pvals[0],)
    if op == "sin":
        return (np.cos(pvals[0]),)
    if op == "cos":
        return (-np.sin(pvals[0]),)
    if op == "tanh":
        return (1.0 - value * value,)
    if op == "gelu":
        return (norm_cdf(pvals[0]) + pvals[0] * norm_pdf(pvals[0]),)
    if op == "silu":
        s = expit(pvals[0])
        return (s * (1.0 + pvals[0] * (1.0 - s)),)
    if op == "softplus":
        return (expit(pvals[0]),)
    if op == "sqrt":
        return (0.5 / value,)
    if op == "abs":
        return (np.sign(pvals[0]),)
    if op == "pow2":
        return (2.0 * pvals[0],)
    if op == "normcdf":
        return (norm_pdf(pvals[0]),)
    raise ConfigError(f"no analytic partials for op tag {op!r}")


class Node:
    """One tape entry: operation tag, parent ids, and the forward value."""

    __slots__ = ("op", "parents", "value", "aux")

    def __init__(self, op: str, parents: Tuple[int, ...], value: Array, aux=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.aux = aux

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, parents={self.parents}, shape={np.shape(self.value)})"


class Tape:
    """Append-only computation record supporting one reverse sweep.

    A tape is single-threaded and rebuilt per batch; node ids are the
    positions in construction order, so parents always precede children.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.input_ids: List[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def var(self, value: Array) -> int:
        """Leaf variable; its gradient is reported by backward()."""
        i = self._append(Node("var", (), value))
        self.input_ids.append(i)
        return i

    def const(self, value: Array) -> int:
        """Leaf constant; adjoints are not propagated into it."""
        return self._append(Node("const", (), value))

    def record(self, op: str, parents: Sequence[int], aux=None) -> int:
        """Append one operation node; value is computed from parent values."""
        pvals = [self.nodes[p].value for p in parents]
        if op in _ELEMENTWISE:
            arity, fn = _ELEMENTWISE[op]
            if len(parents) != arity:
                raise ConfigError(f"op {op!r} expects {arity} parents, got {len(parents)}")
            value = fn(*pvals)
        elif op == "matmul":
            value = pvals[0] @ pvals[1]
        elif op == "concat":
            value = np.concatenate(pvals, axis=1)
            aux = tuple(v.shape[1] for v in pvals)
        elif op == "sum":
            value = np.sum(pvals[0])
        elif op == "repeat":
            value = np.repeat(pvals[0], aux)
        elif op == "reshape":
            value = np.reshape(pvals[0], aux)
            aux = (aux, np.shape(pvals[0]))
        elif op == "take":
            value = pvals[0][aux]
        elif op == "slice1d":
            value = pvals[0][aux[0]:aux[1]]
        elif op in _CUSTOM:
            value = _CUSTOM[op][0](aux, pvals)
        else:
            raise ConfigError(f"unknown op tag {op!r}")
        return self._append(Node(op, tuple(parents), value, aux))

    def value(self, i: int) -> Array:
        return self.nodes[i].value

    def local_grads(self, i: int) -> Tuple[Array, ...]:
        """Partials of node i w.r.t. its parents (elementwise ops only)."""
        node = self.nodes[i]
        pvals = [self.nodes[p].value for p in node.parents]
        return _local_grads(node.op, node.value, pvals)

    # -- TV conveniences -------------------------------------------------

    def variable(self, value: Array, tangent: Optional[Array] = None) -> "TV":
        i = self.var(value)
        d = self.const(tangent) if tangent is not None else None
        return TV(self, i, d)

    def constant(self, value: Array, tangent: Optional[Array] = None) -> "TV":
        i = self.const(value)
        d = self.const(tangent) if tangent is not None else None
        return TV(self, i, d)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the parent's shape."""
    if np.shape(g) == shape:
        return g
    if shape == ():
        return np.sum(g)
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, output: int) -> Dict[int, Array]:
    """One reverse accumulation pass from `output`, seeded with 1.

    Returns the gradient for every leaf variable on the tape; leaves the
    output does not depend on get a zero gradient of matching shape.
    For array-valued outputs the seed is all-ones, i.e. the gradient of
    the elementwise sum.
    """
    nodes = tape.nodes
    adj: List[Optional[Array]] = [None] * (output + 1)
    out_val = nodes[output].value
    adj[output] = np.ones_like(out_val) if isinstance(out_val, np.ndarray) else 1.0

    def acc(p: int, g: Array, owned: bool) -> None:
        if nodes[p].op == "const":
            return
        g = _unbroadcast(g, np.shape(nodes[p].value))
        if adj[p] is None:
            adj[p] = g if owned else np.array(g)
        else:
            cur = adj[p]
            if isinstance(cur, np.ndarray) and cur.shape == np.shape(g):
                cur += g
            else:
                adj[p] = cur + g

    for i in range(output, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = nodes[i]
        op = node.op
        if op in _LEAF:
            continue
        ps = node.parents
        if op in _ELEMENTWISE:
            partials = _local_grads(op, node.value, [nodes[p].value for p in ps])
            for p, lg in zip(ps, partials):
                acc(p, lg * g, owned=True)
        elif op == "matmul":
            a, b = nodes[ps[0]].value, nodes[ps[1]].value
            if b.ndim == 1:
                acc(ps[0], g[:, None] * b[None, :], owned=True)
                acc(ps[1], g @ a, owned=True)
            else:
                acc(ps[0], g @ b.T, owned=True)
                acc(ps[1], a.T @ g, owned=True)
        elif op == "concat":
            off = 0
            for p, w in zip(ps, node.aux):
                acc(p, g[:, off:off + w], owned=False)
                off += w
        elif op == "sum":
            shape = np.shape(nodes[ps[0]].value)
            acc(ps[0], np.full(shape, g) if shape else g, owned=True)
        elif op == "repeat":
            acc(ps[0], g.reshape(-1, node.aux).sum(axis=1), owned=True)
        elif op == "reshape":
            acc(ps[0], np.reshape(g, node.aux[1]), owned=False)
        elif op == "take":
            z = np.zeros(np.shape(nodes[ps[0]].value))
            z[node.aux] = g
            acc(ps[0], z, owned=True)
        elif op == "slice1d":
            z = np.zeros(np.shape(nodes[ps[0]].value))
            z[node.aux[0]:node.aux[1]] = g
            acc(ps[0], z, owned=True)
        elif op in _CUSTOM:
            pvals = [nodes[p].value for p in ps]
            for pidx, grad, owned in _CUSTOM[op][1](node, g, pvals):
                acc(ps[pidx], grad, owned)
        else:  # pragma: no cover - record() rejects unknown tags
            raise ConfigError(f"unknown op tag {op!r} in backward")
        adj[i] = None  # free as we go

    grads: Dict[int, Array] = {}
    for i in tape.input_ids:
        if i <= output and adj[i] is not None:
            grads[i] = adj[i]
        else:
            v = nodes[i].value
            grads[i] = np.zeros_like(v) if isinstance(v, np.ndarray) else 0.0
    return grads


class TV:
    """Tape variable: a node id plus an optional forward-tangent node id.

    Arithmetic records primal ops and, when an operand carries a
    tangent, the matching chain-rule ops, so directional derivatives
    stay differentiable by the outer reverse sweep.
    """

    __slots__ = ("tape", "i", "d")

    def __init__(self, tape: Tape, i: int, d: Optional[int] = None):
        self.tape = tape
        self.i = i
        self.d = d

    @property
    def value(self) -> Array:
        return self.tape.nodes[self.i].value

    @property
    def tangent(self) -> Optional[Array]:
        return None if self.d is None else self.tape.nodes[self.d].value

    def dot(self) -> "TV":
        """The directional derivative as a tape variable (zero if absent)."""
        if self.d is None:
            return self.tape.constant(np.zeros_like(self.value)
                                      if isinstance(self.value, np.ndarray) else 0.0)
        return TV(self.tape, self.d, None)

    def _lift(self, other) -> "TV":
        if isinstance(other, TV):
            return other
        return self.tape.constant(np.asarray(other, dtype=np.float64)
                                  if isinstance(other, np.ndarray) else float(other))

    def _r(self, op: str, *parents: int, aux=None) -> int:
        return self.tape.record(op, parents, aux=aux)

    # -- binary ----------------------------------------------------------

    def __add__(self, other) -> "TV":
        o = self._lift(other)
        i = self._r("add", self.i, o.i)
        d = None
        if self.d is not None and o.d is not None:
            d = self._r("add", self.d, o.d)
        elif self.d is not None:
            d = self.d
        elif o.d is not None:
            d = o.d
        return TV(self.tape, i, d)

    __radd__ = __add__

    def __sub__(self, other) -> "TV":
        o = self._lift(other)
        i = self._r("sub", self.i, o.i)
        d = None
        if self.d is not None and o.d is not None:
            d = self._r("sub", self.d, o.d)
        elif self.d is not None:
            d = self.d
        elif o.d is not None:
            d = self._r("neg", o.d)
        return TV(self.tape, i, d)

    def __rsub__(self, other) -> "TV":
        return self._lift(other).__sub__(self)

    def __mul__(self, other) -> "TV":
        o = self._lift(other)
        i = self._r("mul", self.i, o.i)
        d = None
        if self.d is not None:
            d = self._r("mul", self.d, o.i)
        if o.d is not None:
            t = self._r("mul", self.i, o.d)
            d = t if d is None else self._r("add", d, t)
        return TV(self.tape, i, d)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "TV":
        o = self._lift(other)
        i = self._r("div", self.i, o.i)
        d = None
        if self.d is not None and o.d is not None:
            num = self._r("sub", self.d, self._r("mul", i, o.d))
            d = self._r("div", num, o.i)
        elif self.d is not None:
            d = self._r("div", self.d, o.i)
        elif o.d is not None:
            d = self._r("neg", self._r("div", self._r("mul", i, o.d), o.i))
        return TV(self.tape, i, d)

    def __rtruediv__(self, other) -> "TV":
        return self._lift(other).__truediv__(self)

    def __neg__(self) -> "TV":
        i = self._r("neg", self.i)
        d = None if self.d is None else self._r("neg", self.d)
        return TV(self.tape, i, d)

    def __matmul__(self, other) -> "TV":
        o = self._lift(other)
        i = self._r("matmul", self.i, o.i)
        d = None
        if self.d is not None:
            d = self._r("matmul", self.d, o.i)
        if o.d is not None:
            t = self._r("matmul", self.i, o.d)
            d = t if d is None else self._r("add", d, t)
        return TV(self.tape, i, d)

    def maximum(self, other) -> "TV":
        o = self._lift(other)
        i = self._r("max", self.i, o.i)
        d = None
        if self.d is not None or o.d is not None:
            m = self.tape.const(np.asarray(self.value >= o.value, dtype=np.float64))
            parts = []
            if self.d is not None:
                parts.append(self._r("mul", m, self.d))
            if o.d is not None:
                one_m = self.tape.record("sub", (self.tape.const(1.0), m))
                parts.append(self._r("mul", one_m, o.d))
            d = parts[0] if len(parts) == 1 else self._r("add", *parts)
        return TV(self.tape, i, d)

    # -- unary -----------------------------------------------------------

    def _unary(self, op: str, dfn: Optional[Callable[[int, int], int]]) -> "TV":
        i = self._r(op, self.i)
        d = None
        if self.d is not None:
            if dfn is None:
                raise ConfigError(f"op {op!r} has no tangent rule")
            d = dfn(i, self.d)
        return TV(self.tape, i, d)

    def exp(self) -> "TV":
        return self._unary("exp", lambda y, da: self._r("mul", y, da))

    def ln(self) -> "TV":
        return self._unary("ln", lambda y, da: self._r("div", da, self.i))

    def sin(self) -> "TV":
        return self._unary("sin", lambda y, da: self._r("mul", self._r("cos", self.i), da))

    def cos(self) -> "TV":
        return self._unary(
            "cos", lambda y, da: self._r("neg", self._r("mul", self._r("sin", self.i), da)))

    def tanh(self) -> "TV":
        def dfn(y, da):
            one = self.tape.const(1.0)
            return self._r("mul", self._r("sub", one, self._r("pow2", y)), da)
        return self._unary("tanh", dfn)

    def _normpdf_id(self) -> int:
        half = self.tape.const(-0.5)
        c = self.tape.const(_INV_SQRT_2PI)
        return self._r("mul", c, self._r("exp", self._r("mul", half, self._r("pow2", self.i))))

    def _sigmoid_id(self) -> int:
        one = self.tape.const(1.0)
        return self._r("div", one, self._r("add", one, self._r("exp", self._r("neg", self.i))))

    def gelu(self) -> "TV":
        def dfn(y, da):
            phi = self._r("normcdf", self.i)
            slope = self._r("add", phi, self._r("mul", self.i, self._normpdf_id()))
            return self._r("mul", slope, da)
        return self._unary("gelu", dfn)

    def silu(self) -> "TV":
        def dfn(y, da):
            one = self.tape.const(1.0)
            s = self._sigmoid_id()
            inner = self._r("add", one, self._r("mul", self.i, self._r("sub", one, s)))
            return self._r("mul", self._r("mul", s, inner), da)
        return self._unary("silu", dfn)

    def softplus(self) -> "TV":
        return self._unary("softplus", lambda y, da: self._r("mul", self._sigmoid_id(), da))

    def sqrt(self) -> "TV":
        def dfn(y, da):
            half = self.tape.const(0.5)
            return self._r("div", self._r("mul", half, da), y)
        return self._unary("sqrt", dfn)

    def abs(self) -> "TV":
        def dfn(y, da):
            sgn = self.tape.const(np.sign(self.value))
            return self._r("mul", sgn, da)
        return self._unary("abs", dfn)

    def pow2(self) -> "TV":
        def dfn(y, da):
            two = self.tape.const(2.0)
            return self._r("mul", self._r("mul", two, self.i), da)
        return self._unary("pow2", dfn)

    def normcdf(self) -> "TV":
        return self._unary("normcdf", lambda y, da: self._r("mul", self._normpdf_id(), da))

    # -- structural --------------------------------------------------------

    def sum(self) -> "TV":
        i = self._r("sum", self.i)
        d = None if self.d is None else self._r("sum", self.d)
        return TV(self.tape, i, d)

    def repeat(self, k: int) -> "TV":
        i = self._r("repeat", self.i, aux=k)
        d = None if self.d is None else self._r("repeat", self.d, aux=k)
        return TV(self.tape, i, d)

    def reshape(self, shape) -> "TV":
        i = self._r("reshape", self.i, aux=shape)
        d = None if self.d is None else self._r("reshape", self.d, aux=shape)
        return TV(self.tape, i, d)

    def take(self, idx) -> "TV":
        i = self._r("take", self.i, aux=idx)
        d = None if self.d is None else self._r("take", self.d, aux=idx)
        return TV(self.tape, i, d)

    def slice1d(self, start: int, stop: int) -> "TV":
        aux = (start, stop)
        i = self._r("slice1d", self.i, aux=aux)
        d = None if self.d is None else self._r("slice1d", self.d, aux=aux)
        return TV(self.tape, i, d)


def concat(parts: Sequence[TV]) -> TV:
    """Column-wise concatenation of 2-d tape variables."""
    tape = parts[0].tape
    i = tape.record("concat", [p.i for p in parts])
    d = None
    if any(p.d is not None for p in parts):
        dids = []
        for p in parts:
            if p.d is not None:
                dids.append(p.d)
            else:
                dids.append(tape.const(np.zeros_like(p.value)))
        d = tape.record("concat", dids)
    return TV(tape, i, d)


def directional_value_and_grad(
    tape: Tape,
    f: Callable[[List[TV]], TV],
    inputs: Sequence[Array],
    direction: Sequence[Array],
) -> Tuple[TV, TV]:
    """Evaluate f and its directional derivative, both tape-recorded.

    `direction` selects the input channel(s) to differentiate along;
    zero components skip tangent propagation entirely. The returned
    derivative is a node, so an outer backward() differentiates through
    it (second-order flow into any leaf f touches).
    """
    xs = []
    for v, dv in zip(inputs, direction):
        has_dir = np.any(np.asarray(dv) != 0.0)
        xs.append(tape.variable(v, tangent=dv if has_dir else None))
    out = f(xs)
    return out, out.dot()


def fd_directional(f: Callable[..., float], inputs: Sequence[float],
                   direction: Sequence[float], h: float = 1e-5) -> float:
    """Central finite-difference directional derivative (cross-check oracle)."""
    up = [x + h * d for x, d in zip(inputs, direction)]
    dn = [x - h * d for x, d in zip(inputs, direction)]
    return (f(*up) - f(*dn)) / (2.0 * h)
