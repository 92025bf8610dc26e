"""Tape-based reverse-mode automatic differentiation, second order included.

A Tape records every primitive applied to Vars that live on it.  backward()
sweeps the tape in reverse.  Run with differentiable=True, the sweep records
the adjoint arithmetic onto the same tape, so a second (plain) backward over
the result differentiates the gradient itself -- that is how the costate
derivatives d_lambda/dx and d_lambda/dY are obtained as gradients of gradients.

Values are binary64: python floats for scalars, C-contiguous float64 arrays
for tensors.  Broadcasting is scalar-with-tensor only; everything else must
shape-match exactly.  matmul/matvec carry transpose flags so that adjoint
formulas stay inside the primitive set.

The tape is deliberately batch-friendly: simulation code stores a whole chunk
of Monte Carlo paths as (rows, cols) matrices in a single Var, and per-path
adjoints come back as matrices of the same shape.
"""

import numpy as np

OPS = (
    "add", "sub", "mul", "div", "matvec", "matmul", "dot", "exp", "log",
    "pow", "sum", "leaky_relu", "tanh", "softplus", "clamp_min",
)

# adjoint plumbing, not part of the public record() surface
_PRIVATE = ("leaf", "outer")


class TapeError(Exception):
    pass


class _Node:
    __slots__ = ("op", "inputs", "attrs", "value")

    def __init__(self, op, inputs, attrs, value):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value


class Tape:
    def __init__(self):
        self.nodes = []
        self.frozen = False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        """Record an input/constant leaf and return its Var."""
        return self._append("leaf", (), None, _clean(value))

    def _append(self, op, inputs, attrs, value):
        if self.frozen:
            raise TapeError("tape is frozen (a non-differentiable backward already ran)")
        self.nodes.append(_Node(op, inputs, attrs, value))
        return Var(self, len(self.nodes) - 1)


class Var:
    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        v = self.value
        return v.shape if isinstance(v, np.ndarray) else ()

    def __repr__(self):
        return f"Var(idx={self.idx}, value={self.value!r})"

    def __add__(self, other):
        return record(self.tape, "add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return record(self.tape, "sub", self, other)

    def __rsub__(self, other):
        return record(self.tape, "sub", other, self)

    def __mul__(self, other):
        return record(self.tape, "mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return record(self.tape, "div", self, other)

    def __rtruediv__(self, other):
        return record(self.tape, "div", other, self)

    def __neg__(self):
        return record(self.tape, "mul", self, -1.0)

    def __pow__(self, exponent):
        return record(self.tape, "pow", self, exponent=float(exponent))


def _clean(value):
    if isinstance(value, Var):
        raise TapeError("value is already a Var")
    if isinstance(value, (int, float)):
        return float(value)
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    if arr.ndim > 2:
        raise TapeError(f"tensors are 1-D or 2-D, got ndim={arr.ndim}")
    return arr


def _as_var(tape, x):
    if isinstance(x, Var):
        if x.tape is not tape:
            raise TapeError("inputs live on different tapes")
        return x
    return tape.leaf(x)


def _shape(v):
    return v.shape if isinstance(v, np.ndarray) else ()


def _check_elementwise(a, b):
    sa, sb = _shape(a), _shape(b)
    if sa != () and sb != () and sa != sb:
        raise TapeError(f"shape mismatch {sa} vs {sb} (only scalar-tensor broadcast)")


def record(tape, op, *inputs, **attrs):
    """Record one primitive.  Non-Var inputs become constant leaves."""
    if op not in OPS:
        raise TapeError(f"unknown op {op!r}")
    vars_ = tuple(_as_var(tape, x) for x in inputs)
    vals = tuple(v.value for v in vars_)
    value = _forward(op, vals, attrs)
    return tape._append(op, tuple(v.idx for v in vars_), attrs or None, value)


def _rec(tape, op, *inputs, **attrs):
    # internal: same as record but admits private node kinds
    vars_ = tuple(_as_var(tape, x) for x in inputs)
    vals = tuple(v.value for v in vars_)
    value = _forward(op, vals, attrs)
    return tape._append(op, tuple(v.idx for v in vars_), attrs or None, value)


def _forward(op, vals, attrs):
    if op in ("add", "sub", "mul", "div"):
        a, b = vals
        _check_elementwise(a, b)
        if op == "add":
            out = a + b
        elif op == "sub":
            out = a - b
        elif op == "mul":
            out = a * b
        else:
            out = a / b
        return out if isinstance(out, np.ndarray) else float(out)
    if op == "matvec":
        a, x = vals
        t = bool(attrs.get("transpose", False))
        if getattr(a, "ndim", 0) != 2 or getattr(x, "ndim", 0) != 1:
            raise TapeError("matvec wants (matrix, vector)")
        return (a.T @ x) if t else (a @ x)
    if op == "matmul":
        a, b = vals
        if getattr(a, "ndim", 0) != 2 or getattr(b, "ndim", 0) != 2:
            raise TapeError("matmul wants two matrices")
        ta, tb = bool(attrs.get("ta", False)), bool(attrs.get("tb", False))
        return (a.T if ta else a) @ (b.T if tb else b)
    if op == "dot":
        u, v = vals
        if getattr(u, "ndim", 0) != 1 or getattr(v, "ndim", 0) != 1:
            raise TapeError("dot wants two vectors")
        return float(u @ v)
    if op == "exp":
        (x,) = vals
        out = np.exp(x)
        return out if isinstance(out, np.ndarray) else float(out)
    if op == "log":
        (x,) = vals
        out = np.log(x)
        return out if isinstance(out, np.ndarray) else float(out)
    if op == "pow":
        (x,) = vals
        p = float(attrs["exponent"])
        out = np.power(x, p)
        return out if isinstance(out, np.ndarray) else float(out)
    if op == "sum":
        (x,) = vals
        return float(np.sum(x))
    if op == "leaky_relu":
        (x,) = vals
        s = float(attrs.get("slope", 0.01))
        out = np.where(np.asarray(x) > 0.0, x, s * np.asarray(x))
        return out if isinstance(x, np.ndarray) else float(out)
    if op == "tanh":
        (x,) = vals
        out = np.tanh(x)
        return out if isinstance(out, np.ndarray) else float(out)
    if op == "softplus":
        (x,) = vals
        out = np.logaddexp(0.0, x)
        return out if isinstance(out, np.ndarray) else float(out)
    if op == "clamp_min":
        (x,) = vals
        f = float(attrs["floor"])
        out = np.maximum(x, f)
        return out if isinstance(out, np.ndarray) else float(out)
    if op == "leaf":
        raise TapeError("leaf has no forward")
    if op == "outer":
        u, v = vals
        return np.outer(u, v)
    raise TapeError(f"unknown op {op!r}")


class GradientSet:
    """Adjoints keyed by Var; unreachable requested leaves read as exact zero."""

    def __init__(self, tape, adjoints):
        self.tape = tape
        self._adj = adjoints  # idx -> float | ndarray | Var

    def get(self, var):
        g = self._adj.get(var.idx)
        if g is None:
            v = var.value
            return np.zeros_like(v) if isinstance(v, np.ndarray) else 0.0
        return g

    __getitem__ = get

    def items(self):
        return self._adj.items()


# ---------------------------------------------------------------------------
# backward

class _RawExec:
    """Adjoint arithmetic on raw numpy values."""

    def __init__(self, tape):
        self.tape = tape

    def val(self, idx):
        return self.tape.nodes[idx].value

    def const(self, v):
        return v

    def add(self, a, b):
        return a + b

    def mul(self, a, b):
        return a * b

    def div(self, a, b):
        return a / b

    def neg(self, a):
        return -a

    def powm1(self, x, p):
        return np.power(x, p - 1.0)

    def exp(self, x):
        return np.exp(x)

    def sigmoid(self, x):
        # stable logistic
        out = np.empty_like(np.asarray(x, dtype=np.float64))
        xa = np.asarray(x, dtype=np.float64)
        pos = xa >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xa[pos]))
        ex = np.exp(xa[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out if isinstance(x, np.ndarray) else float(out)

    def matmul(self, a, b, ta=False, tb=False):
        return (a.T if ta else a) @ (b.T if tb else b)

    def matvec(self, a, x, transpose=False):
        return (a.T @ x) if transpose else (a @ x)

    def outer(self, u, v):
        return np.outer(u, v)

    def sum_to_scalar(self, g):
        return float(np.sum(g))

    def ones_like(self, v):
        return np.ones_like(v) if isinstance(v, np.ndarray) else 1.0


class _DiffExec:
    """Adjoint arithmetic recorded as tape ops (for gradient-of-gradient)."""

    def __init__(self, tape):
        self.tape = tape

    def val(self, idx):
        return Var(self.tape, idx)

    def _lift(self, x):
        return x if isinstance(x, Var) else self.tape.leaf(x)

    def const(self, v):
        return self.tape.leaf(v)

    def add(self, a, b):
        if not isinstance(a, Var) and not isinstance(b, Var):
            return a + b
        return record(self.tape, "add", self._lift(a), self._lift(b))

    def mul(self, a, b):
        if not isinstance(a, Var) and not isinstance(b, Var):
            return a * b
        return record(self.tape, "mul", self._lift(a), self._lift(b))

    def div(self, a, b):
        if not isinstance(a, Var) and not isinstance(b, Var):
            return a / b
        return record(self.tape, "div", self._lift(a), self._lift(b))

    def neg(self, a):
        if not isinstance(a, Var):
            return -a
        return record(self.tape, "mul", a, -1.0)

    def powm1(self, x, p):
        return record(self.tape, "pow", self._lift(x), exponent=p - 1.0)

    def exp(self, x):
        return record(self.tape, "exp", self._lift(x))

    def sigmoid(self, x):
        x = self._lift(x)
        e = record(self.tape, "exp", record(self.tape, "mul", x, -1.0))
        return record(self.tape, "div", 1.0, record(self.tape, "add", e, 1.0))

    def matmul(self, a, b, ta=False, tb=False):
        return record(self.tape, "matmul", self._lift(a), self._lift(b), ta=ta, tb=tb)

    def matvec(self, a, x, transpose=False):
        return record(self.tape, "matvec", self._lift(a), self._lift(x), transpose=transpose)

    def outer(self, u, v):
        return _rec(self.tape, "outer", self._lift(u), self._lift(v))

    def sum_to_scalar(self, g):
        if not isinstance(g, Var):
            return float(np.sum(g))
        return record(self.tape, "sum", g)

    def ones_like(self, v):
        return np.ones_like(v) if isinstance(v, np.ndarray) else 1.0


def _vjp(idx, node, vals_of, g, E):
    """Yield (input_position, contribution) pairs for one node."""
    op = node.op
    attrs = node.attrs or {}
    if op == "leaf":
        return
    if op in ("add", "sub"):
        a, b = vals_of(0), vals_of(1)
        ga = g
        gb = g if op == "add" else E.neg(g)
        yield 0, _fit(ga, a, E)
        yield 1, _fit(gb, b, E)
        return
    if op == "mul":
        a, b = vals_of(0), vals_of(1)
        yield 0, _fit(E.mul(g, b), a, E)
        yield 1, _fit(E.mul(g, a), b, E)
        return
    if op == "div":
        a, b = vals_of(0), vals_of(1)
        yield 0, _fit(E.div(g, b), a, E)
        out = E.div(E.mul(g, a), E.mul(b, b))
        yield 1, _fit(E.neg(out), b, E)
        return
    if op == "matvec":
        a, x = vals_of(0), vals_of(1)
        if attrs.get("transpose", False):
            # y = A^T x
            yield 0, E.outer(x, g)
            yield 1, E.matvec(a, g)
        else:
            yield 0, E.outer(g, x)
            yield 1, E.matvec(a, g, transpose=True)
        return
    if op == "matmul":
        a, b = vals_of(0), vals_of(1)
        ta, tb = attrs.get("ta", False), attrs.get("tb", False)
        if not ta:
            yield 0, E.matmul(g, b, ta=False, tb=not tb)
        else:
            yield 0, E.matmul(b, g, ta=tb, tb=True)
        if not tb:
            yield 1, E.matmul(a, g, ta=not ta, tb=False)
        else:
            yield 1, E.matmul(g, a, ta=True, tb=ta)
        return
    if op == "dot":
        u, v = vals_of(0), vals_of(1)
        yield 0, E.mul(g, v)
        yield 1, E.mul(g, u)
        return
    if op == "exp":
        yield 0, E.mul(g, _node_out(idx, node, E))
        return
    if op == "log":
        yield 0, E.div(g, vals_of(0))
        return
    if op == "pow":
        x = vals_of(0)
        p = float(attrs["exponent"])
        yield 0, E.mul(E.mul(g, p), E.powm1(x, p))
        return
    if op == "sum":
        x = vals_of(0)
        ones = _raw_ones(x, E)
        yield 0, E.mul(g, ones)
        return
    if op == "leaky_relu":
        s = float(attrs.get("slope", 0.01))
        raw = _raw_value(node, 0, E)
        mask = np.where(np.asarray(raw) > 0.0, 1.0, s)
        mask = mask if isinstance(raw, np.ndarray) else float(mask)
        yield 0, E.mul(g, E.const(mask) if isinstance(E, _DiffExec) else mask)
        return
    if op == "tanh":
        y = _node_out(idx, node, E)
        yield 0, E.mul(g, E.add(1.0, E.neg(E.mul(y, y))))
        return
    if op == "softplus":
        x = vals_of(0)
        yield 0, E.mul(g, E.sigmoid(x))
        return
    if op == "clamp_min":
        f = float(attrs["floor"])
        raw = _raw_value(node, 0, E)
        mask = np.where(np.asarray(raw) > f, 1.0, 0.0)
        mask = mask if isinstance(raw, np.ndarray) else float(mask)
        yield 0, E.mul(g, E.const(mask) if isinstance(E, _DiffExec) else mask)
        return
    if op == "outer":
        u, v = vals_of(0), vals_of(1)
        yield 0, E.matvec(g, v)
        yield 1, E.matvec(g, u, transpose=True)
        return
    raise TapeError(f"no vjp for {op!r}")


def _node_out(idx, node, E):
    # the node's own output: raw value, or its Var in differentiable mode
    if isinstance(E, _DiffExec):
        return Var(E.tape, idx)
    return node.value


def _raw_value(node, pos, E):
    return E.tape.nodes[node.inputs[pos]].value


def _raw_ones(x, E):
    raw = x.value if isinstance(x, Var) else x
    ones = np.ones_like(raw) if isinstance(raw, np.ndarray) else 1.0
    return E.const(ones) if isinstance(E, _DiffExec) else ones


def _fit(g, ref, E):
    """Reduce g to ref's shape (scalar inputs collect a summed adjoint)."""
    ref_raw = ref.value if isinstance(ref, Var) else ref
    g_raw = g.value if isinstance(g, Var) else g
    if not isinstance(ref_raw, np.ndarray) and isinstance(g_raw, np.ndarray):
        return E.sum_to_scalar(g)
    return g


def backward(output, wrt, differentiable=False):
    """Reverse sweep from a scalar output; adjoints for the Vars in wrt.

    wrt entries may be leaves or intermediates; an intermediate's adjoint is
    the total derivative of output with respect to that node's value, which
    also keeps flowing to nodes upstream of it.
    """
    tape = output.tape
    if isinstance(output.value, np.ndarray):
        raise TapeError("backward needs a scalar output")
    wrt = list(wrt)
    for w in wrt:
        if w.tape is not tape:
            raise TapeError("wrt Var from a different tape")
    if differentiable and tape.frozen:
        raise TapeError("differentiable backward on a frozen tape")

    n_forward = len(tape.nodes)
    nodes = tape.nodes

    # ancestors of the output
    anc = np.zeros(n_forward, dtype=bool)
    stack = [output.idx]
    anc[output.idx] = True
    while stack:
        i = stack.pop()
        for j in nodes[i].inputs:
            if not anc[j]:
                anc[j] = True
                stack.append(j)

    # descendants of the wrt set
    desc = np.zeros(n_forward, dtype=bool)
    lo = n_forward
    for w in wrt:
        desc[w.idx] = True
        lo = min(lo, w.idx)
    for i in range(lo, n_forward):
        if desc[i]:
            continue
        for j in nodes[i].inputs:
            if desc[j]:
                desc[i] = True
                break

    needed = anc & desc
    needed[output.idx] = True

    E = _DiffExec(tape) if differentiable else _RawExec(tape)
    adj = {output.idx: E.const(1.0) if differentiable else 1.0}
    collected = {}
    want = {w.idx for w in wrt}

    for i in range(output.idx, -1, -1):
        g = adj.pop(i, None)
        if g is None or not needed[i]:
            continue
        if i in want:
            collected[i] = g
        node = nodes[i]
        for pos, contrib in _vjp(i, node, lambda p: E.val(node.inputs[p]), g, E):
            j = node.inputs[pos]
            if not needed[j]:
                continue
            prev = adj.get(j)
            adj[j] = contrib if prev is None else E.add(prev, contrib)

    if not differentiable:
        tape.frozen = True
    return GradientSet(tape, collected)


def grad_wrt_intermediate(output, node):
    """d output / d node for one recorded Var (freezes the tape)."""
    if node.tape is not output.tape:
        raise TapeError("node not on the output's tape")
    return backward(output, [node], differentiable=False).get(node)
