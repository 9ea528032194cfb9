"""Reverse-mode automatic differentiation on an append-only tape.

Every differentiable quantity in the package is a :class:`Var` recorded on a
:class:`Tape`.  Values are float64 numpy arrays (0-d for scalars), so batched
point transforms share a single node instead of one node per coordinate.

The module-level functions (``sin``, ``cross``, ``sum`` ...) accept either
``Var`` or plain numbers/arrays.  With no ``Var`` argument they simply evaluate
with numpy and return a plain array, which lets the same model code run as a
fast numeric forward pass or as a recorded pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class AutodiffError(ValueError):
    pass


class DomainError(AutodiffError):
    """An elementary op was applied outside its domain."""


class Tape:
    """Append-only list of nodes in topological order.

    A tape is single-writer.  Separate tapes share nothing and can be used
    from different threads.
    """

    __slots__ = ("_parents", "_vjps", "_ops", "_leaf")

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._ops: list[str] = []
        self._leaf: list[bool] = []

    def __len__(self) -> int:
        return len(self._ops)

    def var(self, x) -> "Var":
        """Record a leaf (an input we want gradients for)."""
        value = _as_value(x)
        if not np.all(np.isfinite(value)):
            raise AutodiffError(f"lift: non-finite input {x!r}")
        return self._push("leaf", value, (), None, leaf=True)

    def _push(self, op, value, parents, vjp, leaf=False) -> "Var":
        if not leaf and not np.isfinite(value).all():
            raise DomainError(f"{op}: produced a non-finite value")
        ids = tuple(p.id for p in parents)
        for p in parents:
            if p.tape is not self:
                raise AutodiffError(f"{op}: operands belong to different tapes")
        idx = len(self._ops)
        self._parents.append(ids)
        self._vjps.append(vjp)
        self._ops.append(op)
        self._leaf.append(leaf)
        return Var(self, idx, value)

    def op_name(self, node_id: int) -> str:
        return self._ops[node_id]

    def backward(self, output: "Var") -> dict[int, np.ndarray]:
        """Adjoint of ``output`` with respect to every leaf that feeds it."""
        if output.tape is not self:
            raise AutodiffError("output does not belong to this tape")
        if output.value.size != 1:
            raise AutodiffError(f"backward needs a scalar output, got shape {output.value.shape}")
        n = output.id + 1
        adj: list = [None] * n
        adj[output.id] = np.ones_like(output.value)
        grads: dict[int, np.ndarray] = {}
        for i in range(n - 1, -1, -1):
            g = adj[i]
            if g is None:
                continue
            if self._leaf[i]:
                grads[i] = g
                continue
            vjp = self._vjps[i]
            if vjp is None:
                continue
            parent_grads = vjp(g)
            for pid, pg in zip(self._parents[i], parent_grads):
                if pg is None:
                    continue
                assert pid < i, "tape corrupted: parent after child"
                if adj[pid] is None:
                    adj[pid] = pg
                else:
                    adj[pid] = adj[pid] + pg
        return grads


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "id", "value")
    # make numpy defer to our reflected operators instead of broadcasting
    __array_ufunc__ = None

    def __init__(self, tape: Tape, idx: int, value: np.ndarray) -> None:
        self.tape = tape
        self.id = idx
        self.value = value

    def __repr__(self) -> str:
        return f"Var(id={self.id}, value={self.value!r})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    @property
    def T(self) -> "Var":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __pow__(self, o):
        return power(self, o)

    def __rpow__(self, o):
        return power(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_value(x) -> np.ndarray:
    return np.array(x, dtype=np.float64)


def value_of(x) -> np.ndarray:
    """Numeric value of a Var or a plain number/array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def lift(x, tape: Tape | None = None) -> Var:
    """Create a leaf Var holding ``x`` (on a fresh tape when none is given)."""
    if tape is None:
        tape = Tape()
    return tape.var(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unary(name: str, fwd, dfn, check=None):
    """Build an elementwise unary op. ``dfn(x, y)`` is dy/dx."""

    def op(x):
        if not isinstance(x, Var):
            xv = np.asarray(x, dtype=np.float64)
            if check is not None:
                check(xv)
            return fwd(xv)
        xv = x.value
        if check is not None:
            check(xv)
        yv = fwd(xv)
        return x.tape._push(name, yv, (x,), lambda g: (g * dfn(xv, yv),))

    op.__name__ = name
    return op


def _check_sqrt(x):
    if np.any(x < 0):
        raise DomainError("sqrt: argument 0 has negative entries")


def _check_log(x):
    if np.any(x <= 0):
        raise DomainError("log: argument 0 has non-positive entries")


def _dsqrt(x, y):
    with np.errstate(divide="ignore"):
        return np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)


sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x, check=_check_log)
tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
# gradient at 0 taken as 0, matching the norm convention below
sqrt = _unary("sqrt", np.sqrt, _dsqrt, check=_check_sqrt)
square = _unary("square", np.square, lambda x, y: 2.0 * x)
absolute = _unary("abs", np.abs, lambda x, y: np.sign(x))
neg = _unary("neg", np.negative, lambda x, y: -np.ones_like(x))


def _binary(name: str, fwd, vjp_fn, check=None):
    """Build a broadcasting binary op; ``vjp_fn(g, a, b, y)`` -> (ga, gb)."""

    def op(a, b):
        tape = _tape_of(a, b)
        av, bv = value_of(a), value_of(b)
        if check is not None:
            check(av, bv)
        yv = fwd(av, bv)
        if tape is None:
            return yv
        parents = []
        a_is, b_is = isinstance(a, Var), isinstance(b, Var)
        if a_is:
            parents.append(a)
        if b_is:
            parents.append(b)

        def vjp(g):
            ga, gb = vjp_fn(g, av, bv, yv, a_is, b_is)
            out = []
            if a_is:
                out.append(_unbroadcast(ga, av.shape))
            if b_is:
                out.append(_unbroadcast(gb, bv.shape))
            return out

        return tape._push(name, yv, parents, vjp)

    op.__name__ = name
    return op


def _check_div(a, b):
    if np.any(b == 0):
        raise DomainError("div: argument 1 (denominator) is zero")


def _check_pow(a, b):
    if np.any(a < 0) and np.any(b != np.round(b)):
        raise DomainError("pow: argument 0 negative with non-integer exponent")
    if np.any(a == 0) and np.any(b < 0):
        raise DomainError("pow: argument 0 is zero with negative exponent")


def _vjp_pow(g, a, b, y, a_is, b_is):
    ga = g * b * np.power(a, b - 1.0) if a_is else None
    gb = None
    if b_is:
        if np.any(a <= 0):
            raise DomainError("pow: gradient w.r.t. exponent needs a positive base")
        gb = g * y * np.log(a)
    return ga, gb


def _check_atan2(y, x):
    if np.any((y == 0) & (x == 0)):
        raise DomainError("atan2: both arguments zero")


def _vjp_atan2(g, y, x, out, a_is, b_is):
    r2 = x * x + y * y
    return g * x / r2, -g * y / r2


add = _binary("add", np.add, lambda g, a, b, y, ai, bi: (g, g))
sub = _binary("sub", np.subtract, lambda g, a, b, y, ai, bi: (g, -g))
mul = _binary("mul", np.multiply, lambda g, a, b, y, ai, bi: (g * b, g * a))
div = _binary("div", np.divide, lambda g, a, b, y, ai, bi: (g / b, -g * a / (b * b)), check=_check_div)
power = _binary("pow", np.power, _vjp_pow, check=_check_pow)
atan2 = _binary("atan2", np.arctan2, _vjp_atan2, check=_check_atan2)
# ties go to the first argument
maximum = _binary(
    "max", np.maximum, lambda g, a, b, y, ai, bi: (g * (a >= b), g * (a < b))
)
minimum = _binary(
    "min", np.minimum, lambda g, a, b, y, ai, bi: (g * (a <= b), g * (a > b))
)


def _cross_vjp(g, a, b, y, ai, bi):
    return np.cross(b, g), np.cross(g, a)


cross = _binary("cross", np.cross, _cross_vjp)


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient 1 inside the interval (inclusive), 0 outside."""
    xv = value_of(x)
    lov, hiv = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    yv = np.clip(xv, lov, hiv)
    if not isinstance(x, Var):
        return yv
    inside = (xv >= lov) & (xv <= hiv)
    return x.tape._push("clip", yv, (x,), lambda g: (g * inside,))


def where(cond, a, b):
    tape = _tape_of(a, b)
    c = np.asarray(cond, dtype=bool)
    av, bv = value_of(a), value_of(b)
    yv = np.where(c, av, bv)
    if tape is None:
        return yv
    parents = [v for v in (a, b) if isinstance(v, Var)]

    def vjp(g):
        out = []
        if isinstance(a, Var):
            out.append(_unbroadcast(np.where(c, g, 0.0), av.shape))
        if isinstance(b, Var):
            out.append(_unbroadcast(np.where(c, 0.0, g), bv.shape))
        return out

    return tape._push("where", yv, parents, vjp)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    xv = value_of(x)
    yv = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return yv

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return x.tape._push("sum", np.asarray(yv, dtype=np.float64), (x,), vjp)


def sumsq(x):
    """sum(x * x) as one op."""
    xv = value_of(x)
    yv = np.sum(xv * xv)
    if not isinstance(x, Var):
        return yv
    return x.tape._push("sumsq", yv, (x,), lambda g: (2.0 * g * xv,))


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) / float(n)


def norm(x, axis=None, keepdims=False):
    """Euclidean norm; the subgradient at the origin is taken as 0."""
    xv = value_of(x)
    yv = np.sqrt(np.sum(xv * xv, axis=axis, keepdims=keepdims))
    if not isinstance(x, Var):
        return yv

    def vjp(g):
        y = yv
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            y = np.expand_dims(y, axis)
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g * xv / safe, 0.0),)

    return x.tape._push("norm", np.asarray(yv, dtype=np.float64), (x,), vjp)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    yv = av @ bv
    if tape is None:
        return yv
    parents = [v for v in (a, b) if isinstance(v, Var)]

    def vjp(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = np.asarray(g)
        if av.ndim == 1 and bv.ndim == 1:
            g2 = g2.reshape(1, 1)
        elif av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        elif bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        out = []
        if isinstance(a, Var):
            ga = g2 @ np.swapaxes(b2, -1, -2)
            if av.ndim == 1:
                ga = _unbroadcast(ga, (1,) + av.shape).reshape(av.shape)
            else:
                ga = _unbroadcast(ga, av.shape)
            out.append(ga)
        if isinstance(b, Var):
            gb = np.swapaxes(a2, -1, -2) @ g2
            if bv.ndim == 1:
                gb = _unbroadcast(gb, bv.shape + (1,)).reshape(bv.shape)
            else:
                gb = _unbroadcast(gb, bv.shape)
            out.append(gb)
        return out

    return tape._push("matmul", np.asarray(yv, dtype=np.float64), parents, vjp)


def getitem(x, idx):
    xv = value_of(x)
    yv = np.array(xv[idx], dtype=np.float64)
    if not isinstance(x, Var):
        return yv

    def vjp(g):
        z = np.zeros_like(xv)
        np.add.at(z, idx, g)
        return (z,)

    return x.tape._push("getitem", yv, (x,), vjp)


def reshape(x, shape):
    xv = value_of(x)
    yv = xv.reshape(shape)
    if not isinstance(x, Var):
        return yv
    return x.tape._push("reshape", yv, (x,), lambda g: (np.reshape(g, xv.shape),))


def transpose(x):
    xv = value_of(x)
    if not isinstance(x, Var):
        return xv.T
    return x.tape._push("transpose", xv.T.copy(), (x,), lambda g: (np.transpose(g),))


def stack(items: Sequence, axis: int = 0):
    tape = _tape_of(*items)
    vals = [value_of(v) for v in items]
    yv = np.stack(vals, axis=axis)
    if tape is None:
        return yv
    flags = [isinstance(v, Var) for v in items]
    parents = [v for v in items if isinstance(v, Var)]

    def vjp(g):
        return [np.take(g, i, axis=axis) for i, f in enumerate(flags) if f]

    return tape._push("stack", yv, parents, vjp)


def concatenate(items: Sequence, axis: int = 0):
    tape = _tape_of(*items)
    vals = [np.atleast_1d(value_of(v)) for v in items]
    yv = np.concatenate(vals, axis=axis)
    if tape is None:
        return yv
    flags = [isinstance(v, Var) for v in items]
    parents = [v for v in items if isinstance(v, Var)]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return [p.reshape(value_of(items[i]).shape) for i, (p, f) in enumerate(zip(parts, flags)) if f]

    return tape._push("concatenate", yv, parents, vjp)


def softmax(x, axis=-1):
    # shift by the (constant) max for stability; the shift does not change the result
    shift = np.max(value_of(x), axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / sum(e, axis=axis, keepdims=True)


def dot(a, b, axis=-1):
    return sum(a * b, axis=axis)


_ARITY = {
    "add": 2, "sub": 2, "mul": 2, "div": 2, "pow": 2, "min": 2, "max": 2, "atan2": 2,
    "sin": 1, "cos": 1, "exp": 1, "tanh": 1, "sqrt": 1, "log": 1, "abs": 1, "neg": 1,
}
_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "pow": power, "min": minimum,
    "max": maximum, "atan2": atan2, "sin": sin, "cos": cos, "exp": exp, "tanh": tanh,
    "sqrt": sqrt, "log": log, "abs": absolute, "neg": neg,
}


def primitive(name: str, value, inputs: Sequence, vjps: Sequence[Callable]):
    """Record an op whose value is computed outside the tape.

    ``vjps[i](g)`` returns the cotangent for ``inputs[i]``; non-Var inputs are
    ignored.  Returns a plain array when no input is on a tape.
    """
    tape = _tape_of(*inputs)
    value = _as_value(value)
    if tape is None:
        return value
    pairs = [(x, f) for x, f in zip(inputs, vjps) if isinstance(x, Var)]

    def vjp(g):
        return [f(g) for _, f in pairs]

    return tape._push(name, value, [x for x, _ in pairs], vjp)


def apply(op: str, args: Sequence) -> Var:
    """Apply a named elementary op.  ``norm`` takes one vector or several scalars."""
    if op == "norm":
        if not args:
            raise AutodiffError("norm: needs at least one argument")
        if len(args) == 1:
            return norm(args[0])
        return norm(stack(list(args)))
    if op not in _OPS:
        raise AutodiffError(f"unknown op {op!r}")
    if len(args) != _ARITY[op]:
        raise AutodiffError(f"{op}: expected {_ARITY[op]} arguments, got {len(args)}")
    return _OPS[op](*args)


def backward(output: Var) -> dict[int, np.ndarray]:
    return output.tape.backward(output)


def grad(output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of a scalar output w.r.t. the given leaves (zeros when unused)."""
    g = output.tape.backward(output)
    return [g.get(v.id, np.zeros_like(v.value)) for v in wrt]


def value_and_grad(fn: Callable, *xs):
    """Evaluate ``fn`` on fresh leaves built from ``xs``; return (value, grads)."""
    tape = Tape()
    leaves = [tape.var(x) for x in xs]
    out = fn(*leaves)
    if not isinstance(out, Var):
        # output does not depend on the inputs
        return float(np.asarray(out)), [np.zeros_like(v.value) for v in leaves]
    return float(out.value), grad(out, leaves)


@dataclass
class GradCheckReport:
    max_rel_err: float
    rel_err: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    kinks: list[int] = field(default_factory=list)

    @property
    def nondifferentiable(self) -> bool:
        return bool(self.kinks)


class GradCheckError(AutodiffError):
    pass


def grad_check(f: Callable[[Var], Var], x, eps: float = 1e-6, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    A coordinate whose one-sided differences disagree by more than
    ``kink_tol * max(1, |numeric|)`` is reported as a kink.
    """
    x = np.array(x, dtype=np.float64)
    shape = x.shape
    flat = x.ravel()

    def evaluate(v, label):
        try:
            out = f(lift(v.reshape(shape)))
            return float(value_of(out))
        except Exception as exc:  # noqa: BLE001 - re-raised with probe context
            raise GradCheckError(f"f failed at probe {label}: {exc}") from exc

    f0, (g,) = _checked_value_and_grad(f, x)
    analytic = g.ravel()
    numeric = np.empty_like(flat)
    kinks = []
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = evaluate(xp, f"x[{i}]+eps")
        fm = evaluate(xm, f"x[{i}]-eps")
        numeric[i] = (fp - fm) / (2 * eps)
        fwd = (fp - f0) / eps
        bwd = (f0 - fm) / eps
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(numeric[i])):
            kinks.append(i)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return GradCheckReport(float(rel.max(initial=0.0)), rel, analytic, numeric, kinks)


def _checked_value_and_grad(f, x):
    try:
        return value_and_grad(f, x)
    except Exception as exc:  # noqa: BLE001
        raise GradCheckError(f"f failed at the base point: {exc}") from exc


def is_var(x) -> bool:
    return isinstance(x, Var)


def jacobian(fn: Callable, *xs) -> tuple[np.ndarray, list[np.ndarray]]:
    """Value of a vector function and its Jacobian w.r.t. each argument.

    One forward pass is recorded; each output component is then
    back-propagated separately.  Returns (value, [d out / d x_k]).
    """
    tape = Tape()
    leaves = [tape.var(x) for x in xs]
    out = fn(*leaves)
    val = np.array(value_of(out), dtype=float)
    flat = val.ravel()
    jacs = [np.zeros((flat.size, v.value.size)) for v in leaves]
    if not isinstance(out, Var):
        return val, jacs
    out_flat = reshape(out, (flat.size,))
    for i in range(flat.size):
        g = tape.backward(out_flat[i])
        for k, v in enumerate(leaves):
            if v.id in g:
                jacs[k][i] = g[v.id].ravel()
    return val, jacs
