"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every primitive computes its value eagerly and, while a Tape is active and
some input requires gradients, records itself on that tape. The tape is a
flat list in execution order, so replaying it in reverse is a
reverse-topological sweep that visits each recorded node exactly once.
Running backward() a second time without clearing leaf grads accumulates
into them.

With no active tape the primitives just compute values; that is the
inference fast path.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "clamp",
    "concat",
    "div",
    "exp",
    "finite_diff_check",
    "log",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "narrow",
    "neg",
    "primitive_gradient_checks",
    "sigmoid",
    "softmax",
    "sub",
    "sum",
    "take_rows",
    "transpose",
]

_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Execution-ordered record of the primitive ops of one forward pass.

    Single-threaded: at most one tape may be active per thread. Independent
    tapes on different threads share no state.
    """

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tape = None


class Tensor:
    """A float64 array plus the parent links backward() follows."""

    __slots__ = ("values", "requires_grad", "grad", "op", "parents", "_tape", "_backward")

    def __init__(self, values, requires_grad: bool = False) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._tape: Tape | None = None
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.values.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tracing(*tensors: Tensor) -> bool:
    """True when a tape is active and any argument requires gradients."""
    if getattr(_STATE, "tape", None) is None:
        return False
    return any(t.requires_grad for t in tensors)


def _record(values: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(values)
    tape = getattr(_STATE, "tape", None)
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out.op = op
                out.parents = parents
                out._tape = tape
                out._backward = backward_fn
                tape.nodes.append(out)
                break
    return out


def record_op(values: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Extension point for fused primitives defined outside this module.

    `backward_fn(upstream)` must return one gradient (or None) per parent,
    and the new op needs a finite-difference test like everything above.
    """
    return _record(values, op, tuple(as_tensor(p) for p in parents), backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an upstream gradient back down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    `loss` must be a scalar recorded on a tape. Leaf grads accumulate, so a
    second sweep without clearing doubles them.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.values.shape}")
    if loss._tape is None:
        raise ValueError("loss was not recorded on a tape; run the forward pass under `with Tape():`")
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(loss._tape.nodes):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg if parent.grad is None else parent.grad + pg
            else:
                prev = upstream.get(id(parent))
                upstream[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# Primitive ops. The op set is closed: pipeline code composes these and only
# these; anything new must come with an entry in _PRIMITIVE_CASES below.
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.values.shape, b.values.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record(a.values + b.values, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.values.shape, b.values.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _record(a.values - b.values, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def bwd(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record(av * bv, "mul", (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av / bv

    def bwd(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _record(out, "div", (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _record(-a.values, "neg", (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul expects (n,k) @ (k,m), got {av.shape} and {bv.shape}")

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _record(av @ bv, "matmul", (a, b), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.values.shape}")

    def bwd(g):
        return (g.T,)

    return _record(a.values.T.copy(), "transpose", (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)

    def bwd(g):
        return (g * out,)

    return _record(out, "exp", (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values

    def bwd(g):
        return (g / av,)

    return _record(np.log(av), "log", (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    v = a.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record(out, "sigmoid", (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    v = a.values
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(y, "softmax", (a,), bwd)


def logsumexp(a, axis: int, keepdims: bool = True) -> Tensor:
    """Max-stabilized log-sum-exp along one axis; safe on -inf entries."""
    a = as_tensor(a)
    v = a.values
    m = v.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(v - m).sum(axis=axis, keepdims=True)
    logs = np.full_like(s, -np.inf)
    np.log(s, out=logs, where=s > 0)  # all-(-inf) slices sum to 0; keep them -inf quietly
    out_keep = m + logs
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(v - out_keep),)

    return _record(out, "logsumexp", (a,), bwd)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.values.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(a.values.sum(axis=axis, keepdims=keepdims), "sum", (a,), bwd)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.values.shape
    count = a.values.size if axis is None else shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _record(a.values.mean(axis=axis, keepdims=keepdims), "mean", (a,), bwd)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Elementwise clip; gradient passes through inside [lo, hi], zero outside."""
    a = as_tensor(a)
    v = a.values
    inside = (v >= lo) & (v <= hi)

    def bwd(g):
        return (g * inside,)

    return _record(np.clip(v, lo, hi), "clamp", (a,), bwd)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(p) for p in parts)
    sizes = [t.values.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.values for t in ts], axis=axis), "concat", ts, bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    a = as_tensor(a)
    v = a.values
    if not (0 <= start and start + length <= v.shape[axis]):
        raise ValueError(f"narrow [{start}:{start + length}) out of range for axis {axis} of shape {v.shape}")
    index = tuple(slice(start, start + length) if ax == axis else slice(None) for ax in range(v.ndim))

    def bwd(g):
        buf = np.zeros_like(v)
        buf[index] = g
        return (buf,)

    return _record(v[index].copy(), "narrow", (a,), bwd)


def take_rows(table, indices) -> Tensor:
    """Gather rows of a matrix by integer index; duplicate rows sum in backward."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    tv = table.values
    if tv.ndim != 2:
        raise ValueError(f"take_rows expects a matrix table, got shape {tv.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise ValueError(f"take_rows index out of range for table with {tv.shape[0]} rows")

    def bwd(g):
        buf = np.zeros_like(tv)
        np.add.at(buf, idx, g)
        return (buf,)

    return _record(tv[idx], "take_rows", (table,), bwd)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of f() against central differences.

    `f` rebuilds the scalar loss from the given leaf tensors and must be
    deterministic (freeze any randomness before calling). Returns the max
    over all parameter coordinates of
    |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
    if loss._tape is not None:  # a loss constant in the params records nothing
        backward(loss)
    analytic = [np.zeros_like(p.values) if p.grad is None else np.array(p.grad, copy=True) for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.values.reshape(-1)
        ga = analytic[pi].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f().values)
            flat[k] = orig - h
            fm = float(f().values)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError(f"finite_diff_check: non-finite loss perturbing parameter {pi}, coordinate {k}")
            central = (fp - fm) / (2.0 * h)
            err = abs(ga[k] - central) / (abs(ga[k]) + abs(central) + 1e-12)
            if err > worst:
                worst = err
    return worst


def _case_unary(op_name: str, sample: Callable[[np.random.Generator], np.ndarray], **kwargs):
    def build(rng: np.random.Generator):
        x = Tensor(sample(rng), requires_grad=True)
        w = rng.normal(size=np.asarray(_apply(op_name, x, **kwargs).values).shape)

        def f():
            return sum(mul(_apply(op_name, x, **kwargs), w))

        return f, [x]

    return op_name, build


def _apply(op_name: str, *args, **kwargs):
    # Resolved through module globals at call time so a monkeypatched
    # primitive is picked up by the checks.
    return globals()[op_name](*args, **kwargs)


def _case_binary(op_name: str, sample_a, sample_b):
    def build(rng: np.random.Generator):
        a = Tensor(sample_a(rng), requires_grad=True)
        b = Tensor(sample_b(rng), requires_grad=True)
        w = rng.normal(size=_apply(op_name, a, b).values.shape)

        def f():
            return sum(mul(_apply(op_name, a, b), w))

        return f, [a, b]

    return op_name, build


def _away_from(x: np.ndarray, points: Sequence[float], margin: float = 1e-3) -> np.ndarray:
    # Nudge samples off finite-difference kinks (clamp bounds, etc).
    for pt in points:
        close = np.abs(x - pt) < margin
        x = np.where(close, pt + margin * np.where(x >= pt, 1.0, -1.0), x)
    return x


def _primitive_cases():
    u = lambda rng, shape=(4, 5): rng.uniform(-2.0, 2.0, shape)
    pos = lambda rng, shape=(4, 5): rng.uniform(0.1, 2.0, shape)
    away0 = lambda rng, shape=(4, 5): _away_from(u(rng, shape), [0.0], 0.3)
    cases = [
        _case_binary("add", u, lambda rng: u(rng, (1, 5))),
        _case_binary("sub", u, lambda rng: u(rng, (4, 1))),
        _case_binary("mul", u, lambda rng: u(rng, (4, 5))),
        _case_binary("div", u, lambda rng: away0(rng)),
        _case_unary("neg", u),
        _case_binary("matmul", lambda rng: u(rng, (3, 4)), lambda rng: u(rng, (4, 2))),
        _case_unary("transpose", u),
        _case_unary("exp", u),
        _case_unary("log", pos),
        _case_unary("sigmoid", u),
        _case_unary("softmax", u, axis=-1),
        _case_unary("logsumexp", u, axis=1, keepdims=True),
        _case_unary("sum", u, axis=0, keepdims=False),
        _case_unary("sum", u, axis=None),
        _case_unary("mean", u, axis=1, keepdims=True),
        _case_unary("clamp", lambda rng: _away_from(u(rng), [-0.75, 0.8]), lo=-0.75, hi=0.8),
    ]

    def build_concat(rng):
        a = Tensor(u(rng, (4, 2)), requires_grad=True)
        b = Tensor(u(rng, (4, 3)), requires_grad=True)
        w = rng.normal(size=(4, 5))

        def f():
            return sum(mul(concat([a, b], axis=1), w))

        return f, [a, b]

    def build_narrow(rng):
        a = Tensor(u(rng, (4, 5)), requires_grad=True)
        w = rng.normal(size=(2, 5))

        def f():
            return sum(mul(narrow(a, 0, 1, 2), w))

        return f, [a]

    def build_take_rows(rng):
        a = Tensor(u(rng, (6, 3)), requires_grad=True)
        idx = np.array([0, 2, 2, 5])
        w = rng.normal(size=(4, 3))

        def f():
            return sum(mul(take_rows(a, idx), w))

        return f, [a]

    cases += [("concat", build_concat), ("narrow", build_narrow), ("take_rows", build_take_rows)]
    return cases


def primitive_gradient_checks(h: float = 1e-5, seed: int = 20240) -> dict[str, float]:
    """Central-difference check of every primitive; returns op name -> max error."""
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, build in _primitive_cases():
        f, params = build(rng)
        err = finite_diff_check(f, params, h=h)
        report[name] = max(report.get(name, 0.0), err)
    return report
