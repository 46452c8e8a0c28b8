"""Small tape-based differentiation engine on top of numpy.

Reverse mode (``grad``/``vjp``) runs numpy rules over the recorded tape.
Forward mode (``jvp``) traces the function once and then pushes tangents
through the recorded nodes using ``Tensor`` operations, so the tangent
itself lands on the active tape and can be differentiated again by the
reverse sweep (forward-over-reverse).

Only one level of nesting is supported: a tangent may be built from
``mish_grad`` nodes, but ``mish_grad`` has no forward-mode rule of its own.

Example::

    with Tape() as tape:
        p = tape.watch(Tensor([1.0, 2.0, 3.0]))
        loss = sum(p * p)
    (g,) = grad(loss, [p])      # -> [2, 4, 6]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "PRIMITIVES",
    "grad",
    "vjp",
    "jvp",
    "jvp_with_output",
    "exact_jacobian_trace",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "mish",
    "mish_grad",
    "square",
    "sum",
    "mean",
    "concat",
    "reshape",
    "mish_np",
    "mish_grad_np",
    "mish_grad2_np",
    "ORACLE_MAX_DIM",
]

ORACLE_MAX_DIM = 32

# softplus(x) == x to double precision beyond this point
_SOFTPLUS_GUARD = 20.0


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in a tensor."""


# ---------------------------------------------------------------------------
# numpy kernels for mish and its derivatives
#
# With e = exp(x) and n = e * (e + 2):  tanh(softplus(x)) = n / (n + 2),
# sigmoid(x) = e / (1 + e).  One exp per call covers all three kernels.
# ---------------------------------------------------------------------------


def _mish_parts(x: np.ndarray):
    # clipping at the guard already gives tsp == 1.0 exactly in float64;
    # sig is off by < 3e-9 there and only ever multiplies a ~0 factor
    e = np.exp(np.minimum(x, _SOFTPLUS_GUARD))
    n = e * (e + 2.0)
    tsp = n / (n + 2.0)
    e /= 1.0 + e
    return tsp, e


def mish_np(x: np.ndarray) -> np.ndarray:
    """x * tanh(softplus(x))."""
    n = np.minimum(x, _SOFTPLUS_GUARD)
    np.exp(n, out=n)
    n *= n + 2.0
    n /= n + 2.0
    n *= x
    return n


def mish_grad_np(x: np.ndarray) -> np.ndarray:
    tsp, sig = _mish_parts(x)
    return tsp + x * sig * (1.0 - tsp * tsp)


def mish_grad2_np(x: np.ndarray) -> np.ndarray:
    tsp, sig = _mish_parts(x)
    sech2 = 1.0 - tsp * tsp
    return sech2 * (2.0 * sig + x * sig * (1.0 - sig) - 2.0 * x * sig * sig * tsp)


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


@dataclass(eq=False)
class _Node:
    op: str
    inputs: tuple["Tensor", ...]
    ctx: dict[str, Any]


class Tensor:
    """Dense float64 array that may be recorded on a ``Tape``."""

    __slots__ = ("data", "_tape", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data: Any, *, _check: bool = True):
        if _check:
            arr = np.array(data, dtype=np.float64)
            _check_finite(arr, "Tensor()")
        else:
            arr = np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self._tape: Tape | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape(self) -> "Tape | None":
        return self._tape

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def __repr__(self) -> str:
        on = " (on tape)" if self._tape is not None else ""
        return f"Tensor(shape={self.shape}{on}, data={self.data!r})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a primitive")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations whose inputs include a watched
    tensor (or a tensor produced on this tape) are recorded.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = Tape._stack.pop()
        assert popped is self

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def watch(self, *tensors: Tensor):
        for t in tensors:
            if t._tape is not None and t._tape is not self:
                raise ValueError("tensor already belongs to another tape")
            if t._tape is None:
                t._tape = self
                self.leaves.append(t)
        return tensors[0] if len(tensors) == 1 else tensors

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Recompute every recorded node; keys are ``id(tensor)``.

        Leaves not in ``leaf_values`` keep their recorded data.
        """
        values: dict[int, np.ndarray] = {}
        for leaf in self.leaves:
            values[id(leaf)] = np.asarray(
                (leaf_values or {}).get(id(leaf), leaf.data), dtype=np.float64
            )
        for out in self.nodes:
            node = out._node
            args = [values.get(id(i), i.data) for i in node.inputs]
            values[id(out)] = PRIMITIVES[node.op].fwd(*args, **node.ctx)
        return values


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, inputs: Sequence[Tensor], **ctx) -> Tensor:
    prim = PRIMITIVES[op]
    out_data = prim.fwd(*(i.data for i in inputs), **ctx)
    _check_finite(out_data, op)
    out = Tensor(out_data, _check=False)
    tape = Tape.active()
    if tape is not None and any(i._tape is tape for i in inputs):
        out._tape = tape
        out._node = _Node(op, tuple(inputs), ctx)
        tape.nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# primitive rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    fwd: Callable[..., np.ndarray]
    # vjp(g, out_data, *input_data, **ctx) -> tuple of arrays (or None)
    vjp: Callable[..., tuple]
    # jvp(tangents, out_tensor, inputs, **ctx) -> Tensor; tangents may hold None
    jvp: Callable[..., Tensor] | None = field(default=None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _expand(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    if t.shape == shape:
        return t
    return add(t, Tensor(np.zeros(shape), _check=False))


def _jvp_add(ts, out, inputs):
    ta, tb = ts
    if ta is None:
        return _expand(tb, out.shape)
    if tb is None:
        return _expand(ta, out.shape)
    return _expand(add(ta, tb), out.shape)


def _jvp_sub(ts, out, inputs):
    ta, tb = ts
    if tb is None:
        return _expand(ta, out.shape)
    if ta is None:
        return _expand(neg(tb), out.shape)
    return _expand(sub(ta, tb), out.shape)


def _jvp_mul(ts, out, inputs):
    (ta, tb), (a, b) = ts, inputs
    terms = []
    if ta is not None:
        terms.append(mul(ta, b))
    if tb is not None:
        terms.append(mul(a, tb))
    res = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    return _expand(res, out.shape)


def _jvp_matmul(ts, out, inputs):
    (ta, tb), (a, b) = ts, inputs
    terms = []
    if ta is not None:
        terms.append(matmul(ta, b))
    if tb is not None:
        terms.append(matmul(a, tb))
    return terms[0] if len(terms) == 1 else add(terms[0], terms[1])


def _vjp_matmul(g, out, a, b):
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    return g @ b.T, a.T @ g


def _vjp_reduce(g, out, a, axis=None, keepdims=False, scale=1.0):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g * scale, a.shape).copy(),)


def _mean_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[ax] for ax in axes]))


def _vjp_concat(g, out, *arrays, axis=0):
    sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _jvp_concat(ts, out, inputs, axis=0):
    if all(t is None for t in ts):
        return None
    parts = [
        t if t is not None else Tensor(np.zeros(x.shape), _check=False)
        for t, x in zip(ts, inputs)
    ]
    return concat(parts, axis=axis)


def _jvp_mish_grad(ts, out, inputs):
    raise NotImplementedError("forward mode through mish_grad is not supported")


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(
        "add",
        lambda a, b: a + b,
        lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        _jvp_add,
    ),
    "sub": Primitive(
        "sub",
        lambda a, b: a - b,
        lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        _jvp_sub,
    ),
    "mul": Primitive(
        "mul",
        lambda a, b: a * b,
        lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        _jvp_mul,
    ),
    "neg": Primitive("neg", lambda a: -a, lambda g, out, a: (-g,), lambda ts, out, inp: neg(ts[0])),
    "matmul": Primitive("matmul", lambda a, b: a @ b, _vjp_matmul, _jvp_matmul),
    "tanh": Primitive(
        "tanh",
        np.tanh,
        lambda g, out, a: (g * (1.0 - out * out),),
        lambda ts, out, inp: mul(ts[0], sub(1.0, square(out))),
    ),
    "mish": Primitive(
        "mish",
        mish_np,
        lambda g, out, a: (g * mish_grad_np(a),),
        lambda ts, out, inp: mul(mish_grad(inp[0]), ts[0]),
    ),
    "mish_grad": Primitive(
        "mish_grad",
        mish_grad_np,
        lambda g, out, a: (g * mish_grad2_np(a),),
        _jvp_mish_grad,
    ),
    "square": Primitive(
        "square",
        np.square,
        lambda g, out, a: (2.0 * a * g,),
        lambda ts, out, inp: mul(mul(inp[0], 2.0), ts[0]),
    ),
    "sum": Primitive(
        "sum",
        lambda a, axis=None, keepdims=False: np.asarray(np.sum(a, axis=axis, keepdims=keepdims)),
        lambda g, out, a, axis=None, keepdims=False: _vjp_reduce(g, out, a, axis, keepdims),
        lambda ts, out, inp, axis=None, keepdims=False: sum(ts[0], axis=axis, keepdims=keepdims),
    ),
    "mean": Primitive(
        "mean",
        lambda a, axis=None, keepdims=False: np.asarray(np.mean(a, axis=axis, keepdims=keepdims)),
        lambda g, out, a, axis=None, keepdims=False: _vjp_reduce(
            g, out, a, axis, keepdims, 1.0 / _mean_count(a.shape, axis)
        ),
        lambda ts, out, inp, axis=None, keepdims=False: mean(ts[0], axis=axis, keepdims=keepdims),
    ),
    "concat": Primitive(
        "concat",
        lambda *arrays, axis=0: np.concatenate(arrays, axis=axis),
        _vjp_concat,
        _jvp_concat,
    ),
    "reshape": Primitive(
        "reshape",
        lambda a, shape: a.reshape(shape),
        lambda g, out, a, shape: (g.reshape(a.shape),),
        lambda ts, out, inp, shape: reshape(ts[0], shape),
    ),
}


# ---------------------------------------------------------------------------
# public op functions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return _apply("add", (_as_tensor(a), _as_tensor(b)))


def sub(a, b) -> Tensor:
    return _apply("sub", (_as_tensor(a), _as_tensor(b)))


def mul(a, b) -> Tensor:
    return _apply("mul", (_as_tensor(a), _as_tensor(b)))


def neg(a) -> Tensor:
    return _apply("neg", (_as_tensor(a),))


def matmul(a, b) -> Tensor:
    return _apply("matmul", (_as_tensor(a), _as_tensor(b)))


def tanh(a) -> Tensor:
    return _apply("tanh", (_as_tensor(a),))


def mish(a) -> Tensor:
    return _apply("mish", (_as_tensor(a),))


def mish_grad(a) -> Tensor:
    return _apply("mish_grad", (_as_tensor(a),))


def square(a) -> Tensor:
    return _apply("square", (_as_tensor(a),))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _apply("sum", (_as_tensor(a),), axis=axis, keepdims=keepdims)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _apply("mean", (_as_tensor(a),), axis=axis, keepdims=keepdims)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    return _apply("concat", tuple(_as_tensor(p) for p in parts), axis=axis)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    return _apply("reshape", (_as_tensor(a),), shape=tuple(shape))


# ---------------------------------------------------------------------------
# differentiation entry points
# ---------------------------------------------------------------------------


def vjp(output: Tensor, cotangent, wrt: Sequence[Tensor], strict: bool = False) -> list[np.ndarray]:
    """Reverse sweep: cotangent^T d(output)/d(wrt) for every tensor in ``wrt``."""
    tape = output._tape
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != output.shape:
        raise ValueError(f"cotangent shape {cot.shape} != output shape {output.shape}")
    if tape is None:
        if strict:
            raise ValueError("output is not on a tape")
        return [np.zeros(p.shape) for p in wrt]

    grads: dict[int, np.ndarray] = {id(output): cot}
    for out in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        node = out._node
        in_grads = PRIMITIVES[node.op].vjp(g, out.data, *(i.data for i in node.inputs), **node.ctx)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or inp._tape is not tape:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = []
    for p in wrt:
        g = grads.get(id(p))
        if g is None:
            if strict:
                raise ValueError("parameter did not participate in the graph")
            g = np.zeros(p.shape)
        result.append(np.asarray(g, dtype=np.float64).reshape(p.shape))
    return result


def grad(loss: Tensor, params: Sequence[Tensor], strict: bool = False) -> list[np.ndarray]:
    """d(loss)/d(param) for each param; ``loss`` must be a scalar."""
    if loss.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    return vjp(loss, np.ones(loss.shape), params, strict=strict)


def jvp_with_output(
    f: Callable[[Tensor], Tensor], x, tangent
) -> tuple[Tensor, Tensor]:
    """Evaluate ``f(x)`` and ``(df/dx) @ tangent`` in one trace.

    Under an active tape both results stay on it, so expressions using the
    tangent can be differentiated with respect to anything else on the tape.
    """
    x = _as_tensor(x)
    t = tangent if isinstance(tangent, Tensor) else Tensor(tangent)
    if t.shape != x.shape:
        raise ValueError(f"tangent shape {t.shape} != input shape {x.shape}")

    outer = Tape.active()
    if outer is None:
        with Tape() as local:
            x_in = local.watch(Tensor(x.data, _check=False))
            y, ty = _push_tangents(local, f, x_in, t)
        return y.detach(), ty.detach()
    if x._tape is outer:
        x_in = x
    else:
        x_in = outer.watch(Tensor(x.data, _check=False))
    return _push_tangents(outer, f, x_in, t)


def _push_tangents(tape: Tape, f, x_in: Tensor, t: Tensor):
    start = len(tape.nodes)
    y = f(x_in)
    stop = len(tape.nodes)
    tangents: dict[int, Tensor] = {id(x_in): t}
    for out in tape.nodes[start:stop]:
        node = out._node
        ts = [tangents.get(id(i)) for i in node.inputs]
        if all(tt is None for tt in ts):
            continue
        res = PRIMITIVES[node.op].jvp(ts, out, node.inputs, **node.ctx)
        if res is not None:
            tangents[id(out)] = res
    ty = tangents.get(id(y))
    if ty is None:
        ty = Tensor(np.zeros(y.shape), _check=False)
    return y, ty


def jvp(f: Callable[[Tensor], Tensor], x, tangent) -> Tensor:
    return jvp_with_output(f, x, tangent)[1]


def exact_jacobian_trace(f: Callable[[Tensor], Tensor], x) -> Tensor:
    """Sum of d f_i / d x_i from one JVP per basis direction.

    ``x`` of shape (d,) gives a scalar; shape (n, d) treats rows as
    independent points and gives n traces.  Test oracle only.
    """
    x = _as_tensor(x)
    d = x.shape[-1]
    if d > ORACLE_MAX_DIM:
        raise ValueError(f"dimension {d} exceeds oracle cap {ORACLE_MAX_DIM}")
    total = None
    for i in range(d):
        e = np.zeros(x.shape)
        e[..., i] = 1.0
        col = jvp(f, x, e)
        mask = Tensor(e, _check=False)
        term = sum(mul(col, mask), axis=-1)
        total = term if total is None else add(total, term)
    return total
