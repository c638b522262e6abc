"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`ComputeRecord` is active append an entry
(op name, inputs, output, vector-Jacobian closure) to it whenever at least one
input requires a gradient.  :meth:`ComputeRecord.backward` then walks the
entries in reverse and accumulates into :attr:`Parameter.grad`.

Outside an active record, ops are plain numpy evaluations, which is what the
finite-difference checker relies on for cheap perturbed forward passes.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, GradCheckError, ParameterError, ShapeError

GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_A = 0.044715

_MASK64 = (1 << 64) - 1


class Tensor:
    """Row-major float64 array, optionally a node in a compute record."""

    __slots__ = ("data", "requires_grad", "node_id", "_record")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._record: ComputeRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


class Parameter(Tensor):
    """Named trainable leaf; ``grad`` always mirrors ``data``'s shape."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# compute record
# ---------------------------------------------------------------------------

@dataclass
class Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_LOCAL = threading.local()
_FAULTS: dict[str, float] = {}


def _active() -> list["ComputeRecord"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


class ComputeRecord:
    """Ordered tape of differentiable operations.

    Use as a context manager; ops run inside the ``with`` block are recorded.
    The record may be replayed backward any number of times.
    """

    def __init__(self):
        self.entries: list[Entry] = []

    def __enter__(self) -> "ComputeRecord":
        _active().append(self)
        return self

    def __exit__(self, *exc):
        _active().remove(self)
        return False

    def __len__(self):
        return len(self.entries)

    def _append(self, op, inputs, output, vjp) -> None:
        output.node_id = len(self.entries)
        output._record = self
        self.entries.append(Entry(op, inputs, output, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(p) into ``p.grad`` for every reachable Parameter."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._record is not self:
            raise ContractError("loss was not produced inside this compute record")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Parameter] = {}
        for entry in reversed(self.entries[: loss.node_id + 1]):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            g_ins = entry.vjp(g_out)
            factor = _FAULTS.get(entry.op)
            for inp, g in zip(entry.inputs, g_ins):
                if g is None or not inp.requires_grad:
                    continue
                if factor is not None:
                    g = g * factor
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if isinstance(inp, Parameter):
                    leaves[key] = inp
        for key, p in leaves.items():
            p.grad += grads[key]


def backward(record: ComputeRecord, loss: Tensor) -> None:
    record.backward(loss)


@contextlib.contextmanager
def inject_backward_fault(op: str, factor: float = 1.01) -> Iterator[None]:
    """Test hook: scale every input gradient produced by ``op``'s backward rule."""
    _FAULTS[op] = factor
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


def apply_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out_data`` and record it when any input needs a gradient.

    ``vjp`` maps the output cotangent to one cotangent (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    stack = _active()
    if needs and stack:
        stack[-1]._append(op, tuple(inputs), out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return apply_op("scale", a.data * c, (a,), lambda g: (g * c,))
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b),
                    lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))."""
    xd = x.data
    inner = GELU_C * (xd + GELU_A * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return apply_op("gelu", out, (x,), vjp)


def dropout(x: Tensor, p: float, rng: "RngState | None", training: bool) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an RngState")
    keep = rng.uniform(x.shape) >= p
    mask = keep / (1.0 - p)
    return apply_op("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return apply_op("matmul", out, (a, b), vjp)


def softmax_lastaxis(x: Tensor) -> Tensor:
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return apply_op("softmax", y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply_op("layer_norm", out, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# shape operations
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return apply_op("reshape", out, (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    nd = x.ndim
    if not (-nd <= axis1 < nd and -nd <= axis2 < nd):
        raise ShapeError(f"swapaxes: axes ({axis1}, {axis2}) out of range for shape {x.shape}")
    out = np.ascontiguousarray(np.swapaxes(x.data, axis1, axis2))
    return apply_op("swapaxes", out, (x,),
                    lambda g: (np.ascontiguousarray(np.swapaxes(g, axis1, axis2)),))


transpose = swapaxes


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except (ValueError, np.exceptions.AxisError) as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply_op("concat", out, tuple(tensors),
                    lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is rejected."""
    keys = key if isinstance(key, tuple) else (key,)
    if any(not isinstance(k, (int, np.integer, slice, type(Ellipsis), type(None))) for k in keys):
        raise ShapeError("only basic int/slice indexing is differentiable")
    try:
        out = np.array(x.data[key], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError(f"index {key!r} out of bounds for shape {x.shape}") from exc
    src = x.shape

    def vjp(g):
        full = np.zeros(src)
        full[key] = g
        return (full,)

    return apply_op("getitem", out, (x,), vjp)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.array(np.broadcast_to(x.data, shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return apply_op("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_axis(x: Tensor, axis) -> None:
    if axis is None:
        return
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {x.shape}")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_axis(x, axis)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return apply_op("sum", np.asarray(out), (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_axis(x, axis)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return apply_op("mean", np.asarray(out), (x,), vjp)


def reduce(x: Tensor, kind: str = "sum", axis=None) -> Tensor:
    if kind == "sum":
        return reduce_sum(x, axis)
    if kind == "mean":
        return reduce_mean(x, axis)
    raise ContractError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


class RngState:
    """Philox4x64-10 counter-based stream keyed by ``(seed, stream)``.

    Only the raw 64-bit Philox words are taken from numpy; every conversion
    (uniform, normal, exponential, bounded integers) is done here so the
    stream is fixed by the algorithm, not by numpy's Generator version.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(int(n)), dtype=np.uint64)

    def uniform(self, shape) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits of each word."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return u.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normals, Box-Muller cosine branch (two words per draw)."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform((2 * n,))
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        return (r * np.cos(2.0 * np.pi * u[1::2])).reshape(shape)

    def truncated_normal(self, shape, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) redrawn until inside ``bound`` standard deviations."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n)
        filled = 0
        while filled < n:
            z = self.normal((n - filled,))
            z = z[np.abs(z) <= bound]
            out[filled:filled + z.size] = z
            filled += z.size
        return (out * std).reshape(shape)

    def exponential(self, shape) -> np.ndarray:
        """Unit-mean exponential draws."""
        return -np.log1p(-self.uniform(shape))

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection on 64-bit words."""
        if n < 1:
            raise ParameterError(f"below() needs n >= 1, got {n}")
        limit = ((1 << 64) // n) * n
        while True:
            r = int(self.raw(1)[0])
            if r < limit:
                return r % n

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check_report(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      eps: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error per parameter.

    ``loss_fn`` must rebuild the scalar loss from the current parameter values
    and be deterministic.  The error of one entry is
    ``|analytic - central| / max(1, |central|)``.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    params = list(params)
    zero_grads(params)
    with ComputeRecord() as rec:
        loss = loss_fn()
    rec.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    report: dict[str, float] = {}
    for p in params:
        if not np.all(np.isfinite(analytic[p.name])):
            raise GradCheckError(f"non-finite analytic gradient for parameter {p.name}")
        flat = p.data.reshape(-1)
        ga = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            if not math.isfinite(num):
                raise GradCheckError(f"non-finite numeric gradient for parameter {p.name}")
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
        report[p.name] = worst
    return report


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
               eps: float = 1e-5) -> float:
    report = grad_check_report(loss_fn, params, eps)
    return max(report.values(), default=0.0)
