"""
Reverse-mode automatic differentiation over dense numpy arrays.

Every op executed while a Tape is active (and gradients are enabled) is
appended to that tape. backward() walks the tape in reverse and returns the
gradients of a scalar output with respect to the requested leaf parameters.

The op set is closed: matmul, add, mul, affine, tanh, silu, mean, sum,
square, sqrt, concat, slice, hflip, reshape, take_rows, log_softmax and
stop_gradient. Anything else is composed from them.
"""
import contextvars
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

GradMap = Dict[str, np.ndarray]

_STORAGE_DTYPES = {"float64": np.float64, "float32": np.float32}
_dtype = np.float64

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    """Inputs of an op have incompatible shapes"""

    def __init__(self, op: str, *shapes: Tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(ValueError):
    """NaN or Inf produced by an op; the training step must be aborted"""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"gradient explosion: {op} produced a non-finite value")


class TapeError(ValueError):
    """Misuse of the tape (non-scalar output, output recorded elsewhere, ...)"""


def configure_precision(name: str) -> None:
    """Select the storage dtype for new tensors ('float64' or 'float32')"""
    global _dtype
    if name not in _STORAGE_DTYPES:
        raise ValueError(f"Unknown precision: {name}. Use 'float64' or 'float32'")
    _dtype = _STORAGE_DTYPES[name]


def storage_dtype():
    return _dtype


class Tensor:
    """A dense array plus its position on a tape.

    Leaf parameters are created with Tensor.parameter() and carry a unique
    name; that name is the key of their entry in a GradMap.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "_index")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None
        self._index: Optional[int] = None

    @classmethod
    def parameter(cls, data: Any, name: str) -> "Tensor":
        return cls(np.array(data, dtype=_dtype), requires_grad=True, name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeNode:
    index: int
    op: str
    inputs: Tuple[Tensor, ...]
    saved: Dict[str, Any]
    grad_enabled: bool
    output_shape: Tuple[int, ...]


@dataclass
class Tape:
    """Explicit per-forward-pass record of executed ops.

    Use as a context manager; ops executed inside the block are recorded.
    """

    nodes: List[TapeNode] = field(default_factory=list)
    skipped: int = 0
    _token: Optional[contextvars.Token] = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def append(self, op: str, inputs: Tuple[Tensor, ...], saved: Dict[str, Any], grad_enabled: bool,
               output_shape: Tuple[int, ...]) -> TapeNode:
        node = TapeNode(len(self.nodes), op, inputs, saved, grad_enabled, output_shape)
        self.nodes.append(node)
        return node

    @property
    def grad_enabled_count(self) -> int:
        return sum(1 for node in self.nodes if node.grad_enabled)

    @property
    def saved_bytes(self) -> int:
        total = 0
        for node in self.nodes:
            for value in node.saved.values():
                if isinstance(value, np.ndarray):
                    total += value.nbytes
        return total


@contextmanager
def no_grad() -> Iterator[None]:
    """Ops executed inside are not recorded; their outputs are constants"""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


# ---------------------------------------------------------------------------
# op rules: forward(inputs, attrs) -> (value, saved); backward(g, node) -> grads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _OpRule:
    forward: Callable[[Tuple[Tensor, ...], Dict[str, Any]], Tuple[np.ndarray, Dict[str, Any]]]
    backward: Callable[[np.ndarray, TapeNode], Sequence[Optional[np.ndarray]]]


_OPS: Dict[str, _OpRule] = {}


def _rule(name: str, forward, backward) -> None:
    _OPS[name] = _OpRule(forward, backward)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _matmul_forward(inputs, attrs):
    a, b = inputs
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a.data @ b.data, {}


def _matmul_backward(g, node):
    a, b = node.inputs
    if b.ndim == 1:
        return np.outer(g, b.data), a.data.T @ g
    return g @ b.data.T, a.data.T @ g


def _add_forward(inputs, attrs):
    a, b = inputs
    _broadcast_shape("add", a, b)
    return a.data + b.data, {}


def _add_backward(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_forward(inputs, attrs):
    a, b = inputs
    _broadcast_shape("mul", a, b)
    return a.data * b.data, {}


def _mul_backward(g, node):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _affine_forward(inputs, attrs):
    x, w, b = inputs
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    return x.data @ w.data + b.data, {}


def _affine_backward(g, node):
    x, w, _ = node.inputs
    return g @ w.data.T, x.data.T @ g, g.sum(axis=0)


def _tanh_forward(inputs, attrs):
    y = np.tanh(inputs[0].data)
    return y, {"y": y}


def _tanh_backward(g, node):
    y = node.saved["y"]
    return (g * (1.0 - y * y),)


def _silu_forward(inputs, attrs):
    x = inputs[0].data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return x * s, {"s": s}


def _silu_backward(g, node):
    x = node.inputs[0].data
    s = node.saved["s"]
    return (g * (s + x * s * (1.0 - s)),)


def _reduce_count(shape: Tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for a in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _mean_forward(inputs, attrs):
    x = inputs[0]
    return np.mean(x.data, axis=attrs["axis"], keepdims=attrs["keepdims"]), {}


def _mean_backward(g, node):
    x = node.inputs[0]
    axis = node.saved["axis"]
    count = _reduce_count(x.shape, axis)
    return (_expand_reduced(g, x.shape, axis, node.saved["keepdims"]) / count,)


def _sum_forward(inputs, attrs):
    x = inputs[0]
    return np.sum(x.data, axis=attrs["axis"], keepdims=attrs["keepdims"]), {}


def _sum_backward(g, node):
    x = node.inputs[0]
    return (np.array(_expand_reduced(g, x.shape, node.saved["axis"], node.saved["keepdims"])),)


def _square_forward(inputs, attrs):
    x = inputs[0].data
    return x * x, {}


def _square_backward(g, node):
    return (2.0 * node.inputs[0].data * g,)


def _sqrt_forward(inputs, attrs):
    x = inputs[0]
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt")
    y = np.sqrt(x.data)
    return y, {"y": y}


def _sqrt_backward(g, node):
    return (g / (2.0 * node.saved["y"]),)


def _concat_forward(inputs, attrs):
    axis = attrs["axis"]
    try:
        value = np.concatenate([t.data for t in inputs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in inputs]) from None
    return value, {"sizes": [t.shape[axis] for t in inputs]}


def _concat_backward(g, node):
    axis = node.saved["axis"]
    bounds = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _slice_forward(inputs, attrs):
    x = inputs[0]
    try:
        value = x.data[attrs["key"]]
    except IndexError:
        raise ShapeError("slice", x.shape) from None
    return np.array(value), {}


def _slice_backward(g, node):
    x = node.inputs[0]
    grad = np.zeros(x.shape, dtype=g.dtype)
    grad[node.saved["key"]] = g
    return (grad,)


def _hflip_forward(inputs, attrs):
    x = inputs[0]
    if x.ndim < 2:
        raise ShapeError("hflip", x.shape)
    return np.flip(x.data, axis=-1).copy(), {}


def _hflip_backward(g, node):
    return (np.flip(g, axis=-1).copy(),)


def _reshape_forward(inputs, attrs):
    x = inputs[0]
    try:
        return x.data.reshape(attrs["shape"]), {}
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(attrs["shape"])) from None


def _reshape_backward(g, node):
    return (g.reshape(node.inputs[0].shape),)


def _take_rows_forward(inputs, attrs):
    table = inputs[0]
    idx = attrs["index"]
    if table.ndim != 2 or np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ShapeError("take_rows", table.shape, idx.shape)
    return table.data[idx], {}


def _take_rows_backward(g, node):
    grad = np.zeros(node.inputs[0].shape, dtype=g.dtype)
    np.add.at(grad, node.saved["index"], g)
    return (grad,)


def _log_softmax_forward(inputs, attrs):
    x = inputs[0].data
    axis = attrs["axis"]
    shifted = x - np.max(x, axis=axis, keepdims=True)
    y = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return y, {"y": y}


def _log_softmax_backward(g, node):
    y = node.saved["y"]
    axis = node.saved["axis"]
    return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)


def _stop_gradient_forward(inputs, attrs):
    return inputs[0].data.copy(), {}


def _stop_gradient_backward(g, node):
    return (None,)


_rule("matmul", _matmul_forward, _matmul_backward)
_rule("add", _add_forward, _add_backward)
_rule("mul", _mul_forward, _mul_backward)
_rule("affine", _affine_forward, _affine_backward)
_rule("tanh", _tanh_forward, _tanh_backward)
_rule("silu", _silu_forward, _silu_backward)
_rule("mean", _mean_forward, _mean_backward)
_rule("sum", _sum_forward, _sum_backward)
_rule("square", _square_forward, _square_backward)
_rule("sqrt", _sqrt_forward, _sqrt_backward)
_rule("concat", _concat_forward, _concat_backward)
_rule("slice", _slice_forward, _slice_backward)
_rule("hflip", _hflip_forward, _hflip_backward)
_rule("reshape", _reshape_forward, _reshape_backward)
_rule("take_rows", _take_rows_forward, _take_rows_backward)
_rule("log_softmax", _log_softmax_forward, _log_softmax_backward)
_rule("stop_gradient", _stop_gradient_forward, _stop_gradient_backward)


def _lift(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(op: str, inputs: Sequence[Any], **attrs) -> Tensor:
    """
    Execute an op and append it to the active tape

    Args:
        op: Op-kind tag (one of the registered rules)
        inputs: Input tensors; plain numbers/arrays are lifted to constants
        attrs: Op attributes (axis, key, shape, index, ...)

    Returns:
        Output tensor, on the active tape when taping is on
    """
    rule = _OPS.get(op)
    if rule is None:
        raise ValueError(f"Unknown op-kind: {op}")

    tensors = tuple(_lift(x) for x in inputs)
    value, saved = rule.forward(tensors, attrs)
    value = np.asarray(value, dtype=_dtype)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)

    out = Tensor(value)
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return out
    if not _GRAD_ENABLED.get():
        tape.skipped += 1
        return out

    node_grad = op != "stop_gradient"
    saved.update(attrs)
    node = tape.append(op, tensors, saved, node_grad, value.shape)
    out._tape = tape
    out._index = node.index
    out.requires_grad = node_grad and any(t.requires_grad for t in tensors)
    return out


def backward(tape: Tape, output: Tensor, wrt: Iterable[Tensor]) -> GradMap:
    """
    Gradients of a scalar output with respect to leaf parameters

    Args:
        tape: The tape the output was recorded on
        output: Scalar tensor (shape ())
        wrt: Leaf parameters; each appears exactly once in the result

    Returns:
        GradMap from parameter name to gradient array of matching shape
    """
    if output.shape != ():
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output._tape is not tape or output._index is None:
        raise TapeError("output was not recorded on this tape")

    params = list(wrt)
    grads: GradMap = {}
    for p in params:
        if p.name is None:
            raise TapeError("backward target must be a named parameter")
        if p.name in grads:
            raise TapeError(f"parameter {p.name} requested twice")
        grads[p.name] = np.zeros(p.shape, dtype=np.float64)

    pending: Dict[int, np.ndarray] = {output._index: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes[: output._index + 1]):
        g = pending.pop(node.index, None)
        if g is None or not node.grad_enabled:
            continue
        input_grads = _OPS[node.op].backward(g, node)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor._tape is tape and tensor._index is not None:
                if tensor._index in pending:
                    pending[tensor._index] = pending[tensor._index] + grad
                else:
                    pending[tensor._index] = grad
            elif tensor.name in grads:
                grads[tensor.name] += grad
    return grads


def grad_norm(grads: GradMap) -> float:
    """Global L2 norm over every array of a GradMap, in sorted key order"""
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name] * grads[name]))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# public op constructors
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    return record("matmul", (a, b))


def add(a, b) -> Tensor:
    return record("add", (a, b))


def mul(a, b) -> Tensor:
    return record("mul", (a, b))


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def affine(x, w, b) -> Tensor:
    return record("affine", (x, w, b))


def tanh(x) -> Tensor:
    return record("tanh", (x,))


def silu(x) -> Tensor:
    return record("silu", (x,))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return record("mean", (x,), axis=axis, keepdims=keepdims)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    return record("sum", (x,), axis=axis, keepdims=keepdims)


def square(x) -> Tensor:
    return record("square", (x,))


def sqrt(x) -> Tensor:
    return record("sqrt", (x,))


def concat(tensors: Sequence[Any], axis: int = -1) -> Tensor:
    return record("concat", tuple(tensors), axis=axis)


def slice_(x, key) -> Tensor:
    if not isinstance(key, tuple):
        key = (key,)
    return record("slice", (x,), key=key)


def hflip(x) -> Tensor:
    return record("hflip", (x,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    return record("reshape", (x,), shape=tuple(shape))


def take_rows(table, index) -> Tensor:
    return record("take_rows", (table,), index=np.asarray(index, dtype=np.int64))


def log_softmax(x, axis: int = -1) -> Tensor:
    return record("log_softmax", (x,), axis=axis)


def stop_gradient(x) -> Tensor:
    """Forward identity; contributes zero to every upstream gradient"""
    return record("stop_gradient", (x,))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def _relative_error(analytic: float, numeric: float, floor: float = 0.0) -> float:
    # both sides below the floor are under the resolution of the central difference
    if max(abs(analytic), abs(numeric)) < floor:
        return 0.0
    return abs(analytic - numeric) / (abs(numeric) + 1e-8)


def _scalar_value(fn: Callable[[], Tensor]) -> float:
    with no_grad():
        value = fn()
    value = float(np.asarray(value.data))
    if not np.isfinite(value):
        raise NonFiniteError("finite_diff_check")
    return value


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Any, epsilon: float = 1e-5, floor: float = 0.0) -> float:
    """
    Compare the tape gradient of f against central differences

    Args:
        f: Scalar function built from tape ops
        point: Where to evaluate
        epsilon: Central-difference step
        floor: Coordinates whose analytic and numeric values are both below
            this magnitude are not compared

    Returns:
        max over coordinates of |analytic - numeric| / (|numeric| + 1e-8)
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = np.array(point, dtype=np.float64)
    x = Tensor.parameter(base.copy(), name="x")
    with Tape() as tape:
        out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("finite_diff_check")
    analytic = backward(tape, out, [x])["x"]

    worst = 0.0
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.flat[i] += epsilon
        minus.flat[i] -= epsilon
        f_plus = _scalar_value(lambda: f(Tensor(plus)))
        f_minus = _scalar_value(lambda: f(Tensor(minus)))
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        worst = max(worst, _relative_error(float(analytic.flat[i]), numeric, floor))
    return worst


def check_parameters(
    objective: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 0.0,
) -> float:
    """
    finite_diff_check over the coordinates of live parameters

    The parameters are perturbed in place and restored afterwards.

    Args:
        objective: Zero-argument scalar function reading the parameters
        params: Parameters to check
        epsilon: Central-difference step
        coords: Number of coordinates to sample (all when None)
        rng: Generator used to sample coordinates
        floor: Magnitude below which a coordinate is not compared

    Returns:
        Maximum relative error over the checked coordinates
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    with Tape() as tape:
        out = objective()
    analytic = backward(tape, out, params)

    slots = [(p, i) for p in params for i in range(p.data.size)]
    if coords is not None and coords < len(slots):
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(slots), size=coords, replace=False)
        slots = [slots[j] for j in sorted(chosen)]

    worst = 0.0
    for param, i in slots:
        original = param.data.flat[i]
        param.data.flat[i] = original + epsilon
        f_plus = _scalar_value(objective)
        param.data.flat[i] = original - epsilon
        f_minus = _scalar_value(objective)
        param.data.flat[i] = original
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        worst = max(worst, _relative_error(float(analytic[param.name].flat[i]), numeric, floor))
    return worst
