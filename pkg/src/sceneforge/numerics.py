"""Dense tensors with reverse-mode differentiation.

Every differentiable quantity in the model is a :class:`Tensor`. Operations
record a closure that maps the output gradient to input gradients; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates into the ``grad`` slot of every leaf that
requires a gradient.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ContractError",
    "DimensionError",
    "NumericError",
    "RegistryError",
    "ConfigError",
    "Tensor",
    "ParameterStore",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "gelu",
    "softmax",
    "layer_norm",
    "dropout",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "take",
    "sum",
    "mean",
    "sqrt",
    "log1p_sum_exp",
    "broadcast_to",
    "primitive_forward",
    "finite_diff_check",
    "LN_EPS",
    "INIT_STD",
]

LN_EPS = 1e-5
INIT_STD = 0.02
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """A NaN or infinity appeared in a tensor."""


class ContractError(RuntimeError):
    """A caller broke an API precondition."""


class RegistryError(KeyError):
    """A parameter name was registered twice."""


class ConfigError(ValueError):
    """Model or run configuration is inconsistent."""


_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A real-valued array with an optional gradient accumulator.

    ``grad`` exists iff ``requires_grad``; it always has the shape of ``data``.
    Tensors are never mutated by operations, except for gradient accumulation
    on leaves and in-place optimizer updates on parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got dims {self.dims}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _raise_nonscalar():
    raise ContractError("item() on a non-scalar tensor")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.name = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.dims} with {b.dims}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NumericError("sqrt of a negative value")
    y = np.sqrt(a.data)

    def back(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0),)

    return _result(y, (a,), back, "sqrt")


def gelu(x) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    y = x.data * cdf

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(y, (x,), back, "gelu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise DimensionError("matmul needs rank >= 1 operands")
    k_b = b.shape[-2] if b.data.ndim >= 2 else b.shape[0]
    if a.shape[-1] != k_b:
        raise DimensionError(f"matmul: inner dims differ, {a.dims} @ {b.dims}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        # vector cases are rare; route through 2-D views
        a2 = a if a.data.ndim >= 2 else reshape(a, (1, a.shape[0]))
        b2 = b if b.data.ndim >= 2 else reshape(b, (b.shape[0], 1))
        out = matmul(a2, b2)
        shape = out.shape
        if a.data.ndim < 2:
            shape = shape[:-2] + shape[-1:]
        if b.data.ndim < 2:
            shape = shape[:-1]
        return reshape(out, shape)
    y = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(y, (a, b), back, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over any leading dims; weight is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2:
        raise DimensionError(f"linear weight must be rank 2, got {weight.dims}")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias dims {bias.dims} != [{weight.shape[0]}]")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data.T
    if bias is not None:
        y = y + bias.data
    y = y.reshape(lead + (weight.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(y, parents, back, "linear")


# ---------------------------------------------------------------------------
# normalisation and stochastic ops


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), back, "softmax")


def layer_norm(x, eps: float = LN_EPS, weight=None, bias=None) -> Tensor:
    """Normalise the last axis to zero mean and unit variance.

    The affine transform is applied only when both ``weight`` and ``bias`` are given.
    """
    x = as_tensor(x)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _result(xhat, (x,), back, "layer_norm")
    if weight is not None and bias is not None:
        if as_tensor(weight).shape != (n,) or as_tensor(bias).shape != (n,):
            raise DimensionError("layer_norm affine params must match the last dim")
        out = add(mul(out, weight), bias)
    return out


def dropout(x, keep_prob: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false."""
    x = as_tensor(x)
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not train or keep_prob == 1.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs a generator")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty list")
    ndim = ts[0].data.ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.data.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: incompatible dims {ts[0].dims} and {t.dims} on axis {axis}")
    y = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _result(y, ts, back, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack of an empty list")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise DimensionError(f"stack: dims {ts[0].dims} vs {t.dims}")
    y = np.stack([t.data for t in ts], axis=axis)
    return _result(
        y,
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))),
        "stack",
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {x.dims} -> {shape}") from exc
    return _result(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"broadcast {x.dims} -> {shape}") from exc
    return _result(y, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather ``indices`` along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.data.ndim
    y = np.take(x.data, idx, axis=ax)

    def back(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (out,)

    return _result(y, (x,), back, "take")


def _getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(y), (x,), back, "getitem")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(y, (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def log1p_sum_exp(x, mask) -> Tensor:
    """``log(1 + sum(exp(x) over masked entries))`` along the last axis.

    ``mask`` is a 0/1 array broadcastable to ``x``; unmasked entries get zero
    gradient. Stabilised by shifting with ``max(0, max masked x)``.
    """
    x = as_tensor(x)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    masked = np.where(m, x.data, -np.inf)
    shift = np.maximum(masked.max(axis=-1, keepdims=True), 0.0)
    ex = np.where(m, np.exp(np.where(m, x.data, 0.0) - shift), 0.0)
    total = np.exp(-shift) + ex.sum(axis=-1, keepdims=True)
    y = (shift + np.log(total))[..., 0]

    def back(g):
        return (g[..., None] * ex / total,)

    return _result(y, (x,), back, "log1p_sum_exp")


# ---------------------------------------------------------------------------
# dispatcher with the kinds named in the public contract

_PRIMITIVES = ("gelu", "softmax_rows", "layer_norm_lastdim", "dropout", "concat_lastdim", "add", "scale")


def primitive_forward(
    kind: str,
    inputs: Sequence,
    mode: str = "eval",
    keep_prob: float = 0.5,
    rng: np.random.Generator | None = None,
    factor: float = 1.0,
) -> Tensor:
    """Run one named primitive. ``mode`` is ``"train"`` or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be train or eval, got {mode!r}")
    if kind not in _PRIMITIVES:
        raise ContractError(f"unknown primitive {kind!r}")
    ts = [as_tensor(t) for t in inputs]
    for t in ts:
        _check_finite(t.data, f"{kind} input")
    if kind == "concat_lastdim":
        return concat(ts, axis=-1)
    if kind == "add":
        out = ts[0]
        for t in ts[1:]:
            out = add(out, t)
        return out
    if len(ts) != 1:
        raise DimensionError(f"{kind} takes exactly one input, got {len(ts)}")
    (x,) = ts
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax_rows":
        return softmax(x, axis=-1)
    if kind == "layer_norm_lastdim":
        return layer_norm(x)
    if kind == "dropout":
        return dropout(x, keep_prob, rng, mode == "train")
    return scale(x, factor)


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named trainable tensors plus the seeded generator used for init and dropout.

    Iteration is in sorted-name order regardless of registration order.
    """

    def __init__(self, seed: int = 0, dtype=np.float64, init_std: float = INIT_STD):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.init_std = float(init_std)
        self.rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in sorted(self._params)]

    def register(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise RegistryError(f"parameter {name!r} already registered")
        t = Tensor(np.array(values, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def gaussian_init(self, name: str, dims: Sequence[int], bias: bool = False) -> Tensor:
        """Register ``name`` with N(0, init_std^2) entries, or zeros when ``bias``."""
        dims = tuple(int(d) for d in dims)
        if not dims or any(d <= 0 for d in dims):
            raise DimensionError(f"bad parameter dims {dims}")
        if name in self._params:
            raise RegistryError(f"parameter {name!r} already registered")
        if bias:
            values = np.zeros(dims, dtype=self.dtype)
        else:
            values = self.rng.normal(0.0, self.init_std, size=dims).astype(self.dtype)
        return self.register(name, values)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def num_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))


def gaussian_init(store: ParameterStore, name: str, dims: Sequence[int], bias: bool = False) -> Tensor:
    return store.gaussian_init(name, dims, bias=bias)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(
    loss_fn: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    h: float = 1e-5,
    samples_per_param: int = 6,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> float:
    """Compare analytic gradients with central differences.

    Returns the maximum over sampled entries of
    ``|a - n| / max(1e-8, |a| + |n|)``. Raises :class:`ContractError` when
    two evaluations of ``loss_fn`` at the same point disagree.
    """
    store.zero_grad()
    loss = loss_fn(store)
    if loss.data.size != 1:
        raise ContractError("loss_fn must return a scalar")
    with no_grad():
        again = loss_fn(store)
    if again.data.reshape(-1)[0] != loss.data.reshape(-1)[0]:
        raise ContractError("loss_fn is not deterministic; two evaluations differ")
    if loss.requires_grad:
        loss.backward()
    pick = np.random.default_rng(seed)
    worst = 0.0
    for name in names if names is not None else store.names():
        param = store[name]
        flat = param.data.reshape(-1)
        analytic = param.grad.reshape(-1)
        k = min(samples_per_param, flat.size)
        for i in pick.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = float(loss_fn(store).data.reshape(-1)[0])
                flat[i] = orig - h
                down = float(loss_fn(store).data.reshape(-1)[0])
                flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
