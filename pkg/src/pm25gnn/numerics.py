"""Dense tensors with a define-by-run gradient tape, plus RMSprop.

A :class:`Tensor` wraps a numpy array. Tensors created directly are constants;
tensors registered through :meth:`GradTape.watch` are parameters, and every
operation with at least one taped operand is recorded on that tape. Calling
:func:`backward` on a scalar result walks the tape in reverse once and returns
a gradient for every watched parameter.

    >>> tape = GradTape()
    >>> w = tape.watch(np.array([1.0, 2.0]), "w")
    >>> grads = backward(sum_all(w * w))
    >>> grads["w"]
    array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "TapeError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "concat",
    "sigmoid",
    "tanh",
    "relu",
    "sum_all",
    "mean_all",
    "square",
    "scatter_add",
    "gather",
    "slice_cols",
    "reshape",
    "transpose",
    "mse_loss",
    "backward",
    "grad_check",
    "RmspropState",
    "rmsprop_step",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, untaped loss, mixed tapes)."""


class Tensor:
    """An n-dimensional real array, optionally recorded on a :class:`GradTape`."""

    __slots__ = ("data", "tape", "tape_id")

    def __init__(self, data, tape: GradTape | None = None, tape_id: int | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"tape#{self.tape_id}"
        return f"Tensor(shape={self.shape}, {where})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    parents: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...]


class GradTape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, int] = {}

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register ``value`` as a parameter leaf and return its taped tensor."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if name is None:
            name = f"param{len(self.params)}"
        if name in self.params:
            raise TapeError(f"parameter {name!r} already watched on this tape")
        idx = self._push((), None, data.shape)
        self.params[name] = idx
        return Tensor(data, self, idx)

    def _push(self, parents, fn, shape) -> int:
        self.nodes.append(_Node(tuple(parents), fn, tuple(shape)))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, operands: tuple[Tensor, ...], fn) -> Tensor:
    tape = None
    for t in operands:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    parents = tuple(t.tape_id if t.tape is tape else -1 for t in operands)
    idx = tape._push(parents, fn, out.shape)
    return Tensor(out, tape, idx)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` as one recorded node (x: [R, I], w: [I, O], b: [O])."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: inner dimensions differ for shapes {x.shape} and {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
    xd, wd = x.data, w.data
    return _record(xd @ wd + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no operands")
    ref = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(ref) or t.shape[:-1] != ref[:-1]:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off the concat axis")
    if axis not in (-1, len(ref) - 1):
        raise ShapeError("concat: only the last axis is supported")
    bounds = np.cumsum([0] + [t.shape[-1] for t in ts])

    def fn(g):
        return tuple(g[..., bounds[k] : bounds[k + 1]] for k in range(len(ts)))

    return _record(np.concatenate([t.data for t in ts], axis=-1), ts, fn)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _record(a.data[..., start:stop], (a,), fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D operand, got shape {a.shape}")
    return _record(a.data.T, (a,), lambda g: (g.T,))


# -- reductions and indexing ---------------------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),))


def _check_index(name: str, index: np.ndarray, bound: int):
    if index.ndim != 1:
        raise ShapeError(f"{name}: index must be 1-D, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= bound):
        raise IndexError(f"{name}: index values must lie in [0, {bound}), got range [{index.min()}, {index.max()}]")


def _segment_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """``out[k] = sum(values[index == k])`` summed in stable index order."""
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    if index.size == 0:
        return out
    order = np.argsort(index, kind="stable")
    counts = np.bincount(index, minlength=n)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    nonempty = counts > 0
    out[nonempty] = np.add.reduceat(values[order], starts[nonempty], axis=0)
    return out


def gather(a, index) -> Tensor:
    """Select rows ``a[index]`` along the first axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    _check_index("gather", index, a.shape[0])
    n = a.shape[0]
    return _record(a.data[index], (a,), lambda g: (_segment_sum(g, index, n),))


def scatter_add(src, index, out_dim: int) -> Tensor:
    """Sum rows of ``src`` into ``out_dim`` buckets given by ``index``.

    >>> scatter_add(Tensor([1.0, 2.0, 3.0]), [0, 0, 1], 2).data
    array([3., 3.])
    """
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.intp)
    _check_index("scatter_add", index, out_dim)
    if index.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_add: index length {index.shape[0]} does not match src shape {src.shape}")
    return _record(_segment_sum(src.data, index, out_dim), (src,), lambda g: (g[index],))


def mse_loss(pred, truth) -> Tensor:
    """Mean over all entries of the squared residual.

    For ``[T, N]`` inputs this is the time-average of the node-average squared
    error; extra leading batch axes average uniformly too.
    """
    pred, truth = as_tensor(pred), as_tensor(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mse_loss: pred shape {pred.shape} != truth shape {truth.shape}")
    return mean_all(square(sub(pred, truth)))


# -- reverse pass ----------------------------------------------------------------


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar taped ``loss`` with respect to every watched parameter."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise TapeError("backward: loss is not recorded on a tape")
    if loss.data.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    keep = frozenset(tape.params.values())
    grads: list[np.ndarray | None] = [None] * (loss.tape_id + 1)
    grads[loss.tape_id] = np.ones(loss.shape, dtype=loss.data.dtype)
    for idx in range(loss.tape_id, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent < 0 or pg is None:
                continue
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
        if idx not in keep:
            grads[idx] = None
    out = {}
    for name, idx in tape.params.items():
        g = grads[idx] if idx <= loss.tape_id else None
        out[name] = np.zeros(tape.nodes[idx].shape) if g is None else np.asarray(g).reshape(tape.nodes[idx].shape)
    return out



def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    fd_dtype=np.longdouble,
) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps a dict of tensors to a scalar tensor and must be deterministic.
    Autodiff runs at 64-bit; the central differences are evaluated in
    ``fd_dtype`` (extended precision by default, so the oracle's own roundoff
    stays far below small gradient entries). The relative error per entry is
    ``|ad - fd| / max(1e-12, |ad| + |fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tape = GradTape()
    taped = {k: tape.watch(np.array(v, dtype=np.float64), k) for k, v in params.items()}
    ad = backward(f(taped))

    base = {k: np.array(v, dtype=fd_dtype) for k, v in params.items()}
    h = fd_dtype(eps)
    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        g_ad = ad[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f({k: Tensor(v) for k, v in base.items()}).data
            flat[i] = orig - h
            fm = f({k: Tensor(v) for k, v in base.items()}).data
            flat[i] = orig
            g_fd = float((fp - fm) / (2 * h))
            err = abs(g_ad[i] - g_fd) / max(1e-12, abs(g_ad[i]) + abs(g_fd))
            if np.isnan(err):
                return float("nan")
            worst = max(worst, float(err))
    return worst


# -- optimizer -------------------------------------------------------------------


@dataclass
class RmspropState:
    """Running mean of squared gradients per parameter."""

    acc: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def rmsprop_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: RmspropState,
    lr: float,
    alpha: float = 0.99,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], RmspropState]:
    """One RMSprop update; returns new parameter arrays and the advanced state.

    ``acc <- alpha*acc + (1-alpha)*g**2`` then ``p <- p - lr*g/(sqrt(acc)+eps)``.
    """
    if lr < 0 or not 0 < alpha < 1 or eps <= 0:
        raise ValueError(f"invalid RMSprop hyperparameters lr={lr}, alpha={alpha}, eps={eps}")
    new_params, new_acc = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"rmsprop_step: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        acc = state.acc.get(name)
        if acc is None:
            acc = np.zeros_like(p)
        elif acc.shape != p.shape:
            raise ShapeError(f"rmsprop_step: state shape {acc.shape} != parameter shape {p.shape} for {name!r}")
        acc = alpha * acc + (1.0 - alpha) * g * g
        new_acc[name] = acc
        new_params[name] = p - lr * g / (np.sqrt(acc) + eps)
    return new_params, RmspropState(new_acc, state.step + 1)
