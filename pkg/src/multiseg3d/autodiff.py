"""Dense float64 tensors with taped reverse-mode differentiation.

The tape is the implicit DAG hanging off each Tensor: executing an op whose
inputs require grad appends a node (parents + backward closure) in execution
order, so the reverse walk in :func:`backward` is already topological.
Everything runs at 64-bit precision and every forward op checks its output
for NaN/Inf, which is an error state by contract.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray


def _finite(name: str, arr: Array) -> Array:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: non-finite value in output")
    return arr


def np_sigmoid(x: Array) -> Array:
    """Plain numpy logistic, stable for any magnitude (accepts -inf)."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


class Tensor:
    """A flat float64 array with shape, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        """Leaf with the same values, cut off from the tape (no grad flows)."""
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """Trainable leaf; `data` may be a shape tuple to Xavier-init from rng."""
    if isinstance(data, tuple):
        if rng is None:
            raise ContractError("parameter: rng required for shape init")
        fan_in = data[0] if len(data) > 1 else data[0]
        fan_out = data[-1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-bound, bound, size=data)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def _node(data: Array, parents: Sequence[Tensor], bwd) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: {a.shape} + {b.shape}") from None
    _finite("add", data)

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _node(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: {a.shape} * {b.shape}") from None
    _finite("mul", data)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = _finite("matmul", a.data @ b.data)

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _node(data, (a, b), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")

    def bwd(g):
        return (g.T,)

    return _node(a.data.T.copy(), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from None

    def bwd(g):
        return (g.reshape(a.shape),)

    return _node(data.copy(), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis {axis} unsupported")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(tensors)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _node(data, tensors, bwd)


def gather_rows(a, idx) -> Tensor:
    """Rows a[idx]; duplicate indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(data.copy(), (a,), bwd)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] of {a.shape}")

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _node(a.data[:, start:stop].copy(), (a,), bwd)


def take_along_rows(a, idx) -> Tensor:
    """Per-row column picks: out[i, j] = a[i, idx[i, j]]."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"take_along_rows: {a.shape} with idx {idx.shape}")
    data = np.take_along_axis(a.data, idx, axis=1)

    def bwd(g):
        ga = np.zeros_like(a.data)
        rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
        np.add.at(ga, (rows, idx.ravel()), g.ravel())
        return (ga,)

    return _node(data, (a,), bwd)


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    data = _finite("sum", a.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(data, (a,), bwd)


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ContractError("mean: empty tensor")
    data = _finite("mean", a.data.mean(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full_like(a.data, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape) / n,)

    return _node(data, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # piecewise form avoids overflow in exp for large |x|
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    _finite("sigmoid", out)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bwd)


def texp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = _finite("exp", np.exp(a.data))

    def bwd(g):
        return (g * out,)

    return _node(out, (a,), bwd)


def tlog(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _finite("log", np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _node(out, (a,), bwd)


def softmax_rows(a) -> Tensor:
    """Stabilised row softmax (max subtraction); accepts 1-D or 2-D."""
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    _finite("softmax", out)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), bwd)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = _finite("layer_norm", xhat * gamma.data + beta.data)
    d = x.shape[-1]

    def bwd(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        gamma_axes = tuple(range(x.ndim - 1))
        return (gx, (g * xhat).sum(axis=gamma_axes), g.sum(axis=gamma_axes))

    _ = d
    return _node(out, (a, gamma, beta), bwd)


def l2_normalize_rows(a) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise NumericError("l2_normalize: zero-norm row")
    out = a.data / norm

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _node(out, (a,), bwd)


def bce_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for any magnitude.

    Targets may be soft; they are constants (no gradient), which is how
    detached teacher signals and ground-truth masks enter every loss.
    """
    a = as_tensor(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    x = a.data
    if x.shape != t.shape:
        raise ShapeError(f"bce_logits: {x.shape} vs target {t.shape}")
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    _finite("bce_logits", out)
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * (sig - t),)

    return _node(out, (a,), bwd)


def dice_rows(probs, target) -> Tensor:
    """Row-wise soft Dice coefficient 2*sum(p*t)/(sum(p)+sum(t)).

    `probs` rows are soft masks in (0, 1]; `target` rows are constant masks.
    The denominator must be positive (enforced: empty targets are a
    contract error upstream and sigmoid outputs are strictly positive).
    """
    a = as_tensor(probs)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if a.ndim != 2 or a.data.shape != t.shape:
        raise ShapeError(f"dice_rows: {a.shape} vs target {t.shape}")
    inter = (a.data * t).sum(axis=1)
    denom = a.data.sum(axis=1) + t.sum(axis=1)
    if np.any(denom <= 0.0):
        raise ContractError("dice_rows: empty prediction and target mask")
    out = 2.0 * inter / denom
    _finite("dice_rows", out)

    def bwd(g):
        coef = (g / denom)[:, None]
        return (coef * (2.0 * t - out[:, None]),)

    return _node(out, (a,), bwd)


def ce_logits(logits, target_idx) -> Tensor:
    """Per-row cross-entropy -log softmax(logits)[target]; returns (n,)."""
    a = as_tensor(logits)
    idx = np.asarray(target_idx, dtype=np.intp)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"ce_logits: {a.shape} with targets {idx.shape}")
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out = -logp[np.arange(len(idx)), idx]
    _finite("ce_logits", out)
    probs = np.exp(logp)

    def bwd(g):
        ga = probs * g[:, None]
        ga[np.arange(len(idx)), idx] -= g
        return (ga,)

    return _node(out, (a,), bwd)


def neighbor_mean(a, nbr_idx) -> Tensor:
    """out[i] = mean of a[nbr_idx[i, :]]; nbr_idx is a constant (n, k) map."""
    a = as_tensor(a)
    nbr = np.asarray(nbr_idx, dtype=np.intp)
    if a.ndim != 2 or nbr.ndim != 2 or nbr.shape[0] != a.shape[0]:
        raise ShapeError(f"neighbor_mean: {a.shape} with neighbors {nbr.shape}")
    k = nbr.shape[1]
    data = a.data[nbr].mean(axis=1)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, nbr.ravel(), np.repeat(g / k, k, axis=0))
        return (ga,)

    return _node(data, (a,), bwd)


def segment_mean(a, seg_id, n_segments: int) -> Tensor:
    """Mean of rows per segment; every segment must be non-empty."""
    a = as_tensor(a)
    seg = np.asarray(seg_id, dtype=np.intp)
    if a.ndim != 2 or seg.shape != (a.shape[0],):
        raise ShapeError(f"segment_mean: {a.shape} with segments {seg.shape}")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ContractError("segment_mean: empty segment in partition")
    sums = np.zeros((n_segments, a.shape[1]))
    np.add.at(sums, seg, a.data)
    data = sums / counts[:, None]

    def bwd(g):
        return ((g / counts[:, None])[seg],)

    return _node(data, (a,), bwd)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Grads are assigned (not accumulated across calls), so re-running the
    same tape is bit-identical by construction.
    """
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ContractError("backward: loss must be a scalar Tensor")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any parameter")
    order = _toposort(loss)
    grads: dict[int, Array] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
        if node._bwd is None:
            continue
        parent_grads = node._bwd(node.grad)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grads_of(loss: Tensor, params: Iterable[Tensor]) -> list[Array]:
    """Gradient of loss w.r.t. each param; unreached leaves get zeros."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
