"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the primitives needed by the three fixed architectures are provided.
Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product. ``backward`` replays the
recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "computation_record",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "tanh",
    "conv1d",
    "batch_norm",
    "max_pool1d",
    "global_avg_pool",
    "dense",
    "flatten",
    "concat",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "mse",
    "sum_all",
    "mean_all",
    "take_column",
]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible input shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def _check_finite(kind: str, arr: np.ndarray, where: str = "forward") -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{kind}: non-finite values in {where} pass")


class Tensor:
    """n-dimensional float64 array taking part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.require(data, dtype=np.float64, requirements="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(kind, data)
    out = Tensor(data)
    out.op = kind
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._vjp = vjp
    return out


def computation_record(loss: Tensor) -> list[Tensor]:
    """Return the non-leaf tensors reachable from ``loss`` in topological order.

    Every tensor appears after all of its inputs, so iterating the list in
    reverse visits each operation exactly once with its output gradient
    fully accumulated.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return [t for t in order if t.parents]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero
    them between optimisation steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    record = computation_record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            _check_finite(node.op, pg, "backward")
            if p.parents:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            else:
                p.grad = pg.copy() if p.grad is None else p.grad + pg


# --------------------------------------------------------------------------
# elementwise


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


# --------------------------------------------------------------------------
# layers


def _pad_amounts(kernel: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        total = kernel - 1
        return total // 2, total - total // 2
    raise ValueError(f"conv1d: unknown padding {padding!r}")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "valid") -> Tensor:
    """Cross-correlate ``x`` [N, C_in, L] with ``w`` [C_out, C_in, K] along time."""
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: shape mismatch input {x.shape} vs kernel {w.shape}")
    n, c_in, length = x.shape
    c_out, _, k = w.shape
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv1d: shape mismatch kernel {w.shape} vs bias {b.shape}")
    left, right = _pad_amounts(k, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    l_out = xp.shape[2] - k + 1
    if l_out < 1:
        raise ShapeError(f"conv1d: shape mismatch input {x.shape} vs kernel {w.shape} (too short)")
    # cols: [N, C_in*K, L_out]
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 1, 3, 2).reshape(n, c_in * k, l_out)
    w2 = w.data.reshape(c_out, c_in * k)
    out = np.matmul(w2, cols)
    if b is not None:
        out = out + b.data[None, :, None]

    def vjp(g):
        gw = gx = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g).reshape(n, c_in, k, l_out)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + l_out] += gcols[:, :, j, :]
            gx = gxp[:, :, left:left + length]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make("conv1d", out, parents, vjp)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of ``x`` [N, C, L] over the batch and time axes.

    In training mode the batch statistics are used and the running buffers are
    updated in place; in inference mode the running buffers are used.
    """
    if x.data.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: shape mismatch input {x.shape} vs scale {gamma.shape}")
    axes = (0, 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]
    m = x.shape[0] * x.shape[2]

    def vjp(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                s1 = gxhat.sum(axis=axes)[None, :, None]
                s2 = (gxhat * xhat).sum(axis=axes)[None, :, None]
                gx = inv[None, :, None] / m * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return _make("batch_norm", out, (x, gamma, beta), vjp)


def max_pool1d(x: Tensor, width: int = 2) -> Tensor:
    """Non-overlapping max pool along time; a trailing remainder is dropped."""
    if x.data.ndim != 3:
        raise ShapeError(f"max_pool1d: shape mismatch input {x.shape} vs rank-3")
    n, c, length = x.shape
    l_out = length // width
    if l_out < 1:
        raise ShapeError(f"max_pool1d: shape mismatch input {x.shape} vs width {width}")
    win = x.data[:, :, : l_out * width].reshape(n, c, l_out, width)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]

    def vjp(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=3)
        gx = np.zeros_like(x.data)
        gx[:, :, : l_out * width] = gw.reshape(n, c, l_out * width)
        return (gx,)

    return _make("max_pool1d", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the time axis: [N, C, L] -> [N, C]."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool: shape mismatch input {x.shape} vs rank-3")
    length = x.shape[2]
    return _make(
        "global_avg_pool",
        x.data.mean(axis=2),
        (x,),
        lambda g: (np.repeat(g[:, :, None] / length, length, axis=2),),
    )


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for ``x`` [N, D_in], ``w`` [D_in, D_out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: shape mismatch input {x.shape} vs weight {w.shape}")

    def vjp(g):
        return (
            g @ w.data.T if x.requires_grad else None,
            x.data.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _make("dense", x.data @ w.data + b.data, (x, w, b), vjp)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("flatten", x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    first = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(first) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, first)) if i != axis
        ):
            raise ShapeError(f"concat: shape mismatch {first} vs {t.shape}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def take_column(x: Tensor, j: int) -> Tensor:
    """Select column ``j`` of a [N, C] tensor, returning shape [N]."""
    if x.data.ndim != 2 or not 0 <= j < x.shape[1]:
        raise ShapeError(f"take_column: shape mismatch input {x.shape} vs column {j}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, j] = g
        return (gx,)

    return _make("take_column", x.data[:, j].copy(), (x,), vjp)


# --------------------------------------------------------------------------
# probabilities and losses


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of ``z / temperature`` along the last axis."""
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be positive, got {temperature}")
    p = _softmax_np(z.data / temperature)

    def vjp(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / temperature,)

    return _make("softmax", p, (z,), vjp)


def log_softmax(z: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"log_softmax: temperature must be positive, got {temperature}")
    s = z.data / temperature
    s = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    out = s - lse
    p = np.exp(out)

    def vjp(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _make("log_softmax", out, (z,), vjp)


def cross_entropy(logits: Tensor, target: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Mean over the batch of ``H(target, softmax(logits / temperature))``.

    ``target`` is a [N, C] array of probability rows (one-hot for hard labels).
    """
    target = np.asarray(target, dtype=np.float64)
    if logits.data.ndim != 2 or target.shape != logits.shape:
        raise ShapeError(f"cross_entropy: shape mismatch logits {logits.shape} vs target {target.shape}")
    n = logits.shape[0]
    s = logits.data / temperature
    s = s - s.max(axis=1, keepdims=True)
    logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    value = -(target * logp).sum() / n
    tsum = target.sum(axis=1, keepdims=True)

    def vjp(g):
        return (g * (p * tsum - target) / (n * temperature),)

    return _make("cross_entropy", np.asarray(value), (logits,), vjp)


def mse(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    """Mean of squared elementwise differences over all elements."""
    b = _as_tensor(b)
    _same_shape("mse", a, b)
    diff = a.data - b.data
    size = diff.size

    def vjp(g):
        ga = 2.0 * g * diff / size
        return ga, -ga

    return _make("mse", np.asarray((diff * diff).mean()), (a, b), vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, size = a.shape, a.data.size
    return _make("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / size),))


def parameters_checksum(tensors: Iterable[Tensor]) -> str:
    """SHA-256 over the raw bytes of ``tensors`` in iteration order."""
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()
