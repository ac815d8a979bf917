"""Dense float64 tensors with tape-recorded reverse-mode gradients.

Every primitive accepts an optional leading batch axis so a minibatch of
episodes runs through one set of matrix products. Gradients are only
recorded while a :class:`Tape` is active::

    with Tape() as tape:
        y = linear(x, W, b)
        loss = sum_all(y)
    grads = backward(tape, loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "tensor",
    "linear",
    "conv2d",
    "activation",
    "relu",
    "hardtanh",
    "softmax",
    "avg_pool",
    "nll_loss",
    "mae_loss",
    "add",
    "mul",
    "concat",
    "stack",
    "reshape",
    "sum_all",
    "weighted_sum",
    "backward",
    "finite_diff_grad",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    """Immutable N-d array of float64 values.

    ``requires_grad`` marks a value whose gradient should be tracked. Leaves
    (parameters, inputs) set it explicitly; results of primitives inherit it
    only while a tape is recording.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("non-finite value produced by a primitive")
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.name = None
        return out

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
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# --------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Entering the tape makes it the current recorder for this thread; tapes do
    not nest.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise RuntimeError("a tape is already recording on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def _current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _emit(out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        tape.nodes.append(_Node(result, inputs, vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise sum."""
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise product."""
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = W @ x + b`` applied over the last axis of ``x``.

    ``x`` is ``(n_in,)`` or ``(batch, n_in)``; ``W`` is ``(n_out, n_in)``.
    """
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: x {x.shape} does not conform to W {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"linear: bias {b.shape} does not match W {W.shape}")
    xd, Wd = x.data, W.data
    y = xd @ Wd.T
    if b is not None:
        y = y + b.data

    def vjp(g):
        gx = g @ Wd
        if xd.ndim == 1:
            gW = np.outer(g, xd)
            gb = g
        else:
            gW = g.T @ xd
            gb = g.sum(axis=0)
        return (gx, gW, gb) if b is not None else (gx, gW)

    inputs = (x, W, b) if b is not None else (x, W)
    return _emit(y, inputs, vjp)


def _conv_same(x: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched same-padded cross-correlation; returns output and im2col matrix.

    The im2col rows are gathered channels-last, ordered ``(kh, kw, c)``.
    """
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xl = np.zeros((n, h + 2 * ph, w + 2 * pw, c))
    xl[:, ph:ph + h, pw:pw + w] = x.transpose(0, 2, 3, 1)
    if kh == 1 and kw == 1:
        cols = xl.reshape(n * h * w, c)
    else:
        win = sliding_window_view(xl, (kh, kw), axis=(1, 2))  # n,h,w,c,kh,kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * c)
    y = cols @ k.transpose(0, 2, 3, 1).reshape(co, -1).T
    return y.reshape(n, h, w, co).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """Zero-padded "same" cross-correlation plus per-channel bias.

    ``x`` is ``(c_in, h, w)`` or ``(batch, c_in, h, w)``; ``k`` is
    ``(c_out, c_in, kh, kw)`` with odd ``kh`` and ``kw``.
    """
    if k.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-d, got {k.shape}")
    co, ci, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if x.ndim not in (3, 4) or x.shape[-3] != ci:
        raise ValueError(f"conv2d: input {x.shape} does not match kernel {k.shape}")
    if b.shape != (co,):
        raise ValueError(f"conv2d: bias {b.shape} does not match {co} output channels")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    kd = k.data
    y, cols = _conv_same(xd, kd)
    y = y + b.data[:, None, None]

    def vjp(g):
        g4 = g[None] if unbatched else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, co)
        gk = (g2.T @ cols).reshape(co, kh, kw, ci).transpose(0, 3, 1, 2)
        gb = g4.sum(axis=(0, 2, 3))
        kflip = np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _conv_same(g4, kflip)
        return (gx[0] if unbatched else gx), gk, gb

    return _emit(y[0] if unbatched else y, (x, k, b), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def hardtanh(x: Tensor) -> Tensor:
    # subgradient 0 at exactly +-1
    inside = np.abs(x.data) < 1.0
    return _emit(np.clip(x.data, -1.0, 1.0), (x,), lambda g: (g * inside,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "hardtanh":
        return hardtanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if x.shape[-1] < 1:
        raise ValueError("softmax of an empty vector")
    p = _softmax_np(x.data)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (x,), vjp)


def avg_pool(x: Tensor, size: int) -> Tensor:
    """Non-overlapping ``size x size`` block means over the last two axes."""
    h, w = x.shape[-2:]
    if size < 1 or h % size or w % size:
        raise ValueError(f"avg_pool: size {size} does not divide {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // size, size, w // size, size)
    y = blocks.mean(axis=(-3, -1))

    def vjp(g):
        g = g / (size * size)
        return (np.repeat(np.repeat(g, size, axis=-2), size, axis=-1),)

    return _emit(y, (x,), vjp)


def nll_loss(logits: Tensor, label) -> Tensor:
    """Negative log-softmax likelihood of ``label``.

    With batched ``(B, K)`` logits and ``B`` labels the mean over the batch
    is returned.
    """
    z = logits.data
    k = z.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"nll_loss: label {label!r} out of range for {k} classes")
    z2 = z.reshape(-1, k)
    if labels.shape[0] != z2.shape[0]:
        raise ValueError("nll_loss: one label per row of logits is required")
    m = z2.max(axis=1, keepdims=True)
    logp = z2 - m - np.log(np.exp(z2 - m).sum(axis=1, keepdims=True))
    rows = np.arange(z2.shape[0])
    loss = -logp[rows, labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((g / z2.shape[0]) * d.reshape(z.shape),)

    return _emit(np.asarray(loss), (logits,), vjp)


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; subgradient 0 where ``pred == target``."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"mae_loss: target {t.shape} vs prediction {pred.shape}")
    diff = pred.data - t
    n = max(diff.size, 1)
    return _emit(np.asarray(np.abs(diff).mean()), (pred,),
                 lambda g: (g * np.sign(diff) / n,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [p.data for p in parts]
    y = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _emit(y, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    y = np.stack([p.data for p in parts], axis=axis)
    n = len(parts)
    return _emit(y, tuple(parts),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def weighted_sum(w: Tensor, v: Tensor) -> Tensor:
    """``sum(w * v)`` over the last axis."""
    wd, vd = w.data, v.data
    return _emit((wd * vd).sum(axis=-1), (w, v),
                 lambda g: (g[..., None] * vd, g[..., None] * wd))


# --------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor | None,
             seeds: dict[Tensor, np.ndarray] | Iterable[tuple[Tensor, np.ndarray]] | None = None,
             wrt: Sequence[Tensor] | None = None):
    """Replay ``tape`` in reverse and return gradients of the leaves.

    ``loss`` must be a scalar. ``seeds`` adds extra output-side gradients at
    recorded values (used to inject policy-gradient terms). When ``wrt`` is
    given, a list aligned with it is returned (zeros for unreachable
    tensors); otherwise a dict mapping every reached leaf to its gradient.
    """
    grads: dict[int, np.ndarray] = {}
    keep: dict[int, Tensor] = {}

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = np.array(g, dtype=np.float64)
            keep[key] = t

    if loss is not None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        accumulate(loss, np.ones(loss.shape))
    if seeds is not None:
        items = seeds.items() if isinstance(seeds, dict) else seeds
        for t, g in items:
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.shape:
                raise ValueError(f"seed gradient {g.shape} does not match {t.shape}")
            accumulate(t, g)

    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        keep.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is not None and inp.requires_grad:
                accumulate(inp, gi)

    if wrt is not None:
        return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]
    return {keep[k]: v for k, v in grads.items() if k not in produced}


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
