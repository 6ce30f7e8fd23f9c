"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op builds a node holding its output, its parents and a closure that maps
the output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order, visiting each node once. All arithmetic is float64.

Checkpoint format (``save_checkpoint`` / ``load_checkpoint``), little-endian::

    magic     8 bytes   b"RARCKPT1"
    count     uint32    number of entries
    per entry:
      name_len  uint32
      name      name_len bytes, UTF-8
      ndim      uint32
      dims      ndim x uint64
      values    prod(dims) x float64, C order
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order = _topological(self)
        grads: dict[int, object] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            g = _dense(g)
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = _accumulate(grads[key], pg)
                else:
                    grads[key] = pg

    # operator sugar
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named trainable tensor; its gradient lives in ``.grad``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    @property
    def gradient(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Outer:
    """Deferred weight gradient ``sum_i x_i.T @ g_i``, evaluated as one matmul."""

    __slots__ = ("xs", "gs")

    def __init__(self, x: np.ndarray, g: np.ndarray):
        self.xs, self.gs = [x], [g]

    def merge(self, other: _Outer) -> _Outer:
        self.xs += other.xs
        self.gs += other.gs
        return self

    def dense(self) -> np.ndarray:
        if len(self.xs) == 1:
            return self.xs[0].T @ self.gs[0]
        return np.concatenate(self.xs).T @ np.concatenate(self.gs)


class _Rows:
    """Deferred scatter-add of gradient rows into a zero array."""

    __slots__ = ("idx", "gs", "shape")

    def __init__(self, idx: np.ndarray, g: np.ndarray, shape: tuple[int, ...]):
        self.idx, self.gs, self.shape = [idx], [g], shape

    def merge(self, other: _Rows) -> _Rows:
        self.idx += other.idx
        self.gs += other.gs
        return self

    def dense(self) -> np.ndarray:
        return _scatter_rows(np.concatenate(self.gs), np.concatenate(self.idx), self.shape)


def _dense(g) -> np.ndarray:
    return g.dense() if isinstance(g, (_Outer, _Rows)) else g


def _accumulate(a, b):
    if type(a) is type(b) and type(a) in (_Outer, _Rows):
        return a.merge(b)
    return _dense(a) + _dense(b)


def _topological(root: Tensor) -> list[Tensor]:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for x of shape (n, in) or (in,)."""
    x = as_tensor(x)
    if x.ndim == 1:
        return getitem(linear(reshape(x, (1, -1)), weight, bias), 0)
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = _Outer(x.data, g) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make("linear", data, parents, backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", data, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make("stack", data, tensors, backward)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make("getitem", a.data[index], (a,), backward)


def _scatter_rows(g: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    """Sum rows of ``g`` into a zero array at row positions ``idx`` (duplicates add)."""
    out = np.zeros(shape)
    if idx.ndim != 1:
        np.add.at(out, idx, g)
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.concatenate(([True], sidx[1:] != sidx[:-1])))
    out[sidx[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]`` of a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        if idx.ndim != 1:
            return (_scatter_rows(g, idx, a.shape),)
        return (_Rows(idx, g, a.shape),)

    return _make("take_rows", a.data[idx], (a,), backward)


def pick(a, idx) -> Tensor:
    """Per-row selection ``a[i, idx[i]]`` of a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return (out,)

    return _make("pick", a.data[rows, idx], (a,), backward)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


# nonlinearities

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as a FloatingPointError in _make
        y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise FloatingPointError("log of a non-positive value")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def l2_distance(a, b) -> Tensor:
    """Euclidean distance along the last axis; zero gradient where the distance is 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"l2_distance: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(d > 0, d, 1.0)

    def backward(g):
        unit = diff * (np.expand_dims(g / safe, -1) * np.expand_dims(d > 0, -1))
        return unit, -unit

    return _make("l2_distance", d, (a, b), backward)


def scaled_dot_product_attention(query, key, value, heads: int = 1) -> Tensor:
    """softmax(q k^T / sqrt(d)) v, with the width split evenly across ``heads``."""
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    if query.ndim != 2 or key.ndim != 2 or value.ndim != 2:
        raise ValueError("attention expects 2-D query, key and value")
    if query.shape[1] != key.shape[1] or key.shape[0] != value.shape[0]:
        raise ValueError(
            f"attention: incompatible shapes q{query.shape} k{key.shape} v{value.shape}"
        )
    if query.shape[1] % heads or value.shape[1] % heads:
        raise ValueError(f"attention: width not divisible by {heads} heads")
    if heads == 1:
        scores = matmul(query, transpose(key)) * (1.0 / np.sqrt(query.shape[1]))
        return matmul(softmax(scores, axis=-1), value)
    dq, dv = query.shape[1] // heads, value.shape[1] // heads
    outs = []
    for h in range(heads):
        q = getitem(query, (slice(None), slice(h * dq, (h + 1) * dq)))
        k = getitem(key, (slice(None), slice(h * dq, (h + 1) * dq)))
        v = getitem(value, (slice(None), slice(h * dv, (h + 1) * dv)))
        outs.append(scaled_dot_product_attention(q, k, v, heads=1))
    return concat(outs, axis=-1)


def gru_cell(x, h, w_x, w_h, b_x, b_h) -> Tensor:
    """One gated recurrent update.

    Gate layout in the 3H columns of the weights is (reset, update, candidate).
    ``h`` may be a single (H,) vector shared by every row of ``x``.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != w_x.shape[0] or w_x.shape[1] != 3 * w_h.shape[0]:
        raise ValueError(f"gru_cell: input {x.shape} does not fit weights {w_x.shape}")
    return gru_step(linear(x, w_x, b_x), h, w_h, b_h)


def _gru_forward(gxd: np.ndarray, hd: np.ndarray, w_h: np.ndarray, b_h: np.ndarray):
    H = w_h.shape[0]
    gh = hd @ w_h
    gh += b_h
    rz = gxd[:, :2 * H] + gh[:, :2 * H]
    rz *= 0.5  # in-place form of _sigmoid
    np.tanh(rz, out=rz)
    rz *= 0.5
    rz += 0.5
    r, z = rz[:, :H], rz[:, H:]
    ghn = gh[:, 2 * H:]
    n = r * ghn
    n += gxd[:, 2 * H:]
    np.tanh(n, out=n)
    out = hd - n
    out *= z
    out += n
    return out, (r, z, n, ghn)


def _gru_local_grads(g, hd, r, z, n, ghn):
    """Gradients w.r.t. the input and hidden pre-activations of one step."""
    dn = g * (1.0 - z) * (1.0 - n * n)
    dz = g * (hd - n) * z * (1.0 - z)
    dr = dn * ghn * r * (1.0 - r)
    return np.concatenate([dr, dz, dn], axis=1), np.concatenate([dr, dz, dn * r], axis=1)


def _check_gru(name: str, gx: Tensor, h: Tensor, w_h: Tensor, width: int) -> None:
    H = w_h.shape[0]
    if gx.shape[-1] != 3 * H or gx.ndim != width:
        raise ValueError(f"{name}: input projection {gx.shape} does not fit {w_h.shape}")
    if h.shape[-1] != H:
        raise ValueError(f"{name}: hidden {h.shape} does not fit weights {w_h.shape}")


def gru_step(gx, h, w_h, b_h) -> Tensor:
    """Gated recurrent update from a precomputed input projection ``gx = x @ w_x + b_x``."""
    gx, h = as_tensor(gx), as_tensor(h)
    _check_gru("gru_step", gx, h, w_h, 2)
    hd = h.data if h.ndim == 2 else np.broadcast_to(h.data, (gx.shape[0], h.shape[-1]))
    out, cache = _gru_forward(gx.data, hd, w_h.data, b_h.data)

    def backward(g):
        dgx, dgh = _gru_local_grads(g, hd, *cache)
        dh = None
        if h.requires_grad:
            dh = _unbroadcast(g * cache[1] + dgh @ w_h.data.T, h.shape)
        return dgx, dh, _Outer(hd, dgh), dgh.sum(axis=0)

    return _make("gru_step", out, (gx, h, w_h, b_h), backward)


def gru_sequence(gx, h, w_h, b_h) -> Tensor:
    """Run ``gru_step`` over the leading axis of ``gx`` (steps, B, 3H).

    Returns every hidden state after each step, shape (steps, B, H). The
    backward pass runs through time in one node, so long sequences cost one
    graph entry rather than one per step.
    """
    gx, h = as_tensor(gx), as_tensor(h)
    _check_gru("gru_sequence", gx, h, w_h, 3)
    steps, B, H = gx.shape[0], gx.shape[1], w_h.shape[0]
    hs = np.empty((steps + 1, B, H))
    hs[0] = h.data if h.ndim == 2 else np.broadcast_to(h.data, (B, H))
    caches = []
    for t in range(steps):
        hs[t + 1], cache = _gru_forward(gx.data[t], hs[t], w_h.data, b_h.data)
        caches.append(cache)

    def backward(g):
        dgx = np.empty(gx.shape)
        dgh = np.empty(gx.shape)
        carry = np.zeros((B, H))
        for t in range(steps - 1, -1, -1):
            gt = g[t] + carry
            dgx[t], dgh[t] = _gru_local_grads(gt, hs[t], *caches[t])
            carry = gt * caches[t][1] + dgh[t] @ w_h.data.T
        flat = dgh.reshape(-1, 3 * H)
        dw = hs[:-1].reshape(-1, H).T @ flat
        return dgx, _unbroadcast(carry, h.shape), dw, flat.sum(axis=0)

    return _make("gru_sequence", hs[1:], (gx, h, w_h, b_h), backward)


# optimisation

class Adam:
    """Adam with bias correction; parameters without a gradient count as zero-gradient."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.gradient
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sgd_adam_step(opt: Adam) -> None:
    opt.step()


# checkpoints

_MAGIC = b"RARCKPT1"


def save_checkpoint(path, params: dict[str, np.ndarray] | Iterable[Parameter]) -> None:
    if not isinstance(params, dict):
        params = {p.name: p.data for p in params}
    chunks = [_MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() below is C order
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    try:
        out, off = _read_entries(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out


def _read_entries(buf: bytes) -> tuple[dict[str, np.ndarray], int]:
    off = 8
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out, off
