"""Small reverse-mode autodiff core on top of numpy.

Primitives run eagerly on ``Tensor`` wrappers. While a ``Tape`` is active,
each primitive whose inputs need gradients appends one record (output,
inputs, backward closure); ``Tape.backward`` replays the records in reverse
and accumulates gradients additively, so fan-out works without bookkeeping.
Outside a tape nothing is recorded, which is the inference path.
"""

from __future__ import annotations

import io
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = -30.0
LN_EPS = 1e-5


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar for the few places it reads better
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of executed primitives for one forward pass."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(output.value)
        output.grad = grad if not isinstance(output, Parameter) else output.grad + grad
        for out, inputs, fn in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            if not isinstance(out, Parameter):
                out.grad = None
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = gi
                else:
                    t.grad = t.grad + gi
        self.records.clear()


def _active() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _emit(value, inputs: tuple, backward: Callable) -> Tensor:
    tape = _active()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.records.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _emit(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def add_n(*xs) -> Tensor:
    vals = [_val(x) for x in xs]
    out = vals[0]
    for v in vals[1:]:
        out = out + v
    return _emit(out, xs, lambda g: tuple(_unbroadcast(g, v.shape) for v in vals))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(x, c: float) -> Tensor:
    return _emit(_val(x) * c, (x,), lambda g: (g * c,))


def reshape(x, shape) -> Tensor:
    xv = _val(x)
    return _emit(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes) -> Tensor:
    inv = np.argsort(axes)
    return _emit(np.transpose(_val(x), axes), (x,), lambda g: (np.transpose(g, inv),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> Tensor:
    xv = _val(x)
    s = sigmoid_np(xv)

    def back(g):
        return (g * s * (1.0 + xv * (1.0 - s)),)

    return _emit(xv * s, (x,), back)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    xv, gv, bv = _val(x), _val(gain), _val(bias)
    if xv.shape[-1] < 2:
        raise ValueError("layer_norm needs a last dimension of size >= 2")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(xhat * gv + bv, (x, gain, bias), back)


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    y = softmax_np(_val(x))
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    xv, wv = _val(x), _val(weight)
    out = xv @ wv
    if bias is not None:
        out = out + _val(bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        dw = xv.reshape(-1, xv.shape[-1]).T @ g2
        return g @ wv.T, dw, (g2.sum(axis=0) if bias is not None else None)

    return _emit(out, (x, weight, bias), back)


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)

    def back(g):
        return (_unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
                _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape))

    return _emit(av @ bv, (a, b), back)


def embedding(table, idx: np.ndarray) -> Tensor:
    tv = _val(table)
    idx = np.asarray(idx)

    def back(g):
        dt = np.zeros_like(tv)
        np.add.at(dt, idx.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (dt,)

    return _emit(tv[idx], (table,), back)


def masked_mean(x, mask: np.ndarray, axis: int | tuple) -> Tensor:
    """Mean of ``x`` over ``axis`` counting only entries where ``mask`` is true.

    ``mask`` lacks the trailing feature axis of ``x``. Fully masked groups
    give zeros.
    """
    xv = _val(x)
    m = np.asarray(mask, dtype=xv.dtype)[..., None]
    count = np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    w = m / count

    def back(g):
        return (np.broadcast_to(g, np.broadcast_shapes(g.shape, w.shape)) * w,)

    return _emit((xv * w).sum(axis=axis, keepdims=True), (x,), back)


def total(x) -> Tensor:
    xv = _val(x)
    return _emit(np.asarray(xv.sum()), (x,), lambda g: (np.broadcast_to(g, xv.shape).copy(),))


# --------------------------------------------------------------------------
# attention


def scaled_dot_product(q, k, v, scale_factor: float) -> Tensor:
    """Fused softmax(q k^T * s) v over the last two axes.

    q is (B, H, Tq, d); k and v are (Bk, Hk, S, d) with Bk in {1, B} and
    Hk in {1, H}. Hk == 1 is the shared key/value head of multi-query
    attention: query heads are folded into rows so one matmul per batch
    item serves every head.
    """
    qv, kv, vv = _val(q), _val(k), _val(v)
    B, H, Tq, d = qv.shape
    Bk, Hk, S, _ = kv.shape
    shared = Hk == 1 and H > 1
    q2 = qv.reshape(B, 1, H * Tq, d) if shared else qv
    scores = (q2 @ np.swapaxes(kv, -1, -2)) * scale_factor
    p = softmax_np(scores)
    out = p @ vv

    def back(g):
        g2 = g.reshape(out.shape)
        dp = g2 @ np.swapaxes(vv, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale_factor
        dq = (ds @ kv).reshape(qv.shape)
        dk = _unbroadcast(np.swapaxes(ds, -1, -2) @ q2, kv.shape)
        dv = _unbroadcast(np.swapaxes(p, -1, -2) @ g2, vv.shape)
        return dq, dk, dv

    return _emit(out.reshape(qv.shape), (q, k, v), back)


def attention(x_q, x_kv, params: dict, heads: int, mode: str = "multi-head") -> Tensor:
    """Multi-head or multi-query attention with a final output projection.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``; any bias may be None. For multi-query the
    key/value projections map C -> C/H (one head shared by all queries).
    """
    B, Tq, C = _val(x_q).shape
    if C % heads:
        raise ValueError(f"hidden size {C} is not divisible by {heads} heads")
    d = C // heads
    Bk, S, _ = _val(x_kv).shape
    q = linear(x_q, params["wq"], params.get("bq"))
    q = transpose(reshape(q, (B, Tq, heads, d)), (0, 2, 1, 3))
    k = linear(x_kv, params["wk"], params.get("bk"))
    v = linear(x_kv, params["wv"], params.get("bv"))
    if mode == "multi-query":
        k = reshape(k, (Bk, 1, S, d))
        v = reshape(v, (Bk, 1, S, d))
    elif mode == "multi-head":
        k = transpose(reshape(k, (Bk, S, heads, d)), (0, 2, 1, 3))
        v = transpose(reshape(v, (Bk, S, heads, d)), (0, 2, 1, 3))
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    o = scaled_dot_product(q, k, v, 1.0 / math.sqrt(d))
    o = reshape(transpose(o, (0, 2, 1, 3)), (B, Tq, C))
    return linear(o, params["wo"], params.get("bo"))


# --------------------------------------------------------------------------
# loss


def masked_cross_entropy(q, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """``-sum_{b,t} w[b,t] * sum_v target[b,t,v] * max(log q[b,t,v], -30)``."""
    qv = _val(q)
    target = np.asarray(target)
    weights = np.asarray(weights)
    if target.shape != qv.shape or weights.shape != qv.shape[:-1]:
        raise ValueError(f"shape mismatch: q {qv.shape}, target {target.shape}, weights {weights.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        logq = np.log(qv)
    live = ~(logq <= LOG_FLOOR)  # NaN stays live so it surfaces in the loss
    logq = np.where(live, logq, LOG_FLOOR)
    wt = target * weights[..., None]
    loss = -(wt * logq).sum()

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dq = np.where(live & (wt != 0), -wt / qv, 0.0)
        return (g * dq,)

    return _emit(np.asarray(loss), (q,), back)


# --------------------------------------------------------------------------
# optimisation


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * f
    return norm


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    for p in params:
        if lr:
            p.value = p.value - lr * p.grad.astype(p.value.dtype, copy=False)
        p.zero_grad()


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if total_epochs <= 0:
        return lr0
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside 0..{total_epochs}")
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)))


# --------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-4,
               coords: int = 200, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the scalar loss from the current parameter values.
    Up to ``coords`` coordinates per parameter are probed (all of them when
    the parameter is smaller).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= coords else rng.choice(n, size=coords, replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            fp = float(f().value)
            flat[i] = old - h
            fm = float(f().value)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        p.zero_grad()
    return worst


# --------------------------------------------------------------------------
# checkpoint files

MAGIC = b"TPPT1"


class CheckpointError(ValueError):
    pass


def save_parameters(params: Sequence[Parameter], path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for p in params:
        name = p.name.encode("utf-8")
        buf.write(struct.pack("<q", len(name)))
        buf.write(name)
        buf.write(struct.pack("<q", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}q", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_parameters(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
    pos = len(MAGIC)
    out = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<q", data, pos)
        pos += 8
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<q", data, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}q", data, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
    return out


def load_parameters(params: Sequence[Parameter], path: str | Path,
                    prefixes: Sequence[str] | None = None) -> list[str]:
    """Copy stored values into ``params``; returns the names loaded.

    With ``prefixes`` only matching names are loaded and the rest are left
    untouched; otherwise the file must cover every parameter exactly.
    """
    stored = read_parameters(path)
    by_name = {p.name: p for p in params}
    wanted = [n for n in by_name if prefixes is None or n.startswith(tuple(prefixes))]
    if prefixes is None and set(stored) != set(by_name):
        missing = sorted(set(by_name) - set(stored))
        extra = sorted(set(stored) - set(by_name))
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name in wanted:
        if name not in stored:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        p = by_name[name]
        if stored[name].shape != p.value.shape:
            raise CheckpointError(f"{name}: shape {stored[name].shape} != expected {p.value.shape}")
        p.value = stored[name].astype(p.value.dtype)
        p.zero_grad()
    return wanted
