"""Reverse-mode differentiable primitives over float64 numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient buffer.  Operations
executed while a ``Tape`` is active append a backward closure to it; calling
``Tape.backward(loss)`` replays the closures in exact reverse recording order,
accumulating gradients by summation.  Everything runs in float64 so the
finite-difference checker is meaningful at 1e-4 relative tolerance.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class Tape:
    """Records operations; backward() visits them in reverse order."""

    def __init__(self):
        self._ops = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if not self._ops:
            raise ContractError("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()


def _record(fn):
    if _TAPES:
        _TAPES[-1].record(fn)


def _acc(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.reshape(t.data.shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a scalar () or a last-axis vector."""
    a, b = as_tensor(a), as_tensor(b)
    if not (
        b.data.shape == a.data.shape
        or b.data.shape == ()
        or (a.data.ndim >= 1 and b.data.shape == a.data.shape[-1:])
    ):
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data + b.data)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        _acc(a, g)
        if b.data.shape == a.data.shape:
            _acc(b, g)
        elif b.data.shape == ():
            _acc(b, np.asarray(g.sum()))
        else:
            _acc(b, g.reshape(-1, b.data.shape[0]).sum(axis=0))

    _record(bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes differ {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)

    def bwd():
        if out.grad is None:
            return
        _acc(a, out.grad * b.data)
        _acc(b, out.grad * a.data)

    _record(bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * c)

    def bwd():
        if out.grad is not None:
            _acc(a, out.grad * c)

    _record(bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bwd():
        if out.grad is not None:
            _acc(a, out.grad * out.data)

    _record(bwd)
    return out


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def bwd():
        if out.grad is not None:
            _acc(a, out.grad * (1.0 - out.data**2))

    _record(bwd)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = Tensor(s)

    def bwd():
        if out.grad is not None:
            _acc(a, out.grad * s * (1.0 - s))

    _record(bwd)
    return out


def silu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = Tensor(a.data * s)

    def bwd():
        if out.grad is not None:
            _acc(a, out.grad * (s + a.data * s * (1.0 - s)))

    _record(bwd)
    return out


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))

    def bwd():
        if out.grad is not None:
            _acc(a, out.grad * _sigmoid(a.data))

    _record(bwd)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along one axis (max subtraction)."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        _acc(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    ka = ad.shape[-1]
    kb = bd.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: inner dims differ {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        if ad.ndim == 2 and bd.ndim == 2:
            _acc(a, g @ bd.T)
            _acc(b, ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            _acc(a, g @ bd.T)
            _acc(b, np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 1:
            _acc(a, np.outer(g, bd))
            _acc(b, ad.T @ g)
        else:
            _acc(a, g * bd)
            _acc(b, g * ad)

    _record(bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd():
        if out.grad is not None:
            _acc(a, out.grad)

    _record(bwd)
    return out


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (-1,))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[start:stop])

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(a.data)
        g[start:stop] = out.grad
        _acc(a, g)

    _record(bwd)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-D, got {a.data.shape}")
    out = Tensor(a.data[:, start:stop])

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(a.data)
        g[:, start:stop] = out.grad
        _acc(a, g)

    _record(bwd)
    return out


def reverse_rows(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[::-1])

    def bwd():
        if out.grad is not None:
            _acc(a, out.grad[::-1])

    _record(bwd)
    return out


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.data.shape[0] for p in parts]

    def bwd():
        if out.grad is None:
            return
        ofs = 0
        for p, n in zip(parts, sizes):
            _acc(p, out.grad[ofs : ofs + n])
            ofs += n

    _record(bwd)
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bwd():
        if out.grad is None:
            return
        _acc(a, out.grad[:, :na])
        _acc(b, out.grad[:, na:])

    _record(bwd)
    return out


def stack(parts) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.stack([p.data for p in parts], axis=0))

    def bwd():
        if out.grad is None:
            return
        for i, p in enumerate(parts):
            _acc(p, out.grad[i])

    _record(bwd)
    return out


def mean_rows(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows: expected 2-D, got {a.data.shape}")
    n = a.data.shape[0]
    out = Tensor(a.data.mean(axis=0))

    def bwd():
        if out.grad is not None:
            _acc(a, np.broadcast_to(out.grad / n, a.data.shape).copy())

    _record(bwd)
    return out


def total_sum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.sum()))

    def bwd():
        if out.grad is not None:
            _acc(a, np.broadcast_to(out.grad, a.data.shape).copy())

    _record(bwd)
    return out


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean()))

    def bwd():
        if out.grad is not None:
            _acc(a, np.broadcast_to(out.grad / n, a.data.shape).copy())

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# broadcasting outer products used by the state-space discretization


def outer_time_channel(delta: Tensor, a: Tensor) -> Tensor:
    """(T,C) x (C,S) -> (T,C,S): out[t,c,s] = delta[t,c] * a[c,s]."""
    delta, a = as_tensor(delta), as_tensor(a)
    if delta.data.ndim != 2 or a.data.ndim != 2 or delta.data.shape[1] != a.data.shape[0]:
        raise ShapeError(
            f"outer_time_channel: incompatible {delta.data.shape} and {a.data.shape}"
        )
    out = Tensor(delta.data[:, :, None] * a.data[None, :, :])

    def bwd():
        if out.grad is None:
            return
        _acc(delta, (out.grad * a.data[None, :, :]).sum(axis=2))
        _acc(a, (out.grad * delta.data[:, :, None]).sum(axis=0))

    _record(bwd)
    return out


def outer_time_state(delta: Tensor, b: Tensor) -> Tensor:
    """(T,C) x (T,S) -> (T,C,S): out[t,c,s] = delta[t,c] * b[t,s]."""
    delta, b = as_tensor(delta), as_tensor(b)
    if delta.data.ndim != 2 or b.data.ndim != 2 or delta.data.shape[0] != b.data.shape[0]:
        raise ShapeError(
            f"outer_time_state: incompatible {delta.data.shape} and {b.data.shape}"
        )
    out = Tensor(delta.data[:, :, None] * b.data[:, None, :])

    def bwd():
        if out.grad is None:
            return
        _acc(delta, (out.grad * b.data[:, None, :]).sum(axis=2))
        _acc(b, (out.grad * delta.data[:, :, None]).sum(axis=1))

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# depthwise causal convolution


def conv1d_causal(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal conv: x (T,C), kernel (w,C), zero padding on the left."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 2 or kernel.data.ndim != 2 or x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError(
            f"conv1d_causal: incompatible {x.data.shape} and kernel {kernel.data.shape}"
        )
    t_len, _ = x.data.shape
    w = kernel.data.shape[0]
    xpad = np.concatenate([np.zeros((w - 1, x.data.shape[1])), x.data], axis=0)
    y = np.zeros_like(x.data)
    for j in range(w):
        y += kernel.data[j] * xpad[j : j + t_len]
    out = Tensor(y)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        dk = np.empty_like(kernel.data)
        dxpad = np.zeros_like(xpad)
        for j in range(w):
            dk[j] = (g * xpad[j : j + t_len]).sum(axis=0)
            dxpad[j : j + t_len] += g * kernel.data[j]
        _acc(kernel, dk)
        _acc(x, dxpad[w - 1 :])

    _record(bwd)
    res = out
    if bias is not None:
        res = add(res, bias)
    return res


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"mse: shapes differ {pred.data.shape} vs {target.data.shape}"
        )
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.asarray((diff**2).mean()))

    def bwd():
        if out.grad is None:
            return
        g = out.grad * 2.0 * diff / n
        _acc(pred, g)
        _acc(target, -g)

    _record(bwd)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"cross_entropy: logits {logits.data.shape} vs labels {labels.shape}"
        )
    n, c = logits.data.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"cross_entropy: label out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(n), labels]
    out = Tensor(np.asarray(nll.mean()))
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def bwd():
        if out.grad is None:
            return
        g = probs.copy()
        g[np.arange(n), labels] -= 1.0
        _acc(logits, out.grad * g / n)

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# name-based dispatch over the core primitives

OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "silu": silu,
    "softmax": softmax,
    "exp": exp,
    "mse": mse,
    "cross_entropy": cross_entropy,
}


def forward_op(name: str, *inputs):
    if name not in OPS:
        raise ContractError(f"unknown primitive {name!r}")
    return OPS[name](*inputs)


# ---------------------------------------------------------------------------
# finite-difference gradient checker


def grad_check(f, params, epsilon: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current values of ``params``
    (a sequence of Tensors) on every call and must be deterministic.
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise ContractError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite loss in grad_check")
        tape.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    max_rel = 0.0
    for idx, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.ravel()
        gflat = ga.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            with Tape():
                lp = float(f().data)
            flat[i] = orig - epsilon
            with Tape():
                lm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite probe at parameter {idx}, element {i}")
            fd = (lp - lm) / (2.0 * epsilon)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
