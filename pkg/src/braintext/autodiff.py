"""Small reverse-mode autodiff over numpy arrays.

Everything runs in float64. A Tensor wraps an ndarray plus an optional
backward closure; calling backward() on a scalar loss walks the graph in
reverse topological order and accumulates gradients into every Tensor
with requires_grad set. The op set is exactly what the decoder stack
needs, nothing more.

Gradients through broadcasting are handled by summing the upstream
gradient back down to the operand's shape (_unbroadcast).
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

# Graph construction is toggled per thread: the HTTP service runs
# inference from worker threads, and a process-wide flag would let one
# thread's no_grad window clobber another's restore.
_grad_state = threading.local()


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # sugar; the real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        return float(np.asarray(self.data).item())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        order = []
        seen = set()

        def visit(t: Tensor):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad and t._backward is None:
                # leaf
                t.grad = g if t.grad is None else t.grad + g
                continue
            if t._backward is None:
                continue
            for parent, pg in t._backward(g):
                if not _needs(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # interior nodes with requires_grad=True but also parents keep
            # their gradient too when explicitly requested
            if t.requires_grad and t._parents:
                t.grad = g if t.grad is None else t.grad + g


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._parents != ()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(_needs(p) for p in parents):
        out._parents = tuple(p for p in parents if _needs(p))
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _make(data, (a, b), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        return ((a, np.transpose(g, inv)),)

    return _make(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    data = a.data.reshape(shape)

    def backward(g):
        return ((a, g.reshape(orig)),)

    return _make(data, (a,), backward)


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        out = []
        offset = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            out.append((p, g[tuple(sl)]))
            offset += s
        return tuple(out)

    return _make(data, tuple(parts), backward)


def gelu(a) -> Tensor:
    """Exact GeLU: x * Phi(x) with Phi the standard normal CDF."""
    a = as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    data = x * phi_cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return ((a, g * (phi_cdf + x * pdf)),)

    return _make(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((a, s * (g - dot)),)

    return _make(s, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        dg = _unbroadcast(g * xhat, gain.shape)
        db = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return ((a, dx), (gain, dg), (bias, db))

    return _make(data, (a, gain, bias), backward)


def embedding(table, ids) -> Tensor:
    """Row gather: out[...,:] = table[ids[...], :]."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return ((table, gt),)

    return _make(data, (table,), backward)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. rate=0 is the identity; rng must be supplied when active."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    if not 0.0 < rate < 1.0:
        raise ValueError(f"dropout rate out of range: {rate}")
    keep = (rng.random(a.data.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(a, Tensor(keep))


def cross_entropy_masked(logits, token_ids, loss_mask) -> Tensor:
    """Mean next-token cross entropy over masked positions.

    logits: (B, T, V); token_ids, loss_mask: (B, T). The loss at a masked
    position p reads the logits at p-1, so only positions 1..T-1 can be
    masked. Unmasked positions contribute nothing, in value or gradient.
    """
    logits = as_tensor(logits)
    ids = np.asarray(token_ids, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if mask[..., 0].any():
        raise ValueError("position 0 has no predecessor to predict it from")
    pred = logits.data[:, :-1, :]
    tgt = ids[:, 1:]
    m = mask[:, 1:]
    n = int(m.sum())
    if n == 0:
        raise ValueError("loss mask selects no positions")
    mx = pred.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(pred - mx).sum(axis=-1, keepdims=True))
    logp = pred - lse
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    data = -(picked * m).sum() / n

    def backward(g):
        soft = np.exp(logp)
        grad_pred = soft.copy()
        np.put_along_axis(
            grad_pred,
            tgt[..., None],
            np.take_along_axis(grad_pred, tgt[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        grad_pred *= (m[..., None] / n) * g
        full = np.zeros_like(logits.data)
        full[:, :-1, :] = grad_pred
        return ((logits, full),)

    return _make(data, (logits,), backward)
