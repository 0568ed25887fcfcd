"""Dense tensors with a reverse-mode tape.

Every op builds a fresh output ``Tensor`` that remembers its parents and a
closure pushing the output gradient back to them. Nothing tracked is ever
mutated in place; ``Tensor.backward`` walks the graph in reverse topological
order and accumulates into ``.grad``.

Ops keep the dtype of their inputs: tests run in float64, training in float32.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NumericalError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _result(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced a non-finite value")
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=parents if requires else (),
                  _backward=backward if requires else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.data.dtype.type(factor)
    return _result(out, (x,), lambda g: (g * x.data.dtype.type(factor),), "scale")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,), "relu")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Pick ``a`` where ``cond`` holds, ``b`` elsewhere. ``cond`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                              _unbroadcast(np.where(cond, 0, g), b.shape)),
                   "where")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(out, (x,), backward, "mean")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``x`` [B, n, d] restricted to ``mask`` [B, n].

    Rows with no valid entry yield the zero vector.
    """
    m = np.asarray(mask, dtype=x.dtype)[..., None]
    counts = np.maximum(m.sum(axis=-2), 1)
    out = (x.data * m).sum(axis=-2) / counts
    return _result(out, (x,), lambda g: ((g / counts)[..., None, :] * m,), "masked_mean")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for ``x`` [..., d_in], ``W`` [d_in, d_out], ``b`` [d_out]."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[1],) or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    # 2-D matmuls hit BLAS gemm directly; stacked ones loop per batch item
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ W.data + b.data).reshape(x.shape[:-1] + (W.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return _result(out, (x, W, b), backward, "linear")


# ---------------------------------------------------------------- normalizers

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries (``mask`` False) get weight 0."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax_rows: a row is fully masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain{gain.shape}/bias{bias.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        gx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (xhat.reshape(-1, d) * flat).sum(axis=0), flat.sum(axis=0)

    return _result(out.astype(x.dtype), (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(``logits``)."""
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0] if targets.ndim else 0} targets for {n} rows")
    if n == 0:
        raise ShapeError("cross_entropy: empty batch")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"cross_entropy: target out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsum - z[rows, targets]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, targets] -= 1
        return (p * (g / n),)

    return _result(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- attention

@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int = 8

    def __post_init__(self):
        if self.model_dim < 1 or self.num_heads < 1:
            raise ValueError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} does not divide model_dim={self.model_dim}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


ATTENTION_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def multi_head_attention(q_in: Tensor, kv_in: Tensor, params: Mapping[str, Tensor],
                         cfg: AttentionConfig, mask: np.ndarray | None = None):
    """Scaled dot-product attention of ``q_in`` over ``kv_in``.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``; each ``w*`` is
    [d, d] with head ``h`` owning columns ``h*head_dim:(h+1)*head_dim``.
    Inputs are [nq, d] / [nk, d] or batched [B, nq, d] / [B, nk, d];
    ``mask`` ([nk] or [B, nk], True = attend) hides padded keys.

    Returns ``(output, weights)`` with weights shaped [B, heads, nq, nk]
    (batch axis dropped for unbatched input).
    """
    d, h, hd = cfg.model_dim, cfg.num_heads, cfg.head_dim
    if q_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise ShapeError(f"attention dim mismatch: q{q_in.shape} kv{kv_in.shape} model_dim={d}")
    unbatched = q_in.ndim == 2
    if unbatched:
        q_in = reshape(q_in, (1,) + q_in.shape)
        kv_in = reshape(kv_in, (1,) + kv_in.shape)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[None]
    if q_in.ndim != 3 or kv_in.ndim != 3 or q_in.shape[0] != kv_in.shape[0]:
        raise ShapeError(f"attention batch mismatch: q{q_in.shape} kv{kv_in.shape}")
    b, nq, nk = q_in.shape[0], q_in.shape[1], kv_in.shape[1]

    def heads(x, w, bias, n):
        return transpose(reshape(linear(x, params[w], params[bias]), (b, n, h, hd)), (0, 2, 1, 3))

    q = heads(q_in, "wq", "bq", nq)
    k = heads(kv_in, "wk", "bk", nk)
    v = heads(kv_in, "wv", "bv", nk)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, None, :]
    weights = softmax_rows(scores, key_mask)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, nq, d))
    out = linear(ctx, params["wo"], params["bo"])
    if unbatched:
        out = reshape(out, (nq, d))
        weights = reshape(weights, (h, nq, nk))
    return out, weights


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing
    finite-difference noise by nothing.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[Tensor],
               eps: float = 1e-4, tolerance: float = 1e-4, floor: float = 1e-6) -> GradCheckResult:
    """Compare backprop gradients of the scalar ``fn()`` with central differences.

    Every element of every tensor in ``params`` is perturbed by ``±eps``.
    Use float64 parameters; float32 differences are mostly rounding.
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        p.zero_grad()
    fn().backward()
    worst, worst_name = 0.0, ""
    for name, p in named:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(fn().data)
            flat[i] = orig - eps
            minus = float(fn().data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2 * eps)
        err = relative_error(analytic, numeric, floor)
        if err.size and err.max() > worst:
            j = int(err.argmax())
            worst = float(err.reshape(-1)[j])
            worst_name = f"{name}[{np.unravel_index(j, p.shape)}]"
    return GradCheckResult(worst, worst_name, tolerance)
