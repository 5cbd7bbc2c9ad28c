"""Dense numeric core: numpy-backed tensors with exact reverse-mode gradients.

Arrays are 64-bit by default so finite-difference checks are decisive;
float32 works through numpy's weak scalar promotion but is not what the
tests pin down. Graphs are per-batch and single-threaded: determinism over
throughput. The attention and linear ops are fused nodes to keep the
number of large temporaries down.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

BCE_EPS = 1e-12


def tune_allocator() -> None:
    """Keep large blocks on the glibc heap so attention buffers get reused.

    Without this every big temporary is a fresh mmap that page-faults on
    first touch. No-op on platforms without glibc mallopt.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[], None]] = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents)
    return out


def _accum(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add g into t.grad. owned=True promises g is a freshly allocated array
    that nothing else aliases, so the first write can adopt it without a copy."""
    if t.grad is None:
        if owned and g.shape == t.data.shape and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar.

    Leaf grads accumulate across calls until zeroed; interior node grads
    are per-sweep scratch and reset here.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in topo:
        if node._parents:
            node.grad = None
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.requires_grad:
            node._backward()


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    out = _node(data, (a, b))

    def _bw():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad, b.shape))

    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    out = _node(data, (a, b))

    def _bw():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.shape), owned=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.shape), owned=True)

    out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or batched operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _node(a.data @ b.data, (a, b))

    def _bw():
        if a.requires_grad:
            _accum(a, out.grad @ b.data.swapaxes(-1, -2), owned=True)
        if b.requires_grad:
            _accum(b, a.data.swapaxes(-1, -2) @ out.grad, owned=True)

    out._backward = _bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one node; x (n, d_in), w (d_in, d_out), b (d_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match {w.shape}")
    data = x.data @ w.data
    data += b.data
    out = _node(data, (x, w, b))

    def _bw():
        dy = out.grad
        if x.requires_grad:
            _accum(x, dy @ w.data.T, owned=True)
        if w.requires_grad:
            _accum(w, x.data.T @ dy, owned=True)
        if b.requires_grad:
            _accum(b, dy.sum(axis=0), owned=True)

    out._backward = _bw
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, key_bias: np.ndarray, scale: float) -> Tensor:
    """softmax(q @ k^T * scale + key_bias) @ v as one fused node.

    q, k, v: (..., S, dh); key_bias broadcasts over (..., S, S) and is a
    constant (no gradient).
    """
    p = q.data @ k.data.swapaxes(-1, -2)
    p *= scale
    p += key_bias
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = _node(p @ v.data, (q, k, v))

    def _bw():
        dp = out.grad @ v.data.swapaxes(-1, -2)
        if v.requires_grad:
            _accum(v, p.swapaxes(-1, -2) @ out.grad, owned=True)
        dp -= (dp * p).sum(axis=-1, keepdims=True)
        dp *= p  # now the score gradient
        if q.requires_grad:
            dq = dp @ k.data
            dq *= scale
            _accum(q, dq, owned=True)
        if k.requires_grad:
            dk = dp.swapaxes(-1, -2) @ q.data
            dk *= scale
            _accum(k, dk, owned=True)

    out._backward = _bw
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _node(x.data.reshape(shape), (x,))

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad.reshape(x.shape))

    out._backward = _bw
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = _node(x.data.transpose(axes), (x,))
    inverse = np.argsort(axes)

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad.transpose(inverse))

    out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw():
        pieces = np.split(out.grad, splits, axis=axis)
        for t, g in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, g)

    out._backward = _bw
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = _node(x.data[start:stop], (x,))

    def _bw():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            _accum(x, g, owned=True)

    out._backward = _bw
    return out


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows by index (marker positions, [CLS] slots, embeddings)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = _node(x.data[idx], (x,))

    def _bw():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            _accum(x, g, owned=True)

    out._backward = _bw
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return take_rows(table, ids)


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0.0), (x,))

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad * (x.data > 0), owned=True)

    out._backward = _bw
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Gaussian-flavored smooth activation (tanh form)."""
    d = x.data
    t = d * d
    t *= 0.044715
    t += 1.0
    t *= d
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= d
    y *= 0.5
    out = _node(y, (x,))

    def _bw():
        if x.requires_grad:
            sq = d * d
            d_inner = sq
            d_inner *= 3 * 0.044715
            d_inner += 1.0
            d_inner *= _GELU_C
            local = t * t
            np.subtract(1.0, local, out=local)
            local *= d_inner
            local *= d
            local += 1.0 + t
            local *= 0.5
            local *= out.grad
            _accum(x, local, owned=True)

    out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _node(y, (x,))

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad * y * (1.0 - y), owned=True)

    out._backward = _bw
    return out


def log(x: Tensor) -> Tensor:
    out = _node(np.log(x.data), (x,))

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad / x.data, owned=True)

    out._backward = _bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)
    out = _node(y, (x,))

    def _bw():
        if x.requires_grad:
            g = out.grad * y
            g -= y * g.sum(axis=axis, keepdims=True)
            _accum(x, g, owned=True)

    out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    y = xhat * gain.data
    y += bias.data
    out = _node(y, (x, gain, bias))
    h = x.shape[-1]

    def _bw():
        dy = out.grad
        if bias.requires_grad:
            _accum(bias, dy.reshape(-1, h).sum(axis=0), owned=True)
        if gain.requires_grad:
            _accum(gain, (dy * xhat).reshape(-1, h).sum(axis=0), owned=True)
        if x.requires_grad:
            dxhat = dy * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            term *= inv
            _accum(x, term, owned=True)

    out._backward = _bw
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _node(np.asarray(x.data.sum()), (x,))

    def _bw():
        if x.requires_grad:
            _accum(x, np.broadcast_to(out.grad, x.shape).copy(), owned=True)

    out._backward = _bw
    return out


def mean(x: Tensor) -> Tensor:
    out = _node(np.asarray(x.data.mean()), (x,))
    n = x.data.size

    def _bw():
        if x.requires_grad:
            _accum(x, np.broadcast_to(out.grad / n, x.shape).copy(), owned=True)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    n = logits.data.shape[0]
    if logits.data.ndim != 1 or n < 1:
        raise ShapeError(f"cross_entropy expects a 1-D vector, got {logits.shape}")
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} classes")
    z = logits.data
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    out = _node(np.asarray(lse - z[target]), (logits,))

    def _bw():
        if logits.requires_grad:
            p = np.exp(z - lse)
            p[target] -= 1.0
            p *= out.grad
            _accum(logits, p, owned=True)

    out._backward = _bw
    return out


def binary_cross_entropy(prob: Tensor, label) -> Tensor:
    """Elementwise -(y log p + (1-y) log(1-p)) with probs clamped to [eps, 1-eps]."""
    y = np.asarray(label, dtype=prob.data.dtype)
    p = np.clip(prob.data, BCE_EPS, 1.0 - BCE_EPS)
    out = _node(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)), (prob,))

    def _bw():
        if prob.requires_grad:
            inside = (prob.data >= BCE_EPS) & (prob.data <= 1.0 - BCE_EPS)
            dp = (-y / p + (1.0 - y) / (1.0 - p)) * inside
            _accum(prob, _unbroadcast(out.grad * dp, prob.shape), owned=True)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; zeroes grads afterward."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        g = p.grad
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = m / bc1
        denom = np.sqrt(v / bc2)
        denom += state.eps
        update /= denom
        update *= state.lr
        p.data -= update
        p.grad.fill(0.0)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    checked: dict[str, int]
    failures: list[tuple[str, int, float, float, float]]
    tol: float

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"grad check (tol {self.tol:g}):"]
        for name in sorted(self.max_rel_err):
            status = "ok" if all(f[0] != name for f in self.failures) else "FAIL"
            lines.append(
                f"  {name:32s} n={self.checked[name]:4d} "
                f"max_rel_err={self.max_rel_err[name]:.3e} {status}"
            )
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    samples_per_group: int = 200,
    seed: int = 0,
    corrupt_scale: float = 1.0,
    min_grad: float = 3e-4,
) -> GradCheckReport:
    """Central differences against the analytic gradients of loss_fn.

    Per parameter group, up to samples_per_group random entries are probed
    with (f(x+h) - f(x-h)) / 2h; relative error uses
    |a-n| / max(|a|, |n|, 1e-8).

    Entries whose analytic gradient is below min_grad are not sampled: at
    h=1e-5 on an O(10) loss the 64-bit central difference carries ~1e-10
    of cancellation noise, so gradients much below 1e-4 cannot be
    certified to 1e-6 no matter how correct they are. Op-level bugs still
    surface on the resolvable entries of the same tensor.

    corrupt_scale multiplies the analytic gradients: anything other than
    1.0 is a negative control that the report must flag.
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {name: p.grad.copy() * corrupt_scale for name, p in params.items()}

    rng = np.random.Generator(np.random.PCG64(seed))
    max_rel: dict[str, float] = {}
    checked: dict[str, int] = {}
    failures: list[tuple[str, int, float, float, float]] = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grads = analytic[name].reshape(-1)
        resolvable = np.nonzero(np.abs(grads) >= min_grad)[0]
        n_probe = min(samples_per_group, resolvable.size)
        if n_probe == 0:
            max_rel[name] = 0.0
            checked[name] = 0
            continue
        idx = resolvable[rng.choice(resolvable.size, size=n_probe, replace=False)]
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(grads[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
            if rel > tol:
                failures.append((name, int(i), a, numeric, rel))
        max_rel[name] = worst
        checked[name] = n_probe
    return GradCheckReport(max_rel_err=max_rel, checked=checked, failures=failures, tol=tol)
