"""Minimal reverse-mode differentiable tensor engine on dense numpy arrays.

Provides exactly the primitives the transformer encoders and the four
training losses need: broadcast-aware elementwise arithmetic, (batched)
matrix multiply, activations, fused softmax / log-softmax / layer-norm,
embedding lookup with gradient scatter, gather/concat/reshape plumbing,
and a finite-difference gradient checker.

Every op validates that its output is finite; NaN/Inf anywhere raises
NonFiniteError naming the offending op. Graph construction and the
backward pass are single-threaded; tensors are treated as immutable
after creation except for gradient accumulation.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "GradCheckResult",
    "add", "sub", "mul", "div", "neg",
    "matmul", "transpose", "swap_last_axes", "reshape",
    "exp", "log", "sqrt", "tanh", "sigmoid", "gelu", "abs_", "maximum", "minimum",
    "sum_", "mean", "softmax", "log_softmax", "layer_norm", "cross_entropy",
    "embedding", "take", "concat",
    "l2_normalize", "attention", "grad_check",
]

# Additive mask value for attention; large negative but safe under
# max-subtraction in float32 (exp(-1e9 - (-1e9)) == 1, no NaN).
MASK_VALUE = -1e9


class NonFiniteError(FloatingPointError):
    """A tensor value became NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> None:
    # Summing is one fast pass; NaN/Inf propagate into the sum. A finite
    # overflow of the sum itself only happens at magnitudes that are
    # already fatal for training.
    if data.size and not math.isfinite(float(np.sum(data))):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense array plus an optional gradient and backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str = "leaf", _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if arr.dtype == np.int64 else np.float32)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self.op = op
        self.name: str | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode pass from this tensor through the recorded graph."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar tensor")
            grad = np.ones_like(self.data)
        # Iterative topological sort; graphs can exceed Python's default
        # recursion limit on real training steps.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(grad.astype(self.data.dtype, copy=False))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Leaf gradients absorb any non-finite value produced upstream.
        for node in topo:
            if not node._parents and node.grad is not None:
                _check_finite(node.grad, f"backward into {node.name or node.op}")

    # Operator sugar; keeps call sites close to the math.
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op}{flag})"


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), op="const")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, op=op, _parents=parents if needs else (),
                  _backward=backward if needs else None)


# --------------------------------------------------------------------------
# Elementwise arithmetic (broadcasting, gradients summed back)
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))
    return _make(out_data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))
    return _make(out_data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))
    return _make(out_data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _make(out_data, "div", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate_grad(-g)
    return _make(-a.data, "neg", (a,), backward)


def maximum(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out_data = np.maximum(a.data, b.data)

    def backward(g):
        # Subgradient: ties route to the first argument.
        pick_a = (a.data >= b.data)
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * pick_a, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ~pick_a, b.data.shape))
    return _make(out_data, "maximum", (a, b), backward)


def minimum(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out_data = np.minimum(a.data, b.data)

    def backward(g):
        pick_a = (a.data <= b.data)
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * pick_a, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ~pick_a, b.data.shape))
    return _make(out_data, "minimum", (a, b), backward)


def abs_(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate_grad(g * np.sign(a.data))
    return _make(np.abs(a.data), "abs", (a,), backward)


# --------------------------------------------------------------------------
# Unary activations / transcendentals
# --------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * out_data)
    return _make(out_data, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate_grad(g / a.data)
    return _make(np.log(a.data), "log", (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a.accumulate_grad(g * 0.5 / out_data)
    return _make(out_data, "sqrt", (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        a.accumulate_grad(g * (1.0 - out_data * out_data))
    return _make(out_data, "tanh", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    x = a.data
    e = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + e)
    out_data = np.where(x >= 0, pos, 1.0 - pos)

    def backward(g):
        a.accumulate_grad(g * out_data * (1.0 - out_data))
    return _make(out_data, "sigmoid", (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    half_x = 0.5 * x
    out_data = half_x + half_x * t

    def backward(g):
        da = 0.5 * (1.0 + t) + half_x * (1.0 - t * t) * (_GELU_C * (1.0 + 3.0 * _GELU_A * x2))
        a.accumulate_grad(g * da)
    return _make(out_data, "gelu", (a,), backward)


# --------------------------------------------------------------------------
# Shape plumbing
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), "reshape", (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,), backward)


def swap_last_axes(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + n)
                t.accumulate_grad(g[tuple(index)])
            offset += n
    return _make(out_data, "concat", tuple(tensors), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along an axis; gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.int64)
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (slice(None),) * axis + (idx,), g)
        a.accumulate_grad(acc)
    return _make(out_data, "take", (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ValueError("embedding table must be 2-D")
    out_data = table.data[ids]

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table.accumulate_grad(acc)
    return _make(out_data, "embedding", (table,), backward)


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.data.shape).copy())
    return _make(out_data, "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis] if isinstance(axis, int) else \
            int(np.prod([a.data.shape[ax] for ax in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_exact(a: Tensor, axis: int = 0) -> Tensor:
    """Mean over one axis accumulated in float64 and cast back.

    Exact accumulation makes the result independent of operand order for
    same-scale addends, which float32 summation is not; used where
    permutation invariance must hold bit-exactly (temporal pooling).
    """
    n = a.data.shape[axis]
    out_data = (a.data.astype(np.float64).sum(axis=axis) / n).astype(a.data.dtype)

    def backward(g):
        gg = np.expand_dims(g, axis) / n
        a.accumulate_grad(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype).copy())
    return _make(out_data, "mean_exact", (a,), backward)


# --------------------------------------------------------------------------
# Matrix multiply (supports broadcast-batched operands)
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires >= 2-D operands")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))
    return _make(out_data, "matmul", (a, b), backward)


# --------------------------------------------------------------------------
# Fused transformer kernels
# --------------------------------------------------------------------------

def _validate_axis(shape: tuple, axis: int, op: str) -> int:
    ndim = len(shape)
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} invalid for shape {shape}")
    return axis % ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along an axis, stabilized by max-subtraction."""
    axis = _validate_axis(a.data.shape, axis, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out_data * (g - dot))
    return _make(out_data, "softmax", (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _validate_axis(a.data.shape, axis, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        a.accumulate_grad(g - soft * g.sum(axis=axis, keepdims=True))
    return _make(out_data, "log_softmax", (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    dim = x.data.shape[-1]
    if dim == 0:
        raise ValueError("layer_norm: zero-size last dimension")
    if gain.data.shape != (dim,) or bias.data.shape != (dim,):
        raise ValueError("layer_norm: gain/bias must match the last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out_data = y * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * y).reshape(-1, dim).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, dim).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * y).mean(axis=-1, keepdims=True)
            x.accumulate_grad((gy - m1 - y * m2) * inv)
    return _make(out_data, "layer_norm", (x, gain, bias), backward)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy H(target, softmax(logits)) over leading slices.

    `target` holds one distribution per last-axis slice (one-hot or soft);
    gradients flow to logits only.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise ValueError(f"cross_entropy: target shape {t.shape} != logits shape {logits.data.shape}")
    sums = t.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise ValueError("cross_entropy: target rows must be distributions")
    ls = log_softmax(logits, axis=-1)
    n_slices = int(np.prod(logits.data.shape[:-1])) if logits.data.ndim > 1 else 1
    return mul(sum_(mul(ls, Tensor(t, op="const"))), -1.0 / n_slices)


# --------------------------------------------------------------------------
# Composite helpers
# --------------------------------------------------------------------------

def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(add(sum_(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with an optional additive mask.

    q: (..., Lq, d), k/v: (..., Lk, d); mask broadcasts against the
    (..., Lq, Lk) score matrix and is added before the softmax.
    """
    scale = 1.0 / math.sqrt(q.data.shape[-1])
    scores = mul(matmul(q, swap_last_axes(k)), scale)
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask, dtype=q.data.dtype), op="mask"))
    return matmul(softmax(scores, axis=-1), v)


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------

class GradCheckResult:
    """Worst-case disagreement between reverse-mode and finite differences."""

    def __init__(self):
        self.max_rel_error = 0.0
        self.worst: tuple[str, int, float, float] | None = None
        self.coords_checked = 0

    def record(self, name: str, index: int, analytic: float, numeric: float) -> None:
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        self.coords_checked += 1
        if err > self.max_rel_error:
            self.max_rel_error = err
            self.worst = (name, index, analytic, numeric)

    def __repr__(self) -> str:
        return (f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"coords={self.coords_checked}, worst={self.worst})")


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               epsilon: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare reverse-mode gradients of the scalar f() with central differences.

    f must be deterministic and the parameters 64-bit, otherwise the
    finite differences are meaningless. Checks every coordinate, or a
    seeded random subset of max_coords when given. Relative error uses
    max(|analytic|, |numeric|, 1e-8) as the denominator.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires 64-bit parameters")
    if max_coords is not None and rng is None:
        raise ValueError("subset grad_check needs a seeded rng")

    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(c)] for c in pick]

    result = GradCheckResult()
    for i, j in coords:
        p = params[i]
        orig = p.data.flat[j]
        p.data.flat[j] = orig + epsilon
        f_plus = float(f().data)
        p.data.flat[j] = orig - epsilon
        f_minus = float(f().data)
        p.data.flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        name = p.name or f"param{i}"
        result.record(name, j, float(analytic[i].flat[j]), numeric)
    return result
