"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the model and training loop compute runs through this module:
matrix products, row softmax/layernorm, ReLU, dropout, batch normalization,
1-D unfolding for convolutions, and the scalar reductions that feed
``backward``. Tensors are immutable after construction except for ``grad``
and in-place optimizer updates on parameter ``data``.

Gradient bookkeeping follows the usual tape-free scheme: each operation
records its parents together with vector-Jacobian closures, ``backward``
walks the graph once in reverse topological order, and gradients are
accumulated only on tensors explicitly created with ``requires_grad=True``.
Repeated ``backward`` calls without clearing therefore add up, which the
optimizer relies on never happening mid-step.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray


class Tensor:
    """A float64 ndarray plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        # (parent, vjp) pairs; populated only for op outputs
        self._parents: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _result(data: Array, parents) -> Tensor:
    out = Tensor(data)
    kept = tuple((p, fn) for p, fn in parents if _tracked(p))
    out._parents = kept
    return out


def _unbroadcast(g: Array, shape) -> Array:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor, alpha: float = 1.0, bias: Tensor | None = None) -> Tensor:
    """Matrix product ``alpha * (a @ b) [+ bias]`` with batch broadcasting.

    Supports (M,K)@(K,N), (B,M,K)@(K,N) and (B,M,K)@(B,K,N). ``alpha`` folds
    a scalar (e.g. an attention temperature) into the product and ``bias`` a
    trailing-axis vector, both without materializing extra arrays.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}") from exc
    if alpha != 1.0:
        data *= alpha
    if bias is not None:
        data += bias.data

    def via_a(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if alpha != 1.0:
            ga = ga * alpha
        return ga

    def via_b(g):
        if b.ndim == 2 and a.ndim == 3:
            # shared weights: one (K, B*M) @ (B*M, N) product instead of a
            # batched gemm followed by a sum over the batch
            gb = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
        else:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        if alpha != 1.0:
            gb = gb * alpha
        return gb

    parents = [(a, via_a), (b, via_b)]
    if bias is not None:
        parents.append((bias, lambda g: _unbroadcast(g, bias.shape)))
    return _result(data, parents)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (contiguous copy, which keeps matmul fast)."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")
    data = np.ascontiguousarray(a.data.swapaxes(-1, -2))
    return _result(data, [(a, lambda g: g.swapaxes(-1, -2))])


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2))
    return _result(data, [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    data = a.data.reshape(shape)
    return _result(data, [(a, lambda g: g.reshape(orig))])


# ---------------------------------------------------------------------------
# elementwise and broadcasting arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}") from exc
    return _result(data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: incompatible shapes {a.shape} - {b.shape}") from exc
    return _result(data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}") from exc
    return _result(data, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, [(a, lambda g: g * c)])


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    data = np.maximum(a.data, 0.0)
    return _result(data, [(a, lambda g: g * (a.data > 0.0))])


# ---------------------------------------------------------------------------
# row-wise normalizations

def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, overflow-safe via row-max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)

    def vjp(g):
        # dx = z * (g - sum(g * z)); einsum avoids the g*z temporary
        rows = "...i,...i->..."
        inner = np.expand_dims(np.einsum(rows, g, z), -1)
        out = g - inner
        out *= z
        return out

    return _result(z, [(a, vjp)])


LAYERNORM_EPS = 1e-5


def layernorm_rows(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Per-row standardization (x - mean) / sqrt(var + eps), no affine part."""
    if a.shape[-1] < 2:
        raise ContractError(f"layernorm_rows needs rows of length >= 2, got {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def vjp(g):
        n = a.shape[-1]
        rows = "...i,...i->..."
        gm = np.expand_dims(g.mean(axis=-1), -1)
        gy = np.expand_dims(np.einsum(rows, g, y), -1) / n
        out = g - gm
        out -= y * gy
        out *= inv
        return out

    return _result(y, [(a, vjp)])


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero elements with probability ``rate`` and rescale survivors.

    Identity in inference mode and at rate 0 (no randomness consumed).
    """
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    buf = rng.random(a.shape)
    mask = buf >= rate
    inv = 1.0 / (1.0 - rate)
    np.multiply(a.data, mask, out=buf)
    buf *= inv

    def vjp(g):
        out = g * mask
        out *= inv
        return out

    return _result(buf, [(a, vjp)])


# ---------------------------------------------------------------------------
# shape surgery used by the model

def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    data = np.concatenate([p.data for p in parts], axis=-1)
    parents = []
    offset = 0
    for p in parts:
        start, stop = offset, offset + p.shape[-1]

        def vjp(g, start=start, stop=stop):
            return g[..., start:stop]

        parents.append((p, vjp))
        offset = stop
    return _result(data, parents)


def prepend_row(row: Tensor, block: Tensor) -> Tensor:
    """Insert a shared rank-1 row ahead of every row block.

    (L,) + (P, L) -> (P+1, L), or (L,) + (B, P, L) -> (B, P+1, L); the row's
    gradient sums over the batch.
    """
    if row.ndim != 1 or row.shape[0] != block.shape[-1]:
        raise ShapeError(f"prepend_row: row {row.shape} does not fit block {block.shape}")
    top_shape = block.shape[:-2] + (1, row.shape[0])
    data = np.concatenate([np.broadcast_to(row.data, top_shape), block.data], axis=-2)

    def via_row(g):
        gr = g[..., 0, :]
        if gr.ndim > 1:
            gr = gr.sum(axis=tuple(range(gr.ndim - 1)))
        return gr

    return _result(data, [(row, via_row), (block, lambda g: g[..., 1:, :])])


def gather_rows(a: Tensor, idx: Array) -> Tensor:
    """Select rows along the penultimate axis.

    2-D: ``a[idx]`` with 1-D idx. 3-D: per-sample indices, idx of shape
    (B, n) picking rows from each batch element.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim == 2:
        if idx.ndim != 1:
            raise ShapeError(f"gather_rows: 2-D input needs 1-D indices, got {idx.shape}")
        data = a.data[idx]

        def vjp(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return out

    elif a.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
            raise ShapeError(f"gather_rows: indices {idx.shape} do not match input {a.shape}")
        rows = np.arange(a.shape[0])[:, None]
        data = a.data[rows, idx]

        def vjp(g):
            out = np.zeros_like(a.data)
            np.add.at(out, (rows, idx), g)
            return out

    else:
        raise ShapeError(f"gather_rows: unsupported rank {a.ndim}")
    return _result(data, [(a, vjp)])


def mean_penultimate(a: Tensor) -> Tensor:
    """Mean over the penultimate axis, e.g. global average pooling (B,T,C)->(B,C)."""
    if a.ndim < 2:
        raise ShapeError(f"mean_penultimate needs rank >= 2, got {a.shape}")
    n = a.shape[-2]
    data = a.data.mean(axis=-2)

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, -2), a.shape) / n

    return _result(data, [(a, vjp)])


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def vjp(g):
        return np.full(a.shape, float(g))

    return _result(data, [(a, vjp)])


# ---------------------------------------------------------------------------
# classifier-head building blocks

class BatchNormState:
    """Running mean/var buffers for one batchnorm layer (not trainable)."""

    __slots__ = ("mean", "var")

    def __init__(self, num_features: int):
        self.mean = np.zeros(num_features)
        self.var = np.ones(num_features)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.mean.shape[0])
        out.mean[...] = self.mean
        out.var[...] = self.var
        return out


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis feature over all leading axes.

    Training mode uses biased batch statistics and updates the running
    buffers in place; inference mode reads the buffers.
    """
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    if training:
        if n < 2:
            raise ContractError("batchnorm training needs at least 2 rows")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean *= 1.0 - momentum
        state.mean += momentum * mu
        state.var *= 1.0 - momentum
        state.var += momentum * var
    else:
        mu, var = state.mean, state.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def via_gamma(g):
        return (g * xhat).sum(axis=axes)

    def via_beta(g):
        return g.sum(axis=axes)

    if training:
        def via_x(g):
            gm = g.mean(axis=axes)
            gxh = (g * xhat).mean(axis=axes)
            return (g - gm - xhat * gxh) * (gamma.data * inv)
    else:
        def via_x(g):
            return g * (gamma.data * inv)

    return _result(data, [(x, via_x), (gamma, via_gamma), (beta, via_beta)])


def unfold1d(x: Tensor, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """im2col for 1-D convolution: (B, T, C) -> (B, T_out, kernel*C).

    Tap ``k`` of the window occupies columns [k*C, (k+1)*C), so a convolution
    is ``matmul(unfold1d(x, k), w)`` with w of shape (kernel*C, C_out).
    """
    if x.ndim != 3:
        raise ShapeError(f"unfold1d expects (B, T, C), got {x.shape}")
    b, t, c = x.shape
    t_out = (t + 2 * pad - kernel) // stride + 1
    if t_out < 1:
        raise ShapeError(f"unfold1d: kernel {kernel} does not fit length {t} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0))) if pad else x.data
    data = np.empty((b, t_out, kernel * c))
    span = (t_out - 1) * stride + 1
    for tap in range(kernel):
        data[:, :, tap * c:(tap + 1) * c] = xp[:, tap:tap + span:stride, :]

    def vjp(g):
        gp = np.zeros((b, t + 2 * pad, c))
        for tap in range(kernel):
            gp[:, tap:tap + span:stride, :] += g[:, :, tap * c:(tap + 1) * c]
        return gp[:, pad:pad + t, :] if pad else gp

    return _result(data, [(x, vjp)])


def cross_entropy_logits(logits: Tensor, labels: Array) -> Tensor:
    """Mean cross-entropy of integer labels against raw logits (N, K)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_logits: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - m)
    zsum = ez.sum(axis=-1, keepdims=True)
    probs = ez / zsum
    n = z.shape[0]
    picked = z[np.arange(n), labels]
    data = np.asarray((np.log(zsum).ravel() + m.ravel() - picked).mean())

    def vjp(g):
        gz = probs.copy()
        gz[np.arange(n), labels] -= 1.0
        gz *= float(g) / n
        return gz

    return _result(data, [(logits, vjp)])


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Calling twice without clearing accumulates, i.e. yields exactly twice the
    single-pass gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")

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
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
        for parent, vjp in node._parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] += contrib
            else:
                grads[key] = contrib


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Weight initializer: Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
