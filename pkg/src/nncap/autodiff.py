"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap flat row-major numpy arrays (float32 or float64; the dtype of
the leaves decides the precision of the whole graph).  Every operation
records its parents and a backward closure on the output tensor;
``Tensor.backward()`` replays the recorded graph once in reverse
topological order, accumulating gradients into every reachable tensor that
requires them.

Broadcasting is deliberately restricted: ``bias_add`` broadcasts a vector
over the last axis, everything else wants exact shapes (pre-broadcast
constants with numpy before entering the graph).  ``matmul`` accepts 2-d
operands plus the two batched forms the model needs (3d @ 3d with a shared
leading axis, and 3d @ 2d with a shared weight).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this (scalar) tensor through the graph."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar tensor, got shape {self.shape}")
        order = topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor, copying ``data`` into the requested dtype."""
    arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    """A leaf that never requires gradients (masks, count reciprocals...)."""
    arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=False)


def topological_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph below ``root``.

    Iterative DFS so deep graphs do not hit the recursion limit; each node
    appears exactly once.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable | None) -> Tensor:
    """Assemble an op result, recording the graph only when it matters."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents),
                      backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make(out_data, (a, b), backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector over the last axis of ``x`` (the one allowed broadcast)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: x {x.shape} incompatible with bias {b.shape}")
    out_data = x.data + b.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            axes = tuple(range(g.ndim - 1))
            b.accumulate_grad(g.sum(axis=axes))

    return _make(out_data, (x, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _make(out_data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = x.data.dtype.type(c)
    out_data = x.data * c

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return _make(out_data, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2d@2d, 3d@3d (same batch), or 3d@2d (shared weight)."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims of {ad.shape} and {bd.shape} differ")
        out_data = ad @ bd

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g @ bd.T)
            if b.requires_grad:
                b.accumulate_grad(ad.T @ g)

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: batched shapes {ad.shape} and {bd.shape} incompatible")
        out_data = ad @ bd

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g @ bd.transpose(0, 2, 1))
            if b.requires_grad:
                b.accumulate_grad(ad.transpose(0, 2, 1) @ g)

    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims of {ad.shape} and {bd.shape} differ")
        # One flat GEMM beats numpy's per-batch loop for a shared weight.
        bt = ad.shape[0] * ad.shape[1]
        a2 = ad.reshape(bt, ad.shape[2])
        out_data = (a2 @ bd).reshape(ad.shape[0], ad.shape[1], bd.shape[1])

        def backward(g):
            g2 = g.reshape(bt, bd.shape[1])
            if a.requires_grad:
                a.accumulate_grad((g2 @ bd.T).reshape(ad.shape))
            if b.requires_grad:
                b.accumulate_grad(a2.T @ g2)

    else:
        raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")

    return _make(out_data, (a, b), backward)


def transpose_last2(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last2: rank-{x.data.ndim} tensor")
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(axes))

    return _make(out_data, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along ``axis``; backward splits the gradient."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no tensors given")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                p.accumulate_grad(g[tuple(idx)])

    return _make(out_data, tuple(parts), backward)


def narrow(x: Tensor, start: int, size: int, axis: int = -1) -> Tensor:
    """Slice ``size`` entries from ``start`` along ``axis``."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    out_data = np.ascontiguousarray(x.data[idx])

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x.accumulate_grad(full)

    return _make(out_data, (x,), backward)


def tile_leading(x: Tensor, n: int) -> Tensor:
    """Repeat a size-1 leading axis ``n`` times; backward sums it back."""
    if x.data.shape[0] != 1:
        raise ShapeError(f"tile_leading: leading axis of {x.shape} must be 1")
    out_data = np.repeat(x.data, n, axis=0)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.sum(axis=0, keepdims=True))

    return _make(out_data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.array(x.data.sum(), dtype=x.data.dtype).reshape(())

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    return _make(out_data, (x,), backward)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.repeat(np.expand_dims(g, axis), x.data.shape[axis], axis=axis))

    return _make(out_data, (x,), backward)


def max_last_axis(x: Tensor) -> Tensor:
    """Max over the last axis; the gradient routes to the first argmax."""
    idx = np.argmax(x.data, axis=-1)
    out_data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
            x.accumulate_grad(gx)

    return _make(out_data, (x,), backward)


def mean_pool(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis (token pooling and friends)."""
    n = x.data.shape[axis]
    out_data = x.data.mean(axis=axis)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(
                np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return _make(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to stay stable for large |x|.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rows of -inf entries get exact zeros."""
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = np.sum(g * out_data, axis=axis, keepdims=True)
            x.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (x,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; their gradient is zero."""
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs tensor {x.shape}")
    out_data = np.where(mask, x.data.dtype.type(value), x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(mask, 0, g))

    return _make(out_data, (x,), backward)


LAYERNORM_EPS = 1e-5


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(LAYERNORM_EPS))
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv)

    return _make(out_data, (x, gain, bias), backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-d tensor to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: need 2-d, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, x.data.dtype.type(eps))
    y = x.data / norms

    def backward(g):
        if x.requires_grad:
            proj = (g * y).sum(axis=1, keepdims=True)
            x.accumulate_grad((g - y * proj) / norms)

    return _make(y, (x,), backward)


# ---------------------------------------------------------------------------
# lookup, convolution, losses


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` for integer ``ids`` (any id shape)."""
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= weight.shape[0]):
        raise ShapeError(
            f"embedding_lookup: id out of range for table {weight.shape}")
    out_data = weight.data[ids]

    def backward(g):
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
            weight.accumulate_grad(gw)

    return _make(out_data, (weight,), backward)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride,
                                 j:j + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo), ho, wo


def _col2im(cols: np.ndarray, xshape, k: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, h, w = xshape
    gx = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + w]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           pad: int = 0) -> Tensor:
    """2-d convolution on (B, C, H, W) input with (O, C, k, k) kernels."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, weight {weight.shape}")
    b, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: weight {weight.shape} does not match input {x.shape}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias must be ({o},)")
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols) + bias.data[None, :, None]
    out_data = out.reshape(b, o, ho, wo)

    def backward(g):
        gmat = g.reshape(b, o, ho * wo)
        if bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=(0, 2)))
        if weight.requires_grad:
            gw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2]))
            weight.accumulate_grad(gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat)
            x.accumulate_grad(_col2im(gcols, x.shape, k, stride, pad, ho, wo))

    return _make(out_data, (x, weight, bias), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax.

    ``logits`` is (N, V); rows whose target equals ``ignore_id`` are left
    out of both the mean and the gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    keep = np.ones_like(targets, dtype=bool) if ignore_id is None \
        else targets != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every row is ignored")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(logits.shape[0])
    safe_targets = np.where(keep, targets, 0)
    nll = -logp[rows, safe_targets]
    out_data = np.array((nll * keep).sum() / count, dtype=logits.data.dtype).reshape(())

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[rows, safe_targets] -= 1.0
            p *= (keep / count)[:, None]
            logits.accumulate_grad(p * g)

    return _make(out_data, (logits,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(
            f"bce_with_logits: targets {targets.shape} vs logits {logits.shape}")
    z = logits.data
    # log(1 + e^z) - y z, computed stably for both signs of z
    loss = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out_data = np.array(loss.sum() / n, dtype=z.dtype).reshape(())

    def backward(g):
        if logits.requires_grad:
            s = 1.0 / (1.0 + np.exp(-z))
            logits.accumulate_grad(g * (s - targets) / n)

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-5) -> float:
    """Max discrepancy between the tape gradient of ``f`` and central
    finite differences, normalized by the largest numeric component.

    ``f`` must map ``x`` to a scalar tensor.  The finite-difference step
    actually applied is measured after rounding into ``x``'s dtype so the
    quotient stays honest at float32.
    """
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check: f must produce a scalar tensor")
    x.grad = None
    out.backward()
    if x.grad is None:
        raise ValueError("grad_check: x did not receive a gradient")
    analytic = x.grad.astype(np.float64).copy()

    numeric = np.zeros(x.data.size, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi_x = float(flat[i])
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo_x = float(flat[i])
        lo = float(f(x).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (hi_x - lo_x)
    numeric = numeric.reshape(x.data.shape)

    denom = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / denom)


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                      rng: np.random.Generator, coords_per_param: int = 4,
                      eps: float = 1e-4) -> float:
    """Spot-check d(loss)/d(params) on sampled coordinates of every tensor.

    Errors are normalized by the largest numeric gradient across all sampled
    coordinates, so parameters the loss is (nearly) insensitive to do not
    divide noise by zero.
    """
    for p in params.values():
        p.grad = None
    out = loss_fn()
    if out.data.size != 1:
        raise ValueError("grad_check_params: loss_fn must produce a scalar")
    out.backward()

    analytic: list[float] = []
    numeric: list[float] = []
    for p in params.values():
        flat = p.data.reshape(-1)
        gflat = (np.zeros_like(flat) if p.grad is None
                 else p.grad.reshape(-1))
        n = min(coords_per_param, flat.size)
        for i in rng.choice(flat.size, size=n, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            hi_x = float(flat[i])
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo_x = float(flat[i])
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric.append((hi - lo) / (hi_x - lo_x))
            analytic.append(float(gflat[i]))
    analytic_a = np.array(analytic)
    numeric_a = np.array(numeric)
    denom = max(float(np.max(np.abs(numeric_a))), 1e-12)
    return float(np.max(np.abs(analytic_a - numeric_a)) / denom)
