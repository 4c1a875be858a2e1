"""Minimal dense-tensor reverse-mode autodiff.

Supports exactly the primitives the pipeline needs: batched matmul,
transpose, add, scalar multiply, hadamard, tanh, exp, log, log-sum-exp
(plus the fused log-sum-exp normalization the Sinkhorn loop is made of),
softmax, dropout, trace inner product, concat and slice.

Tensors are up to 3-dimensional (batch x rows x cols).  The only implicit
broadcast is the batch dimension: a 2-D operand may combine with a 3-D
one, and its gradient is summed over the batch.  Everything else requires
explicit shapes.

The tape is the operation DAG itself: every op output records its parent
tensors and a backward closure, and ``backward()`` replays the closures in
reverse topological order, visiting each node exactly once.  Graphs built
from independent inputs share no state, so separate tapes can run
concurrently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .seeds import stream


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes: tuple) -> None:
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if self.data.ndim > 3:
            raise ShapeError("tensor", self.data.shape)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def backward(self, seed_grad: np.ndarray | float | None = None) -> None:
        """Accumulate gradients into every upstream tensor with requires_grad."""
        if seed_grad is None:
            seed_grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed_grad, dtype=self.data.dtype)}
        for node in reversed(_topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self) -> None:
        self.grad = None


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative postorder: graphs unroll dozens of Sinkhorn iterations, so
    # recursion would hit Python's stack limit.
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
        for parent in node._parents:
            if id(parent) not in visited and _needs_grad(parent):
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _reduce_batch(grad: np.ndarray, target_shape: tuple) -> np.ndarray:
    if grad.shape == target_shape:
        return grad
    if grad.ndim == len(target_shape) + 1 and grad.shape[1:] == tuple(target_shape):
        return grad.sum(axis=0)
    raise ShapeError("grad-reduce", grad.shape, target_shape)


def _elementwise_shapes_ok(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    # batch broadcast: (B, r, c) with (r, c)
    if a.ndim == 3 and b.ndim == 2 and a.shape[1:] == b.shape:
        return True
    if b.ndim == 3 and a.ndim == 2 and b.shape[1:] == a.shape:
        return True
    return False


# -- arithmetic -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if not _elementwise_shapes_ok(a.data, b.data):
        raise ShapeError("add", a.shape, b.shape)
    data = a.data + b.data

    def backward(g):
        return _reduce_batch(g, a.shape), _reduce_batch(g, b.shape)

    return _result(data, (a, b), backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (c * g,)

    return _result(a.data * c, (a,), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scalar_mul(b, -1.0))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if not _elementwise_shapes_ok(a.data, b.data):
        raise ShapeError("hadamard", a.shape, b.shape)
    data = a.data * b.data

    def backward(g):
        return _reduce_batch(g * b.data, a.shape), _reduce_batch(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def backward(g):
        ga = _reduce_batch(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _reduce_batch(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError("transpose", a.shape)
    data = np.swapaxes(a.data, -1, -2)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _result(data, (a,), backward)


# -- nonlinearities ---------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - data * data),)

    return _result(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _result(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _result(data, (a,), backward)


def _check_axis(op: str, a: Tensor, axis: int) -> int:
    if axis not in (-1, -2):
        raise ShapeError(op, a.shape, (axis,))
    if a.data.ndim < 2:
        raise ShapeError(op, a.shape)
    return axis


def logsumexp(a: Tensor, axis: int) -> Tensor:
    """log(sum(exp(a))) along a row/col axis, keepdims; max-shifted."""
    axis = _check_axis("logsumexp", a, axis)
    m = np.max(a.data, axis=axis, keepdims=True)
    data = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))

    def backward(g):
        return (g * np.exp(a.data - data),)

    return _result(data, (a,), backward)


def lse_normalize(a: Tensor, axis: int) -> Tensor:
    """a - logsumexp(a, axis): one log-domain Sinkhorn half-pass, fused so
    the unrolled loop stays compact.  Backward is the exact derivative."""
    axis = _check_axis("lse_normalize", a, axis)
    m = np.max(a.data, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))
    data = a.data - lse

    def backward(g):
        return (g - np.exp(data) * np.sum(g, axis=axis, keepdims=True),)

    return _result(data, (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    axis = _check_axis("softmax", a, axis)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (data * (g - np.sum(g * data, axis=axis, keepdims=True)),)

    return _result(data, (a,), backward)


# -- stochastic -------------------------------------------------------------

def dropout(a: Tensor, p: float, seed: int, mode: str) -> Tensor:
    """Inverted dropout: active in 'train' and 'mc_dropout' modes (mask kept
    deterministic per seed, output scaled by 1/(1-p)); identity in
    'deterministic' mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if mode not in ("train", "deterministic", "mc_dropout"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    if mode == "deterministic" or p == 0.0:
        return a
    mask = (stream(seed).random(a.shape) >= p) / (1.0 - p)

    def backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), backward)


# -- reductions and structure ------------------------------------------------

def trace_inner(a: Tensor, b: Tensor) -> Tensor:
    """Frobenius inner product <A, B> = tr(A^T B); batched inputs sum the
    per-item traces."""
    if a.shape != b.shape:
        raise ShapeError("trace_inner", a.shape, b.shape)
    data = np.array(np.sum(a.data * b.data))

    def backward(g):
        g = float(g)
        return g * b.data, g * a.data

    return _result(data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    nd = tensors[0].data.ndim
    if axis not in (-1, -2) or any(t.data.ndim != nd for t in tensors):
        raise ShapeError("concat", *(t.shape for t in tensors))
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along a row/col axis."""
    axis = _check_axis("slice", a, axis)
    index: list = [slice(None)] * a.data.ndim
    index[axis if axis >= 0 else a.data.ndim + axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(data, (a,), backward)


# -- gradient checking --------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               h: float = 1e-5, max_coords_per_param: int = 48,
               sample_seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    f must be deterministic under fixed seeds and return a scalar tensor.
    Coordinates are subsampled for large parameters.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data):
        raise FloatingPointError("grad_check: non-finite function value")
    out.backward()

    worst = 0.0
    rng = stream(sample_seed, "grad-check")
    for p in params:
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        size = flat.size
        if size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords_per_param, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(f().data)
            flat[idx] = orig - h
            down = float(f().data)
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("grad_check: non-finite perturbed value")
            g_fd = (up - down) / (2.0 * h)
            g_tape = float(g_ad.reshape(-1)[idx])
            err = abs(g_tape - g_fd) / max(abs(g_tape), abs(g_fd), 1e-8)
            worst = max(worst, err)
    return worst
