"""Reverse-mode autodiff over numpy arrays.

Only the operations the model needs are provided. Each op records its
parents and a closure mapping the upstream gradient to one gradient per
parent; ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates into the ``grad`` of leaf tensors that
were created with ``requires_grad=True``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class GraphStateError(RuntimeError):
    """Raised when backward is requested on a tensor with no recorded forward pass."""


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: Sequence["Tensor"] = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        The graph is kept alive, so calling this twice adds the gradients
        twice.
        """
        if self._backward is None:
            raise GraphStateError("backward() called on a tensor without a recorded forward pass")
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that stops graph recording (inference)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _result(data, parents: Iterable[Tensor], backward: Callable) -> Tensor:
    parents = tuple(parents)
    if _GRAD_ENABLED[0] and any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)

        def backward_const(g):
            return (g * c,)

        return _result(a.data * c, (a,), backward_const)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)
    out = np.clip(x.data, 0, 6)
    return _result(out, (x,), lambda g: (g * mask,))


# --- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take_last(x: Tensor, axis: int = -2) -> Tensor:
    """Select index -1 along ``axis`` (dropping it)."""
    axis = axis % x.data.ndim
    index = [slice(None)] * x.data.ndim
    index[axis] = -1
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), backward)


def mean(x: Tensor, axis) -> Tensor:
    axis = tuple(np.atleast_1d(axis))
    count = int(np.prod([x.shape[a] for a in axis]))
    src = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, src).copy(),)

    return _result(x.data.mean(axis=axis), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _result(x.data.sum(), (x,), lambda g: (np.full(src, g, dtype=x.dtype),))


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; ``b`` may be 2-D and broadcast over ``a``'s batch dims."""
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2:
            gb = g.reshape(-1, g.shape[-1]).T @ a.data.reshape(-1, a.shape[-1])
            gb = gb.T
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            gb = _unbroadcast(gb, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _result(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last axis of x."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"dense: input shape {x.shape} incompatible with weight shape {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias shape {b.shape} does not match weight shape {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# --- normalisation / softmax ----------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


def scale_bias(x: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """Per-channel affine on an N×C×H×W tensor."""
    s = scale.data[None, :, None, None]
    b = bias.data[None, :, None, None]

    def backward(g):
        return g * s, (g * x.data).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(x.data * s + b, (x, scale, bias), backward)


# --- convolutions ----------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Per-channel cross-correlation. x: N×C×H×W, w: C×K×K."""
    if x.data.ndim != 4 or w.data.ndim != 3 or w.shape[0] != x.shape[1] or w.shape[1] != w.shape[2]:
        raise DimensionError(f"depthwise conv: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    k = w.shape[1]
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"depthwise conv: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]
            out += patch * w.data[None, :, ky, kx, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for ky in range(k):
            for kx in range(k):
                sl = (slice(None), slice(None),
                      slice(ky, ky + stride * (ho - 1) + 1, stride),
                      slice(kx, kx + stride * (wo - 1) + 1, stride))
                gw[:, ky, kx] = (g * xp[sl]).sum(axis=(0, 2, 3))
                gxp[sl] += g * w.data[None, :, ky, kx, None, None]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return _result(out, (x, w), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Dense cross-correlation. x: N×Cin×H×W, w: Cout×Cin×K×K."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data

    if k == 1 and stride == 1:
        cols = xp.reshape(n, cin, h * wd)
        out = np.matmul(w.data[:, :, 0, 0], cols).reshape(n, cout, ho, wo)
    else:
        cols = np.empty((n, cin, k, k, ho, wo), dtype=x.dtype)
        for ky in range(k):
            for kx in range(k):
                cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * (ho - 1) + 1:stride,
                                        kx:kx + stride * (wo - 1) + 1:stride]
        cols = cols.reshape(n, cin * k * k, ho * wo)
        out = np.matmul(w.data.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        if k == 1 and stride == 1:
            w2 = w.data[:, :, 0, 0]
            gw = np.einsum("nop,ncp->oc", g2, cols).reshape(w.shape)
            gx = np.matmul(w2.T, g2).reshape(n, cin, h, wd)
            return gx, gw, gb
        gw = np.einsum("nop,nqp->oq", g2, cols).reshape(w.shape)
        gcols = np.matmul(w.data.reshape(cout, -1).T, g2).reshape(n, cin, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for ky in range(k):
            for kx in range(k):
                gxp[:, :, ky:ky + stride * (ho - 1) + 1:stride,
                    kx:kx + stride * (wo - 1) + 1:stride] += gcols[:, :, ky, kx]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# --- loss ------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood over all leading positions.

    ``logits`` has classes on the last axis; ``labels`` holds integer class
    indices with shape ``logits.shape[:-1]``.
    """
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data.reshape(-1, c)
    lab = labels.reshape(-1)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    probs = np.exp(logp)
    m = z.shape[0]
    loss = -logp[np.arange(m), lab].mean()

    def backward(g):
        d = probs.copy()
        d[np.arange(m), lab] -= 1.0
        return ((g / m) * d.reshape(logits.shape),)

    out = _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
    return out, probs.reshape(logits.shape)
