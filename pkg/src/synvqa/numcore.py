"""Dense-matrix kernel with reverse-mode differentiation.

Arrays are numpy float64 throughout. A Tensor records the operation that
produced it; backward() replays the tape in reverse topological order and
accumulates gradients into every reachable leaf. Only the operations the
model equations need are provided; this is not a general framework.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """Array value plus its computation-graph record.

    grad stays None until backward() reaches the node. Leaves are tensors
    created with no parents; call zero_grad between optimization steps.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        parents: tuple = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data + other.data, (self, other))
        out._backward = lambda g: (
            self._accum(_unbroadcast(g, self.shape)),
            other._accum(_unbroadcast(g, other.shape)),
        )
        return out

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data * other.data, (self, other))
        out._backward = lambda g: (
            self._accum(_unbroadcast(g * other.data, self.shape)),
            other._accum(_unbroadcast(g * self.data, other.shape)),
        )
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __truediv__(self, other) -> "Tensor":
        return self * _as_tensor(other) ** -1.0

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) * self**-1.0

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("exponent must be a plain number")
        out = Tensor(self.data**exponent, (self,))
        out._backward = lambda g: self._accum(
            g * exponent * self.data ** (exponent - 1)
        )
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul expects 2-d operands")
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"matmul shape mismatch {self.shape} x {other.shape}")
        out = Tensor(self.data @ other.data, (self, other))
        out._backward = lambda g: (
            self._accum(g @ other.data.T),
            other._accum(self.data.T @ g),
        )
        return out

    @property
    def T(self) -> "Tensor":
        out = Tensor(self.data.T, (self,))
        out._backward = lambda g: self._accum(g.T)
        return out

    def __getitem__(self, key) -> "Tensor":
        out = Tensor(self.data[key], (self,))

        def back(g, key=key):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accum(full)

        out._backward = back
        return out

    # -- reductions and elementwise maps -------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def back(g, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        out._backward = back
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data), (self,))
        out._backward = lambda g: self._accum(g * out.data)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), (self,))
        out._backward = lambda g: self._accum(g / self.data)
        return out

    def sqrt(self) -> "Tensor":
        out = Tensor(np.sqrt(self.data), (self,))
        out._backward = lambda g: self._accum(g * 0.5 / out.data)
        return out

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


as_tensor = _as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape broadcasting expanded from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def tensor(data, check_finite: bool = True) -> Tensor:
    """Leaf constructor; rejects NaN/Inf unless told otherwise."""
    arr = np.asarray(data, dtype=np.float64)
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values in tensor input")
    return Tensor(arr)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), (x,))
    out._backward = lambda g: x._accum(g * (x.data > 0))
    return out


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    factor = np.where(x.data >= 0, 1.0, slope)
    out = Tensor(x.data * factor, (x,))
    out._backward = lambda g: x._accum(g * factor)
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t, (x,))
    out._backward = lambda g: x._accum(g * (1.0 - t * t))
    return out


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, (x,))

    def back(g):
        # d softmax: s * (g - sum(g * s))
        dot = (g * s).sum(axis=-1, keepdims=True)
        x._accum(s * (g - dot))

    out._backward = back
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by a learned affine map.

    Composed from differentiable primitives, so the backward pass needs no
    dedicated rule.
    """
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError("gain/bias must be vectors of the row width")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    xhat = centered * (var + eps) ** -0.5
    return xhat * gain + bias


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-d tensors along axis 0."""
    if not parts:
        raise ValueError("nothing to concatenate")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0), tuple(parts))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            p._accum(g[a:b])

    out._backward = back
    return out


def cross_entropy_logits(logits: Tensor, target: int) -> Tensor:
    """−log softmax(logits)[target] for a single flat logit row."""
    z = logits.data.reshape(-1)
    k = z.size
    if not 0 <= target < k:
        raise IndexError(f"target {target} outside 0..{k - 1}")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    out = Tensor(lse - z[target], (logits,))

    def back(g):
        p = np.exp(z - lse)
        p[target] -= 1.0
        logits._accum((g.reshape(()) * p).reshape(logits.shape))

    out._backward = back
    return out


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between backward() and central differences.

    f must rebuild the graph from the live param tensors on every call.
    Relative error floors the denominator at 1e-3 so near-zero gradients
    compare absolutely.
    """
    zero_grads(params)
    f().backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        for idx in np.ndindex(p.data.shape):
            keep = p.data[idx]
            p.data[idx] = keep + h
            hi = f().item()
            p.data[idx] = keep - h
            lo = f().item()
            p.data[idx] = keep
            fd = (hi - lo) / (2 * h)
            ad = grads[name][idx]
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-3)
            worst = max(worst, err)
    return worst
