"""Array-valued reverse-mode autodiff.

A `Value` wraps a float64 ndarray together with a gradient accumulator and
references to the nodes it was computed from. `backward()` on a scalar root
walks the graph once in reverse topological order, accumulating into `.grad`
(accumulating, never overwriting, so shared subexpressions add up).

Only the operations the emotion models need are provided; there is no
general broadcasting machinery beyond bias-style broadcasts, and matmul is
strictly 2-D. The sequence-level layer kernels in `layers.py` register here
as single fused nodes.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Value", "backward", "concat", "as_value"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Value:
    """One node of the computation graph: data, grad accumulator, parents."""

    __slots__ = ("data", "grad", "op", "parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), op="leaf", backward=None,
                 requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def accumulate_owned(self, g: np.ndarray) -> None:
        """Like accumulate, but may adopt `g` (callers hand over ownership);
        used by fused kernels to avoid zero-fill passes on large buffers."""
        if self.grad is None and g.flags.c_contiguous and g.dtype == np.float64:
            self.grad = g
        else:
            self.accumulate(g)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Value(op={self.op!r}, shape={self.data.shape})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_value(other)
        out = Value(self.data + other.data, (self, other), "add")

        def back():
            if self.requires_grad:
                self.accumulate(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other.accumulate(_unbroadcast(out.grad, other.data.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Value(-self.data, (self,), "neg")

        def back():
            if self.requires_grad:
                self.accumulate(-out.grad)

        out._backward = back
        return out

    def __sub__(self, other):
        return self + (-as_value(other))

    def __rsub__(self, other):
        return as_value(other) + (-self)

    def __mul__(self, other):
        other = as_value(other)
        out = Value(self.data * other.data, (self, other), "mul")

        def back():
            if self.requires_grad:
                self.accumulate(_unbroadcast(out.grad * other.data, self.data.shape))
            if other.requires_grad:
                other.accumulate(_unbroadcast(out.grad * self.data, other.data.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_value(other)
        out = Value(self.data / other.data, (self, other), "div")

        def back():
            if self.requires_grad:
                self.accumulate(_unbroadcast(out.grad / other.data, self.data.shape))
            if other.requires_grad:
                other.accumulate(_unbroadcast(
                    -out.grad * self.data / (other.data * other.data),
                    other.data.shape))

        out._backward = back
        return out

    def __rtruediv__(self, other):
        return as_value(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        out = Value(self.data ** exponent, (self,), "pow")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad * exponent * self.data ** (exponent - 1))

        out._backward = back
        return out

    def __matmul__(self, other):
        other = as_value(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul is 2-D only")
        out = Value(self.data @ other.data, (self, other), "matmul")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad @ other.data.T)
            if other.requires_grad:
                other.accumulate(self.data.T @ out.grad)

        out._backward = back
        return out

    # -- elementwise functions --------------------------------------------

    def exp(self):
        out = Value(np.exp(self.data), (self,), "exp")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad * out.data)

        out._backward = back
        return out

    def log(self):
        out = Value(np.log(self.data), (self,), "log")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad / self.data)

        out._backward = back
        return out

    def sqrt(self):
        out = Value(np.sqrt(self.data), (self,), "sqrt")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad * 0.5 / np.maximum(out.data, 1e-300))

        out._backward = back
        return out

    def tanh(self):
        out = Value(np.tanh(self.data), (self,), "tanh")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad * (1.0 - out.data * out.data))

        out._backward = back
        return out

    def sigmoid(self):
        out = Value(1.0 / (1.0 + np.exp(-self.data)), (self,), "sigmoid")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad * out.data * (1.0 - out.data))

        out._backward = back
        return out

    def maximum(self, floor: float):
        """Elementwise max with a constant; subgradient 0 on the flat side."""
        out = Value(np.maximum(self.data, floor), (self,), "maximum")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad * (self.data > floor))

        out._backward = back
        return out

    # -- reductions / shape -----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Value(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")

        def back():
            if not self.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accumulate(np.broadcast_to(g, self.data.shape).copy())

        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        out = Value(self.data.reshape(shape), (self,), "reshape")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad.reshape(self.data.shape))

        out._backward = back
        return out

    @property
    def T(self):
        out = Value(self.data.T.copy(), (self,), "transpose")

        def back():
            if self.requires_grad:
                self.accumulate(out.grad.T)

        out._backward = back
        return out

    def __getitem__(self, key):
        out = Value(self.data[key], (self,), "slice")

        def back():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                g[key] = out.grad
                self.accumulate(g)

        out._backward = back
        return out

    # -- backward ----------------------------------------------------------

    def backward(self):
        backward(self)


def as_value(x) -> Value:
    """Wrap plain arrays/scalars as constant leaves (no gradient tracked)."""
    if isinstance(x, Value):
        return x
    return Value(x, requires_grad=False)


def concat(values, axis=0) -> Value:
    """Concatenate along `axis`; gradient splits back to the inputs."""
    values = [as_value(v) for v in values]
    out = Value(np.concatenate([v.data for v in values], axis=axis),
                tuple(values), "concat")
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def back():
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                v.accumulate(out.grad[tuple(idx)])

    out._backward = back
    return out


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into `.grad` of every reachable node.

    The root must be scalar. Nodes are visited exactly once, in reverse
    topological order. Interior nodes get fresh gradients on every call;
    leaves accumulate, so reset leaf grads between passes (repeating a pass
    after such a reset reproduces identical gradients).
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")

    topo: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node.parents:
            node.grad = None
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    root.accumulate(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
