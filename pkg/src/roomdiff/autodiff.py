"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation builds a node holding its output value, its parent nodes
and a closure that maps the output gradient to parent gradients.  Calling
``backward()`` on a scalar node walks the graph in reverse topological
order and accumulates gradients; ``Parameter`` leaves keep their ``grad``
buffer across the walk so optimizers can consume it.

Heavy sparse kernels (convolution, normalization, attention) register as
single fused nodes with hand-written backward rules; see sparse_ops.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Parameter", "Adam", "Module"]


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph construction helpers ------------------------------------

    @staticmethod
    def as_tensor(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x))

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __add__(self, other):
        other = Tensor.as_tensor(other)
        return Tensor(self.data + other.data, (self, other),
                      lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor.as_tensor(other)
        return Tensor(self.data - other.data, (self, other),
                      lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return Tensor.as_tensor(other) - self

    def __mul__(self, other):
        other = Tensor.as_tensor(other)
        return Tensor(self.data * other.data, (self, other),
                      lambda g: (_unbroadcast(g * other.data, self.shape),
                                 _unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = Tensor.as_tensor(other)

        def bwd(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 2:  # vector @ matrix
                return g @ b.T, np.outer(a, g)
            if a.ndim == 2 and b.ndim == 1:  # matrix @ vector
                return np.outer(g, b), a.T @ g
            return g @ b.T, a.T @ g

        return Tensor(self.data @ other.data, (self, other), bwd)

    def __pow__(self, k: float):
        return Tensor(self.data ** k, (self,),
                      lambda g: (g * k * self.data ** (k - 1),))

    def sum(self):
        return Tensor(self.data.sum(), (self,),
                      lambda g: (np.broadcast_to(g, self.shape).astype(self.dtype),))

    def mean(self):
        n = self.data.size
        return Tensor(self.data.mean(), (self,),
                      lambda g: (np.broadcast_to(g / n, self.shape).astype(self.dtype),))

    def reshape(self, *shape):
        return Tensor(self.data.reshape(*shape), (self,),
                      lambda g: (g.reshape(self.shape),))

    # -- backward pass ---------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter) or node._backward is None:
                if node.grad is None:
                    node.grad = g.astype(node.dtype, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == tuple(shape):
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Parameter(Tensor):
    """Trainable leaf; gradients accumulate across backward passes."""

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=np.float32))

    def zero_grad(self):
        self.grad = None


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s
    return Tensor(out, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return Tensor(np.where(m, x.data, 0.0), (x,), lambda g: (g * m,))


def concat_cols(tensors) -> Tensor:
    """Concatenate (N, C_i) feature matrices along channels."""
    tensors = [Tensor.as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return Tensor(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), bwd)


def vslice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-d tensor."""

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return Tensor(x.data[start:stop], (x,), bwd)


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        return (gx,)

    return Tensor(x.data[rows], (x,), bwd)


def scatter_rows(values: Tensor, rows: np.ndarray, base: np.ndarray) -> Tensor:
    """Write value rows into a constant base array (rows must be unique)."""
    rows = np.asarray(rows)
    out = np.array(base, copy=True)
    out[rows] = values.data
    return Tensor(out, (values,), lambda g: (g[rows],))


class Adam:
    """Adam with bias correction; state keyed per parameter."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float32)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class Module:
    """Lightweight parameter container with named traversal."""

    def named_parameters(self, prefix: str = ""):
        def walk(path, value):
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield from walk(f"{path}.{i}", item)

        for name, value in vars(self).items():
            yield from walk(f"{prefix}{name}", value)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = arr.copy()
