"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad=True`` records a
:class:`GraphNode` holding its parents and a closure mapping the upstream
gradient to one gradient per parent.  :func:`backward` walks that graph once
in reverse topological order and frees it; :func:`grad` does the same for an
explicit list of targets and keeps the graph alive by default, which is what
the importance-map computation needs (gradient of one scalar with respect to
an intermediate activation, followed later by the real training backward).

Data is held in numpy arrays.  Only first-order derivatives are supported:
backward rules operate on raw arrays and never record new graph nodes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, GraphError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class GraphNode:
    __slots__ = ("op", "parents", "backward", "consumed")

    def __init__(self, op: str, parents: tuple["Tensor", ...], backward: BackwardFn):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.consumed = False

    def __repr__(self):
        return f"GraphNode({self.op}, parents={len(self.parents)}, consumed={self.consumed})"


class Tensor:
    """An n-dimensional float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: GraphNode | None = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...],
                backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._node = GraphNode(op, parents, backward) if out.requires_grad else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, "add", (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, "sub", (a, b),
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._result(ad * bd, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._result(out, "div", (a, b), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    gate = a.data > 0  # subgradient at 0 is 0
    return Tensor._result(np.where(gate, a.data, 0.0), "relu", (a,), lambda g: (g * gate,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(~(a.data > 0)):
        raise DomainError("log: argument has non-positive entries; "
                          "use log_softmax for log-probabilities")
    x = a.data
    return Tensor._result(np.log(x), "log", (a,), lambda g: (g / x,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    return Tensor._result(np.where(keep, a.data, lo), "clamp_min", (a,), lambda g: (g * keep,))


def detach(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.data = a.data  # values bit-equal; tensors are never mutated in place
    out.requires_grad = False
    out.grad = None
    out._node = None
    return out


# -- reductions and shape ops --------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), "transpose", (a,),
                          lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(a.data[index]), "getitem", (a,), bw)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                # fold batch dims into rows: one GEMM instead of a batched product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._result(out, "matmul", (a, b), bw)


def conv1d(x, w, b, stride: int = 1) -> Tensor:
    """1-D convolution over time of a channels-last input.

    ``x`` is (B, S, C_in), ``w`` is (kernel, C_in, C_out), ``b`` is (C_out,).
    The left pad is fixed at ``(kernel - 1) // 2`` and the right side is
    zero-padded as needed, so the output has ``ceil(S / stride)`` frames and
    output frame k only depends on input frames up to ``k*stride + kernel//2``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3 or w.ndim != 3 or b.ndim != 1:
        raise ShapeError(f"conv1d: expected x (B,S,C), w (k,C,O), b (O,), "
                         f"got {x.shape}, {w.shape}, {b.shape}")
    kernel, cin, cout = w.shape
    if x.shape[2] != cin or b.shape[0] != cout:
        raise ShapeError(f"conv1d: channel mismatch between x {x.shape}, w {w.shape}, b {b.shape}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    B, S, _ = x.shape
    K = -(-S // stride)
    left = (kernel - 1) // 2
    right = max((K - 1) * stride + kernel - left - S, 0)
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    idx = np.arange(K)[:, None] * stride + np.arange(kernel)[None, :]
    cols = xp[:, idx, :].reshape(B, K, kernel * cin)
    wm = w.data.reshape(kernel * cin, cout)
    out = cols @ wm + b.data

    def bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = (cols.reshape(-1, kernel * cin).T @ g.reshape(-1, cout)).reshape(kernel, cin, cout)
        if b.requires_grad:
            gb = g.sum(axis=(0, 1))
        if x.requires_grad:
            gcols = (g @ wm.T).reshape(B, K, kernel, cin)
            gxp = np.zeros_like(xp)
            for j in range(kernel):
                gxp[:, j:j + stride * (K - 1) + 1:stride, :] += gcols[:, :, j, :]
            gx = gxp[:, left:left + S, :]
        return gx, gw, gb

    return Tensor._result(out, "conv1d", (x, w, b), bw)


# -- normalisation --------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, "softmax", (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, "log_softmax", (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape} needs gamma/beta of shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gbeta

    return Tensor._result(out, "layer_norm", (x, gamma, beta), bw)


def max_with_argmax(a, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis`` plus the selected index (lowest index on ties).

    The gradient reaches only the selected entries.
    """
    a = as_tensor(a)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._result(out, "max", (a,), bw), idx.squeeze(axis)


def row_norm(a) -> Tensor:
    """Euclidean norm over the last axis; the gradient at a zero vector is 0."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=-1))
    x = a.data

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[..., None], x / safe[..., None], 0.0) * g[..., None],)

    return Tensor._result(n, "row_norm", (a,), bw)


def row_normalize(a, eps: float = 1e-8) -> Tensor:
    """Scale each last-axis vector to unit length; vectors with norm < eps map to 0."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    live = n >= eps
    safe = np.where(live, n, 1.0)
    u = np.where(live, x / safe, 0.0)

    def bw(g):
        proj = (g * u).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - u * proj) / safe, 0.0),)

    return Tensor._result(u, "row_normalize", (a,), bw)


# -- graph traversal ------------------------------------------------------

def _topological(root: Tensor, stop: set[int] | None = None) -> list[Tensor]:
    """Tensors reachable from root, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None and not (stop and id(t) in stop):
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def _check_root(root: Tensor) -> None:
    if root.size != 1:
        raise GraphError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward: root is not attached to any graph "
                         "(no input requires grad, or it was detached)")


def _propagate(order: list[Tensor], root: Tensor, retain_graph: bool,
               targets: dict[int, Tensor] | None) -> dict[int, np.ndarray]:
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    found: dict[int, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if targets is not None and id(t) in targets:
            found[id(t)] = g
            continue
        node = t._node
        if node is None:
            if targets is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if node.consumed:
            raise GraphError(f"backward: graph through '{node.op}' was already consumed; "
                             "re-run the forward pass")
        for p, gp in zip(node.parents, node.backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
        if not retain_graph:
            node.consumed = True
            node.backward = None
    return found


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    _check_root(root)
    _propagate(_topological(root), root, retain_graph, None)


def grad(root: Tensor, inputs: Sequence[Tensor], retain_graph: bool = True) -> list[np.ndarray]:
    """Gradients of scalar ``root`` with respect to ``inputs`` (leaves or intermediates).

    Nothing is accumulated into ``.grad``.  Inputs unreachable from root get zeros.
    The traversal stops at the inputs, so only the subgraph between root and
    the inputs is visited.
    """
    _check_root(root)
    targets = {id(t): t for t in inputs}
    order = _topological(root, stop=set(targets))
    reach: set[int] = set()
    for t in order:
        if id(t) in targets or (t._node is not None and
                                any(id(p) in reach for p in t._node.parents)):
            reach.add(id(t))
    order = [t for t in order if id(t) in reach]
    if id(root) not in reach:
        return [np.zeros(t.shape) for t in inputs]
    found = _propagate(order, root, retain_graph, targets)
    return [found.get(id(t), np.zeros(t.shape)) for t in inputs]


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over elements of |analytic - central difference| / max(1, |analytic|).

    ``f`` must be deterministic and return a scalar tensor.
    """
    if h <= 0:
        raise DomainError(f"finite_diff_check: step must be positive, got {h}")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    y = f(xt)
    if y.requires_grad:
        analytic = grad(y, [xt], retain_graph=False)[0]
    else:
        analytic = np.zeros_like(base)
    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - (fp - fm) / (2 * h)) / max(1.0, abs(a)))
    return worst

