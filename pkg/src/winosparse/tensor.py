"""Dense float64 tensors and a small reverse-mode autodiff graph.

Covers exactly what a small CNN needs: elementwise arithmetic, matmul,
valid cross-correlation, non-overlapping max pooling, ReLU and softmax
cross-entropy. Graphs are static: build once (``placeholder`` leaves for
data, ``parameter`` leaves for weights), then call ``forward(root, {...})``
per batch and ``backward(root)`` to populate gradients. Values are float64
numpy arrays in row-major order; scalars are 0-d arrays.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Node",
    "parameter",
    "placeholder",
    "constant",
    "identity",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "relu",
    "conv2d",
    "maxpool2d",
    "reshape",
    "sum_all",
    "mean_all",
    "square",
    "softmax_cross_entropy",
    "forward",
    "backward",
    "conv2d_forward",
    "maxpool2d_forward",
    "relu_forward",
    "log_softmax",
]


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# array kernels (shared with the deployment engine)
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid 2-D cross-correlation.

    x is [C,H,W] or [N,C,H,W]; w is [D,C,r,r]. The output pixel (d,u,v) is
    sum_{c,a,b} x[c,u+a,v+b] * w[d,c,a,b].
    """
    x = _f64(x)
    w = _f64(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(
            f"conv2d: need [N,C,H,W] input and [D,C,r,r] filters, "
            f"got {x.shape} and {w.shape}"
        )
    n, c, h, wi = x.shape
    d, cf, kh, kw = w.shape
    if cf != c:
        raise ValueError(f"conv2d: input has {c} channels, filters expect {cf}")
    if kh > h or kw > wi:
        raise ValueError(f"conv2d: filter {kh}x{kw} larger than input {h}x{wi}")
    ho, wo = h - kh + 1, wi - kw + 1
    cols = (
        sliding_window_view(x, (kh, kw), axis=(2, 3))
        .transpose(0, 2, 3, 1, 4, 5)
        .reshape(n * ho * wo, c * kh * kw)
    )
    out = (cols @ w.reshape(d, -1).T).reshape(n, ho, wo, d).transpose(0, 3, 1, 2)
    return out[0] if squeeze else out


def _conv2d_backward(x, w, g):
    n, c, h, wi = x.shape
    d, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wi - kw + 1
    cols = (
        sliding_window_view(x, (kh, kw), axis=(2, 3))
        .transpose(0, 2, 3, 1, 4, 5)
        .reshape(n * ho * wo, c * kh * kw)
    )
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, d)
    dw = (gm.T @ cols).reshape(w.shape)
    dcols = (gm @ w.reshape(d, -1)).reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros_like(x)
    for a in range(kh):
        for b in range(kw):
            dx[:, :, a : a + ho, b : b + wo] += dcols[:, :, :, :, a, b].transpose(
                0, 3, 1, 2
            )
    return dx, dw


def maxpool2d_forward(x: np.ndarray, k: int) -> np.ndarray:
    """Non-overlapping k-by-k max pooling with stride k.

    Trailing rows/columns that do not fill a window are dropped.
    """
    x = _f64(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ValueError(f"maxpool2d: window {k} larger than input {h}x{w}")
    xw = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)
    out = xw.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k).max(axis=-1)
    return out[0] if squeeze else out


def _maxpool2d_backward(x, k, g):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    flat = (
        x[:, :, : ho * k, : wo * k]
        .reshape(n, c, ho, k, wo, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, k * k)
    )
    idx = flat.argmax(axis=-1)  # ties: first (lowest) position wins
    dflat = np.zeros_like(flat)
    np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
    dx = np.zeros_like(x)
    dx[:, :, : ho * k, : wo * k] = (
        dflat.reshape(n, c, ho, wo, k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * k, wo * k)
    )
    return dx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(_f64(x), 0.0)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = _f64(z)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class Node:
    """One vertex of the static computation graph.

    ``value`` caches the forward result; ``grad`` has the same shape and
    holds d(root)/d(this) after ``backward``. ``meta`` carries op
    parameters (pool size, reshape target, ...).
    """

    __slots__ = ("op", "inputs", "value", "grad", "name", "meta", "_order")

    def __init__(self, op, inputs=(), value=None, name=None, meta=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.name = name
        self.meta = meta if meta is not None else {}
        self._order = None

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        return f"Node(op={self.op!r}, shape={shape})"


def parameter(value, name: str | None = None) -> Node:
    """Trainable leaf. The array is held by reference so in-place optimizer
    updates are visible to subsequent forward passes."""
    return Node("parameter", value=_f64(value), name=name)


def constant(value) -> Node:
    return Node("constant", value=_f64(value))


def placeholder(name: str) -> Node:
    """Named data leaf, bound via the ``inputs`` mapping of ``forward``."""
    return Node("placeholder", name=name)


_LEAF_OPS = ("parameter", "constant", "placeholder")


def identity(x: Node) -> Node:
    return Node("identity", (x,))


def add(a: Node, b: Node) -> Node:
    return Node("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    return Node("sub", (a, b))


def neg(a: Node) -> Node:
    return Node("neg", (a,))


def mul(a: Node, b: Node) -> Node:
    return Node("mul", (a, b))


def scale(a: Node, k: float) -> Node:
    return Node("scale", (a,), meta={"k": float(k)})


def matmul(a: Node, b: Node) -> Node:
    return Node("matmul", (a, b))


def relu(x: Node) -> Node:
    return Node("relu", (x,))


def conv2d(x: Node, w: Node) -> Node:
    return Node("conv2d", (x, w))


def maxpool2d(x: Node, k: int) -> Node:
    return Node("maxpool2d", (x,), meta={"k": int(k)})


def reshape(x: Node, shape) -> Node:
    return Node("reshape", (x,), meta={"shape": tuple(shape)})


def sum_all(x: Node) -> Node:
    return Node("sum_all", (x,))


def mean_all(x: Node) -> Node:
    return Node("mean_all", (x,))


def square(x: Node) -> Node:
    return mul(x, x)


def softmax_cross_entropy(logits: Node, labels: Node) -> Node:
    """Mean cross-entropy of softmax(logits) against integer labels.

    logits: [N,K] (or [K] for a single sample); labels: int array [N]
    (or scalar). Returns a 0-d node.
    """
    return Node("softmax_xent", (logits, labels))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _fw_identity(nd, xs):
    return xs[0]


def _fw_add(nd, xs):
    _same_shape("add", xs[0], xs[1])
    return xs[0] + xs[1]


def _fw_sub(nd, xs):
    _same_shape("sub", xs[0], xs[1])
    return xs[0] - xs[1]


def _fw_neg(nd, xs):
    return -xs[0]


def _fw_mul(nd, xs):
    _same_shape("mul", xs[0], xs[1])
    return xs[0] * xs[1]


def _fw_scale(nd, xs):
    return nd.meta["k"] * xs[0]


def _fw_matmul(nd, xs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _fw_relu(nd, xs):
    return np.maximum(xs[0], 0.0)


def _fw_conv2d(nd, xs):
    return conv2d_forward(xs[0], xs[1])


def _fw_maxpool2d(nd, xs):
    return maxpool2d_forward(xs[0], nd.meta["k"])


def _fw_reshape(nd, xs):
    return xs[0].reshape(nd.meta["shape"])


def _fw_sum_all(nd, xs):
    return np.asarray(xs[0].sum())


def _fw_mean_all(nd, xs):
    return np.asarray(xs[0].mean())


def _fw_softmax_xent(nd, xs):
    z, y = xs
    if z.ndim == 1:
        z = z[None]
    y = np.atleast_1d(y).astype(np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ValueError(
            f"softmax_xent: logits {xs[0].shape} incompatible with labels {xs[1].shape}"
        )
    lp = log_softmax(z)
    return np.asarray(-lp[np.arange(z.shape[0]), y].mean())


_FORWARD = {
    "identity": _fw_identity,
    "add": _fw_add,
    "sub": _fw_sub,
    "neg": _fw_neg,
    "mul": _fw_mul,
    "scale": _fw_scale,
    "matmul": _fw_matmul,
    "relu": _fw_relu,
    "conv2d": _fw_conv2d,
    "maxpool2d": _fw_maxpool2d,
    "reshape": _fw_reshape,
    "sum_all": _fw_sum_all,
    "mean_all": _fw_mean_all,
    "softmax_xent": _fw_softmax_xent,
}


def _bw_identity(nd, g, xs, y):
    return (g,)


def _bw_add(nd, g, xs, y):
    return (g, g)


def _bw_sub(nd, g, xs, y):
    return (g, -g)


def _bw_neg(nd, g, xs, y):
    return (-g,)


def _bw_mul(nd, g, xs, y):
    return (g * xs[1], g * xs[0])


def _bw_scale(nd, g, xs, y):
    return (nd.meta["k"] * g,)


def _bw_matmul(nd, g, xs, y):
    return (g @ xs[1].T, xs[0].T @ g)


def _bw_relu(nd, g, xs, y):
    # subgradient at exactly 0 is 0
    return (g * (xs[0] > 0.0),)


def _bw_conv2d(nd, g, xs, y):
    x, w = xs
    if x.ndim == 3:
        dx, dw = _conv2d_backward(x[None], w, g[None])
        return (dx[0], dw)
    return _conv2d_backward(x, w, g)


def _bw_maxpool2d(nd, g, xs, y):
    x = xs[0]
    if x.ndim == 3:
        return (_maxpool2d_backward(x[None], nd.meta["k"], g[None])[0],)
    return (_maxpool2d_backward(x, nd.meta["k"], g),)


def _bw_reshape(nd, g, xs, y):
    return (g.reshape(xs[0].shape),)


def _bw_sum_all(nd, g, xs, y):
    return (np.full_like(xs[0], float(g)),)


def _bw_mean_all(nd, g, xs, y):
    return (np.full_like(xs[0], float(g) / xs[0].size),)


def _bw_softmax_xent(nd, g, xs, y):
    z, lab = xs
    single = z.ndim == 1
    if single:
        z = z[None]
    lab = np.atleast_1d(lab).astype(np.int64)
    p = np.exp(log_softmax(z))
    p[np.arange(z.shape[0]), lab] -= 1.0
    dz = p * (float(g) / z.shape[0])
    return (dz[0] if single else dz, None)  # no gradient for labels


_BACKWARD = {
    "identity": _bw_identity,
    "add": _bw_add,
    "sub": _bw_sub,
    "neg": _bw_neg,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "matmul": _bw_matmul,
    "relu": _bw_relu,
    "conv2d": _bw_conv2d,
    "maxpool2d": _bw_maxpool2d,
    "reshape": _bw_reshape,
    "sum_all": _bw_sum_all,
    "mean_all": _bw_mean_all,
    "softmax_xent": _bw_softmax_xent,
}


def _toposort(root: Node) -> list[Node]:
    if root._order is not None:
        return root._order
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        nd, done = stack.pop()
        if done:
            order.append(nd)
            continue
        if id(nd) in seen:
            continue
        seen.add(id(nd))
        stack.append((nd, True))
        for inp in nd.inputs:
            stack.append((inp, False))
    root._order = order
    return order


def forward(root: Node, inputs: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Evaluate the graph under ``root``, binding named placeholders from
    ``inputs``, and return the root value. All intermediate values are
    cached on the nodes."""
    inputs = inputs or {}
    for nd in _toposort(root):
        if nd.op == "placeholder":
            if nd.name in inputs:
                nd.value = np.asarray(inputs[nd.name])
            if nd.value is None:
                raise ValueError(f"forward: placeholder {nd.name!r} is unbound")
        elif nd.op in ("parameter", "constant"):
            pass
        else:
            nd.value = _FORWARD[nd.op](nd, [i.value for i in nd.inputs])
    return root.value


def backward(root: Node) -> None:
    """Populate ``grad`` on every node reachable from ``root``.

    The root must be scalar (0-d) and ``forward`` must have run already.
    Gradients accumulate across fan-out; leaves that received no gradient
    keep ``grad`` None.
    """
    if root.value is None:
        raise RuntimeError("backward: run forward first")
    if np.ndim(root.value) != 0:
        raise ValueError(f"backward: root must be scalar, got shape {np.shape(root.value)}")
    order = _toposort(root)
    for nd in order:
        nd.grad = None
    root.grad = np.ones(())
    for nd in reversed(order):
        if nd.grad is None or nd.op in _LEAF_OPS:
            continue
        gs = _BACKWARD[nd.op](nd, nd.grad, [i.value for i in nd.inputs], nd.value)
        for inp, g in zip(nd.inputs, gs):
            if g is None:
                continue
            inp.grad = g if inp.grad is None else inp.grad + g
