"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Every operation evaluates eagerly on numpy arrays.  When at least one operand
is attached to a :class:`Tape`, the operation is appended to that tape as a
node holding its inputs, its output, a forward closure (used by
:meth:`Tape.replay`) and a vector-Jacobian product.  Operands that are not on
the tape are treated as constants.

Non-differentiable operators (``sign`` and the L-infinity projection) accept a
:class:`SurrogateMode`.  The mode never touches the forward value; it only
selects the derivative used in the backward pass.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ConfigurationError, DimensionError

DTYPE = np.float64


class SurrogateMode(str, enum.Enum):
    EXACT = "exact"
    SOFT_SIGN = "soft-sign"
    TANH = "tanh"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, value) -> "SurrogateMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigurationError(f"unknown surrogate mode {value!r}") from None


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    forward: Callable[..., np.ndarray] | None
    vjp: Callable | None
    saved: tuple[np.ndarray, ...] = ()
    mode: SurrogateMode | None = None
    name: str | None = None


@dataclass
class Tape:
    """Append-only record of operations, topologically ordered by construction."""

    nodes: list[Node] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        data = _as_array(value)
        self.nodes.append(Node("leaf", (), None, None, name=name))
        self.values.append(data)
        return Tensor(data, self, len(self.nodes) - 1)

    def _record(self, kind, inputs, forward, vjp, saved, out, mode=None) -> int:
        for i in inputs:
            if i >= len(self.nodes):
                raise ArgumentError("node input does not precede the node")
        self.nodes.append(Node(kind, tuple(inputs), forward, vjp, saved, mode))
        self.values.append(out)
        return len(self.nodes) - 1

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node forward from the leaves.

        Leaves keep their recorded values unless overridden in ``leaf_values``.
        """
        leaf_values = leaf_values or {}
        out: list[np.ndarray] = []
        for idx, node in enumerate(self.nodes):
            if node.forward is None:
                out.append(_as_array(leaf_values.get(idx, self.values[idx])))
            else:
                out.append(node.forward(*[out[i] for i in node.inputs]))
        return out


class Tensor:
    """An n-dimensional float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        where = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{where})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=DTYPE)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _apply(kind: str, operands: Sequence, fn, vjp, mode: SurrogateMode | None = None) -> Tensor:
    """Evaluate ``fn`` and, if any operand is tracked, record it.

    ``vjp(g, vals, out, needs)`` returns one gradient (or None) per operand;
    ``needs[k]`` says whether operand ``k`` is tracked.
    """
    tensors = [as_tensor(o) for o in operands]
    vals = [t.data for t in tensors]
    out = fn(*vals)
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise ArgumentError("operands belong to different tapes")
    tape = next(iter(tapes.values()))
    tracked = [k for k, t in enumerate(tensors) if t.tape is not None]
    needs = tuple(t.tape is not None for t in tensors)

    def forward(*tracked_vals):
        full = list(vals)
        for k, v in zip(tracked, tracked_vals):
            full[k] = v
        return fn(*full)

    def node_vjp(g, saved, result):
        grads = vjp(g, saved, result, needs)
        return [grads[k] for k in tracked]

    idx = tape._record(kind, [tensors[k].node for k in tracked], forward, node_vjp,
                       tuple(vals), out, mode)
    return Tensor(out, tape, idx)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    def vjp(g, vals, out, needs):
        return [_unbroadcast(g, vals[0].shape) if needs[0] else None,
                _unbroadcast(g, vals[1].shape) if needs[1] else None]
    return _apply("add", (a, b), np.add, vjp)


def sub(a, b) -> Tensor:
    def vjp(g, vals, out, needs):
        return [_unbroadcast(g, vals[0].shape) if needs[0] else None,
                _unbroadcast(-g, vals[1].shape) if needs[1] else None]
    return _apply("sub", (a, b), np.subtract, vjp)


def mul(a, b) -> Tensor:
    def vjp(g, vals, out, needs):
        return [_unbroadcast(g * vals[1], vals[0].shape) if needs[0] else None,
                _unbroadcast(g * vals[0], vals[1].shape) if needs[1] else None]
    return _apply("mul", (a, b), np.multiply, vjp)


def tsum(x, axis=None) -> Tensor:
    def fn(v):
        return np.asarray(v.sum(axis=axis), dtype=DTYPE)

    def vjp(g, vals, out, needs):
        shape = vals[0].shape
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, shape).copy()]
    return _apply("sum", (x,), fn, vjp)


def mean(x) -> Tensor:
    n = as_tensor(x).size
    return mul(tsum(x), 1.0 / n)


def reshape(x, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g, vals, out, needs):
        return [g.reshape(vals[0].shape)]
    return _apply("reshape", (x,), lambda v: v.reshape(shape), vjp)


# -- unary operators with optional surrogate backward ----------------------

UNARY_KINDS = ("relu", "sign", "softsign", "tanh")


def _sign_derivative(v: np.ndarray, mode: SurrogateMode) -> np.ndarray:
    if mode is SurrogateMode.EXACT:
        return np.zeros_like(v)
    if mode is SurrogateMode.SOFT_SIGN:
        return 1.0 / (1.0 + np.abs(v)) ** 2
    if mode is SurrogateMode.TANH:
        return 1.0 - np.tanh(v) ** 2
    return np.ones_like(v)


def apply_unary(kind: str, x, mode: SurrogateMode | str = SurrogateMode.EXACT) -> Tensor:
    """Elementwise ``relu``, ``sign``, ``softsign`` or ``tanh``.

    Only ``sign`` consults ``mode``: its forward is always the exact sign
    (with sign(0) = 0) and the backward is 0, the soft-sign derivative, the
    tanh derivative or 1.
    """
    mode = SurrogateMode.parse(mode)
    if kind == "relu":
        def fn(v):
            return np.maximum(v, 0.0)

        def vjp(g, vals, out, needs):
            return [g * (vals[0] > 0)]
    elif kind == "sign":
        fn = np.sign

        def vjp(g, vals, out, needs):
            return [g * _sign_derivative(vals[0], mode)]
    elif kind == "softsign":
        def fn(v):
            return v / (1.0 + np.abs(v))

        def vjp(g, vals, out, needs):
            return [g / (1.0 + np.abs(vals[0])) ** 2]
    elif kind == "tanh":
        fn = np.tanh

        def vjp(g, vals, out, needs):
            return [g * (1.0 - out ** 2)]
    else:
        raise ConfigurationError(f"unknown unary kind {kind!r}")
    return _apply(kind, (x,), fn, vjp, mode if kind == "sign" else None)


def relu(x) -> Tensor:
    return apply_unary("relu", x)


def sign(x, mode=SurrogateMode.EXACT) -> Tensor:
    return apply_unary("sign", x, mode)


def softsign(x) -> Tensor:
    return apply_unary("softsign", x)


def tanh(x) -> Tensor:
    return apply_unary("tanh", x)


def project_linf(x, center, delta: float, mode: SurrogateMode | str = SurrogateMode.EXACT) -> Tensor:
    """Clamp ``x - center`` into ``[-delta, delta]`` and add ``center`` back.

    Backward w.r.t. ``x`` is 1 inside the ball.  Outside it is 0 in exact
    mode, ``1 / (1 + |x - center|)**2`` in soft-sign/tanh mode and 1 in
    identity mode.  The derivative w.r.t. ``center`` is one minus that.
    """
    mode = SurrogateMode.parse(mode)
    if as_tensor(x).shape != as_tensor(center).shape:
        raise DimensionError(f"projection shapes differ: {as_tensor(x).shape} vs {as_tensor(center).shape}")
    if not delta > 0:
        raise ArgumentError("projection radius must be positive")

    def fn(v, c):
        return c + np.clip(v - c, -delta, delta)

    def vjp(g, vals, out, needs):
        d = vals[0] - vals[1]
        inside = np.abs(d) < delta
        if mode is SurrogateMode.EXACT:
            outside = 0.0
        elif mode is SurrogateMode.IDENTITY:
            outside = 1.0
        else:
            outside = 1.0 / (1.0 + np.abs(d)) ** 2
        s = np.where(inside, 1.0, outside)
        return [g * s if needs[0] else None, g * (1.0 - s) if needs[1] else None]
    return _apply("project_linf", (x, center), fn, vjp, mode)


def clip(x, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Range clamp with the exact (piecewise 0/1) derivative."""
    def vjp(g, vals, out, needs):
        return [g * ((vals[0] >= lo) & (vals[0] <= hi))]
    return _apply("clip", (x,), lambda v: np.clip(v, lo, hi), vjp)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    sa, sb = as_tensor(a).shape, as_tensor(b).shape
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise DimensionError(f"cannot multiply {sa} by {sb}")

    def vjp(g, vals, out, needs):
        return [g @ vals[1].T if needs[0] else None,
                vals[0].T @ g if needs[1] else None]
    return _apply("matmul", (a, b), np.matmul, vjp)


def _conv_geometry(xshape, kshape, stride, padding):
    if len(xshape) != 4 or len(kshape) != 4:
        raise DimensionError(f"conv2d expects NCHW input and FCkk kernel, got {xshape}, {kshape}")
    n, c, h, w = xshape
    f, kc, kh, kw = kshape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {kc}")
    if stride < 1 or padding < 0:
        raise ArgumentError("conv2d needs stride >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d output would be empty")
    return n, c, h, w, f, kh, kw, ho, wo


def _im2col(x, kh, kw, stride, padding, ho, wo):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = x.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(x, k, stride, padding):
    n, c, h, w, f, kh, kw, ho, wo = _conv_geometry(x.shape, k.shape, stride, padding)
    cols = _im2col(x, kh, kw, stride, padding, ho, wo)
    out = cols @ k.reshape(f, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_input_grad(gy, k, xshape, stride, padding):
    """Adjoint of :func:`conv2d_forward` w.r.t. its input (col2im)."""
    n, c, h, w, f, kh, kw, ho, wo = _conv_geometry(xshape, k.shape, stride, padding)
    gmat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    gcols = (gmat @ k.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        gx = gx[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(gx)


def conv2d_kernel_grad(x, gy, kshape, stride, padding):
    n, c, h, w, f, kh, kw, ho, wo = _conv_geometry(x.shape, kshape, stride, padding)
    cols = _im2col(x, kh, kw, stride, padding, ho, wo)
    gmat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    return (gmat.T @ cols).reshape(kshape)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct cross-correlation of an NCHW batch with an FCkk kernel."""
    _conv_geometry(as_tensor(x).shape, as_tensor(kernel).shape, stride, padding)

    def vjp(g, vals, out, needs):
        xv, kv = vals
        return [conv2d_input_grad(g, kv, xv.shape, stride, padding) if needs[0] else None,
                conv2d_kernel_grad(xv, g, kv.shape, stride, padding) if needs[1] else None]
    return _apply("conv2d", (x, kernel),
                  lambda xv, kv: conv2d_forward(xv, kv, stride, padding), vjp)


def conv2d_transpose(gy, kernel, input_shape, stride: int = 1, padding: int = 0) -> Tensor:
    """The input-adjoint of conv2d as a recorded, differentiable operation."""
    input_shape = tuple(input_shape)

    def vjp(g, vals, out, needs):
        gyv, kv = vals
        return [conv2d_forward(g, kv, stride, padding) if needs[0] else None,
                conv2d_kernel_grad(g, gyv, kv.shape, stride, padding) if needs[1] else None]
    return _apply("conv2d_transpose", (gy, kernel),
                  lambda gyv, kv: conv2d_input_grad(gyv, kv, input_shape, stride, padding), vjp)


# -- losses ----------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z) -> Tensor:
    """Row-wise softmax over the last axis."""
    def fn(v):
        return np.exp(_log_softmax(v))

    def vjp(g, vals, out, needs):
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]
    return _apply("softmax", (z,), fn, vjp)


def _targets(logits_shape, target) -> np.ndarray:
    t = np.atleast_1d(np.asarray(target))
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise ArgumentError("targets must be integer class indices")
        t = t.astype(np.int64)
    classes = logits_shape[-1]
    rows = 1 if len(logits_shape) == 1 else logits_shape[0]
    if t.shape != (rows,):
        raise DimensionError(f"expected {rows} targets, got shape {t.shape}")
    if np.any(t < 0) or np.any(t >= classes):
        raise ArgumentError(f"target class out of range [0, {classes})")
    return t


def softmax_cross_entropy(logits, target, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer targets.

    ``logits`` is a length-C vector with a scalar target, or an N x C batch
    with N targets.  ``reduction`` is ``"mean"`` or ``"sum"`` over rows.
    """
    shape = as_tensor(logits).shape
    if len(shape) not in (1, 2):
        raise DimensionError(f"logits must be 1-D or 2-D, got {shape}")
    t = _targets(shape, target)
    if reduction not in ("mean", "sum"):
        raise ConfigurationError(f"unknown reduction {reduction!r}")

    def fn(z):
        z2 = z.reshape(-1, shape[-1])
        nll = -_log_softmax(z2)[np.arange(len(t)), t]
        total = nll.sum()
        return np.asarray(total / len(t) if reduction == "mean" else total, dtype=DTYPE)

    def vjp(g, vals, out, needs):
        z2 = vals[0].reshape(-1, shape[-1])
        p = np.exp(_log_softmax(z2))
        p[np.arange(len(t)), t] -= 1.0
        if reduction == "mean":
            p /= len(t)
        return [(g * p).reshape(shape)]
    return _apply("softmax_cross_entropy", (logits,), fn, vjp)


# -- reverse pass ----------------------------------------------------------

def backward(tape: Tape, root: Tensor | int) -> dict[int, np.ndarray]:
    """Reverse accumulation from a scalar root; returns node id -> gradient.

    Only nodes that lie on a path to the root appear in the result.
    """
    idx = root.node if isinstance(root, Tensor) else int(root)
    if isinstance(root, Tensor) and root.tape is not tape:
        raise ArgumentError("root is not recorded on this tape")
    if idx is None or idx >= len(tape.nodes):
        raise ArgumentError("root node is not on the tape")
    if tape.values[idx].size != 1:
        raise ArgumentError(f"backward root must be scalar, got shape {tape.values[idx].shape}")
    grads: dict[int, np.ndarray] = {idx: np.ones_like(tape.values[idx])}
    for i in range(idx, -1, -1):
        g = grads.get(i)
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        ins = node.inputs
        for j, gj in zip(ins, node.vjp(g, node.saved, tape.values[i])):
            if gj is None:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
    return grads


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to each tensor in ``wrt`` (zeros if unreached)."""
    if root.tape is None:
        raise ArgumentError("root is not recorded on a tape")
    grads = backward(root.tape, root)
    return [grads.get(t.node, np.zeros_like(t.data)) for t in wrt]


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|).

    ``fn`` maps a tensor to a scalar tensor; it is evaluated once on a tape
    and 2 * size times untracked for the central differences.
    """
    x0 = _as_array(point).copy()
    tape = Tape()
    leaf = tape.leaf(x0)
    (g_ad,) = grad(fn(leaf), [leaf])
    flat = x0.reshape(-1)
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(fn(Tensor(xp.reshape(x0.shape))).data)
        fm = float(fn(Tensor(xm.reshape(x0.shape))).data)
        g_fd[i] = (fp - fm) / (2 * step)
    err = np.abs(g_ad.reshape(-1) - g_fd) / np.maximum(1.0, np.abs(g_fd))
    return float(err.max()) if err.size else 0.0
