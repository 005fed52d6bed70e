"""Dense float64 tensor engine with tape-based reverse-mode autodiff.

Just enough primitives to express a small NIN-style conv trunk, FC branches
and the training losses. Images follow the (batch, channels, height, width)
convention; everything is row-major float64. No broadcasting beyond bias-add
over the channel/feature axis.

Ops record onto the innermost active ``Tape`` (a context manager) whenever any
input is tracked. ``backward`` walks the tape once in reverse.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of ops; inputs of every node precede it."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        assert _TAPE_STACK and _TAPE_STACK[-1] is self
        _TAPE_STACK.pop()
        return False


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp  # callable(out_grad) -> tuple of grads aligned with inputs


class Tensor:
    """Dense n-d float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a tensor from array-like data, rejecting non-finite values."""
    t = Tensor(data, requires_grad=requires_grad)
    if not np.all(np.isfinite(t.data)):
        raise NumericError("non-finite values in tensor input")
    return t


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t.tape is tape and t.node_id is not None)


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    # single-pass finiteness screen: any NaN/Inf propagates into the sum
    if not np.isfinite(out_data.sum()):
        raise NumericError(f"non-finite output of op '{op}'")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out.tape = tape
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar root."""
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    tape = root.tape
    if tape is None or root.node_id is None:
        raise ContractError("backward root is not recorded on any tape")
    adj: list[np.ndarray | None] = [None] * (root.node_id + 1)
    adj[root.node_id] = np.ones_like(root.data)
    for i in range(root.node_id, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = tape.nodes[i]
        for t, gt in zip(node.inputs, node.vjp(g)):
            if gt is None:
                continue
            if t.tape is tape and t.node_id is not None:
                j = t.node_id
                adj[j] = gt if adj[j] is None else adj[j] + gt
            elif t.requires_grad:
                t.grad = gt.copy() if t.grad is None else t.grad + gt
        adj[i] = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _finish("matmul", ad @ bd, (a, b), vjp)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    n, c, h, w = xp.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return win.reshape(n, c * kh * kw, oh * ow), oh, ow


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, symmetric zero padding, stride 1 or 2."""
    if stride not in (1, 2):
        raise ContractError(f"conv2d: stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ContractError(f"conv2d: negative pad {pad}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d: rank-4 input and kernel required, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d: channel mismatch, input {x.shape} kernel {w.shape}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        # pointwise conv: a plain channel-mixing matmul, no im2col needed
        w2 = w.data.reshape(co, c)
        xf = x.data.reshape(n, c, h * wd)
        out = np.matmul(w2, xf).reshape(n, co, h, wd)

        def vjp1x1(g):
            g2 = g.reshape(n, co, h * wd)
            gw = np.tensordot(g2, xf, axes=([0, 2], [0, 2])).reshape(w.shape)
            gx = np.matmul(w2.T, g2).reshape(x.shape)
            return gx, gw

        return _finish("conv2d", out, (x, w), vjp1x1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    w2 = w.data.reshape(co, -1)
    out = np.matmul(w2, cols).reshape(n, co, oh, ow)

    def vjp(g):
        g2 = g.reshape(n, co, oh * ow)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return _finish("conv2d", out, (x, w), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at exactly 0
    return _finish("relu", x.data * mask, (x,), lambda g: (g * mask,))


def maxpool2d(x: Tensor, k: int, s: int) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d: rank-4 input required, got {x.shape}")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise DimensionError(f"maxpool2d: window {k} larger than input {x.shape}")
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    s0, s1, s2, s3 = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data, (n, c, oh, ow, k, k), (s0, s1, s2 * s, s3 * s, s2, s3))
    flat = win.reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x.data)
        ni, ci, oi, oj = np.indices(idx.shape)
        hi = oi * s + idx // k
        wi = oj * s + idx % k
        np.add.at(gx, (ni, ci, hi, wi), g)
        return (gx,)

    return _finish("maxpool2d", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: rank-4 input required, got {x.shape}")
    n, c, h, w = x.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _finish("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape add, or bias-add of a vector over the feature/channel axis."""
    if a.shape == b.shape:
        return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return _finish("add", a.data + b.data, (a, b),
                       lambda g: (g, g.sum(axis=0)))
    if b.data.ndim == 1 and a.data.ndim == 4 and a.shape[1] == b.shape[0]:
        return _finish("add", a.data + b.data[None, :, None, None], (a, b),
                       lambda g: (g, g.sum(axis=(0, 2, 3))))
    raise DimensionError(f"add: incompatible shapes {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} - {b.shape}")
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("mul_scalar: non-finite scalar")
    return _finish("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul: incompatible shapes {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _finish("elementwise_mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data
    return _finish("log", out, (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _finish("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"sum: axis {axis} out of range for shape {a.shape}")

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _finish("sum", a.data.sum(axis=axis), (a,), vjp)


def mean(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size
    return _finish("mean", np.asarray(a.data.mean()), (a,),
                   lambda g: (np.broadcast_to(g * inv, a.shape).copy(),))


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows: rank-2 input required, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _finish("softmax_rows", p, (a,), vjp)


def flatten(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError(f"flatten: rank >= 2 required, got {a.shape}")
    n = a.shape[0]
    return _finish("flatten", a.data.reshape(n, -1), (a,),
                   lambda g: (g.reshape(a.shape),))


# dispatcher + census for the gradient-check suite
PRIMITIVE_OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "global_avg_pool": global_avg_pool,
    "add": add,
    "sub": sub,
    "mul_scalar": mul_scalar,
    "elementwise_mul": elementwise_mul,
    "log": log,
    "exp": exp,
    "sum": tsum,
    "mean": mean,
    "softmax_rows": softmax_rows,
    "flatten": flatten,
}


def forward_op(kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    if kind not in PRIMITIVE_OPS:
        raise ContractError(f"unknown op kind '{kind}'")
    return PRIMITIVE_OPS[kind](*inputs, **kwargs)
