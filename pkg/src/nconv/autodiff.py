"""Dense-tensor engine with reverse-mode gradients on an explicit tape.

Implements exactly the operation set the densification pipeline needs:
elementwise arithmetic (with an epsilon-guarded division), log/exp/square/
abs/softplus/relu, channel concatenation, 2x nearest-neighbour upsampling,
2x max pooling with indices, crop/reshape plumbing, scalar summation and a
2-D cross-correlation. All data is float64; every recorded op has an
analytic backward rule and can be checked against central finite
differences with :func:`finite_diff_check`.

Concurrency: a tape and the tensors recorded on it are owned by a single
thread. Distinct tapes share no mutable state and may run in parallel.
"""
from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class AutodiffError(Exception):
    """Base class for tensor-engine errors."""


class ShapeMismatchError(AutodiffError):
    def __init__(self, op: str, shape_a, shape_b, detail: str = ""):
        self.shapes = (tuple(shape_a), tuple(shape_b))
        msg = f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(AutodiffError):
    """Argument outside an op's mathematical domain (e.g. log of a non-positive)."""


class NonFiniteGradientError(AutodiffError):
    def __init__(self, op: str):
        super().__init__(f"non-finite gradient produced by op '{op}'")
        self.op = op


# Every differentiable primitive registers itself here; the gradient test
# suite iterates this mapping and must cover each entry.
_OP_REGISTRY: dict[str, Callable] = {}


def _register(name: str):
    def deco(fn):
        _OP_REGISTRY[name] = fn
        return fn

    return deco


def registered_ops() -> dict[str, Callable]:
    return dict(_OP_REGISTRY)


def register_external_op(name: str, fn: Callable) -> None:
    """Register a primitive defined outside this module (e.g. normalized conv)."""
    _OP_REGISTRY[name] = fn


def sigmoid(x: Array) -> Array:
    """Numerically stable logistic function (softplus derivative)."""
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class DiffTensor:
    """A float64 array plus an optional gradient buffer.

    ``grad`` is absent until a backward pass deposits into it. Tensors that
    participate in gradient computation carry a reference to their tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "tid", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None,
                 tid: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        self.tid = tid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar (division is deliberately explicit: use ops `div`)
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
        return smul(self, -1.0)


def const(data) -> DiffTensor:
    """Wrap raw data as a non-differentiable tensor."""
    return DiffTensor(data, requires_grad=False, tape=None)


class _Node:
    __slots__ = ("op", "input_ids", "output_ids", "output_shapes", "backward")

    def __init__(self, op, input_ids, output_ids, output_shapes, backward):
        self.op = op
        self.input_ids = input_ids
        self.output_ids = output_ids
        self.output_shapes = output_shapes
        self.backward = backward


class Tape:
    """Ordered record of executed ops, replayable in reverse for gradients.

    Nodes are appended in execution order, so every node's inputs precede
    it; `backward` walks the list once in reverse and accumulates into the
    participating tensors' grad buffers. Replaying backward again without
    re-running the forward pass reproduces identical gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        # weak references break the tape <-> tensor cycle, so dropping the
        # last strong reference to an intermediate frees its buffers promptly
        self._tensors: "weakref.WeakValueDictionary[int, DiffTensor]" = \
            weakref.WeakValueDictionary()
        self._next_id = 0

    def _adopt(self, t: DiffTensor) -> None:
        t.tape = self
        t.tid = self._next_id
        self._next_id += 1
        self._tensors[t.tid] = t

    def leaf(self, data, requires_grad: bool = True) -> DiffTensor:
        t = DiffTensor(data, requires_grad=requires_grad)
        self._adopt(t)
        return t

    def record(self, op: str, inputs: Sequence[DiffTensor],
               outputs: Sequence[DiffTensor],
               backward: Callable[..., tuple[Array | None, ...]]) -> None:
        """Append a node; ``backward`` maps output grads to per-input grads."""
        for out in outputs:
            out.requires_grad = True
            self._adopt(out)
        self.nodes.append(_Node(
            op,
            tuple(t.tid for t in inputs),
            tuple(t.tid for t in outputs),
            tuple(t.data.shape for t in outputs),
            backward,
        ))

    def backward(self, loss: DiffTensor) -> None:
        """Reverse-accumulate gradients of a scalar loss into leaf/grad buffers."""
        if loss.tape is not self:
            raise AutodiffError("loss tensor does not belong to this tape")
        if loss.data.shape != ():
            raise AutodiffError(
                f"backward requires a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, Array] = {loss.tid: np.ones(())}
        for node in reversed(self.nodes):
            gouts = [grads.get(oid) for oid in node.output_ids]
            if all(g is None for g in gouts):
                continue
            gouts = [g if g is not None else np.zeros(shape)
                     for g, shape in zip(gouts, node.output_shapes)]
            gins = node.backward(*gouts)
            for tid, g in zip(node.input_ids, gins):
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradientError(node.op)
                if tid in grads:
                    grads[tid] = grads[tid] + g
                else:
                    grads[tid] = g
        for tid, t in self._tensors.items():
            if not t.requires_grad:
                continue
            g = grads.get(tid)
            t.grad = np.zeros_like(t.data) if g is None else np.asarray(g)


def _as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else const(x)


def _common_tape(op: str, tensors: Sequence[DiffTensor]) -> Tape | None:
    tapes = {t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise AutodiffError(f"{op}: operands belong to different tapes")
    return tapes.pop() if tapes else None


def apply_op(op: str, inputs: Sequence[DiffTensor], out_data,
           backward_builder) -> DiffTensor | tuple[DiffTensor, ...]:
    """Create output tensor(s) and record the node when gradients are needed.

    ``backward_builder`` is called lazily (only when recording) with the
    per-input needs-grad flags and must return the backward rule.
    """
    tape = _common_tape(op, inputs)
    multi = isinstance(out_data, tuple)
    outs = tuple(DiffTensor(d) for d in (out_data if multi else (out_data,)))
    needs = [t.requires_grad for t in inputs]
    if tape is not None and any(needs):
        tape.record(op, inputs, outs, backward_builder(needs))
    return outs if multi else outs[0]


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that were broadcast to reach ``g``'s shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Array, b: Array) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

@_register("add")
def add(x, y) -> DiffTensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast("add", x.data, y.data)

    def build(needs):
        xs, ys = x.data.shape, y.data.shape

        def bwd(g):
            return (_unbroadcast(g, xs) if needs[0] else None,
                    _unbroadcast(g, ys) if needs[1] else None)

        return bwd

    return apply_op("add", (x, y), x.data + y.data, build)


@_register("sub")
def sub(x, y) -> DiffTensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast("sub", x.data, y.data)

    def build(needs):
        xs, ys = x.data.shape, y.data.shape

        def bwd(g):
            return (_unbroadcast(g, xs) if needs[0] else None,
                    _unbroadcast(-g, ys) if needs[1] else None)

        return bwd

    return apply_op("sub", (x, y), x.data - y.data, build)


@_register("mul")
def mul(x, y) -> DiffTensor:
    """Hadamard (elementwise) product with numpy broadcasting."""
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast("mul", x.data, y.data)
    xd, yd = x.data, y.data

    def build(needs):
        def bwd(g):
            return (_unbroadcast(g * yd, xd.shape) if needs[0] else None,
                    _unbroadcast(g * xd, yd.shape) if needs[1] else None)

        return bwd

    return apply_op("mul", (x, y), xd * yd, build)


@_register("div")
def div(x, y, eps: float = 1e-8) -> DiffTensor:
    """Epsilon-guarded division x / (y + eps).

    The default guard keeps all-zero denominators finite; call sites with a
    provably positive denominator pass ``eps=0.0`` for exact division.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast("div", x.data, y.data)
    den = y.data + eps
    out = x.data / den

    def build(needs):
        xd, ys = x.data, y.data.shape

        def bwd(g):
            gx = _unbroadcast(g / den, xd.shape) if needs[0] else None
            gy = _unbroadcast(-g * xd / (den * den), ys) if needs[1] else None
            return gx, gy

        return bwd

    return apply_op("div", (x, y), out, build)


@_register("smul")
def smul(x, k: float) -> DiffTensor:
    x = _as_tensor(x)
    k = float(k)

    def build(needs):
        def bwd(g):
            return (g * k,)

        return bwd

    return apply_op("smul", (x,), x.data * k, build)


@_register("log")
def log(x) -> DiffTensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError(f"log: non-positive argument (min {x.data.min():g})")

    def build(needs):
        xd = x.data

        def bwd(g):
            return (g / xd,)

        return bwd

    return apply_op("log", (x,), np.log(x.data), build)


@_register("exp")
def exp(x) -> DiffTensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def build(needs):
        def bwd(g):
            return (g * out,)

        return bwd

    return apply_op("exp", (x,), out, build)


@_register("square")
def square(x) -> DiffTensor:
    x = _as_tensor(x)

    def build(needs):
        xd = x.data

        def bwd(g):
            return (2.0 * xd * g,)

        return bwd

    return apply_op("square", (x,), x.data * x.data, build)


@_register("abs")
def absval(x) -> DiffTensor:
    x = _as_tensor(x)

    def build(needs):
        s = np.sign(x.data)

        def bwd(g):
            return (g * s,)

        return bwd

    return apply_op("abs", (x,), np.abs(x.data), build)


@_register("softplus")
def softplus(x) -> DiffTensor:
    """log(1 + exp(x)), evaluated overflow-free."""
    x = _as_tensor(x)
    out = np.logaddexp(0.0, x.data)

    def build(needs):
        s = sigmoid(x.data)

        def bwd(g):
            return (g * s,)

        return bwd

    return apply_op("softplus", (x,), out, build)


@_register("relu")
def relu(x) -> DiffTensor:
    x = _as_tensor(x)

    def build(needs):
        m = (x.data > 0.0).astype(np.float64)

        def bwd(g):
            return (g * m,)

        return bwd

    return apply_op("relu", (x,), np.maximum(x.data, 0.0), build)


@_register("sum")
def sum_all(x) -> DiffTensor:
    x = _as_tensor(x)

    def build(needs):
        shape = x.data.shape

        def bwd(g):
            return (np.broadcast_to(g, shape).astype(np.float64),)

        return bwd

    return apply_op("sum", (x,), np.sum(x.data), build)


@_register("reshape")
def reshape(x, shape: tuple[int, ...]) -> DiffTensor:
    x = _as_tensor(x)
    shape = tuple(shape)

    def build(needs):
        orig = x.data.shape

        def bwd(g):
            return (g.reshape(orig),)

        return bwd

    return apply_op("reshape", (x,), x.data.reshape(shape), build)


@_register("concat")
def concat_channels(parts: Sequence) -> DiffTensor:
    """Concatenate (C, H, W) tensors along the channel axis."""
    parts = [_as_tensor(p) for p in parts]
    first = parts[0].data
    for p in parts[1:]:
        if p.data.ndim != first.ndim or p.data.shape[1:] != first.shape[1:]:
            raise ShapeMismatchError("concat", first.shape, p.data.shape,
                                     "spatial extents must match")
    out = np.concatenate([p.data for p in parts], axis=0)

    def build(needs):
        sizes = [p.data.shape[0] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            pieces = np.split(g, splits, axis=0)
            return tuple(piece if need else None
                         for piece, need in zip(pieces, needs))

        return bwd

    return apply_op("concat", tuple(parts), out, build)


@_register("upsample2")
def upsample2_nearest(x) -> DiffTensor:
    """Nearest-neighbour 2x upsampling of the trailing two axes."""
    x = _as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def build(needs):
        def bwd(g):
            lead = g.shape[:-2]
            h2, w2 = g.shape[-2], g.shape[-1]
            blocks = g.reshape(*lead, h2 // 2, 2, w2 // 2, 2)
            return (blocks.sum(axis=(-3, -1)),)

        return bwd

    return apply_op("upsample2", (x,), out, build)


@_register("crop2")
def crop2(x, h: int, w: int) -> DiffTensor:
    """Keep the leading h x w window of the trailing two axes."""
    x = _as_tensor(x)
    if h > x.data.shape[-2] or w > x.data.shape[-1]:
        raise ShapeMismatchError("crop2", x.data.shape, (h, w),
                                 "crop target exceeds input")
    out = np.ascontiguousarray(x.data[..., :h, :w])

    def build(needs):
        shape = x.data.shape

        def bwd(g):
            full = np.zeros(shape)
            full[..., :h, :w] = g
            return (full,)

        return bwd

    return apply_op("crop2", (x,), out, build)


@_register("maxpool2")
def maxpool2(x) -> tuple[DiffTensor, Array]:
    """2x2 stride-2 max pooling; also returns flat per-cell argmax indices.

    Trailing two axes must be even. The backward pass routes the incoming
    gradient only to each cell's argmax entry (first in row-major order on
    ties), so the routed total equals the incoming total.
    """
    x = _as_tensor(x)
    h, w = x.data.shape[-2], x.data.shape[-1]
    if h % 2 or w % 2:
        raise ShapeMismatchError("maxpool2", x.data.shape, (h // 2, w // 2),
                                 "trailing extents must be even")
    lead = x.data.shape[:-2]
    cells = (x.data.reshape(*lead, h // 2, 2, w // 2, 2)
             .swapaxes(-3, -2)
             .reshape(*lead, h // 2, w // 2, 4))
    idx = np.argmax(cells, axis=-1)
    out = np.take_along_axis(cells, idx[..., None], axis=-1)[..., 0]

    def build(needs):
        def bwd(g):
            gc = np.zeros(cells.shape)
            np.put_along_axis(gc, idx[..., None], g[..., None], axis=-1)
            gx = (gc.reshape(*lead, h // 2, w // 2, 2, 2)
                  .swapaxes(-3, -2)
                  .reshape(*lead, h, w))
            return (gx,)

        return bwd

    return apply_op("maxpool2", (x,), out, build), idx


# ---------------------------------------------------------------------------
# 2-D cross-correlation
# ---------------------------------------------------------------------------

def _im2col(xp: Array, k: int, stride: int, ho: int, wo: int) -> Array:
    """Patch matrix (C*k*k, ho*wo) of a padded (C, H, W) array."""
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(cols: Array, xp_shape: tuple[int, ...], k: int, stride: int,
            ho: int, wo: int) -> Array:
    """Scatter-add the inverse of :func:`_im2col` (returns padded-shape grad)."""
    g = np.zeros(xp_shape)
    cg = cols.reshape(xp_shape[0], k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            g[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cg[:, i, j]
    return g


def corr2_forward(x: Array, w: Array, stride: int, padding: int):
    """Raw cross-correlation of (C,H,W) with (O,C,k,k); returns (out, cols, padded shape)."""
    c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    k = kh
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    cols = _im2col(xp, k, stride, ho, wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, ho, wo)
    return out, cols, xp.shape


def corr2_input_grad(g_out: Array, w: Array, xp_shape, stride: int,
                     padding: int) -> Array:
    o, c, k, _ = w.shape
    ho, wo = g_out.shape[-2], g_out.shape[-1]
    cols_g = w.reshape(o, -1).T @ g_out.reshape(o, -1)
    gxp = _col2im(cols_g, xp_shape, k, stride, ho, wo)
    if padding:
        return gxp[:, padding:-padding, padding:-padding]
    return gxp


def corr2_kernel_grad(g_out: Array, cols: Array, kshape) -> Array:
    o = kshape[0]
    return (g_out.reshape(o, -1) @ cols.T).reshape(kshape)


@_register("conv2d")
def conv2d(x, kernel, stride: int = 1, padding: int | None = None) -> DiffTensor:
    """Cross-correlate a (C_in, H, W) tensor with a (C_out, C_in, k, k) kernel.

    ``padding`` defaults to (k-1)/2, the shape-preserving mode for stride 1.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeMismatchError("conv2d", x.data.shape, kernel.data.shape,
                                 "expected (C,H,W) input and (O,C,k,k) kernel")
    if kernel.data.shape[1] != x.data.shape[0]:
        raise ShapeMismatchError("conv2d", x.data.shape, kernel.data.shape,
                                 "input channels do not match kernel channels")
    k = kernel.data.shape[2]
    if k != kernel.data.shape[3] or k % 2 == 0:
        raise AutodiffError(f"conv2d: kernel must be square with odd size, got "
                            f"{kernel.data.shape[2:]}")
    if stride not in (1, 2):
        raise AutodiffError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding is None:
        padding = (k - 1) // 2
    out, cols, xp_shape = corr2_forward(x.data, kernel.data, stride, padding)

    def build(needs):
        kd = kernel.data

        def bwd(g):
            gx = (corr2_input_grad(g, kd, xp_shape, stride, padding)
                  if needs[0] else None)
            gk = corr2_kernel_grad(g, cols, kd.shape) if needs[1] else None
            return gx, gk

        return bwd

    return apply_op("conv2d", (x, kernel), out, build)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def _rel_err(analytic: Array, numeric: Array) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_check(f: Callable[[DiffTensor], DiffTensor], x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one tensor to a scalar tensor and must be re-runnable on
    plain (non-taped) tensors. The relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8) elementwise.
    """
    x0 = np.array(x.data if isinstance(x, DiffTensor) else x, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x0.copy())
    tape.backward(f(leaf))
    analytic = leaf.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(const(x0)).data)
        flat[i] = orig - h
        fm = float(f(const(x0)).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    return _rel_err(analytic, numeric)


def finite_diff_check_many(f: Callable[[list[DiffTensor]], DiffTensor],
                           xs: Sequence[Array], h: float = 1e-5) -> float:
    """Like :func:`finite_diff_check` for a function of several tensors."""
    arrays = [np.array(a, dtype=np.float64) for a in xs]
    tape = Tape()
    leaves = [tape.leaf(a.copy()) for a in arrays]
    tape.backward(f(leaves))
    worst = 0.0
    for pi, a in enumerate(arrays):
        flat = a.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f([const(arr) for arr in arrays]).data)
            flat[i] = orig - h
            fm = float(f([const(arr) for arr in arrays]).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        worst = max(worst, _rel_err(leaves[pi].grad.reshape(-1), numeric))
    return worst
