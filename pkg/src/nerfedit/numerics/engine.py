"""Dense-array math with reverse-mode differentiation on an explicit tape.

Tensors wrap numpy arrays (float64 in tests, float32 in training runs).
Operations executed while a tape is active are recorded; ``backward`` walks
the record list in reverse and accumulates gradients into leaf tensors.
Backward closures are themselves written in terms of tape operations, so a
second differentiation pass (``create_graph=True``) is available where the
first backward graph is built from recorded ops.  This is what the R1
gradient penalty needs; it is exact for piecewise-linear networks.

Broadcasting follows the trailing-dimension rule only (numpy's rule); any
other shape combination raises ``ShapeError``.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "tensor",
    "parameter",
    "tape",
    "no_grad",
    "active_tape",
    "matmul",
    "map_unary",
    "combine",
    "reduce",
    "backward",
    "reshape",
    "transpose",
    "concat",
    "slice_",
    "broadcast_to",
    "cumsum",
    "flip",
    "affine",
    "film_sin",
    "im2col",
    "col2im",
    "detach",
    "set_check_finite",
    "rng",
    "spawn_seeds",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """NaN/Inf produced, or an exact-zero divisor."""


_STATE = threading.local()


def _st():
    if not hasattr(_STATE, "tape"):
        _STATE.tape = None
        _STATE.recording = True
        _STATE.check_finite = False
    return _STATE


def set_check_finite(flag: bool) -> None:
    """Enable per-op finiteness checks (slow; used by tests)."""
    _st().check_finite = bool(flag)


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(root_seed: int, n: int) -> list[int]:
    """Derive n independent child seeds from a root seed, deterministically."""
    ss = np.random.SeedSequence(root_seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


class Tensor:
    """N-dimensional array participating in the active tape.

    ``requires_grad`` marks leaves (parameters, optimized latents).  After
    ``backward``, every leaf on the path from the loss holds its gradient in
    ``.grad`` (a Tensor); leaves off the path keep ``.grad`` untouched.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_track")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self.node_id: Optional[int] = None
        self._track = self.requires_grad

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, track={self._track})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return combine("add", self, other)

    def __radd__(self, other):
        return combine("add", other, self)

    def __sub__(self, other):
        return combine("sub", self, other)

    def __rsub__(self, other):
        return combine("sub", other, self)

    def __mul__(self, other):
        return combine("mul", self, other)

    def __rmul__(self, other):
        return combine("mul", other, self)

    def __truediv__(self, other):
        return combine("div", self, other)

    def __rtruediv__(self, other):
        return combine("div", other, self)

    def __neg__(self):
        return map_unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Record:
    __slots__ = ("kind", "inputs", "out", "out_id", "backward_fn")

    def __init__(self, kind, inputs, out, out_id, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.out_id = out_id
        self.backward_fn = backward_fn


class Tape:
    """Ordered list of recorded operations; cleared explicitly between steps."""

    def __init__(self):
        self.records: list[_Record] = []
        self._next_id = 0
        self._produced: set[int] = set()

    def _assign_id(self, t: Tensor) -> int:
        if t.node_id is None:
            t.node_id = self._next_id
            self._next_id += 1
        return t.node_id

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, backward_fn) -> None:
        for i in inputs:
            self._assign_id(i)
        oid = self._assign_id(out)
        self._produced.add(oid)
        self.records.append(_Record(kind, tuple(inputs), out, oid, backward_fn))

    def is_leaf(self, t: Tensor) -> bool:
        return t.node_id is None or t.node_id not in self._produced

    def clear(self) -> None:
        for rec in self.records:
            for t in rec.inputs:
                t.node_id = None
            rec.out.node_id = None
        self.records.clear()
        self._produced.clear()
        self._next_id = 0

    def __enter__(self):
        st = _st()
        if st.tape is not None:
            raise RuntimeError("a tape is already active")
        st.tape = self
        return self

    def __exit__(self, *exc):
        _st().tape = None
        return False


def tape() -> Tape:
    return Tape()


def active_tape() -> Optional[Tape]:
    return _st().tape


class no_grad:
    """Context manager: ops inside run without recording."""

    def __enter__(self):
        st = _st()
        self._saved = st.recording
        st.recording = False
        return self

    def __exit__(self, *exc):
        _st().recording = self._saved
        return False


class _recording:
    def __init__(self, flag: bool):
        self.flag = flag

    def __enter__(self):
        st = _st()
        self._saved = st.recording
        st.recording = self.flag
        return self

    def __exit__(self, *exc):
        _st().recording = self._saved
        return False


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _finish(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    st = _st()
    if st.check_finite and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op '{kind}'")
    out = Tensor(out_data)
    if st.tape is not None and st.recording and any(i._track for i in inputs):
        out._track = True
        st.tape.record(kind, inputs, out, backward_fn)
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce gradient g back to `shape` after trailing-rule broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = reduce("sum", g, tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = reduce("sum", g, axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    out = a.data @ b.data

    def bwd(g: Tensor):
        ga = matmul(g, transpose(b)) if a._track else None
        gb = matmul(transpose(a), g) if b._track else None
        return ga, gb

    return _finish("matmul", out, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with one output allocation (hot path for FC layers)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine shapes disagree: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    np.add(out, b.data, out=out)

    def bwd(g: Tensor):
        gx = matmul(g, transpose(w)) if x._track else None
        gw = matmul(transpose(x), g) if w._track else None
        gb = reduce("sum", g, 0) if b._track else None
        return gx, gw, gb

    return _finish("affine", out, (x, w, b), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def map_unary(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise op with recorded derivative.

    Supported kinds: sin, cos, sigmoid, exp, abs, leaky_relu, softplus,
    sqrt, log, neg, square.  abs'(0) := 0; leaky_relu'(0) := slope.
    """
    x = _as_tensor(x)
    d = x.data
    if kind == "sin":
        out = np.sin(d)

        def bwd(g):
            return (combine("mul", g, map_unary("cos", x)),)
    elif kind == "cos":
        out = np.cos(d)

        def bwd(g):
            return (map_unary("neg", combine("mul", g, map_unary("sin", x))),)
    elif kind == "sigmoid":
        out = _sigmoid(d)

        def bwd(g):
            s = bwd.out_t
            return (combine("mul", g, combine("mul", s, combine("sub", 1.0, s))),)
    elif kind == "exp":
        out = np.exp(d)

        def bwd(g):
            return (combine("mul", g, bwd.out_t),)
    elif kind == "abs":
        out = np.abs(d)

        def bwd(g):
            sign = Tensor(np.sign(d).astype(d.dtype))
            return (combine("mul", g, sign),)
    elif kind == "leaky_relu":
        out = np.where(d > 0, d, d * d.dtype.type(slope))

        def bwd(g):
            mask = Tensor(np.where(d > 0, d.dtype.type(1.0), d.dtype.type(slope)))
            return (combine("mul", g, mask),)
    elif kind == "softplus":
        out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

        def bwd(g):
            return (combine("mul", g, map_unary("sigmoid", x)),)
    elif kind == "sqrt":
        out = np.sqrt(d)

        def bwd(g):
            return (combine("div", combine("mul", g, 0.5), bwd.out_t),)
    elif kind == "log":
        out = np.log(d)

        def bwd(g):
            return (combine("div", g, x),)
    elif kind == "neg":
        out = -d

        def bwd(g):
            return (map_unary("neg", g),)
    elif kind == "square":
        out = d * d

        def bwd(g):
            return (combine("mul", combine("mul", g, x), 2.0),)
    else:
        raise ValueError(f"unsupported unary kind: {kind!r}")

    t = _finish(kind, out, (x,), bwd)
    bwd.out_t = t
    return t


_COMBINE_FWD = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def combine(kind: str, a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    if kind not in _COMBINE_FWD:
        raise ValueError(f"unsupported combine kind: {kind!r}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from e
    if kind == "div" and np.any(b.data == 0):
        raise NumericError("division by exact zero")
    out = _COMBINE_FWD[kind](a.data, b.data)

    if kind == "add":
        def bwd(g):
            ga = _unbroadcast(g, a.shape) if a._track else None
            gb = _unbroadcast(g, b.shape) if b._track else None
            return ga, gb
    elif kind == "sub":
        def bwd(g):
            ga = _unbroadcast(g, a.shape) if a._track else None
            gb = _unbroadcast(map_unary("neg", g), b.shape) if b._track else None
            return ga, gb
    elif kind == "mul":
        def bwd(g):
            ga = _unbroadcast(combine("mul", g, b), a.shape) if a._track else None
            gb = _unbroadcast(combine("mul", g, a), b.shape) if b._track else None
            return ga, gb
    else:  # div
        def bwd(g):
            ga = _unbroadcast(combine("div", g, b), a.shape) if a._track else None
            gb = None
            if b._track:
                gb = combine("div", combine("mul", map_unary("neg", g), a),
                             combine("mul", b, b))
                gb = _unbroadcast(gb, b.shape)
            return ga, gb

    return _finish(kind, out, (a, b), bwd)


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        ax = tuple(range(x.ndim))
    else:
        raw = (axes,) if isinstance(axes, int) else tuple(axes)
        for a in raw:
            if not -x.ndim <= a < x.ndim:
                raise ShapeError(f"axis {a} out of range for shape {x.shape}")
        ax = tuple(a % x.ndim for a in raw)
    if kind == "sum":
        out = x.data.sum(axis=ax, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=ax, keepdims=keepdims)
        scale = 1.0 / max(1, int(np.prod([x.shape[a] for a in ax])))
    else:
        raise ValueError(f"unsupported reduce kind: {kind!r}")

    kept = tuple(1 if i in ax else s for i, s in enumerate(x.shape))

    def bwd(g):
        gk = g if keepdims else reshape(g, kept)
        gk = broadcast_to(gk, x.shape)
        if scale != 1.0:
            gk = combine("mul", gk, scale)
        return (gk,)

    return _finish(kind, np.asarray(out), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g):
        return (reshape(g, x.shape),)

    return _finish("reshape", out, (x,), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (transpose(g, inv),)

    return _finish("transpose", out, (x,), bwd)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape)).reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from e

    def bwd(g):
        return (_unbroadcast(g, x.shape),)

    return _finish("broadcast_to", out, (x,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def bwd(g):
        grads = []
        start = 0
        for t, s in zip(ts, sizes):
            if t._track:
                key = tuple(slice(None) if i != axis else slice(start, start + s)
                            for i in range(g.ndim))
                grads.append(slice_(g, key))
            else:
                grads.append(None)
            start += s
        return tuple(grads)

    return _finish("concat", out, tuple(ts), bwd)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (slice-tuple) indexing with gradient scatter."""
    x = _as_tensor(x)
    out = np.ascontiguousarray(x.data[key])

    def bwd(g):
        return (_unslice(g, key, x.shape),)

    return _finish("slice", out, (x,), bwd)


def _unslice(g: Tensor, key, shape) -> Tensor:
    g = _as_tensor(g)
    out = np.zeros(shape, dtype=g.data.dtype)
    out[key] = g.data

    def bwd(gg):
        return (slice_(gg, key),)

    return _finish("unslice", out, (g,), bwd)


def cumsum(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    out = np.cumsum(x.data, axis=axis)

    def bwd(g):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return _finish("cumsum", out, (x,), bwd)


def flip(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    out = np.ascontiguousarray(np.flip(x.data, axis=axis))

    def bwd(g):
        return (flip(g, axis),)

    return _finish("flip", out, (x,), bwd)


def film_sin(pre: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """sin(alpha * pre + beta), fused.

    First-order only: the backward pass materializes cos(alpha*pre+beta) as a
    constant, which is correct for one differentiation but must not appear in
    a create_graph backward (guarded).
    """
    pre = _as_tensor(pre)
    alpha = _as_tensor(alpha)
    beta = _as_tensor(beta)
    arg = alpha.data * pre.data
    np.add(arg, beta.data, out=arg)
    out = np.sin(arg)

    def bwd(g):
        if _st().recording and _st().tape is not None:
            raise RuntimeError("film_sin does not support create_graph backward")
        c = np.cos(arg)
        np.multiply(c, g.data, out=c)
        g_pre = None
        g_alpha = None
        g_beta = None
        if pre._track:
            g_pre = Tensor(c * alpha.data)
        if alpha._track:
            g_alpha = _unbroadcast(Tensor(c * pre.data), alpha.shape)
        if beta._track:
            g_beta = _unbroadcast(Tensor(c), beta.shape)
        return g_pre, g_alpha, g_beta

    return _finish("film_sin", out, (pre, alpha, beta), bwd)


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """(N,C,H,W) -> (C*kh*kw, N*OH*OW) patch matrix."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    out = cols.reshape(c * kh * kw, n * oh * ow)

    def bwd(g):
        return (col2im(g, (n, c, h, w), kh, kw, stride, pad),)

    return _finish("im2col", out, (x,), bwd)


def col2im(cols: Tensor, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of im2col: scatter-add patches back to (N,C,H,W)."""
    cols = _as_tensor(cols)
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cg = cols.data.reshape(c, kh, kw, n, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cg[:, i, j].transpose(1, 0, 2, 3)
    out = xp[:, :, pad:pad + h, pad:pad + w] if pad else xp

    def bwd(g):
        return (im2col(g, kh, kw, stride, pad),)

    return _finish("col2im", np.ascontiguousarray(out), (cols,), bwd)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _backward_collect(loss: Tensor, create_graph: bool) -> dict[int, tuple[Tensor, Tensor]]:
    """Reverse sweep; returns {leaf node id: (leaf, grad)} without assigning .grad."""
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    tp = _st().tape
    if tp is None:
        raise RuntimeError("backward requires an active tape")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite")
    if loss.node_id is None or tp.is_leaf(loss):
        if loss.requires_grad:
            tp._assign_id(loss)
            return {loss.node_id: (loss, Tensor(np.ones_like(loss.data)))}
        return {}

    grads: dict[int, Tensor] = {loss.node_id: Tensor(np.ones_like(loss.data))}
    leaf_grads: dict[int, tuple[Tensor, Tensor]] = {}

    records = list(tp.records)
    with _recording(create_graph):
        for rec in reversed(records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            in_grads = rec.backward_fn(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp._track:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(
                        f"op '{rec.kind}' produced gradient shape {gi.shape} "
                        f"for input shape {inp.shape}")
                nid = inp.node_id
                if tp.is_leaf(inp):
                    if nid in leaf_grads:
                        leaf_grads[nid] = (inp, combine("add", leaf_grads[nid][1], gi))
                    else:
                        leaf_grads[nid] = (inp, gi)
                else:
                    if nid in grads:
                        grads[nid] = combine("add", grads[nid], gi)
                    else:
                        grads[nid] = gi
    return leaf_grads


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    Leaves not on the path from the loss are left untouched (their gradient
    is zero by convention).  Calling backward twice accumulates, which makes
    sum-of-backwards equal backward-of-sum.
    """
    leaf_grads = _backward_collect(loss, create_graph)
    for leaf, g in leaf_grads.values():
        if leaf.requires_grad:
            if leaf.grad is None:
                leaf.grad = g if create_graph else Tensor(g.data.copy())
            else:
                leaf.grad = combine("add", leaf.grad, g) if create_graph \
                    else Tensor(leaf.grad.data + g.data)


def grad_of(loss: Tensor, wrt: Tensor, create_graph: bool = False) -> Tensor:
    """Gradient of a scalar loss w.r.t. one leaf; no .grad side effects."""
    leaf_grads = _backward_collect(loss, create_graph)
    if wrt.node_id is not None and wrt.node_id in leaf_grads:
        return leaf_grads[wrt.node_id][1]
    return Tensor(np.zeros_like(wrt.data))
