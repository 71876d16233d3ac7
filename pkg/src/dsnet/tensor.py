"""Dense float32 tensors with reverse-mode automatic differentiation.

Design notes:

* Storage is a numpy array.  Fresh tensors are contiguous row-major; a
  prefix slice along axis 0 is a zero-copy view of the parent buffer,
  which is the property the sliced layers rely on.
* The tape is a per-output closure graph.  ``backward()`` on a scalar
  walks the graph in reverse topological order and accumulates into
  ``.grad`` (additive; call ``zero_grad`` between steps).
* Everything defaults to float32.  A ``dtype`` override exists so the
  finite-difference test oracles can run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "SliceSpec",
    "ShapeError",
    "BoundsError",
    "UsageError",
    "no_grad",
    "concat",
    "conv2d",
    "global_avg_pool",
    "matmul",
    "pad2d",
    "pad_last",
    "tslice",
    "softmax",
    "log_softmax",
    "cross_entropy",
]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

# Output channels are computed in fixed-width GEMM chunks so that a prefix
# slice of a wider route is bitwise-identical to the narrow route: BLAS
# switches micro-kernels with the matrix width, which perturbs the reduction
# rounding, so the per-call width must not depend on the route.
NEST_CHUNK = 16


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class BoundsError(IndexError):
    """A slice or index falls outside the tensor's extent."""


class UsageError(RuntimeError):
    """The operation was called in a way its contract forbids."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def strides(self):
        """Per-axis strides in elements (not bytes)."""
        item = self.data.itemsize
        return tuple(s // item for s in self.data.strides)

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # ------------------------------------------------------------------
    # autodiff plumbing
    # ------------------------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=None)

    def backward(self):
        """Populate ``.grad`` of every reachable ``requires_grad`` tensor.

        Only valid on scalars.  Repeated calls accumulate (grads are added,
        never overwritten).
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=None)

    def __add__(self, other):
        o = self._coerce(other)
        return _node(
            self.data + o.data,
            (self, o),
            lambda g: (_sum_to_shape(g, self.shape), _sum_to_shape(g, o.shape)),
        )

    __radd__ = __add__

    def __mul__(self, other):
        o = self._coerce(other)
        return _node(
            self.data * o.data,
            (self, o),
            lambda g: (
                _sum_to_shape(g * o.data, self.shape),
                _sum_to_shape(g * self.data, o.shape),
            ),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        o = self._coerce(other)
        return _node(
            self.data - o.data,
            (self, o),
            lambda g: (_sum_to_shape(g, self.shape), _sum_to_shape(-g, o.shape)),
        )

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __truediv__(self, other):
        o = self._coerce(other)
        return _node(
            self.data / o.data,
            (self, o),
            lambda g: (
                _sum_to_shape(g / o.data, self.shape),
                _sum_to_shape(-g * self.data / (o.data * o.data), o.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __pow__(self, p: float):
        if not isinstance(p, (int, float)):
            raise UsageError("only scalar exponents are supported")
        return _node(
            self.data**p,
            (self,),
            lambda g: (g * p * self.data ** (p - 1),),
        )

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def __getitem__(self, key):
        """Basic (view) indexing with gradient routed to the selected region."""
        view = self.data[key]

        def bwd(g):
            gp = np.zeros_like(self.data)
            gp[key] += g
            return (gp,)

        return _node(view, (self,), bwd)

    # ------------------------------------------------------------------
    # shape ops
    # ------------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _node(
            self.data.reshape(shape),
            (self,),
            lambda g: (g.reshape(old),),
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _node(
            self.data.transpose(axes),
            (self,),
            lambda g: (g.transpose(inv),),
        )

    def swapaxes(self, a: int, b: int):
        return _node(
            self.data.swapaxes(a, b),
            (self,),
            lambda g: (g.swapaxes(a, b),),
        )

    # ------------------------------------------------------------------
    # reductions
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).astype(self.data.dtype),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, self.shape).astype(self.data.dtype),)

        return _node(out, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ------------------------------------------------------------------
    # pointwise nonlinearities
    # ------------------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))

    def log(self):
        return _node(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _node(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        mask = self.data > 0
        return _node(
            np.where(mask, self.data, 0).astype(self.data.dtype),
            (self,),
            lambda g: (g * mask,),
        )

    def gelu(self):
        x = self.data
        phi = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
        out = (x * phi).astype(self.data.dtype)

        def bwd(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            return (g * (phi + x * pdf),)

        return _node(out, (self,), bwd)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


# ----------------------------------------------------------------------
# slicing
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SliceSpec:
    """Half-open strided range along one axis: indices start, start+step, ... < end."""

    axis: int
    start: int
    end: int
    step: int = 1


def tslice(t: Tensor, spec: SliceSpec) -> Tensor:
    """Slice ``t`` along ``spec.axis``.

    An axis-0 step-1 slice shares the parent's storage (zero copy, offset
    ``start`` rows in); any other case is a strided numpy view.  Gradient
    flows back only into the selected region.
    """
    if not 0 <= spec.axis < t.ndim:
        raise BoundsError(f"axis {spec.axis} out of range for ndim {t.ndim}")
    n = t.shape[spec.axis]
    if spec.step < 1:
        raise BoundsError(f"step must be >= 1, got {spec.step}")
    if not (0 <= spec.start < spec.end <= n):
        raise BoundsError(
            f"slice [{spec.start}:{spec.end}] out of bounds on axis {spec.axis} "
            f"(size {n})"
        )
    key = (slice(None),) * spec.axis + (slice(spec.start, spec.end, spec.step),)
    return t[key]


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting on leading axes."""
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs at least 1-D operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return (g * bd, g * ad)
        if ad.ndim == 1:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = ad[:, None] * g[..., None, :]
            return (_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape))
        if bd.ndim == 1:
            ga = np.matmul(g[..., :, None], bd[None, :])
            gb = np.matmul(np.swapaxes(ad, -1, -2), g[..., None])[..., 0]
            return (_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape))
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape))

    return _node(out, (a, b), bwd)


def concat(tensors: list, axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bwd)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, width)
    sl = (slice(None),) * (x.ndim - 2) + (
        slice(pad, out.shape[-2] - pad),
        slice(pad, out.shape[-1] - pad),
    )
    return _node(out, (x,), lambda g: (g[sl],))


def pad_last(x: Tensor, total: int) -> Tensor:
    """Zero-pad the last axis up to length ``total``."""
    cur = x.shape[-1]
    if cur == total:
        return x
    if cur > total:
        raise ShapeError(f"cannot pad axis of size {cur} down to {total}")
    width = [(0, 0)] * (x.ndim - 1) + [(0, total - cur)]
    out = np.pad(x.data, width)
    sl = (slice(None),) * (x.ndim - 1) + (slice(0, cur),)
    return _node(out, (x,), lambda g: (g[sl],))


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------
def _conv_windows(xp: np.ndarray, K: int, stride: int, dilation: int):
    span = (K - 1) * dilation + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span, span), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def _chunked_gemm_t(cols: np.ndarray, w2d: np.ndarray) -> np.ndarray:
    """cols @ w2d.T with the output dim processed in NEST_CHUNK slabs."""
    n = w2d.shape[0]
    if n <= NEST_CHUNK:
        return cols @ w2d.T
    parts = [
        cols @ w2d[i : i + NEST_CHUNK].T for i in range(0, n, NEST_CHUNK)
    ]
    return np.concatenate(parts, axis=-1)


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D convolution, NCHW layout, weight [C_out, C_in/groups, K, K].

    Output spatial size follows floor((H + 2p - d*(K-1) - 1)/s) + 1.
    Differentiable in x, w and bias.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cg, K, K2 = w.shape
    if K != K2:
        raise ShapeError("only square kernels are supported")
    if C % groups != 0 or O % groups != 0:
        raise ShapeError(
            f"channels not divisible by groups: C_in={C}, C_out={O}, groups={groups}"
        )
    if Cg != C // groups:
        raise ShapeError(
            f"weight expects {Cg} channels per group, input provides {C // groups}"
        )
    span = (K - 1) * dilation + 1
    if H + 2 * padding < span or W + 2 * padding < span:
        raise ShapeError(
            f"kernel span {span} does not fit input {H}x{W} with padding {padding}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(xp, K, stride, dilation)  # [B, C, Ho, Wo, K, K]
    Ho, Wo = win.shape[2], win.shape[3]
    wd = w.data

    depthwise = groups == C and Cg == 1 and O == C
    if depthwise:
        out = np.einsum("bchwij,cij->bchw", win, wd[:, 0], optimize=True)
        cols = None
    elif groups == 1:
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            B * Ho * Wo, C * K * K
        )
        out = (
            _chunked_gemm_t(cols, wd.reshape(O, -1))
            .reshape(B, Ho, Wo, O)
            .transpose(0, 3, 1, 2)
        )
    else:
        cols = []
        chunks = []
        og = O // groups
        for gi in range(groups):
            wg = win[:, gi * Cg : (gi + 1) * Cg]
            cg = np.ascontiguousarray(wg.transpose(0, 2, 3, 1, 4, 5)).reshape(
                B * Ho * Wo, Cg * K * K
            )
            cols.append(cg)
            wslice = wd[gi * og : (gi + 1) * og].reshape(og, -1)
            chunks.append(
                _chunked_gemm_t(cg, wslice)
                .reshape(B, Ho, Wo, og)
                .transpose(0, 3, 1, 2)
            )
        out = np.concatenate(chunks, axis=1)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        og = O // groups
        # weight gradient
        if depthwise:
            gw = np.einsum("bchwij,bchw->cij", win, g, optimize=True)[:, None]
        elif groups == 1:
            gmat = g.transpose(1, 0, 2, 3).reshape(O, -1)
            gw = (gmat @ cols).reshape(w.shape)
        else:
            parts = []
            for gi in range(groups):
                gg = g[:, gi * og : (gi + 1) * og].transpose(1, 0, 2, 3).reshape(og, -1)
                parts.append((gg @ cols[gi]).reshape(og, Cg, K, K))
            gw = np.concatenate(parts, axis=0)
        # input gradient: scatter each kernel tap
        gxp = np.zeros_like(xp)
        for i in range(K):
            hi = slice(i * dilation, i * dilation + stride * Ho, stride)
            for j in range(K):
                wj = slice(j * dilation, j * dilation + stride * Wo, stride)
                if depthwise:
                    contrib = g * wd[:, 0, i, j][None, :, None, None]
                elif groups == 1:
                    contrib = np.einsum("bohw,oc->bchw", g, wd[:, :, i, j], optimize=True)
                else:
                    segs = []
                    for gi in range(groups):
                        segs.append(
                            np.einsum(
                                "bohw,oc->bchw",
                                g[:, gi * og : (gi + 1) * og],
                                wd[gi * og : (gi + 1) * og, :, i, j],
                                optimize=True,
                            )
                        )
                    contrib = np.concatenate(segs, axis=1)
                gxp[:, :, hi, wj] += contrib
        if padding:
            gx = gxp[:, :, padding : padding + H, padding : padding + W]
        else:
            gx = gxp
        gb = None
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean over the trailing H, W axes of an NCHW (or CHW) map."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects >= 3 dims, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    out = x.data.mean(axis=(-2, -1))
    inv = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to(g[..., None, None] * inv, x.shape).astype(x.dtype),)

    return _node(out, (x,), bwd)


# ----------------------------------------------------------------------
# classification heads
# ----------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        sm = np.exp(out)
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bwd)


def cross_entropy(p: Tensor, q, eps: float = 1e-12, reduction: str = "mean") -> Tensor:
    """-sum_i q_i log p_i over the last axis.

    ``p`` holds probabilities.  The target ``q`` is always treated as a
    constant: gradients never flow into it, matching the distillation
    convention where soft labels are detached.
    """
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=p.dtype)
    if qd.shape != p.shape:
        raise ShapeError(f"target shape {qd.shape} != prediction shape {p.shape}")
    clipped = np.clip(p.data, eps, None)
    per = -(qd * np.log(clipped)).sum(axis=-1)
    if reduction == "mean":
        scale = 1.0 / max(per.size, 1)
        val = per.sum() * scale
    elif reduction == "sum":
        scale = 1.0
        val = per.sum()
    else:
        raise UsageError(f"unknown reduction {reduction!r}")

    def bwd(g):
        mask = (p.data >= eps).astype(p.dtype)
        gp = -qd / clipped * mask * g * scale
        return (gp, None)

    qpar = q if isinstance(q, Tensor) else Tensor(qd, dtype=None)
    return _node(np.asarray(val, dtype=p.dtype), (p, qpar), bwd)
