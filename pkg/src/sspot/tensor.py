"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the detector needs are provided. There is no general
broadcasting: binary ops require identical shapes, or a Python/numpy constant
on one side.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True

# Upper bound on the temporary produced by one tap of a convolution.
_CHUNK_BYTES = 96 * 2**20


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: Callable, op: str) -> "Tensor":
        out = cls(data)
        out._op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    const = np.asarray(b, dtype=np.float64)
    if const.ndim and const.shape != a.shape:
        raise ValueError(f"add: shape mismatch {list(a.shape)} vs {list(const.shape)}")
    return Tensor._result(a.data + const, (a,), lambda g: (g,), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    return add(a, -np.asarray(b, dtype=np.float64))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        ad, bd = a.data, b.data
        return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    const = np.asarray(b, dtype=np.float64)
    if const.ndim and const.shape != a.shape:
        raise ValueError(f"mul: shape mismatch {list(a.shape)} vs {list(const.shape)}")
    return Tensor._result(a.data * const, (a,), lambda g: (g * const,), "mul")


def div(a: Tensor, c: float) -> Tensor:
    """Divide by a constant scalar."""
    c = float(c)
    return Tensor._result(a.data / c, (a,), lambda g: (g / c,), "div")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    return div(tsum(a), a.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a: Tensor, index) -> Tensor:
    """Differentiable indexing (basic or advanced)."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._result(np.ascontiguousarray(a.data[index]), (a,), backward, "take")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    """max(x, slope*x); the derivative at exactly 0 is taken as ``slope``."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    x = a.data
    out = x * slope
    np.maximum(out, x, out=out)
    return Tensor._result(out, (a,), lambda g: (np.where(x > 0, g, slope * g),), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {list(a.shape)}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, (a,), backward, "softmax")


def smooth_l1(z):
    """0.5 z^2 for |z| < 1, |z| - 0.5 otherwise.

    Accepts a Python number (returns a float) or a Tensor (elementwise).
    """
    if not isinstance(z, Tensor):
        z = float(z)
        az = abs(z)
        return 0.5 * z * z if az < 1.0 else az - 0.5
    zd = z.data
    small = np.abs(zd) < 1.0
    out = np.where(small, 0.5 * zd * zd, np.abs(zd) - 0.5)
    return Tensor._result(out, (z,), lambda g: (g * np.where(small, zd, np.sign(zd)),), "smooth_l1")


def clamped_log(a: Tensor, eps: float = 1e-12) -> Tensor:
    """log(max(x, eps)); zero gradient where the clamp is active."""
    live = a.data > eps
    safe = np.where(live, a.data, eps)
    return Tensor._result(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),), "clamped_log")


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Filter extents, strides and zero padding for a 2D or 3D convolution."""

    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    out_channels: int

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        object.__setattr__(self, "padding", tuple(int(p) for p in self.padding))
        if not len(self.kernel) == len(self.stride) == len(self.padding):
            raise ValueError(f"ConvSpec axes disagree: kernel {self.kernel}, stride {self.stride}, padding {self.padding}")
        if len(self.kernel) not in (2, 3):
            raise ValueError(f"ConvSpec must have 2 or 3 axes, got {len(self.kernel)}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid ConvSpec {self}")
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")

    @property
    def ndim(self) -> int:
        return len(self.kernel)

    def output_extent(self, extents: Sequence[int]) -> tuple[int, ...]:
        if len(extents) != self.ndim:
            raise ValueError(f"expected {self.ndim} spatial extents, got {list(extents)}")
        return tuple(
            (n + 2 * p - k) // s + 1 for n, k, s, p in zip(extents, self.kernel, self.stride, self.padding)
        )

    def as_3d(self) -> "ConvSpec":
        if self.ndim == 3:
            return self
        return ConvSpec((1,) + self.kernel, (1,) + self.stride, (0,) + self.padding, self.out_channels)


def _tap_ranges(n_in: int, n_out: int, k: int, s: int, p: int):
    """Output index slice and matching input slice for one filter tap on one axis."""
    lo = max(0, -((k - p) // s))  # ceil((p - k) / s)
    hi = min(n_out - 1, (n_in - 1 + p - k) // s)
    if hi < lo:
        return None
    i0 = lo * s + k - p
    return slice(lo, hi + 1), slice(i0, i0 + (hi - lo) * s + 1, s)


def _taps(in_ext, out_ext, kernel, stride, padding):
    per_axis = []
    for ax in range(3):
        per_axis.append(
            [(k, _tap_ranges(in_ext[ax], out_ext[ax], k, stride[ax], padding[ax])) for k in range(kernel[ax])]
        )
    for a, ra in per_axis[0]:
        if ra is None:
            continue
        for b, rb in per_axis[1]:
            if rb is None:
                continue
            for c, rc in per_axis[2]:
                if rc is None:
                    continue
                yield (a, b, c), (ra[0], rb[0], rc[0]), (ra[1], rb[1], rc[1])


def _time_chunks(t_out: int, bytes_per_frame: int):
    step = max(1, _CHUNK_BYTES // max(bytes_per_frame, 1))
    for t0 in range(0, t_out, step):
        yield t0, min(t_out, t0 + step)


def _restrict_time(osl, isl, t0: int, t1: int, stride_t: int):
    """Intersect a tap's output time slice with [t0, t1)."""
    lo = max(osl[0].start, t0)
    hi = min(osl[0].stop, t1)
    if hi <= lo:
        return None
    i0 = isl[0].start + (lo - osl[0].start) * stride_t
    return (slice(lo, hi),) + osl[1:], (slice(i0, i0 + (hi - lo - 1) * stride_t + 1, stride_t),) + isl[1:]


def correlate(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    """Zero-padded cross-correlation of x [Cin,T,H,W] with w [Cout,Cin,kt,kh,kw]."""
    cout = w.shape[0]
    out_ext = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(x.shape[1:], w.shape[2:], stride, padding))
    out = np.zeros((cout,) + out_ext)
    taps = list(_taps(x.shape[1:], out_ext, w.shape[2:], stride, padding))
    frame_bytes = 8 * cout * out_ext[1] * out_ext[2]
    for t0, t1 in _time_chunks(out_ext[0], frame_bytes):
        for (a, b, c), osl, isl in taps:
            r = _restrict_time(osl, isl, t0, t1, stride[0])
            if r is None:
                continue
            osl_t, isl_t = r
            out[(slice(None),) + osl_t] += np.tensordot(w[:, :, a, b, c], x[(slice(None),) + isl_t], axes=(1, 0))
    return out


def correlate_adjoint(g: np.ndarray, w: np.ndarray, stride, padding, in_ext) -> np.ndarray:
    """Adjoint of :func:`correlate` with respect to its input."""
    cin = w.shape[1]
    gx = np.zeros((cin,) + tuple(in_ext))
    taps = list(_taps(in_ext, g.shape[1:], w.shape[2:], stride, padding))
    frame_bytes = 8 * cin * g.shape[2] * g.shape[3]
    for t0, t1 in _time_chunks(g.shape[1], frame_bytes):
        for (a, b, c), osl, isl in taps:
            r = _restrict_time(osl, isl, t0, t1, stride[0])
            if r is None:
                continue
            osl_t, isl_t = r
            gx[(slice(None),) + isl_t] += np.tensordot(w[:, :, a, b, c], g[(slice(None),) + osl_t], axes=(0, 0))
    return gx


def correlate_filter_grad(x: np.ndarray, g: np.ndarray, kernel, stride, padding) -> np.ndarray:
    """Gradient of <correlate(x, w), g> with respect to w."""
    cout, cin = g.shape[0], x.shape[0]
    gw = np.zeros((cout, cin) + tuple(kernel))
    for (a, b, c), osl, isl in _taps(x.shape[1:], g.shape[1:], kernel, stride, padding):
        gw[:, :, a, b, c] = np.tensordot(
            g[(slice(None),) + osl], x[(slice(None),) + isl], axes=((1, 2, 3), (1, 2, 3))
        )
    return gw


def _check_conv_args(input_ndim: int, filters: Tensor, spec: ConvSpec, op: str) -> ConvSpec:
    if filters.ndim != spec.ndim + 2:
        raise ValueError(f"{op}: filters {list(filters.shape)} do not match a {spec.ndim}-axis spec")
    if tuple(filters.shape[2:]) != spec.kernel:
        raise ValueError(f"{op}: filter extents {list(filters.shape[2:])} disagree with spec kernel {list(spec.kernel)}")
    allowed = (4,) if spec.ndim == 3 else (3, 4)
    if input_ndim not in allowed:
        raise ValueError(f"{op}: a {spec.ndim}-axis convolution needs a rank {allowed} tensor, got rank {input_ndim}")
    return spec.as_3d()


def _lift(input: Tensor, spec: ConvSpec) -> tuple[np.ndarray, bool]:
    """View a 2D-conv input as [C,T,H,W]; returns the view and whether it was [C,H,W]."""
    if spec.ndim == 2 and input.ndim == 3:
        return input.data[:, None], True
    return input.data, False


def conv3d(input: Tensor, filters: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation with zero padding (no kernel flip).

    ``spec`` may also be a 2-axis spec, in which case ``filters`` is
    [Cout,Cin,fH,fW] and the input [C,T,H,W] is convolved frame by frame.
    """
    s3 = _check_conv_args(input.ndim, filters, spec, "conv3d")
    x, squeeze = _lift(input, spec)
    w = filters.data.reshape(filters.shape[:2] + s3.kernel)
    if w.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv3d: filters {list(filters.shape)} expect {w.shape[1]} input channels, input is {list(input.shape)}"
        )
    if w.shape[0] != spec.out_channels:
        raise ValueError(f"conv3d: filters {list(filters.shape)} disagree with spec out_channels {spec.out_channels}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ValueError(f"conv3d: bias {list(bias.shape)} does not match filters {list(filters.shape)}")
    out_ext = s3.output_extent(x.shape[1:])
    if min(out_ext) < 1:
        raise ValueError(f"conv3d: input {list(input.shape)} with filters {list(filters.shape)} gives empty output {list(out_ext)}")

    out = correlate(x, w, s3.stride, s3.padding)
    if bias is not None:
        out += bias.data[:, None, None, None]
    if squeeze:
        out = out[:, 0]
    fshape = filters.shape

    def backward(g):
        g4 = g[:, None] if squeeze else g
        gx = correlate_adjoint(g4, w, s3.stride, s3.padding, x.shape[1:]) if input.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[:, 0]
        gw = None
        if filters.requires_grad:
            gw = correlate_filter_grad(x, g4, s3.kernel, s3.stride, s3.padding).reshape(fshape)
        gb = g4.sum(axis=(1, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (input, filters, bias) if bias is not None else (input, filters)
    return Tensor._result(out, parents, backward, "conv3d")


def transposed_conv3d(
    input: Tensor, filters: Tensor, spec: ConvSpec, output_shape: Sequence[int], bias: Tensor | None = None
) -> Tensor:
    """Exact adjoint of :func:`conv3d` under shared filters.

    ``output_shape`` is the [Cin, T, H, W] shape of the conv3d input being
    mapped back to; it disambiguates stride-2 preimages.
    """
    s3 = _check_conv_args(len(output_shape), filters, spec, "transposed_conv3d")
    output_shape = tuple(int(n) for n in output_shape)
    squeeze = spec.ndim == 2 and len(output_shape) == 3
    in_ext = output_shape[1:] if not squeeze else (1,) + output_shape[1:]
    w = filters.data.reshape(filters.shape[:2] + s3.kernel)
    y = input.data[:, None] if squeeze else input.data
    if input.ndim != len(output_shape):
        raise ValueError(f"transposed_conv3d: input {list(input.shape)} and output_shape {list(output_shape)} differ in rank")
    if y.shape[0] != w.shape[0]:
        raise ValueError(
            f"transposed_conv3d: input {list(input.shape)} has {y.shape[0]} channels, filters {list(filters.shape)} produce {w.shape[0]}"
        )
    if output_shape[0] != w.shape[1]:
        raise ValueError(f"transposed_conv3d: output_shape {list(output_shape)} vs filters {list(filters.shape)} channel mismatch")
    if s3.output_extent(in_ext) != y.shape[1:]:
        raise ValueError(
            f"transposed_conv3d: output_shape {list(output_shape)} is not a preimage of input {list(input.shape)} under {spec}"
        )
    if bias is not None and bias.shape != (w.shape[1],):
        raise ValueError(f"transposed_conv3d: bias {list(bias.shape)} does not match output channels {w.shape[1]}")

    out = correlate_adjoint(y, w, s3.stride, s3.padding, in_ext)
    if bias is not None:
        out += bias.data[:, None, None, None]
    if squeeze:
        out = out[:, 0]
    fshape = filters.shape

    def backward(g):
        g4 = g[:, None] if squeeze else g
        gy = correlate(g4, w, s3.stride, s3.padding) if input.requires_grad else None
        if gy is not None and squeeze:
            gy = gy[:, 0]
        gw = None
        if filters.requires_grad:
            gw = correlate_filter_grad(g4, y, s3.kernel, s3.stride, s3.padding).reshape(fshape)
        gb = g4.sum(axis=(1, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gy, gw, gb) if bias is not None else (gy, gw)

    parents = (input, filters, bias) if bias is not None else (input, filters)
    return Tensor._result(out, parents, backward, "transposed_conv3d")


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = finished
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if state.get(id(node)) == 2:
                continue
            state[id(node)] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            st = state.get(id(parent))
            if st == 1:
                raise RuntimeError("cycle detected in recorded graph")
            if st is None and parent.requires_grad:
                stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backprop(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backprop needs a scalar root, got shape {list(root.shape)}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def finite_difference_gradient(
    f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5, indices: Sequence[int] | None = None
) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.

    ``indices`` restricts the probe to some flat positions; the others are
    left at zero in the returned array.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size)
    probe = range(flat.size) if indices is None else indices

    def value() -> float:
        with no_grad():
            v = f(x)
        return v.item() if isinstance(v, Tensor) else float(v)

    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger gradient's max magnitude."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def all_finite(t: Tensor) -> bool:
    return bool(np.isfinite(t.data).all())


def inner(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum((a * b).reshape(-1))
