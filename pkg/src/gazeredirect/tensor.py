"""Minimal dense-array engine with reverse-mode automatic differentiation.

Covers exactly the operation set the redirection pipeline needs: 2-D
convolution, dense (matmul) layers, concatenation, nearest-neighbor
resampling, pointwise nonlinearities, and reductions.  Arrays are numpy,
float32 by default; float64 is available for gradient checking, where
finite-difference comparisons are too noisy in single precision.

Image-like data uses batch x channel x height x width layout throughout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class GraphError(RuntimeError):
    """Misuse of the recorded operation graph (non-scalar loss, detached backward)."""


def _as_array(values, dtype):
    arr = np.asarray(values, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _check_finite(arr, op_name):
    # Every forward op must produce finite values; NaN/Inf is an operation error.
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op_name} produced non-finite values")
    return arr


def _result_dtype(*tensors):
    if any(t.data.dtype == np.float64 for t in tensors):
        return np.float64
    return np.float32


def unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense real array, optionally recorded on a reverse-mode graph.

    The graph is implicit: each tensor produced by an operation keeps
    references to its parents and a closure that routes the upstream
    gradient to them.  ``backward()`` on a scalar runs one reverse
    topological sweep; every reachable node is visited exactly once.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad=False, dtype=None):
        self.data = _as_array(values, dtype)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        """Accumulated gradient; zeros for grad-requiring tensors never reached."""
        if not self.requires_grad:
            return None
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        if self.data.size != 1:
            raise GraphError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Same values, cut loose from the graph."""
        out = Tensor(self.data, requires_grad=False)
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph construction ---------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op_name):
        data = _check_finite(np.asarray(data), op_name)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out._grad = None
        out._op = op_name
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, grad):
        if self._grad is None:
            self._grad = grad.astype(self.data.dtype, copy=True)
        else:
            self._grad += grad

    def backward(self):
        """Reverse sweep from a scalar; fills ``.grad`` on every reachable tensor."""
        if not self.requires_grad:
            raise GraphError("backward() on a tensor detached from any graph")
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node._grad)

    # -- arithmetic -----------------------------------------------------------

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.data.dtype)

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / float(other))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        with np.errstate(divide="ignore"):  # non-finite results raise below anyway
            out_data = a.data ** exponent

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * exponent * a.data ** (exponent - 1))

        return Tensor._make(out_data, (a,), backward, "pow")

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(unbroadcast(gb, b.shape))

        return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.shape

        def backward(g):
            a._accumulate(g.reshape(old_shape))

        return Tensor._make(a.data.reshape(shape), (a,), backward, "reshape")

    def swapaxes(self, ax1, ax2):
        a = self

        def backward(g):
            a._accumulate(g.swapaxes(ax1, ax2))

        return Tensor._make(a.data.swapaxes(ax1, ax2), (a,), backward, "swapaxes")

    # -- reductions --------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype))
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).astype(a.data.dtype))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[ax] for ax in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- pointwise nonlinearities -------------------------------------------------

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._make(out_data, (a,), backward, "tanh")

    def leaky_relu(self, slope=0.2):
        a = self
        factor = np.where(a.data >= 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))

        def backward(g):
            a._accumulate(g * factor)

        return Tensor._make(a.data * factor, (a,), backward, "leaky_relu")

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g * 0.5 / out_data)

        return Tensor._make(out_data, (a,), backward, "sqrt")

    def sigmoid(self):
        a = self
        out_data = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
        out_data = np.where(a.data >= 0, out_data, 1.0 - out_data)

        def backward(g):
            a._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (a,), backward, "sigmoid")

    def softplus(self):
        """log(1 + exp(x)), computed without overflow for large |x|."""
        a = self
        out_data = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
        sig = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
        sig = np.where(a.data >= 0, sig, 1.0 - sig)

        def backward(g):
            a._accumulate(g * sig)

        return Tensor._make(out_data, (a,), backward, "softplus")


# -- structural operations ------------------------------------------------------


def concat(parts, axis):
    """Concatenate tensors along `axis`; gradients route back to each part's slice."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat of an empty list")
    ref = parts[0].shape
    for p in parts[1:]:
        ok = len(p.shape) == len(ref) and all(
            p.shape[d] == ref[d] for d in range(len(ref)) if d != axis % len(ref)
        )
        if not ok:
            raise ValueError(
                f"concat axis {axis}: shape {p.shape} incompatible with {ref}"
            )
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                part._accumulate(g[tuple(index)])

    data = np.concatenate([p.data for p in parts], axis=axis)
    return Tensor._make(data, tuple(parts), backward, "concat")


def nearest_indices(in_extent, out_extent):
    """Source index per output pixel under the pixel-center nearest rule.

    Integer-factor scaling degenerates to block replication (up) or
    decimation (down).
    """
    if out_extent < 1:
        raise ValueError(f"target extent must be >= 1, got {out_extent}")
    centers = (np.arange(out_extent) + 0.5) * (in_extent / out_extent)
    return np.minimum(centers.astype(np.int64), in_extent - 1)


def resample_nearest(t, out_h, out_w):
    """Nearest-neighbor resampling of a batch x channel x H x W tensor."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = t.shape[-2], t.shape[-1]
    ri = nearest_indices(h, out_h)
    ci = nearest_indices(w, out_w)
    data = t.data[..., ri[:, None], ci[None, :]]
    flat_idx = (ri[:, None] * w + ci[None, :]).ravel()

    def backward(g):
        if t.requires_grad:
            gin = np.zeros(t.shape[:-2] + (h * w,), dtype=t.data.dtype)
            np.add.at(gin, (Ellipsis, flat_idx), g.reshape(g.shape[:-2] + (-1,)))
            t._accumulate(gin.reshape(t.shape))

    return Tensor._make(data, (t,), backward, "resample_nearest")


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation over batch x channel x H x W input.

    Kernel layout is out_channels x in_channels x kH x kW.  Output spatial
    extents follow (H + 2*padding - kH) // stride + 1.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    batch, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {cin} channels, "
            f"kernel {kernel.shape} expects {kcin}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(
            f"conv2d kernel {kernel.shape} does not fit input {x.shape} "
            f"with stride={stride} padding={padding}"
        )

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # -> (batch, out_h*out_w, cin*kh*kw) patch matrix for a single GEMM
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch, out_h * out_w, cin * kh * kw
    )
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (cols @ kmat.T).reshape(batch, out_h, out_w, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(batch, out_h * out_w, cout)
        if kernel.requires_grad:
            gk = np.einsum("bpo,bpk->ok", gmat, cols, optimize=True)
            kernel._accumulate(gk.reshape(kernel.shape).astype(kernel.data.dtype))
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(batch, out_h, out_w, cin, kh, kw)
            gxp = np.zeros(
                (batch, cin, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype
            )
            for ki in range(kh):
                for kj in range(kw):
                    gxp[
                        :,
                        :,
                        ki : ki + stride * out_h : stride,
                        kj : kj + stride * out_w : stride,
                    ] += gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    return Tensor._make(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")
