"""Minimal dense tensor engine with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (NCHW for activations, float32 by
default; float64 for high-precision gradient checking).  Operations executed
while a :class:`Tape` is active are recorded and can be differentiated by a
single reverse sweep.  Convolution is cross-correlation (no kernel flip).

There is deliberately no pooling operation of any kind: downsampling is done
by strided convolution only.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# When enabled, every op asserts its output is finite (NaN/inf surfacing).
_debug_check_finite = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_check_finite
    _debug_check_finite = bool(enabled)


class Tensor:
    """Dense N-d float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, " \
               f"requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped as untracked tensors
    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return narrow(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)


def as_tensor(value, dtype=DEFAULT_DTYPE) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; reverse sweep yields gradients.

    Use as a context manager; ops run while the tape is active are recorded
    when any of their inputs is tracked (a parameter or derived from one).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of requires_grad leaves.

        ``loss`` must be a scalar produced on this tape.  Returns the leaf
        gradients keyed by tensor.  Each node is visited exactly once.
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced:
            raise ValueError("loss tensor was not produced on this tape")

        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            for tensor, g in zip(node.inputs, in_grads):
                if g is None or not tensor._tracked:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if tensor.requires_grad:
                    leaf_grads[tensor] = grads[key]
        for tensor, g in leaf_grads.items():
            g = g.astype(tensor.data.dtype, copy=False).reshape(tensor.shape)
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        return leaf_grads


_tape_stack: list[Tape] = []


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _record(output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _debug_check_finite and not np.all(np.isfinite(output.data)):
        raise FloatingPointError("non-finite values produced by op")
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        output._tracked = True
        tape.nodes.append(_Node(output, inputs, backward_fn))
    return output


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a raw array."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_array(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * 0.5 / y,))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    y = np.maximum(a.data, slope * a.data)
    out = Tensor(y)
    factor = np.where(a.data >= 0, a.data.dtype.type(1.0),
                      a.data.dtype.type(slope))
    return _record(out, (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def narrow(a: Tensor, index) -> Tensor:
    """Basic slicing; backward scatters the gradient into a zero array."""
    out = Tensor(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), backward)


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def route_concat(xs: list[Tensor]) -> Tensor:
    """Channel concatenation of NCHW tensors in argument order."""
    if not xs:
        raise ValueError("route_concat needs at least one input")
    first = xs[0]
    for x in xs[1:]:
        if x.data.ndim != first.data.ndim or x.shape[0] != first.shape[0] \
                or x.shape[2:] != first.shape[2:]:
            raise ValueError(f"spatial mismatch in concat: {x.shape} vs {first.shape}")
    out = Tensor(np.concatenate([x.data for x in xs], axis=1))
    sizes = [x.shape[1] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _record(out, tuple(xs), backward)


def shortcut_add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of two identically shaped tensors (skip connection)."""
    if x.shape != y.shape:
        raise ValueError(f"shortcut shape mismatch: {x.shape} vs {y.shape}")
    return add(x, y)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling: each cell becomes a 2x2 block."""
    if x.data.ndim != 4:
        raise ValueError("upsample2x expects NCHW input")
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)
    out = Tensor(y)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    # floor semantics: trailing rows/cols that cannot host a full window are
    # dropped, as in every mainstream CNN stack
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(
            f"invalid conv output size: input {size}, kernel {k}, "
            f"stride {stride}, pad {pad}")
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh = _conv_out_size(h, k, stride, pad)
    ow = _conv_out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, k, k, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return windows.reshape(n, c * k * k, oh * ow)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], k: int,
            stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh = _conv_out_size(h, k, stride, pad)
    ow = _conv_out_size(w, k, stride, pad)
    dpadded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            dpadded[:, :, i:i + stride * oh:stride,
                    j:j + stride * ow:stride] += d6[:, :, i, j]
    if pad:
        return dpadded[:, :, pad:pad + h, pad:pad + w]
    return dpadded


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW layout, kernel 1x1 or 3x3, stride 1 or 2."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects x[N,C,H,W] and weight[F,C,k,k]")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    k = kh
    if k not in (1, 3):
        raise ValueError(f"kernel size must be 1 or 3, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if cw != c:
        raise ValueError(f"channel mismatch: input {c}, weight expects {cw}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"bias must have shape ({f},), got {bias.shape}")

    oh = _conv_out_size(h, k, stride, pad)
    ow = _conv_out_size(w, k, stride, pad)
    cols = _im2col(x.data, k, stride, pad)  # [N, C*k*k, OH*OW]
    w2 = weight.data.reshape(f, c * k * k)
    out_flat = np.matmul(w2, cols)  # [N, F, OH*OW]
    if bias is not None:
        out_flat = out_flat + bias.data[None, :, None]
    out = Tensor(out_flat.reshape(n, f, oh, ow))

    def backward(g):
        g_flat = g.reshape(n, f, oh * ow)
        dw = np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0)
        dcols = np.matmul(w2.T, g_flat)
        dx = _col2im(dcols, x.shape, k, stride, pad)
        db = g_flat.sum(axis=(0, 2)) if bias is not None else None
        grads = [dx, dw.reshape(weight.shape)]
        if bias is not None:
            grads.append(db)
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, backward)
