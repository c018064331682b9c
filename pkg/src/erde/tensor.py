"""Dense-tensor arithmetic with reverse-mode differentiation on an explicit tape.

Every primitive here follows the same pattern: compute the forward value with
numpy, and when a tape is active and any input requires a gradient, record a
closure that maps the output gradient to input gradients.  Replaying the tape
in reverse order implements the chain rule.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are invalid for an operation."""


class NonFiniteError(FloatingPointError):
    """Strict mode detected a non-finite input to an operation."""


_state = threading.local()


def set_strict(enabled):
    """Toggle per-thread validation that every op's inputs are finite."""
    _state.strict = bool(enabled)


def _check_finite(op, *arrays):
    if getattr(_state, "strict", False):
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{op}: non-finite input value")


class Tensor:
    """A dense n-d value with an optional same-shape gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)

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

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of applied primitives, replayed in reverse for gradients.

    One tape per training step; independent tapes are independent objects, so
    separate threads may each run their own.
    """

    _active = threading.local()

    def __init__(self):
        self._records = []

    def __enter__(self):
        stack = getattr(Tape._active, "stack", None)
        if stack is None:
            stack = Tape._active.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active.stack.pop()
        return False

    @staticmethod
    def current():
        stack = getattr(Tape._active, "stack", None)
        return stack[-1] if stack else None

    def record(self, out, rule):
        self._records.append((out, rule))

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Populate .grad for every requires_grad tensor reachable from loss."""
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        if not self._records:
            raise RuntimeError("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for out, rule in reversed(self._records):
            if out.grad is not None:
                rule(out.grad)


def _as_constant(value, like):
    """Wrap an ndarray/list constant as a non-grad tensor of matching dtype."""
    return Tensor(np.asarray(value, dtype=like.data.dtype), requires_grad=False)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _make_out(op, data, inputs, build_rule):
    tape = Tape.current()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(out, build_rule())
    return out


def _binary_operands(op, a, b):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if isinstance(b, (int, float, np.integer, np.floating)):
        return a, None, float(b)
    if not isinstance(b, Tensor):
        b = _as_constant(b, a)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")
    return a, b, None


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a, b):
    a, bt, scalar = _binary_operands("add", a, b)
    if bt is None:
        return add_scalar(a, scalar)
    _check_finite("add", a.data, bt.data)
    def rule():
        def backward(g):
            _accumulate(a, g)
            _accumulate(bt, g)
        return backward
    return _make_out("add", a.data + bt.data, (a, bt), rule)


def sub(a, b):
    a, bt, scalar = _binary_operands("sub", a, b)
    if bt is None:
        return add_scalar(a, -scalar)
    _check_finite("sub", a.data, bt.data)
    def rule():
        def backward(g):
            _accumulate(a, g)
            _accumulate(bt, -g)
        return backward
    return _make_out("sub", a.data - bt.data, (a, bt), rule)


def mul(a, b):
    a, bt, scalar = _binary_operands("mul", a, b)
    if bt is None:
        return mul_scalar(a, scalar)
    _check_finite("mul", a.data, bt.data)
    a_data, b_data = a.data, bt.data
    def rule():
        def backward(g):
            _accumulate(a, g * b_data)
            _accumulate(bt, g * a_data)
        return backward
    return _make_out("mul", a_data * b_data, (a, bt), rule)


def add_scalar(a, c):
    _check_finite("add_scalar", a.data)
    def rule():
        def backward(g):
            _accumulate(a, g)
        return backward
    return _make_out("add_scalar", a.data + a.data.dtype.type(c), (a,), rule)


def mul_scalar(a, c):
    _check_finite("mul_scalar", a.data)
    c = a.data.dtype.type(c)
    def rule():
        def backward(g):
            _accumulate(a, g * c)
        return backward
    return _make_out("mul_scalar", a.data * c, (a,), rule)


def relu(x):
    _check_finite("relu", x.data)
    mask = x.data > 0
    def rule():
        def backward(g):
            _accumulate(x, g * mask)
        return backward
    return _make_out("relu", np.where(mask, x.data, x.data.dtype.type(0)), (x,), rule)


def log(x):
    _check_finite("log", x.data)
    x_data = x.data
    def rule():
        def backward(g):
            _accumulate(x, g / x_data)
        return backward
    return _make_out("log", np.log(x_data), (x,), rule)


def exp(x):
    _check_finite("exp", x.data)
    out_data = np.exp(x.data)
    def rule():
        def backward(g):
            _accumulate(x, g * out_data)
        return backward
    return _make_out("exp", out_data, (x,), rule)


def select(mask, a, b):
    """Elementwise mask ? a : b with a constant boolean mask.

    Selection is exact (np.where), so the taken branch's values pass through
    bit-for-bit; the untaken branch receives an exactly-zero gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = _as_constant(b, a)
    if a.data.shape != b.data.shape or mask.shape != a.data.shape:
        raise ShapeError(
            f"select: mask {mask.shape}, operands {a.data.shape} and {b.data.shape} must match")
    zero = a.data.dtype.type(0)
    def rule():
        def backward(g):
            _accumulate(a, np.where(mask, g, zero))
            _accumulate(b, np.where(mask, zero, g))
        return backward
    return _make_out("select", np.where(mask, a.data, b.data), (a, b), rule)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _restore_axes(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(x, axis=None, keepdims=False):
    _check_finite("sum", x.data)
    shape = x.data.shape
    def rule():
        def backward(g):
            _accumulate(x, _restore_axes(g, shape, axis, keepdims))
        return backward
    return _make_out("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), rule)


def tensor_mean(x, axis=None, keepdims=False):
    _check_finite("mean", x.data)
    shape = x.data.shape
    count = x.data.size if axis is None else np.prod(
        [shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    inv = x.data.dtype.type(1.0 / count)
    def rule():
        def backward(g):
            _accumulate(x, _restore_axes(g * inv, shape, axis, keepdims))
        return backward
    return _make_out("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,), rule)


def reshape(x, shape):
    old_shape = x.data.shape
    def rule():
        def backward(g):
            _accumulate(x, g.reshape(old_shape))
        return backward
    return _make_out("reshape", x.data.reshape(shape), (x,), rule)


# ---------------------------------------------------------------------------
# softmax family


def _stable_log_softmax(z, temperature, axis):
    zt = z / z.dtype.type(temperature)
    m = zt.max(axis=axis, keepdims=True)
    shifted = zt - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return shifted - lse


def log_softmax(x, temperature=1.0, axis=-1):
    """log(softmax(x / T)) computed with max-subtraction for stability."""
    if temperature <= 0:
        raise ValueError(f"log_softmax: temperature must be positive, got {temperature}")
    _check_finite("log_softmax", x.data)
    ls = _stable_log_softmax(x.data, temperature, axis)
    p = np.exp(ls)
    inv_t = x.data.dtype.type(1.0 / temperature)
    def rule():
        def backward(g):
            _accumulate(x, (g - p * g.sum(axis=axis, keepdims=True)) * inv_t)
        return backward
    return _make_out("log_softmax", ls, (x,), rule)


def softmax(x, temperature=1.0, axis=-1):
    """softmax(x / T); strictly positive and sums to one along `axis`."""
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be positive, got {temperature}")
    _check_finite("softmax", x.data)
    p = np.exp(_stable_log_softmax(x.data, temperature, axis))
    inv_t = x.data.dtype.type(1.0 / temperature)
    def rule():
        def backward(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            _accumulate(x, p * (g - dot) * inv_t)
        return backward
    return _make_out("softmax", p, (x,), rule)


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a, b):
    if not isinstance(b, Tensor):
        b = _as_constant(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.data.shape} @ {b.data.shape})")
    _check_finite("matmul", a.data, b.data)
    a_data, b_data = a.data, b.data
    def rule():
        def backward(g):
            _accumulate(a, g @ b_data.T)
            _accumulate(b, a_data.T @ g)
        return backward
    return _make_out("matmul", a_data @ b_data, (a, b), rule)


def linear(x, weight, bias=None):
    """x @ weight.T + bias with x (B, in) and weight (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear: x {x.data.shape} and weight {weight.data.shape} must be 2-d")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: input features {x.data.shape[1]} != weight features {weight.data.shape[1]}")
    _check_finite("linear", x.data, weight.data)
    x_data, w_data = x.data, weight.data
    out_data = x_data @ w_data.T
    inputs = [x, weight]
    if bias is not None:
        if bias.data.shape != (w_data.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.data.shape} != ({w_data.shape[0]},)")
        out_data = out_data + bias.data
        inputs.append(bias)
    def rule():
        def backward(g):
            _accumulate(x, g @ w_data)
            _accumulate(weight, g.T @ x_data)
            if bias is not None:
                _accumulate(bias, g.sum(axis=0))
        return backward
    return _make_out("linear", out_data, tuple(inputs), rule)


def _im2col(x, kh, kw, stride, padding):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d convolution (cross-correlation) with zero padding.

    x: (B, C_in, H, W); weight: (C_out, C_in, kh, kw); bias: (C_out,).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.data.shape} and weight {weight.data.shape} must be 4-d")
    b, c, h, w = x.data.shape
    c_out, c_in, kh, kw = weight.data.shape
    if c != c_in:
        raise ShapeError(
            f"conv2d: input channels {c} != kernel channels {c_in} "
            f"(input {x.data.shape}, kernel {weight.data.shape})")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    _check_finite("conv2d", x.data, weight.data)

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w_mat = weight.data.reshape(c_out, c_in * kh * kw)
    out = (cols @ w_mat.T).reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)
    inputs = [x, weight]
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({c_out},)")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def rule():
        def backward(g):
            g_mat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, c_out)
            _accumulate(weight, (g_mat.T @ cols).reshape(weight.data.shape))
            if bias is not None:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                d_cols = (g_mat @ w_mat).reshape(b, ho, wo, c_in, kh, kw)
                hp, wp = h + 2 * padding, w + 2 * padding
                dxp = np.zeros((b, c_in, hp, wp), dtype=x.data.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                if padding:
                    dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
                _accumulate(x, dxp)
        return backward

    out = np.ascontiguousarray(out)
    return _make_out("conv2d", out, tuple(inputs), rule)


def avg_pool2x2(x):
    """2x2 average pooling with stride 2; odd trailing rows/columns are dropped."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2x2: expects 4-d input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"avg_pool2x2: spatial dims must be >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    cropped = x.data[:, :, :ho * 2, :wo * 2]
    out = cropped.reshape(b, c, ho, 2, wo, 2).mean(axis=(3, 5))
    quarter = x.data.dtype.type(0.25)
    def rule():
        def backward(g):
            dx = np.zeros_like(x.data)
            spread = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * quarter
            dx[:, :, :ho * 2, :wo * 2] = spread
            _accumulate(x, dx)
        return backward
    return _make_out("avg_pool2x2", out, (x,), rule)


def global_avg_pool(x):
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expects 4-d input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    inv = x.data.dtype.type(1.0 / (h * w))
    def rule():
        def backward(g):
            _accumulate(x, np.broadcast_to(g[:, :, None, None] * inv, x.data.shape))
        return backward
    return _make_out("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), rule)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes with batch statistics (biased variance) and updates
    the running arrays in place; eval mode uses the running statistics only.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: expects 4-d input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma {gamma.data.shape} / beta {beta.data.shape} must be ({c},)")
    _check_finite("batch_norm", x.data)
    dtype = x.data.dtype
    eps = dtype.type(eps)

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= dtype.type(1.0 - momentum)
        running_mean += dtype.type(momentum) * mean
        running_var *= dtype.type(1.0 - momentum)
        running_var += dtype.type(momentum) * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    def rule():
        def backward(g):
            _accumulate(gamma, (g * x_hat).sum(axis=(0, 2, 3)))
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gk = gamma.data[None, :, None, None]
                if training:
                    dxhat = g * gk
                    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    sum_dxhat_xhat = (dxhat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
                    dx = (inv_std[None, :, None, None] / n) * (
                        n * dxhat - sum_dxhat - x_hat * sum_dxhat_xhat)
                else:
                    dx = g * gk * inv_std[None, :, None, None]
                _accumulate(x, dx)
        return backward
    return _make_out("batch_norm", out, (x, gamma, beta), rule)


def dropout(x, p, training, rng=None):
    """Inverted dropout: train-time activations scaled by 1/(1-p); eval is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode requires a random generator")
    keep = x.data.dtype.type(1.0 - p)
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / keep
    def rule():
        def backward(g):
            _accumulate(x, g * mask)
        return backward
    return _make_out("dropout", x.data * mask, (x,), rule)


# ---------------------------------------------------------------------------
# generic dispatch over op kinds

_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "add_scalar": add_scalar,
    "mul_scalar": mul_scalar,
    "relu": relu,
    "log": log,
    "exp": exp,
    "select": select,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "reshape": reshape,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "avg_pool2x2": avg_pool2x2,
    "global_avg_pool": global_avg_pool,
    "batch_norm": batch_norm,
    "dropout": dropout,
}


def forward_primitive(kind, *inputs, **attributes):
    """Apply a primitive by name; unknown kinds raise KeyError."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise KeyError(f"unknown primitive kind: {kind!r}") from None
    return fn(*inputs, **attributes)
