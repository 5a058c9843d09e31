"""N-dimensional float tensors with reverse-mode automatic differentiation.

Forward kernels are plain numpy. While a :class:`Tape` is active, every
operation that touches a differentiable tensor appends a record holding the
inputs, the output, and a backward rule; :func:`backward` replays the records
in exact reverse execution order to fill in ``.grad`` on every reachable
tensor with ``requires_grad=True``.

Only the operations needed by the artery-vein network exist here: 2-D
convolution, batch normalization, ReLU, channel softmax, 2x2 average pooling,
nearest-neighbor 2x upsampling, channel concatenation/slicing, and a small set
of elementwise primitives for building loss expressions.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class GradientError(RuntimeError):
    """Backward pass requested in an invalid state."""


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"tensor dtype must be float32 or float64, got {dt}")
    return dt


class Tensor:
    """A dense row-major float array, optionally participating in autodiff.

    ``grad`` stays ``None`` until :func:`backward` reaches this tensor.
    Data is treated as immutable once the tensor has entered a computation;
    the optimizer's in-place parameter updates are the sanctioned exception.
    """

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # asarray with order="C" keeps rank-0 arrays rank-0 (ascontiguousarray does not)
        self.data: np.ndarray = np.asarray(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Light arithmetic sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Execution-ordered record of operations, consumed once by backward().

    Use as a context manager around the forward computation::

        with Tape():
            out = conv2d(x, w, stride=1, padding=1)
            loss = sum_all(mul(out, out))
        backward(loss)

    Without an active tape, operations run as pure numpy and build no graph
    (the evaluation fast path).
    """

    def __init__(self):
        # each record: (output tensor, input tensors, backward rule)
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must nest strictly"

    def __len__(self) -> int:
        return len(self._records)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: Sequence[Tensor], backward_rule: Callable) -> Tensor:
    """Attach ``out`` to the active tape if any input participates in autodiff.

    ``backward_rule(out_grad)`` must return one gradient array (or None) per
    entry of ``inputs``, in order.
    """
    tape = _active_tape()
    if tape is None:
        return out
    if any(t.requires_grad or t._tape is tape for t in inputs):
        out._tape = tape
        tape._records.append((out, tuple(inputs), backward_rule))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a rank-0 tensor produced under a tape. Each tape may be
    consumed only once, and a parameter still carrying a gradient from an
    earlier pass is an error: clear gradients (the optimizer step does) before
    recording the next computation.
    """
    if loss.shape != ():
        raise GradientError(f"backward needs a rank-0 loss, got shape {list(loss.shape)}")
    tape = loss._tape
    if tape is None:
        raise GradientError("loss is not on a tape; run the forward pass under `with Tape():`")
    if tape._consumed:
        raise GradientError("backward already ran on this tape; record a new tape per step")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for out, inputs, rule in reversed(tape._records):
        out_grad = grads.pop(id(out), None)
        if out_grad is None:
            continue  # not reachable from the loss
        for tensor, g in zip(inputs, rule(out_grad)):
            if g is None:
                continue
            acc = grads.get(id(tensor))
            # out-of-place: rules may hand the same array to several inputs
            grads[id(tensor)] = g if acc is None else acc + g

    for _, inputs, _ in tape._records:
        for tensor in inputs:
            if not tensor.requires_grad:
                continue
            g = grads.pop(id(tensor), None)
            if g is None:
                continue
            if tensor.grad is not None:
                raise GradientError(
                    "tensor already holds a gradient; zero gradients before the next backward"
                )
            tensor.grad = Tensor(np.array(g, dtype=tensor.dtype))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {list(a.shape)} vs {list(b.shape)}")


def _coerce_operand(a: Tensor, b) -> tuple[Union[Tensor, np.ndarray], bool]:
    """Return (b as tensor-or-array, is_tensor). Scalars become 0-d arrays in a's dtype."""
    if isinstance(b, Tensor):
        return b, True
    return np.asarray(b, dtype=a.dtype), False


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b) -> Tensor:
    b_val, b_is_tensor = _coerce_operand(a, b)
    if b_is_tensor:
        _check_same_shape(a, b_val, "add")
        out = Tensor(a.data + b_val.data)
        return _record(out, (a, b_val), lambda g: (g, g))
    out = Tensor(a.data + b_val)
    return _record(out, (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    b_val, b_is_tensor = _coerce_operand(a, b)
    if b_is_tensor:
        _check_same_shape(a, b_val, "sub")
        out = Tensor(a.data - b_val.data)
        return _record(out, (a, b_val), lambda g: (g, -g))
    out = Tensor(a.data - b_val)
    return _record(out, (a,), lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    b_val, b_is_tensor = _coerce_operand(a, b)
    if b_is_tensor:
        _check_same_shape(a, b_val, "mul")
        out = Tensor(a.data * b_val.data)
        return _record(out, (a, b_val), lambda g: (g * b_val.data, g * a.data))
    out = Tensor(a.data * b_val)
    return _record(out, (a,), lambda g: (g * b_val,))


def log(a: Tensor) -> Tensor:
    """Natural log. Inputs must be strictly positive; clamp beforehand."""
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs; clamp first")
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**exponent. Non-integer exponents need non-negative inputs."""
    p = float(exponent)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError("fractional power of a negative input")
    if p < 0 and np.any(a.data == 0):
        raise DomainError("negative power of a zero input")
    out = Tensor(np.power(a.data, p))

    def rule(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        return (g * p * np.power(a.data, p - 1.0),)

    return _record(out, (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(dtype=a.dtype))
    return _record(out, (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is passed through only inside the interval."""
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: {lo} > {hi}")
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": lambda a, b: add(a, b),
    "sub": lambda a, b: sub(a, b),
    "mul": lambda a, b: mul(a, b),
    "log": lambda a, b: log(a),
    "pow_scalar": lambda a, b: pow_scalar(a, b),
    "sum_all": lambda a, b: sum_all(a),
    "clamp": lambda a, b: clamp(a, b[0], b[1]),
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """String-dispatched front door over the elementwise primitives.

    ``b`` is the second operand for add/sub/mul (tensor or scalar), the
    exponent for pow_scalar, and the (lo, hi) pair for clamp.
    """
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# activation / normalization


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def softmax_channels(a: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of an NxCxHxW tensor."""
    if a.data.ndim != 4:
        raise ShapeError(f"softmax_channels expects NxCxHxW, got shape {list(a.shape)}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), rule)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over the N, H, W axes.

    Train mode normalizes with batch statistics and folds them into the
    running buffers as ``new = momentum * old + (1 - momentum) * batch``;
    eval mode normalizes with the buffers and leaves them untouched. The
    buffers never receive gradients.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm2d expects NxCxHxW, got shape {list(x.shape)}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm2d: {name} has shape {list(t.shape)}, expected [{c}]")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    gam = gamma.data[None, :, None, None]
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # population variance
        running_mean.data[...] = momentum * running_mean.data + (1.0 - momentum) * mean
        running_var.data[...] = momentum * running_var.data + (1.0 - momentum) * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        out = Tensor(gam * xhat + beta.data[None, :, None, None])

        def rule(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            scale = (gamma.data * inv)[None, :, None, None]
            dx = scale * (
                g
                - g.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
            return dx, dgamma, dbeta, None, None
    else:
        inv = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data[None, :, None, None]) * inv[None, :, None, None]
        out = Tensor(gam * xhat + beta.data[None, :, None, None])

        def rule(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dx = g * (gamma.data * inv)[None, :, None, None]
            return dx, dgamma, dbeta, None, None

    return _record(out, (x, gamma, beta, running_mean, running_var), rule)


# ---------------------------------------------------------------------------
# convolution and spatial ops


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold NxCxHxW into (N*H_out*W_out, C*k*k) patch rows."""
    n, c, h, w = x.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=x.dtype)
    for i in range(k):
        i_max = i + stride * h_out
        for j in range(k):
            j_max = j + stride * w_out
            cols[:, :, i, j, :, :] = x[:, :, i:i_max:stride, j:j_max:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * h_out * w_out, c * k * k)


def _col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Fold patch rows back onto the input grid, accumulating overlaps."""
    n, c, h, w = x_shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    cols = cols.reshape(n, h_out, w_out, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        i_max = i + stride * h_out
        for j in range(k):
            j_max = j + stride * w_out
            img[:, :, i:i_max:stride, j:j_max:stride] += cols[:, :, i, j, :, :]
    if padding > 0:
        return img[:, :, padding : padding + h, padding : padding + w]
    return img


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    x is NxCxHxW, weight is OxCxkxk with a square kernel, bias (optional) has
    length O. Output spatial size is floor((H + 2*padding - k) / stride) + 1.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NxCxHxW, got shape {list(x.shape)}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be OxCxkxk square, got shape {list(weight.shape)}")
    n, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias has shape {list(bias.shape)}, expected [{o}]")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if k > h + 2 * padding or k > w + 2 * padding or h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"conv2d: kernel {k}x{k} does not fit input {h}x{w} with padding {padding}"
        )

    cols = _im2col(x.data, k, stride, padding)
    w_mat = weight.data.reshape(o, -1)
    out_mat = cols @ w_mat.T  # (N*h_out*w_out, O)
    if bias is not None:
        out_mat = out_mat + bias.data
    out = Tensor(out_mat.reshape(n, h_out, w_out, o).transpose(0, 3, 1, 2))

    def rule(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g_mat.T @ cols).reshape(weight.shape)
        dx = _col2im(g_mat @ w_mat, x.shape, k, stride, padding)
        if bias is not None:
            return dx, dw, g_mat.sum(axis=0)
        return dx, dw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, rule)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; spatial dims must be even."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects NxCxHxW, got shape {list(x.shape)}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d needs even spatial dims, got {h}x{w}")
    out = Tensor(x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def rule(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=x.dtype),)

    return _record(out, (x,), rule)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects NxCxHxW, got shape {list(x.shape)}")
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))
    n, c, h, w = x.shape

    def rule(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), rule)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack b's channels after a's; batch and spatial dims must match."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NxCxHxW operands")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: batch/spatial dims differ, {list(a.shape)} vs {list(b.shape)}"
        )
    c1 = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return _record(out, (a, b), lambda g: (g[:, :c1], g[:, c1:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """View channels [start, stop) as a new tensor (copying)."""
    if x.data.ndim != 4:
        raise ShapeError(f"slice_channels expects NxCxHxW, got shape {list(x.shape)}")
    c = x.shape[1]
    if not (0 <= start <= stop <= c):
        raise ShapeError(f"slice_channels: range [{start}, {stop}) invalid for {c} channels")
    out = Tensor(x.data[:, start:stop].copy())

    def rule(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (x,), rule)
