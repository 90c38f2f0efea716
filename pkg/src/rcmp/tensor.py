"""Dense tensors and the forward/backward primitives used by the residual nets.

All activations are NCHW, conv weights OIHW. Primitives are pure functions;
when a GradTape is passed they record a backward closure so that
``backward(tape, loss)`` can replay the graph in exact reverse execution
order. Accumulation order is fixed (sequential over the reversed tape), so
gradients are bitwise reproducible.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# dtype tokens -> numpy dtypes. "i8" is the 8-bit integer lane used for
# quantized storage; it is unsigned (value range 0..255) to match the
# asymmetric quantization scheme.
DTYPES = {
    "f32": np.float32,
    "f64": np.float64,
    "i8": np.uint8,
    "i32": np.int32,
}
_NP_TO_TOKEN = {np.dtype(v): k for k, v in DTYPES.items()}

FLOAT_DTYPES = ("f32", "f64")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class DTypeError(TypeError):
    """Raised on mixed-dtype arithmetic or an unsupported dtype."""


class NumericsError(ArithmeticError):
    """Raised when an operation would be numerically invalid (e.g. var+eps <= 0)."""


class TapeError(RuntimeError):
    """Raised when backward() is asked about a value the tape never produced."""


class Tensor:
    """Dense N-dimensional array (<= 4 dims) with a fixed dtype.

    Tensors are treated as immutable once constructed. The only sanctioned
    mutation is of designated parameter/buffer tensors between passes (the
    optimizer and batch-norm running statistics), via ``.data`` in place.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, dtype: Optional[str] = None, name: Optional[str] = None):
        if dtype is not None:
            if dtype not in DTYPES:
                raise DTypeError(f"unsupported dtype {dtype!r}")
            arr = np.asarray(data, dtype=DTYPES[dtype])
        else:
            arr = np.asarray(data)
            if arr.dtype == np.float64 and not isinstance(data, np.ndarray):
                # bare python floats/lists default to the f32 compute dtype
                arr = arr.astype(np.float32)
            if arr.dtype not in _NP_TO_TOKEN:
                raise DTypeError(f"unsupported numpy dtype {arr.dtype}")
        if arr.ndim > 4:
            raise ShapeError(f"tensors are limited to 4 dims, got shape {arr.shape}")
        self.data = arr
        self.name = name

    @property
    def dtype(self) -> str:
        return _NP_TO_TOKEN[self.data.dtype]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.data.astype(DTYPES[dtype]), name=self.name)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return self.data.reshape(()).item()

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor({self.dtype}, shape={self.shape}{tag})"


def as_tensor(x, dtype: str = "f32") -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class GradTape:
    """Ordered record of executed primitives.

    Each node holds the op name, references to its input/output tensors and
    a backward closure mapping the output gradient to per-input gradient
    contributions. Replay visits nodes in exact reverse execution order.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple, Tensor, Callable]] = []

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], list]):
        self.nodes.append((name, tuple(inputs), output, backward_fn))

    def produced(self, t: Tensor) -> bool:
        return any(out is t for _, _, out, _ in self.nodes)


def backward(tape: GradTape, loss: Tensor) -> dict[str, Tensor]:
    """Reverse-mode sweep; returns gradients keyed by parameter name.

    ``loss`` must be a scalar produced through the tape. Every tensor that
    carries a ``name`` and receives a gradient appears in the result;
    d(loss)/d(loss) is seeded as 1.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss tensor was not produced through this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for _, inputs, output, backward_fn in reversed(tape.nodes):
        g_out = grads.get(id(output))
        if g_out is None:
            continue
        for tensor, contrib in backward_fn(g_out):
            if tensor is None:
                continue
            prev = grads.get(id(tensor))
            grads[id(tensor)] = contrib if prev is None else prev + contrib

    named: dict[str, Tensor] = {}
    seen = set()
    for _, inputs, _, _ in tape.nodes:
        for t in inputs:
            if t.name is not None and id(t) not in seen and id(t) in grads:
                seen.add(id(t))
                named[t.name] = Tensor(grads[id(t)])
    return named


def _check_float(name: str, *tensors: Tensor):
    dts = {t.dtype for t in tensors if t is not None}
    if not dts <= set(FLOAT_DTYPES):
        raise DTypeError(f"{name}: expected float tensors, got {sorted(dts)}")
    if len(dts) > 1:
        raise DTypeError(f"{name}: mixed dtypes {sorted(dts)} are not allowed")


def _pad2d(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                  mode="constant", constant_values=value)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N,C,H,W) -> (N*Ho*Wo, C*kh*kw) patch matrix, row-major windows."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int,
           pad: int) -> np.ndarray:
    """Scatter-add inverse of im2col back onto the (unpadded) input shape."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    patches = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ki in range(kh):
        i_end = ki + stride * ho
        for kj in range(kw):
            j_end = kj + stride * wo
            dxp[:, :, ki:i_end:stride, kj:j_end:stride] += patches[:, :, ki, kj]
    if pad:
        return dxp[:, :, pad:hp - pad, pad:wp - pad]
    return dxp


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0,
           tape: Optional[GradTape] = None) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIHW kernel.

    Output spatial extent is floor((H + 2*pad - K)/stride) + 1; a zero-sized
    output or a channel mismatch is rejected with a shape diagnostic.
    """
    _check_float("conv2d", x, weight, bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: zero-sized output for input {h}x{w}, kernel {kh}, "
            f"stride {stride}, pad {padding}")

    xp = _pad2d(x.data, padding)
    cols = im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(o, i * kh * kw)
    out_mat = cols @ wmat.T
    if bias is not None:
        out_mat += bias.data
    out = Tensor(out_mat.reshape(n, ho, wo, o).transpose(0, 3, 1, 2).copy())

    if tape is not None:
        def bwd(g: np.ndarray):
            gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
            dw = (gmat.T @ cols).reshape(o, i, kh, kw)
            dcols = gmat @ wmat
            dx = col2im(dcols, (n, c, h, w), kh, kw, stride, padding)
            contribs = [(x, dx), (weight, dw)]
            if bias is not None:
                contribs.append((bias, gmat.sum(axis=0)))
            return contribs
        tape.record("conv2d", [x, weight] + ([bias] if bias is not None else []),
                    out, bwd)
    return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: Tensor, running_var: Tensor,
                eps: float = 1e-5, momentum: float = 0.1,
                training: bool = False,
                tape: Optional[GradTape] = None) -> Tensor:
    """Per-channel batch normalization over an NCHW tensor.

    Eval mode normalizes with the running statistics. Train mode uses batch
    statistics (biased variance) and updates the running buffers in place via
    an exponential moving average (unbiased variance, framework convention).
    """
    _check_float("batchnorm2d", x, gamma, beta, running_mean, running_var)
    n, c, h, w = x.shape
    for t, nm in ((gamma, "gamma"), (beta, "beta"),
                  (running_mean, "running_mean"), (running_var, "running_var")):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm2d: {nm} shape {t.shape} != ({c},)")

    if training:
        count = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if np.any(var + eps <= 0):
            raise NumericsError("batchnorm2d: non-positive variance + eps")
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        unbiased = var * (count / max(count - 1, 1))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        if np.any(running_var.data + eps <= 0):
            raise NumericsError("batchnorm2d: non-positive running variance + eps")
        inv_std = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data[None, :, None, None]) \
            * inv_std[None, :, None, None]

    out = Tensor(gamma.data[None, :, None, None] * xhat
                 + beta.data[None, :, None, None])

    if tape is not None:
        xhat_c = xhat
        inv_c = inv_std

        if training:
            def bwd(g: np.ndarray):
                m = n * h * w
                dgamma = (g * xhat_c).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                dxhat = g * gamma.data[None, :, None, None]
                # classic train-mode BN backward, vectorized per channel
                sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_dxhat_xhat = (dxhat * xhat_c).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_c[None, :, None, None] / m) * (
                    m * dxhat - sum_dxhat - xhat_c * sum_dxhat_xhat)
                return [(x, dx), (gamma, dgamma), (beta, dbeta)]
        else:
            def bwd(g: np.ndarray):
                dgamma = (g * xhat_c).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                dx = g * (gamma.data * inv_c)[None, :, None, None]
                return [(x, dx), (gamma, dgamma), (beta, dbeta)]
        tape.record("batchnorm2d", [x, gamma, beta], out, bwd)
    return out


def relu(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    _check_float("relu", x)
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        mask = x.data > 0

        def bwd(g: np.ndarray):
            return [(x, g * mask)]
        tape.record("relu", [x], out, bwd)
    return out


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1,
              tape: Optional[GradTape] = None) -> Tensor:
    """Max pooling; backward routes gradient to the first (row-major) max."""
    _check_float("maxpool2d", x)
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: zero-sized output for input {h}x{w}")
    xp = _pad2d(x.data, padding, value=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)  # first max in row-major window order
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0].copy())

    if tape is not None:
        hp, wp = h + 2 * padding, w + 2 * padding

        def bwd(g: np.ndarray):
            ki, kj = np.divmod(arg, kernel)
            oi = np.arange(ho)[None, None, :, None] * stride + ki
            oj = np.arange(wo)[None, None, None, :] * stride + kj
            flat_idx = (
                np.arange(n)[:, None, None, None] * (c * hp * wp)
                + np.arange(c)[None, :, None, None] * (hp * wp)
                + oi * wp + oj)
            dxp = np.zeros(n * c * hp * wp, dtype=g.dtype)
            np.add.at(dxp, flat_idx.ravel(), g.ravel())
            dxp = dxp.reshape(n, c, hp, wp)
            if padding:
                dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
            return [(x, dxp)]
        tape.record("maxpool2d", [x], out, bwd)
    return out


def global_avgpool(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """NCHW -> NxC spatial mean."""
    _check_float("global_avgpool", x)
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    if tape is not None:
        def bwd(g: np.ndarray):
            dx = np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy()
            return [(x, dx)]
        tape.record("global_avgpool", [x], out, bwd)
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           tape: Optional[GradTape] = None) -> Tensor:
    """x (N,F) @ weight.T (G,F) + bias (G)."""
    _check_float("linear", x, weight, bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear: need 2-d input/weight, got {x.shape}, {weight.shape}")
    n, f = x.shape
    g_out, f_w = weight.shape
    if f != f_w:
        raise ShapeError(f"linear: input features {f} != weight features {f_w}")
    if bias is not None and bias.shape != (g_out,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({g_out},)")
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data
    out = Tensor(out_data)
    if tape is not None:
        def bwd(g: np.ndarray):
            contribs = [(x, g @ weight.data), (weight, g.T @ x.data)]
            if bias is not None:
                contribs.append((bias, g.sum(axis=0)))
            return contribs
        tape.record("linear", [x, weight] + ([bias] if bias is not None else []),
                    out, bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Elementwise sum of two same-shape tensors (no broadcasting)."""
    _check_float("add", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def bwd(g: np.ndarray):
            return [(a, g), (b, g)]
        tape.record("add", [a, b], out, bwd)
    return out


def softmax(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Row softmax over the class axis of an NxC tensor, max-stabilized."""
    _check_float("softmax", x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax: need NxC input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)
    if tape is not None:
        def bwd(g: np.ndarray):
            dot = (g * y).sum(axis=1, keepdims=True)
            return [(x, y * (g - dot))]
        tape.record("softmax", [x], out, bwd)
    return out


def tensor_sum(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Full reduction to a scalar; fixed (C-order) summation order."""
    _check_float("sum", x)
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    if tape is not None:
        def bwd(g: np.ndarray):
            return [(x, np.broadcast_to(g, x.shape).astype(x.data.dtype).copy())]
        tape.record("sum", [x], out, bwd)
    return out


def multiply(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    _check_float("multiply", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"multiply: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if tape is not None:
        def bwd(g: np.ndarray):
            return [(a, g * b.data), (b, g * a.data)]
        tape.record("multiply", [a, b], out, bwd)
    return out
