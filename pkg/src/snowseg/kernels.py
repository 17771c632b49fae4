"""Dense 4-D tensor kernels: convolution, pooling, activation, loss, SGD.

Tensors are plain numpy float64 arrays in (batch, channel, height, width)
layout, C-contiguous. Every kernel is a pure function of its arguments
except :func:`sgd_step`, which updates the parameter/velocity sets it is
handed. Reduction orders are fixed so repeated calls are bit-identical.

The optimized convolution path lowers each sample to a column matrix and
runs a single GEMM; its correctness is pinned against a nested-loop oracle
in the test suite. The transposed convolution is implemented as the exact
adjoint of that lowering (GEMM transpose followed by a scatter-add), which
is a deliberately different code path from the input gradient of
``conv2d_backward`` so the two can cross-check each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError

Tensor = np.ndarray
ParameterSet = dict[str, np.ndarray]


def as_tensor4d(x, name: str = "tensor") -> Tensor:
    """Coerce to a C-contiguous float64 (n, c, h, w) array, validating dims."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (n, c, h, w), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise DimensionError(f"{name} has a zero-sized dimension: shape {arr.shape}")
    return arr


@dataclass
class ConvParams:
    """Kernel, bias, stride and symmetric zero-padding for (transposed) conv.

    For ``conv2d_*`` the kernel is (c_out, c_in, k_h, k_w); for
    ``transposed_conv2d_*`` it is (c_in, c_out, k_h, k_w). The bias always
    has one entry per output channel of the op that consumes it.
    """

    kernel: np.ndarray
    bias: np.ndarray = field(default=None)  # type: ignore[assignment]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.kernel = np.ascontiguousarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 4:
            raise DimensionError(f"kernel must be 4-D, got shape {self.kernel.shape}")
        if self.kernel.shape[2] < 1 or self.kernel.shape[3] < 1:
            raise DimensionError(f"kernel spatial dims must be >= 1, got {self.kernel.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.kernel.shape[0])
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.bias.ndim != 1:
            raise DimensionError(f"bias must be a vector, got shape {self.bias.shape}")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")


def _conv_out_size(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"convolution output {axis} is not a positive integer: "
            f"({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _im2col_sample(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Lower one padded sample (c, hp, wp) to columns (c*kh*kw, oh*ow)."""
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, oh, ow))
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xp[:, u : u + stride * oh : stride, v : v + stride * ow : stride]
    return cols.reshape(c * kh * kw, oh * ow)


def _col2im_sample(
    cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int, stride: int,
    pad_h: int, pad_w: int, oh: int, ow: int,
) -> np.ndarray:
    """Adjoint of :func:`_im2col_sample`: scatter-add columns back to (c, h, w)."""
    img = np.zeros((c, h + 2 * pad_h, w + 2 * pad_w))
    cols = cols.reshape(c, kh, kw, oh, ow)
    for u in range(kh):
        for v in range(kw):
            img[:, u : u + stride * oh : stride, v : v + stride * ow : stride] += cols[:, u, v]
    return img[:, pad_h : pad_h + h, pad_w : pad_w + w]


def _conv2d(x: Tensor, kernel: np.ndarray, bias: np.ndarray, stride: int,
            pad_h: int, pad_w: int) -> Tensor:
    """Internal convolution with possibly asymmetric padding (h vs w)."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    oh = _conv_out_size(h, kh, stride, pad_h, "height")
    ow = _conv_out_size(w, kw, stride, pad_w, "width")
    xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    wmat = kernel.reshape(c_out, c_in * kh * kw)
    out = np.empty((n, c_out, oh, ow))
    for i in range(n):
        cols = _im2col_sample(xp[i], kh, kw, stride, oh, ow)
        out[i] = (wmat @ cols).reshape(c_out, oh, ow)
    out += bias.reshape(1, c_out, 1, 1)
    return out


def conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlate x with p.kernel (c_out, c_in, k_h, k_w) and add bias.

    Output spatial dims are ((size + 2*pad - k) / stride + 1) and must be
    positive integers; a non-integral size raises ConfigurationError.
    """
    x = as_tensor4d(x, "input")
    c_out, c_in, kh, kw = p.kernel.shape
    if x.shape[1] != c_in:
        raise DimensionError(
            f"input channels {x.shape} do not match kernel {p.kernel.shape}"
        )
    if p.bias.shape[0] != c_out:
        raise DimensionError(
            f"bias length {p.bias.shape[0]} does not match kernel c_out {c_out}"
        )
    return _conv2d(x, p.kernel, p.bias, p.stride, p.padding, p.padding)


def conv2d_backward(
    x: Tensor, p: ConvParams, grad_out: Tensor
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv2d_forward(x, p)) w.r.t. x, kernel, bias.

    grad_x is computed by zero-stuffing grad_out to undo the stride and
    convolving with the spatially flipped, channel-transposed kernel.
    """
    x = as_tensor4d(x, "input")
    grad_out = as_tensor4d(grad_out, "grad_out")
    n, c_in, h, w = x.shape
    c_out, kc_in, kh, kw = p.kernel.shape
    if c_in != kc_in:
        raise DimensionError(f"input channels {x.shape} do not match kernel {p.kernel.shape}")
    oh = _conv_out_size(h, kh, p.stride, p.padding, "height")
    ow = _conv_out_size(w, kw, p.stride, p.padding, "width")
    if grad_out.shape != (n, c_out, oh, ow):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output {(n, c_out, oh, ow)}"
        )

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    xp = np.pad(x, ((0, 0), (0, 0), (p.padding, p.padding), (p.padding, p.padding)))
    grad_kernel = np.zeros((c_out, c_in * kh * kw))
    for i in range(n):
        cols = _im2col_sample(xp[i], kh, kw, p.stride, oh, ow)
        grad_kernel += grad_out[i].reshape(c_out, oh * ow) @ cols.T
    grad_kernel = grad_kernel.reshape(c_out, c_in, kh, kw)

    # stuff (s-1) zeros between grad_out elements, then full correlation with
    # the flipped kernel; crop the original padding afterwards
    sh, sw = (oh - 1) * p.stride + 1, (ow - 1) * p.stride + 1
    stuffed = np.zeros((n, c_out, sh, sw))
    stuffed[:, :, :: p.stride, :: p.stride] = grad_out
    flipped = p.kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).copy()
    full = _conv2d(stuffed, flipped, np.zeros(c_in), 1, kh - 1, kw - 1)
    grad_x = full[:, :, p.padding : p.padding + h, p.padding : p.padding + w]
    return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


def maxpool2_forward(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 stride-2 max pooling; argmax holds the winning in-window flat index.

    Window positions are numbered 0..3 in row-major order and ties resolve
    to the first (lowest) index.
    """
    x = as_tensor4d(x, "input")
    n, c, h, w = x.shape
    if h % 2 != 0 or w % 2 != 0:
        raise DimensionError(f"maxpool2 requires even spatial dims, got {h}x{w}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = np.ascontiguousarray(windows).reshape(n, c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), argmax


def maxpool2_backward(argmax: np.ndarray, grad_out: Tensor) -> Tensor:
    """Route each grad_out element to its recorded argmax position."""
    grad_out = as_tensor4d(grad_out, "grad_out")
    if argmax.shape != grad_out.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match argmax shape {argmax.shape}"
        )
    n, c, h2, w2 = grad_out.shape
    windows = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(windows, argmax[..., None], grad_out[..., None], axis=-1)
    out = windows.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(out).reshape(n, c, h2 * 2, w2 * 2)


def relu_forward(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return np.maximum(as_tensor4d(x, "input"), 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """grad_out where x > 0, else 0 (subgradient 0 at exactly 0)."""
    x = as_tensor4d(x, "input")
    grad_out = as_tensor4d(grad_out, "grad_out")
    if x.shape != grad_out.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match input {x.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


def transposed_conv_out_size(size: int, k: int, stride: int, pad: int, axis: str = "dim") -> int:
    out = (size - 1) * stride + k - 2 * pad
    if out < 1:
        raise ConfigurationError(
            f"transposed convolution output {axis} is not positive: "
            f"({size} - 1)*{stride} + {k} - 2*{pad} = {out}"
        )
    return out


def transposed_conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Exact adjoint of conv2d_forward with the same stride/padding, plus bias.

    Kernel layout is (c_in, c_out, k_h, k_w) with x.c == c_in. Output spatial
    dims are (size - 1)*stride + k - 2*pad.
    """
    x = as_tensor4d(x, "input")
    c_in, c_out, kh, kw = p.kernel.shape
    if x.shape[1] != c_in:
        raise DimensionError(f"input channels {x.shape} do not match kernel {p.kernel.shape}")
    if p.bias.shape[0] != c_out:
        raise DimensionError(
            f"bias length {p.bias.shape[0]} does not match kernel c_out {c_out}"
        )
    n, _, h, w = x.shape
    out_h = transposed_conv_out_size(h, kh, p.stride, p.padding, "height")
    out_w = transposed_conv_out_size(w, kw, p.stride, p.padding, "width")
    wmat = p.kernel.reshape(c_in, c_out * kh * kw)
    out = np.empty((n, c_out, out_h, out_w))
    for i in range(n):
        cols = wmat.T @ x[i].reshape(c_in, h * w)
        out[i] = _col2im_sample(
            cols, c_out, out_h, out_w, kh, kw, p.stride, p.padding, p.padding, h, w
        )
    out += p.bias.reshape(1, c_out, 1, 1)
    return out


def transposed_conv2d_backward(
    x: Tensor, p: ConvParams, grad_out: Tensor
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * transposed_conv2d_forward(x, p)).

    By adjointness grad_x is a plain convolution of grad_out with the same
    kernel array, and grad_kernel is the convolution kernel gradient with
    the roles of input and cotangent swapped.
    """
    x = as_tensor4d(x, "input")
    grad_out = as_tensor4d(grad_out, "grad_out")
    n, c_in, h, w = x.shape
    kc_in, c_out, kh, kw = p.kernel.shape
    if c_in != kc_in:
        raise DimensionError(f"input channels {x.shape} do not match kernel {p.kernel.shape}")
    out_h = transposed_conv_out_size(h, kh, p.stride, p.padding, "height")
    out_w = transposed_conv_out_size(w, kw, p.stride, p.padding, "width")
    if grad_out.shape != (n, c_out, out_h, out_w):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(n, c_out, out_h, out_w)}"
        )

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_x = _conv2d(grad_out, p.kernel, np.zeros(c_in), p.stride, p.padding, p.padding)

    gp = np.pad(grad_out, ((0, 0), (0, 0), (p.padding, p.padding), (p.padding, p.padding)))
    grad_kernel = np.zeros((c_in, c_out * kh * kw))
    for i in range(n):
        cols = _im2col_sample(gp[i], kh, kw, p.stride, h, w)
        grad_kernel += x[i].reshape(c_in, h * w) @ cols.T
    return grad_x, grad_kernel.reshape(c_in, c_out, kh, kw), grad_bias


def softmax_ce_loss(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean pixel-wise cross-entropy and its gradient w.r.t. the logits.

    logits is (n, C, h, w); labels is an integer (n, h, w) map with values
    in [0, C). The loss is the unweighted mean of -log softmax(logits)[label]
    over all n*h*w pixels, stabilized by max subtraction. The gradient is
    (softmax - one_hot) / (n*h*w).
    """
    logits = as_tensor4d(logits, "logits")
    labels = np.asarray(labels)
    n, num_classes, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        bi, bh, bw = np.argwhere(bad)[0]
        raise DataError(
            f"label value {labels[bi, bh, bw]} out of range [0, {num_classes}) "
            f"at sample {bi}, pixel ({bh}, {bw})"
        )
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    idx = labels[:, None, :, :]
    npix = n * h * w
    loss = -np.take_along_axis(logp, idx, axis=1).sum() / npix
    grad = ez / sez
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
    grad /= npix
    return float(loss), grad


def zero_velocity(params: ParameterSet) -> ParameterSet:
    """A zero-initialized velocity set matching params."""
    return {k: np.zeros_like(v) for k, v in params.items()}


def sgd_step(
    params: ParameterSet,
    grads: ParameterSet,
    lr: float,
    momentum: float,
    velocity: ParameterSet,
) -> tuple[ParameterSet, ParameterSet]:
    """In-place momentum SGD: v <- momentum*v + grad; param <- param - lr*v.

    Mutates only params and velocity; must not run concurrently on one set.
    """
    if set(params) != set(grads) or set(params) != set(velocity):
        raise DimensionError("params, grads and velocity must share the same keys")
    for name, param in params.items():
        g, v = grads[name], velocity[name]
        if g.shape != param.shape or v.shape != param.shape:
            raise DimensionError(
                f"shape mismatch for '{name}': param {param.shape}, "
                f"grad {g.shape}, velocity {v.shape}"
            )
        v *= momentum
        v += g
        param -= lr * v
    return params, velocity
