"""FCN-8 as a fixed computation graph over the numeric kernels.

The network is a VGG16-shaped encoder (conv counts 2,2,3,3,3; all 3x3,
same-padding, ReLU after each conv; 2x2 max-pool after each block) whose
channel widths scale by a rational factor, followed by 1x1 score layers,
two skip fusions with the pool4 and pool3 stages, and transposed
convolutions upsampling x2, x2, x8 back to the input resolution. There are
no fully connected layers anywhere, and the input spatial dims must be
multiples of 32 so the five poolings divide evenly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError
from .kernels import (
    ConvParams,
    ParameterSet,
    Tensor,
    as_tensor4d,
    conv2d_backward,
    conv2d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    softmax_ce_loss,
    transposed_conv2d_backward,
    transposed_conv2d_forward,
)

ENCODER_WIDTHS = (64, 128, 256, 512, 512)
ENCODER_CONVS = (2, 2, 3, 3, 3)

MAGIC = b"SNWSEG1"


@dataclass(frozen=True)
class ModelConfig:
    """Sizes, class count and init seed for one FCN-8 instance."""

    num_classes: int = 20
    width_scale: Fraction = Fraction(1, 4)
    input_h: int = 224
    input_w: int = 384
    seed: int = 0
    learn_upsampling: bool = True

    def __post_init__(self):
        object.__setattr__(self, "width_scale", Fraction(self.width_scale))
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.width_scale <= 0:
            raise ConfigurationError(f"width_scale must be positive, got {self.width_scale}")
        if self.input_h % 32 != 0 or self.input_w % 32 != 0 or self.input_h < 32 or self.input_w < 32:
            raise ConfigurationError(
                f"input dims must be positive multiples of 32 (five 2x poolings), "
                f"got {self.input_h}x{self.input_w}"
            )
        for base in ENCODER_WIDTHS:
            if round(base * self.width_scale) < 1:
                raise ConfigurationError(
                    f"width_scale {self.width_scale} rounds encoder width {base} below 1"
                )

    @property
    def scaled_widths(self) -> tuple[int, ...]:
        return tuple(int(round(base * self.width_scale)) for base in ENCODER_WIDTHS)


@dataclass(frozen=True)
class LayerSpec:
    """One node of the fixed graph: kind, wiring and conv geometry."""

    name: str
    kind: str  # conv | relu | pool | tconv | add
    inputs: tuple[str, ...]
    c_in: int = 0
    c_out: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    trainable: bool = True

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "tconv")

    @property
    def param_size(self) -> int:
        if not self.has_params:
            return 0
        return self.c_in * self.c_out * self.kernel_size ** 2 + self.c_out


@dataclass(frozen=True)
class NetworkGraph:
    """Ordered layer list plus the named taps the FCN-8 wiring uses."""

    config: ModelConfig
    layers: tuple[LayerSpec, ...]
    taps: dict[str, str] = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return sum(layer.param_size for layer in self.layers)

    def parameterized_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.has_params]


def build_fcn8(cfg: ModelConfig) -> NetworkGraph:
    """Assemble the FCN-8 layer list for the given configuration."""
    widths = cfg.scaled_widths
    layers: list[LayerSpec] = []
    prev = "input"
    c_prev = 3
    pool_names: list[str] = []

    for block, (width, n_convs) in enumerate(zip(widths, ENCODER_CONVS), start=1):
        for j in range(1, n_convs + 1):
            conv = f"conv{block}_{j}"
            layers.append(LayerSpec(conv, "conv", (prev,), c_in=c_prev, c_out=width,
                                    kernel_size=3, stride=1, padding=1))
            relu = f"relu{block}_{j}"
            layers.append(LayerSpec(relu, "relu", (conv,)))
            prev, c_prev = relu, width
        pool = f"pool{block}"
        layers.append(LayerSpec(pool, "pool", (prev,)))
        pool_names.append(pool)
        prev = pool

    nc = cfg.num_classes
    layers.append(LayerSpec("score5", "conv", ("pool5",), c_in=widths[4], c_out=nc,
                            kernel_size=1))
    layers.append(LayerSpec("up2a", "tconv", ("score5",), c_in=nc, c_out=nc,
                            kernel_size=4, stride=2, padding=1,
                            trainable=cfg.learn_upsampling))
    layers.append(LayerSpec("score4", "conv", ("pool4",), c_in=widths[3], c_out=nc,
                            kernel_size=1))
    layers.append(LayerSpec("fuse4", "add", ("up2a", "score4")))
    layers.append(LayerSpec("up2b", "tconv", ("fuse4",), c_in=nc, c_out=nc,
                            kernel_size=4, stride=2, padding=1,
                            trainable=cfg.learn_upsampling))
    layers.append(LayerSpec("score3", "conv", ("pool3",), c_in=widths[2], c_out=nc,
                            kernel_size=1))
    layers.append(LayerSpec("fuse3", "add", ("up2b", "score3")))
    layers.append(LayerSpec("up8", "tconv", ("fuse3",), c_in=nc, c_out=nc,
                            kernel_size=16, stride=8, padding=4,
                            trainable=cfg.learn_upsampling))

    return NetworkGraph(config=cfg, layers=tuple(layers),
                        taps={"pool3": "pool3", "pool4": "pool4", "logits": "up8"})


def bilinear_kernel(factor: int, size: int) -> np.ndarray:
    """2-D interpolation weights: outer product of the 1-D triangle profile."""
    half = (size + 1) // 2
    center = half - 1 if size % 2 == 1 else half - 0.5
    profile = 1.0 - np.abs(np.arange(size) - center) / half
    return np.outer(profile, profile)


def init_parameters(graph: NetworkGraph, seed: int | None = None) -> ParameterSet:
    """He-normal conv kernels, zero biases, bilinear transposed-conv kernels.

    Deterministic for a given seed; the transposed-conv kernels map channel
    i to channel i with the fixed interpolation stencil and draw nothing
    from the generator.
    """
    if seed is None:
        seed = graph.config.seed
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for layer in graph.layers:
        if layer.kind == "conv":
            fan_in = layer.c_in * layer.kernel_size ** 2
            std = np.sqrt(2.0 / fan_in)
            params[f"{layer.name}.kernel"] = rng.normal(
                0.0, std, size=(layer.c_out, layer.c_in, layer.kernel_size, layer.kernel_size))
            params[f"{layer.name}.bias"] = np.zeros(layer.c_out)
        elif layer.kind == "tconv":
            kernel = np.zeros((layer.c_in, layer.c_out, layer.kernel_size, layer.kernel_size))
            stencil = bilinear_kernel(layer.stride, layer.kernel_size)
            for c in range(min(layer.c_in, layer.c_out)):
                kernel[c, c] = stencil
            params[f"{layer.name}.kernel"] = kernel
            params[f"{layer.name}.bias"] = np.zeros(layer.c_out)
    return params


def _layer_conv_params(layer: LayerSpec, params: ParameterSet) -> ConvParams:
    return ConvParams(
        kernel=params[f"{layer.name}.kernel"],
        bias=params[f"{layer.name}.bias"],
        stride=layer.stride,
        padding=layer.padding,
    )


def _run_forward(graph: NetworkGraph, params: ParameterSet, x: Tensor):
    values: dict[str, Tensor] = {"input": x}
    pool_argmax: dict[str, np.ndarray] = {}
    for layer in graph.layers:
        if layer.kind == "conv":
            values[layer.name] = conv2d_forward(values[layer.inputs[0]],
                                                _layer_conv_params(layer, params))
        elif layer.kind == "relu":
            values[layer.name] = relu_forward(values[layer.inputs[0]])
        elif layer.kind == "pool":
            y, argmax = maxpool2_forward(values[layer.inputs[0]])
            values[layer.name] = y
            pool_argmax[layer.name] = argmax
        elif layer.kind == "tconv":
            values[layer.name] = transposed_conv2d_forward(values[layer.inputs[0]],
                                                           _layer_conv_params(layer, params))
        elif layer.kind == "add":
            a, b = (values[ref] for ref in layer.inputs)
            if a.shape != b.shape:
                raise DimensionError(
                    f"skip fusion '{layer.name}' shapes differ: {a.shape} vs {b.shape}")
            values[layer.name] = a + b
        else:
            raise ConfigurationError(f"unknown layer kind '{layer.kind}'")
    return values, pool_argmax


def _check_input(graph: NetworkGraph, x: Tensor) -> Tensor:
    x = as_tensor4d(x, "input")
    cfg = graph.config
    if x.shape[1:] != (3, cfg.input_h, cfg.input_w):
        raise DimensionError(
            f"input shape {x.shape} does not match configured "
            f"(n, 3, {cfg.input_h}, {cfg.input_w})"
        )
    return x


def forward(graph: NetworkGraph, params: ParameterSet, x: Tensor) -> Tensor:
    """Run the graph; logits come back at the input resolution."""
    x = _check_input(graph, x)
    values, _ = _run_forward(graph, params, x)
    return values[graph.taps["logits"]]


def _run_backward(graph: NetworkGraph, params: ParameterSet,
                  values: dict[str, Tensor], pool_argmax: dict[str, np.ndarray],
                  grad_logits: Tensor) -> ParameterSet:
    cot: dict[str, Tensor] = {graph.taps["logits"]: grad_logits}
    grads: ParameterSet = {}

    def send(ref: str, g: Tensor):
        if ref == "input":
            return
        if ref in cot:
            cot[ref] = cot[ref] + g
        else:
            cot[ref] = g

    for layer in reversed(graph.layers):
        g = cot.pop(layer.name, None)
        if g is None:
            continue
        if layer.kind == "conv":
            gx, gk, gb = conv2d_backward(values[layer.inputs[0]],
                                         _layer_conv_params(layer, params), g)
            grads[f"{layer.name}.kernel"] = gk
            grads[f"{layer.name}.bias"] = gb
            send(layer.inputs[0], gx)
        elif layer.kind == "tconv":
            gx, gk, gb = transposed_conv2d_backward(values[layer.inputs[0]],
                                                    _layer_conv_params(layer, params), g)
            grads[f"{layer.name}.kernel"] = gk
            grads[f"{layer.name}.bias"] = gb
            send(layer.inputs[0], gx)
        elif layer.kind == "relu":
            send(layer.inputs[0], relu_backward(values[layer.inputs[0]], g))
        elif layer.kind == "pool":
            send(layer.inputs[0], maxpool2_backward(pool_argmax[layer.name], g))
        elif layer.kind == "add":
            for ref in layer.inputs:
                send(ref, g)
    return grads


def loss_and_gradients(graph: NetworkGraph, params: ParameterSet,
                       x: Tensor, labels: np.ndarray) -> tuple[float, ParameterSet]:
    """Pixel-wise cross-entropy over a batch and its parameter gradients."""
    x = _check_input(graph, x)
    values, pool_argmax = _run_forward(graph, params, x)
    loss, grad_logits = softmax_ce_loss(values[graph.taps["logits"]], labels)
    grads = _run_backward(graph, params, values, pool_argmax, grad_logits)
    return loss, grads


def predict_labels(logits: Tensor) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class ID."""
    logits = as_tensor4d(logits, "logits")
    return logits.argmax(axis=1)


def save_parameters(graph: NetworkGraph, params: ParameterSet, path) -> None:
    """Write the binary parameter file (layout documented in the README)."""
    cfg = graph.config
    player = graph.parameterized_layers()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", cfg.num_classes))
        fh.write(struct.pack("<qq", cfg.width_scale.numerator, cfg.width_scale.denominator))
        fh.write(struct.pack("<I", len(player)))
        for layer in player:
            for part in ("kernel", "bias"):
                arr = np.ascontiguousarray(params[f"{layer.name}.{part}"], dtype="<f8")
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())


def load_parameters(path, input_h: int = 224, input_w: int = 384,
                    learn_upsampling: bool = True) -> tuple[NetworkGraph, ParameterSet]:
    """Rebuild the graph from the file header and read its parameters.

    The input resolution is not part of the file (the layer list does not
    depend on it), so the caller supplies it; the default is the standard
    training size.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"'{path}' is not a parameter file (bad magic {magic!r})")

        def read(fmt):
            size = struct.calcsize(fmt)
            buf = fh.read(size)
            if len(buf) != size:
                raise DataError(f"'{path}' is truncated")
            return struct.unpack(fmt, buf)

        (num_classes,) = read("<I")
        ws_num, ws_den = read("<qq")
        (layer_count,) = read("<I")
        cfg = ModelConfig(num_classes=num_classes, width_scale=Fraction(ws_num, ws_den),
                          input_h=input_h, input_w=input_w,
                          learn_upsampling=learn_upsampling)
        graph = build_fcn8(cfg)
        player = graph.parameterized_layers()
        if layer_count != len(player):
            raise DataError(
                f"'{path}' declares {layer_count} parameterized layers, "
                f"graph has {len(player)}"
            )
        params: ParameterSet = {}
        for layer in player:
            for part in ("kernel", "bias"):
                (ndim,) = read("<I")
                shape = read(f"<{ndim}I")
                count = int(np.prod(shape)) if ndim else 1
                buf = fh.read(count * 8)
                if len(buf) != count * 8:
                    raise DataError(f"'{path}' is truncated")
                arr = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
                expect = (
                    (layer.c_out, layer.c_in, layer.kernel_size, layer.kernel_size)
                    if layer.kind == "conv"
                    else (layer.c_in, layer.c_out, layer.kernel_size, layer.kernel_size)
                ) if part == "kernel" else (layer.c_out,)
                if arr.shape != expect:
                    raise DataError(
                        f"'{path}': layer '{layer.name}' {part} has shape {arr.shape}, "
                        f"expected {expect}"
                    )
                params[f"{layer.name}.{part}"] = arr
        if fh.read(1):
            raise DataError(f"'{path}' has trailing bytes")
    return graph, params


def trainable_names(graph: NetworkGraph) -> list[str]:
    """Parameter keys that training is allowed to update."""
    names = []
    for layer in graph.parameterized_layers():
        if layer.trainable:
            names.append(f"{layer.name}.kernel")
            names.append(f"{layer.name}.bias")
    return names
