"""Declarative VGG-style networks, parameter storage and cost accounting."""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import SpecError

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GAMMA_INIT = 0.5


@dataclass(frozen=True)
class Conv:
    """3x3-style convolution followed by batch norm and ReLU (no conv bias)."""

    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Linear:
    out_features: int


_BLOCK_TYPES = {"conv": Conv, "maxpool": MaxPool, "avgpool": GlobalAvgPool, "linear": Linear}
_BLOCK_NAMES = {cls: name for name, cls in _BLOCK_TYPES.items()}


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    blocks: tuple
    num_classes: int

    def to_dict(self):
        blocks = []
        for b in self.blocks:
            d = {"type": _BLOCK_NAMES[type(b)]}
            d.update(asdict(b))
            blocks.append(d)
        return {"input_shape": list(self.input_shape), "blocks": blocks, "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d):
        try:
            blocks = []
            for b in d["blocks"]:
                b = dict(b)
                kind = b.pop("type")
                if kind not in _BLOCK_TYPES:
                    raise SpecError(f"unknown block type {kind!r}")
                blocks.append(_BLOCK_TYPES[kind](**b))
            return cls(tuple(int(v) for v in d["input_shape"]), tuple(blocks), int(d["num_classes"]))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed network spec: {exc}") from exc

    def conv_channels(self):
        return [b.out_channels for b in self.blocks if isinstance(b, Conv)]

    def with_conv_channels(self, channels):
        """Copy of this spec with the conv widths replaced in order."""
        channels = list(channels)
        if len(channels) != len(self.conv_channels()):
            raise SpecError("channel list length does not match the number of conv blocks")
        it = iter(channels)
        blocks = tuple(Conv(next(it), b.kernel, b.stride, b.pad) if isinstance(b, Conv) else b for b in self.blocks)
        return NetworkSpec(self.input_shape, blocks, self.num_classes)


def vgg_mini(input_shape=(3, 32, 32), num_classes=10, width=1.0):
    """32,32,M,64,64,M,128,128 conv stack, global average pool, linear head."""
    w = lambda c: max(1, int(round(c * width)))
    blocks = (
        Conv(w(32)), Conv(w(32)), MaxPool(),
        Conv(w(64)), Conv(w(64)), MaxPool(),
        Conv(w(128)), Conv(w(128)),
        GlobalAvgPool(), Linear(num_classes),
    )
    return NetworkSpec(tuple(input_shape), blocks, num_classes)


def conv4(input_shape=(1, 28, 28), num_classes=10, widths=(8, 16, 16, 32)):
    """Four conv blocks (pool after the first and third) for MNIST-sized inputs."""
    a, b, c, d = widths
    blocks = (
        Conv(a), MaxPool(),
        Conv(b), Conv(c), MaxPool(),
        Conv(d),
        GlobalAvgPool(), Linear(num_classes),
    )
    return NetworkSpec(tuple(input_shape), blocks, num_classes)


# --------------------------------------------------------------------------
# Shape planning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _Layer:
    kind: str
    index: int  # position among layers of the same kind
    in_shape: tuple
    out_shape: tuple
    block: object


def plan_layers(spec, check_output=True):
    """Propagate shapes through ``spec``; raise SpecError on any inconsistency."""
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecError(f"input shape must be (C, H, W) with positive extents, got {spec.input_shape}")
    shape = tuple(spec.input_shape)
    layers = []
    counts = {"conv": 0, "maxpool": 0, "avgpool": 0, "linear": 0}
    for block in spec.blocks:
        kind = _BLOCK_NAMES.get(type(block))
        if kind is None:
            raise SpecError(f"unsupported block {block!r}")
        if kind == "conv":
            if len(shape) != 3:
                raise SpecError("conv block after flattening")
            c, h, w = shape
            if block.out_channels < 1 or block.kernel < 1 or block.stride < 1 or block.pad < 0:
                raise SpecError(f"invalid conv block {block}")
            if block.kernel > h + 2 * block.pad or block.kernel > w + 2 * block.pad:
                raise SpecError(f"conv kernel {block.kernel} does not fit input {h}x{w}")
            out = (
                block.out_channels,
                ops.conv_output_size(h, block.kernel, block.stride, block.pad),
                ops.conv_output_size(w, block.kernel, block.stride, block.pad),
            )
        elif kind == "maxpool":
            if len(shape) != 3:
                raise SpecError("pooling after flattening")
            c, h, w = shape
            if block.kernel > h or block.kernel > w or block.stride < 1:
                raise SpecError(f"max-pool {block} does not fit input {h}x{w}")
            out = (c, (h - block.kernel) // block.stride + 1, (w - block.kernel) // block.stride + 1)
        elif kind == "avgpool":
            if len(shape) != 3:
                raise SpecError("pooling after flattening")
            out = (shape[0],)
        else:
            if block.out_features < 1:
                raise SpecError(f"invalid linear block {block}")
            out = (block.out_features,)
        layers.append(_Layer(kind, counts[kind], shape, out, block))
        counts[kind] += 1
        shape = out
    if check_output and shape != (spec.num_classes,):
        raise SpecError(f"network output shape {shape} does not match num_classes={spec.num_classes}")
    return layers


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------

class Network:
    """Parameters, BN buffers and the layer plan of one built network.

    ``params`` holds every trainable tensor (conv/linear weights, linear
    biases, BN gamma/beta) in declaration order; ``buffers`` holds BN running
    statistics.  ``channel_table`` lists ``(bn_name, offset, size)`` so that
    global prunable-channel index ``offset + k`` is channel ``k`` of that BN.
    """

    def __init__(self, spec, params, buffers):
        self.spec = spec
        self.layers = plan_layers(spec)
        self.params = params
        self.buffers = buffers
        self.channel_table = []
        offset = 0
        for layer in self.layers:
            if layer.kind == "conv":
                self.channel_table.append((f"bn{layer.index}", offset, layer.out_shape[0]))
                offset += layer.out_shape[0]
        self.total_channels = offset
        self._caches = None

    @property
    def gamma_names(self):
        return [f"{bn}.gamma" for bn, _, _ in self.channel_table]

    @property
    def weight_names(self):
        return [n for n in self.params if n.endswith(".weight")]

    def copy(self):
        return Network(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def forward(self, x, train=True, quantize=None):
        """Logits for a batch.

        In training mode BN uses batch statistics, running statistics are
        updated and the caches needed by :meth:`backward` are kept.  When
        ``quantize`` is given it is applied to conv/linear weights and to every
        block's output.
        """
        q = quantize or (lambda a: a)
        caches = []
        out = x
        for layer in self.layers:
            if layer.kind == "conv":
                i = layer.index
                b = layer.block
                w = q(self.params[f"conv{i}.weight"])
                out, c_conv = ops.conv2d_forward(out, w, None, b.stride, b.pad)
                gamma, beta = self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"]
                rm, rv = self.buffers[f"bn{i}.running_mean"], self.buffers[f"bn{i}.running_var"]
                if train:
                    out, (nm, nv), c_bn = ops.batchnorm_train(out, gamma, beta, rm, rv, BN_MOMENTUM, BN_EPS)
                    rm[...] = nm
                    rv[...] = nv
                else:
                    out = ops.batchnorm_eval(out, gamma, beta, rm, rv, BN_EPS)
                    c_bn = None
                out, c_relu = ops.relu_forward(out)
                caches.append((c_conv, c_bn, c_relu))
            elif layer.kind == "maxpool":
                out, c = ops.maxpool2d_forward(out, layer.block.kernel, layer.block.stride)
                caches.append(c)
            elif layer.kind == "avgpool":
                out, c = ops.avgpool_global_forward(out)
                caches.append(c)
            else:
                i = layer.index
                w = q(self.params[f"fc{i}.weight"])
                bias = q(self.params[f"fc{i}.bias"])
                out, c = ops.linear_forward(out, w, bias)
                caches.append(c)
            out = q(out)
        self._caches = caches if train else None
        return out

    def backward(self, grad_logits, quantize=None):
        """Gradients of every parameter given ``dL/dlogits`` from the last training forward.

        ``quantize`` is applied to the error signal entering each block and
        to each conv/linear weight gradient.
        """
        if self._caches is None:
            raise RuntimeError("backward called without a preceding training-mode forward")
        q = quantize or (lambda a: a)
        grads = {}
        g = grad_logits
        for layer, cache in zip(reversed(self.layers), reversed(self._caches)):
            g = q(g)
            if layer.kind == "conv":
                i = layer.index
                c_conv, c_bn, c_relu = cache
                g = ops.relu_backward(g, c_relu)
                g, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = ops.batchnorm_backward(g, c_bn)
                g, gw, _ = ops.conv2d_backward(g, c_conv)
                grads[f"conv{i}.weight"] = q(gw)
            elif layer.kind == "maxpool":
                g = ops.maxpool2d_backward(g, cache)
            elif layer.kind == "avgpool":
                g = ops.avgpool_global_backward(g, cache)
            else:
                i = layer.index
                g, gw, gb = ops.linear_backward(g, cache)
                grads[f"fc{i}.weight"] = q(gw)
                grads[f"fc{i}.bias"] = q(gb)
        self._caches = None
        return {name: grads[name] for name in self.params}

    def predict(self, x, batch_size=500):
        outs = [self.forward(x[i : i + batch_size], train=False) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.num_classes), dtype=DTYPE)


def tensor_shapes(spec):
    """``(param_shapes, buffer_shapes)`` in declaration order."""
    params, buffers = {}, {}
    for layer in plan_layers(spec):
        if layer.kind == "conv":
            i, b = layer.index, layer.block
            c = b.out_channels
            params[f"conv{i}.weight"] = (c, layer.in_shape[0], b.kernel, b.kernel)
            params[f"bn{i}.gamma"] = (c,)
            params[f"bn{i}.beta"] = (c,)
            buffers[f"bn{i}.running_mean"] = (c,)
            buffers[f"bn{i}.running_var"] = (c,)
        elif layer.kind == "linear":
            i = layer.index
            params[f"fc{i}.weight"] = (layer.block.out_features, int(np.prod(layer.in_shape)))
            params[f"fc{i}.bias"] = (layer.block.out_features,)
    return params, buffers


def build_network(spec, seed=0, dtype=DTYPE):
    """Build and initialise a network; the generator is numpy's PCG64 seeded with ``seed``.

    Weights are drawn in declaration order from ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    param_shapes, buffer_shapes = tensor_shapes(spec)
    params = {}
    for name, shape in param_shapes.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        elif name.endswith(".gamma"):
            params[name] = np.full(shape, GAMMA_INIT, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    buffers = {
        name: (np.zeros if name.endswith("mean") else np.ones)(shape, dtype=dtype)
        for name, shape in buffer_shapes.items()
    }
    return Network(spec, params, buffers)


# --------------------------------------------------------------------------
# Cost accounting
# --------------------------------------------------------------------------

TRAIN_FLOPS_MULTIPLIER = 3


@dataclass
class CostReport:
    """FLOPs accounting; phase totals are exact integers."""

    forward_flops: int = 0
    train_flops: int = 0
    params: int = 0
    layers: list = field(default_factory=list)
    phases: dict = field(default_factory=dict)
    epoch_flops: list = field(default_factory=list)

    def add_epoch(self, phase, flops):
        flops = int(flops)
        self.phases[phase] = self.phases.get(phase, 0) + flops
        self.epoch_flops.append((phase, flops))

    @property
    def total(self):
        return sum(self.phases.values())

    def to_dict(self):
        return {
            "forward_flops_per_sample": self.forward_flops,
            "train_flops_per_sample": self.train_flops,
            "params": self.params,
            "phases": dict(self.phases),
            "total_flops": self.total,
        }


def count_flops(network, batch_size=1):
    """Forward and training FLOPs for ``batch_size`` samples.

    conv ``2*Cout*Hout*Wout*Cin*K^2``, linear ``2*in*out``, BN ``4*C*H*W``,
    ReLU and pooling one per output element; training is three forward passes.
    Accepts a :class:`Network` or a :class:`NetworkSpec`.
    """
    spec = network.spec if isinstance(network, Network) else network
    layers = plan_layers(spec, check_output=False)
    per_layer = []
    for layer in layers:
        if layer.kind == "conv":
            c_out, h, w = layer.out_shape
            k = layer.block.kernel
            conv = 2 * c_out * h * w * layer.in_shape[0] * k * k
            per_layer.append((f"conv{layer.index}", conv))
            per_layer.append((f"bn{layer.index}", 4 * c_out * h * w))
            per_layer.append((f"relu{layer.index}", c_out * h * w))
        elif layer.kind in ("maxpool", "avgpool"):
            per_layer.append((f"{layer.kind}{layer.index}", int(np.prod(layer.out_shape))))
        else:
            per_layer.append((f"fc{layer.index}", 2 * int(np.prod(layer.in_shape)) * layer.block.out_features))
    fwd = sum(f for _, f in per_layer) * int(batch_size)
    return CostReport(
        forward_flops=fwd,
        train_flops=TRAIN_FLOPS_MULTIPLIER * fwd,
        params=count_params(spec),
        layers=per_layer,
    )


def count_params(network):
    """Trainable parameter count (running statistics excluded)."""
    spec = network.spec if isinstance(network, Network) else network
    total = 0
    for layer in plan_layers(spec, check_output=False):
        if layer.kind == "conv":
            k = layer.block.kernel
            total += layer.out_shape[0] * layer.in_shape[0] * k * k + 2 * layer.out_shape[0]
        elif layer.kind == "linear":
            total += int(np.prod(layer.in_shape)) * layer.block.out_features + layer.block.out_features
    return total
