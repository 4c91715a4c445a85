"""Composable network blocks: conv units, the atrous residual skip path,
the two-stage 3D attention gate and the residual convolution block.

Blocks own their parameters and are pure functions of (input node,
parameters); they can be evaluated concurrently on distinct tapes. The
batch-norm unit is the one exception: in training mode its running
statistics advance after each call.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import Node, Parameter
from .errors import ConfigError
from .ops import ConvSpec
from .tensor import Tensor, dtype_for

ATTENTION_RATIO = 8
ATTENTION_KERNEL = (7, 7, 7)


def he_uniform(rng: np.random.Generator, dims, fan_in: int, precision: int) -> Tensor:
    """Fan-in scaled uniform init suited to ReLU networks."""
    limit = float(np.sqrt(6.0 / fan_in))
    arr = rng.uniform(-limit, limit, size=tuple(dims))
    return Tensor(arr.astype(dtype_for(precision)))


class LayerNormUnit:
    """Per-(sample, channel) normalization over V,H,W with learnable scale/shift."""

    kind = "layer"

    def __init__(self, name: str, channels: int, eps: float, precision: int):
        dt = dtype_for(precision)
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", Tensor(np.ones(channels, dtype=dt)))
        self.beta = Parameter(f"{name}.beta", Tensor(np.zeros(channels, dtype=dt)))

    def __call__(self, x: Node, training: bool = False) -> Node:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self):
        return [self.gamma, self.beta]


class BatchNormUnit:
    """Per-channel normalization over (N, V, H, W) with running statistics."""

    kind = "batch"

    def __init__(self, name: str, channels: int, eps: float, precision: int,
                 momentum: float = 0.99):
        dt = dtype_for(precision)
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", Tensor(np.ones(channels, dtype=dt)))
        self.beta = Parameter(f"{name}.beta", Tensor(np.zeros(channels, dtype=dt)))
        self.running_mean = Parameter(f"{name}.running_mean",
                                      Tensor(np.zeros(channels, dtype=dt)),
                                      trainable=False)
        self.running_var = Parameter(f"{name}.running_var",
                                     Tensor(np.ones(channels, dtype=dt)),
                                     trainable=False)

    def __call__(self, x: Node, training: bool = False) -> Node:
        out, new_mean, new_var = ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean.value,
            self.running_var.value, training=training, momentum=self.momentum,
            eps=self.eps)
        if training:
            self.running_mean.assign(new_mean)
            self.running_var.assign(new_var)
        return out

    def parameters(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]


def make_norm(kind: str, name: str, channels: int, eps: float, precision: int,
              momentum: float = 0.99):
    if kind == "layer":
        return LayerNormUnit(name, channels, eps, precision)
    if kind == "batch":
        return BatchNormUnit(name, channels, eps, precision, momentum)
    raise ConfigError(f"norm_kind must be 'layer' or 'batch', got {kind!r}")


class ConvUnit:
    """One convolution, optionally followed by normalization and ReLU."""

    def __init__(self, name: str, cin: int, cout: int, kernel, dilation: int,
                 rng: np.random.Generator, precision: int,
                 norm_kind: str | None = "layer", activation: bool = True,
                 eps: float = 1e-5, momentum: float = 0.99):
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        self.spec = ConvSpec(cin, cout, kernel, dilation=dilation)
        fan_in = int(np.prod(kernel)) * cin
        self.w = Parameter(f"{name}.w",
                           he_uniform(rng, self.spec.weight_dims(), fan_in, precision))
        self.b = Parameter(f"{name}.b",
                           Tensor(np.zeros(cout, dtype=dtype_for(precision))))
        self.norm = None if norm_kind is None else make_norm(
            norm_kind, f"{name}.norm", cout, eps, precision, momentum)
        self.activation = activation

    def __call__(self, x: Node, training: bool = False) -> Node:
        y = ops.conv3d(x, self.spec, self.w, self.b)
        if self.norm is not None:
            y = self.norm(y, training)
        if self.activation:
            y = ops.relu(y)
        return y

    def parameters(self):
        out = [self.w, self.b]
        if self.norm is not None:
            out.extend(self.norm.parameters())
        return out


class AtrousResidualPath:
    """Skip-path block: 1x1x1 conv then two dilated 3x3x3 convs (rates 3 and
    9), each with normalization and ReLU, added back onto the input."""

    def __init__(self, name: str, channels: int, rng, precision: int,
                 norm_kind: str = "layer", eps: float = 1e-5, momentum: float = 0.99):
        common = dict(rng=rng, precision=precision, norm_kind=norm_kind,
                      eps=eps, momentum=momentum)
        self.branch1 = ConvUnit(f"{name}.conv1x1", channels, channels, 1, 1, **common)
        self.branch2 = ConvUnit(f"{name}.conv3x3d3", channels, channels, 3, 3, **common)
        self.branch3 = ConvUnit(f"{name}.conv3x3d9", channels, channels, 3, 9, **common)

    def __call__(self, x: Node, training: bool = False) -> Node:
        h = self.branch1(x, training)
        h = self.branch2(h, training)
        h = self.branch3(h, training)
        return ops.add(h, x)

    def parameters(self):
        return (self.branch1.parameters() + self.branch2.parameters()
                + self.branch3.parameters())


class ResidualConvBlock:
    """Two conv-norm-ReLU layers plus a shortcut; a 1x1x1 projection aligns
    channels when the input and output widths differ."""

    def __init__(self, name: str, cin: int, cout: int, rng, precision: int,
                 norm_kind: str = "layer", eps: float = 1e-5, momentum: float = 0.99):
        common = dict(rng=rng, precision=precision, norm_kind=norm_kind,
                      eps=eps, momentum=momentum)
        self.conv1 = ConvUnit(f"{name}.conv1", cin, cout, 3, 1, **common)
        self.conv2 = ConvUnit(f"{name}.conv2", cout, cout, 3, 1, **common)
        self.project = None
        if cin != cout:
            self.project = ConvUnit(f"{name}.proj", cin, cout, 1, 1, rng=rng,
                                    precision=precision, norm_kind=None,
                                    activation=False)

    def __call__(self, x: Node, training: bool = False) -> Node:
        h = self.conv2(self.conv1(x, training), training)
        shortcut = x if self.project is None else self.project(x, training)
        return ops.add(h, shortcut)

    def parameters(self):
        out = self.conv1.parameters() + self.conv2.parameters()
        if self.project is not None:
            out.extend(self.project.parameters())
        return out


class AttentionModule3D:
    """Channel gate then volume gate.

    The channel gate squeezes V,H,W with global average and max pooling,
    runs both descriptors through one shared bottleneck MLP (reduction 8)
    and merges them by summation under a sigmoid. The volume gate pools
    over channels, concatenates the two maps and applies a 7x7x7
    convolution under a sigmoid. Both gates lie strictly in (0, 1).
    """

    def __init__(self, name: str, channels: int, rng, precision: int):
        if channels % ATTENTION_RATIO != 0:
            raise ConfigError(f"{name}: channels ({channels}) must be divisible "
                              f"by the attention reduction ratio {ATTENTION_RATIO}")
        hidden = channels // ATTENTION_RATIO
        self.w0 = Parameter(f"{name}.mlp.w0",
                            he_uniform(rng, (hidden, channels), channels, precision))
        self.w1 = Parameter(f"{name}.mlp.w1",
                            he_uniform(rng, (channels, hidden), hidden, precision))
        self.conv = ConvUnit(f"{name}.conv7", 2, 1, ATTENTION_KERNEL, 1, rng=rng,
                             precision=precision, norm_kind=None, activation=False)

    def gates(self, f: Node, training: bool = False) -> tuple[Node, Node, Node]:
        """Returns (gated output, channel gate, volume gate)."""
        avg_c = ops.pool3d(f, "avg", "global")
        max_c = ops.pool3d(f, "max", "global")
        mc = ops.sigmoid(ops.add(ops.shared_mlp(avg_c, self.w0, self.w1),
                                 ops.shared_mlp(max_c, self.w0, self.w1)))
        f1 = ops.mul(f, mc)
        avg_v = ops.pool3d(f1, "avg", "channel")
        max_v = ops.pool3d(f1, "max", "channel")
        mv = ops.sigmoid(self.conv(ops.concat_channels(avg_v, max_v), training))
        f2 = ops.mul(f1, mv)
        return f2, mc, mv

    def __call__(self, f: Node, training: bool = False) -> Node:
        return self.gates(f, training)[0]

    def parameters(self):
        return [self.w0, self.w1] + self.conv.parameters()
