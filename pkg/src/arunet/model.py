"""Assembly of the full encoder-decoder segmentation network.

The encoder stacks `levels` residual conv blocks, each feeding an atrous
residual skip path and a 2x2x2 max-pool; a residual bottleneck sits below
the deepest level. Each decoder level upsamples, concatenates its skip,
applies two conv-norm-ReLU layers and an attention gate. A 1x1x1
convolution plus sigmoid produces the per-voxel foreground probability.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .autodiff import Parameter, Tape, Node
from .blocks import (ATTENTION_KERNEL, ATTENTION_RATIO, AttentionModule3D,
                     ConvUnit, AtrousResidualPath, ResidualConvBlock)
from .errors import CheckpointError, ConfigError, EngineError, ShapeError
from .tensor import Tensor, deserialize, dtype_for, serialize

CHECKPOINT_MAGIC = b"ARUN"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; scales from desk size to full size."""

    levels: int = 4
    base_channels: int = 16
    input_shape: tuple[int, int, int] = (16, 64, 64)
    norm_kind: str = "layer"
    seed: int = 0
    precision: int = 32
    norm_eps: float = 1e-5
    bn_momentum: float = 0.99

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def validate(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 8 or self.base_channels % 8:
            raise ConfigError(f"base_channels must be a positive multiple of 8 "
                              f"(attention MLP constraint), got {self.base_channels}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be three positive extents, "
                              f"got {self.input_shape}")
        if self.norm_kind not in ("layer", "batch"):
            raise ConfigError(f"norm_kind must be 'layer' or 'batch', "
                              f"got {self.norm_kind!r}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.norm_eps <= 0:
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps}")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ConfigError(f"bn_momentum must be in [0, 1), got {self.bn_momentum}")
        period = 2 ** (self.levels - 1)
        for axis, extent in zip("VHW", self.input_shape):
            if extent % period:
                raise ConfigError(f"input {axis}={extent} is not divisible by "
                                  f"2^(levels-1) = {period}")
            e = extent
            for level in range(self.levels):
                if e % 2:
                    raise ConfigError(
                        f"input {axis}={extent}: window pooling at level {level} "
                        f"would see odd extent {e}")
                e //= 2

    def channels_at(self, level: int) -> int:
        """Channel width base * 2^level; the bottleneck sits at index `levels`."""
        return self.base_channels * (2 ** level)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config fields: {sorted(extra)}")
        kwargs = dict(d)
        if "input_shape" in kwargs:
            kwargs["input_shape"] = tuple(kwargs["input_shape"])
        return cls(**kwargs)

    def matches(self, other: "ModelConfig") -> bool:
        """Equality of every model-defining field; seed only affects init."""
        keys = ("levels", "base_channels", "input_shape", "norm_kind",
                "precision", "norm_eps", "bn_momentum")
        return all(getattr(self, k) == getattr(other, k) for k in keys)


def _unit_census(kernel: int, cin: int, cout: int, norm: bool) -> int:
    n = kernel ** 3 * cin * cout + cout
    return n + (2 * cout if norm else 0)


def expected_census(config: ModelConfig) -> dict[str, int]:
    """Closed-form trainable parameter count per named block."""
    c = config.channels_at
    census: dict[str, int] = {}

    def res_block(cin, cout):
        n = _unit_census(3, cin, cout, True) + _unit_census(3, cout, cout, True)
        if cin != cout:
            n += _unit_census(1, cin, cout, False)
        return n

    def arp(ch):
        return (_unit_census(1, ch, ch, True) + 2 * _unit_census(3, ch, ch, True))

    def attention(ch):
        hidden = ch // ATTENTION_RATIO
        mlp = hidden * ch + ch * hidden
        conv = int(np.prod(ATTENTION_KERNEL)) * 2 * 1 + 1
        return mlp + conv

    prev = 1
    for level in range(config.levels):
        census[f"enc{level}"] = res_block(prev, c(level))
        census[f"arp{level}"] = arp(c(level))
        prev = c(level)
    census["bottleneck"] = res_block(c(config.levels - 1), c(config.levels))
    for level in reversed(range(config.levels)):
        concat = c(level) + c(level + 1)
        census[f"dec{level}"] = (_unit_census(3, concat, c(level), True)
                                 + _unit_census(3, c(level), c(level), True)
                                 + attention(c(level)))
    census["head"] = config.base_channels + 1
    census["total"] = sum(census.values())
    return census


class AtrousResUNet:
    """The assembled parameterized network."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
        common = dict(rng=rng, precision=config.precision,
                      norm_kind=config.norm_kind, eps=config.norm_eps,
                      momentum=config.bn_momentum)
        c = config.channels_at
        self.encoders = []
        self.arps = []
        prev = 1
        for level in range(config.levels):
            self.encoders.append(ResidualConvBlock(f"enc{level}", prev, c(level),
                                                   **common))
            self.arps.append(AtrousResidualPath(f"arp{level}", c(level), **common))
            prev = c(level)
        self.bottleneck = ResidualConvBlock("bottleneck", c(config.levels - 1),
                                            c(config.levels), **common)
        self.dec_conv1 = {}
        self.dec_conv2 = {}
        self.attentions = {}
        for level in reversed(range(config.levels)):
            concat = c(level) + c(level + 1)
            self.dec_conv1[level] = ConvUnit(f"dec{level}.conv1", concat, c(level),
                                             3, 1, **common)
            self.dec_conv2[level] = ConvUnit(f"dec{level}.conv2", c(level), c(level),
                                             3, 1, **common)
            self.attentions[level] = AttentionModule3D(f"dec{level}.attn", c(level),
                                                       rng, config.precision)
        self.head = ConvUnit("head.conv", config.base_channels, 1, 1, 1, rng=rng,
                             precision=config.precision, norm_kind=None,
                             activation=False)

    def _blocks(self):
        for level in range(self.config.levels):
            yield self.encoders[level]
            yield self.arps[level]
        yield self.bottleneck
        for level in reversed(range(self.config.levels)):
            yield self.dec_conv1[level]
            yield self.dec_conv2[level]
            yield self.attentions[level]
        yield self.head

    def state_parameters(self) -> list[Parameter]:
        """Every parameter and buffer, in fixed construction order."""
        out = []
        for block in self._blocks():
            out.extend(block.parameters())
        return out

    def parameters(self) -> list[Parameter]:
        return [p for p in self.state_parameters() if p.trainable]

    def parameter_census(self) -> dict[str, int]:
        census: dict[str, int] = {}
        for p in self.parameters():
            block = p.name.split(".", 1)[0]
            census[block] = census.get(block, 0) + p.value.size
        census["total"] = sum(census.values())
        return census

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, tape: Tape, x, training: bool = False) -> Node:
        """Per-voxel foreground probability, shape (N, V, H, W, 1) in (0, 1)."""
        if isinstance(x, Tensor):
            x = tape.constant(x)
        dims = x.value.dims
        want = self.config.input_shape
        if len(dims) != 5 or dims[1:4] != want or dims[4] != 1:
            raise ShapeError(f"input must be (N, {want[0]}, {want[1]}, {want[2]}, 1), "
                             f"got {dims}")
        if x.value.precision != self.config.precision:
            raise ShapeError(f"input precision float{x.value.precision} does not "
                             f"match model float{self.config.precision}")
        h = x
        skips = []
        for level in range(self.config.levels):
            h = self.encoders[level](h, training)
            skips.append(self.arps[level](h, training))
            h = ops.pool3d(h, "max", "window")
        h = self.bottleneck(h, training)
        for level in reversed(range(self.config.levels)):
            h = ops.upsample3d(h)
            h = ops.concat_channels(h, skips[level])
            h = self.dec_conv1[level](h, training)
            h = self.dec_conv2[level](h, training)
            h = self.attentions[level](h, training)
        return ops.sigmoid(self.head(h, training))

    def predict(self, x: Tensor) -> Tensor:
        """Inference forward pass on a fresh tape."""
        return self.forward(Tape(), x, training=False).value


def build(config: ModelConfig) -> AtrousResUNet:
    """Construct the network with seed-deterministic initialization.

    The actual per-block parameter counts are checked against the
    closed-form census before the model is returned.
    """
    model = AtrousResUNet(config)
    actual = model.parameter_census()
    expected = expected_census(config)
    if actual != expected:
        raise EngineError(f"parameter census mismatch: built {actual}, "
                          f"expected {expected}")
    return model


def save_checkpoint(model: AtrousResUNet) -> bytes:
    """Manifest (version, config echo, ordered names) then raw tensors."""
    params = model.state_parameters()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "parameters": [p.name for p in params],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)), blob]
    chunks.extend(serialize(p.value) for p in params)
    return b"".join(chunks)


def load_checkpoint(data: bytes, config: ModelConfig | None = None) -> AtrousResUNet:
    """Rebuild a model from checkpoint bytes.

    When a config is supplied it must match the stored one on every
    model-defining field (seed excluded; weights are loaded, not drawn).
    """
    head = len(CHECKPOINT_MAGIC) + 12
    if len(data) < head or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint stream (bad or missing magic)")
    version, manifest_len = struct.unpack_from("<IQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < head + manifest_len:
        raise CheckpointError("truncated checkpoint manifest")
    try:
        manifest = json.loads(data[head:head + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    stored = ModelConfig.from_dict(manifest["config"])
    if config is not None and not stored.matches(config):
        raise CheckpointError(f"checkpoint config {stored} does not match "
                              f"requested {config}")
    model = AtrousResUNet(stored)
    params = model.state_parameters()
    names = manifest.get("parameters", [])
    expected_names = [p.name for p in params]
    if names != expected_names:
        unknown = sorted(set(names) - set(expected_names))
        missing = sorted(set(expected_names) - set(names))
        raise CheckpointError(f"parameter name mismatch: unknown {unknown[:4]}, "
                              f"missing {missing[:4]}")
    offset = head + manifest_len
    for p in params:
        value, offset = deserialize(data, offset)
        if value.dims != p.value.dims:
            raise CheckpointError(f"{p.name}: stored shape {value.dims} != "
                                  f"built shape {p.value.dims}")
        if value.precision != p.value.precision:
            raise CheckpointError(f"{p.name}: stored precision float{value.precision}"
                                  f" != built float{p.value.precision}")
        p.assign(value)
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after last tensor")
    return model
