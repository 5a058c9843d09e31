"""AV-Net model assembly: dense encoder, skip-connected decoder, softmax head.

The network maps an Nx2xSxS batch (enface OCT + OCTA channels) to an Nx3xSxS
per-pixel probability map over (artery, background, vein). The encoder is a
stem convolution followed by four dense blocks, each closed by a transition
block whose pooled output feeds the next stage and whose pre-pool output is
kept as the skip connection for the matching decoder block. Every convolution
is followed by batch normalization and ReLU except the final 1x1 classifier,
which is followed by a channel softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    avg_pool2d,
    batch_norm2d,
    concat_channels,
    conv2d,
    relu,
    softmax_channels,
    upsample_nearest2x,
)


class InvalidConfigError(ValueError):
    """A model configuration violates one of its invariants."""


@dataclass
class AvNetConfig:
    """Architecture hyperparameters; defaults give the canonical network."""

    dense_block_layers: list[int] = field(default_factory=lambda: [6, 12, 24, 16])
    growth_rate: int = 32
    stem_channels: int = 64
    transition_compression: float = 0.5
    decoder_channels: list[int] = field(default_factory=lambda: [256, 128, 64, 32])
    num_classes: int = 3
    input_channels: int = 2
    input_size: int = 256

    def validate(self) -> None:
        if len(self.dense_block_layers) != 4 or any(l < 1 for l in self.dense_block_layers):
            raise InvalidConfigError(
                f"dense_block_layers must be 4 positive ints, got {self.dense_block_layers}"
            )
        if self.growth_rate < 1:
            raise InvalidConfigError(f"growth_rate must be positive, got {self.growth_rate}")
        if self.stem_channels < 1:
            raise InvalidConfigError(f"stem_channels must be positive, got {self.stem_channels}")
        if not 0.0 < self.transition_compression <= 1.0:
            raise InvalidConfigError(
                f"transition_compression must be in (0, 1], got {self.transition_compression}"
            )
        if len(self.decoder_channels) != 4 or any(c < 1 for c in self.decoder_channels):
            raise InvalidConfigError(
                f"decoder_channels must be 4 positive ints, got {self.decoder_channels}"
            )
        if self.num_classes < 2:
            raise InvalidConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise InvalidConfigError(f"input_channels must be positive, got {self.input_channels}")
        if self.input_size < 32 or self.input_size % 32 != 0:
            raise InvalidConfigError(
                f"input_size must be a positive multiple of 32, got {self.input_size}"
            )


def desk_config(input_size: int = 64) -> AvNetConfig:
    """Small configuration that trains in minutes on a CPU."""
    return AvNetConfig(
        dense_block_layers=[2, 2, 2, 2],
        growth_rate=8,
        stem_channels=24,
        decoder_channels=[48, 32, 32, 32],
        input_size=input_size,
    )


class ParameterStore:
    """Ordered, uniquely named tensors: trainable parameters plus buffers.

    Iteration order is creation order, which is fixed by the model topology,
    so two stores built from the same (config, seed) are interchangeable.
    """

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, bool]] = {}

    def _add(self, name: str, tensor: Tensor, trainable: bool) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate tensor name {name!r}")
        self._entries[name] = (tensor, trainable)
        return tensor

    def add_parameter(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        return self._add(name, tensor, True)

    def add_buffer(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = False
        return self._add(name, tensor, False)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __len__(self) -> int:
        return len(self._entries)

    def is_trainable(self, name: str) -> bool:
        return self._entries[name][1]

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor, bool]]:
        for name, (tensor, trainable) in self._entries.items():
            yield name, tensor, trainable

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, (tensor, trainable) in self._entries.items():
            if trainable:
                yield name, tensor

    def buffers(self) -> Iterator[tuple[str, Tensor]]:
        for name, (tensor, trainable) in self._entries.items():
            if not trainable:
                yield name, tensor

    def zero_grads(self) -> None:
        for _, tensor in self.parameters():
            tensor.grad = None


@dataclass
class LoadReport:
    loaded: list[str]
    skipped: list[str]


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype))


class _Conv:
    """Convolution layer owning its weight (and optional bias) in the store."""

    def __init__(self, store, prefix, rng, in_ch, out_ch, k, stride=1, padding=0,
                 bias=False, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        self.weight = store.add_parameter(
            f"{prefix}.weight", _he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype)
        )
        self.bias = None
        if bias:
            self.bias = store.add_parameter(f"{prefix}.bias", Tensor.zeros(out_ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class _BatchNorm:
    """Batch norm layer owning gamma/beta parameters and running-stat buffers."""

    def __init__(self, store, prefix, channels, dtype=np.float32):
        self.gamma = store.add_parameter(f"{prefix}.gamma", Tensor.ones(channels, dtype=dtype))
        self.beta = store.add_parameter(f"{prefix}.beta", Tensor.zeros(channels, dtype=dtype))
        self.running_mean = store.add_buffer(
            f"{prefix}.running_mean", Tensor.zeros(channels, dtype=dtype)
        )
        self.running_var = store.add_buffer(
            f"{prefix}.running_var", Tensor.ones(channels, dtype=dtype)
        )

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, mode)


class ConvBlock:
    """Dense unit: bottleneck 1x1 then 3x3 producing growth_rate new channels,
    concatenated onto the input (feature reuse instead of residual summation).
    """

    def __init__(self, store, prefix, rng, in_channels, growth_rate, dtype=np.float32):
        bottleneck = 4 * growth_rate
        self.in_channels = in_channels
        self.out_channels = in_channels + growth_rate
        self.conv1 = _Conv(store, f"{prefix}.conv1", rng, in_channels, bottleneck, 1, dtype=dtype)
        self.bn1 = _BatchNorm(store, f"{prefix}.bn1", bottleneck, dtype=dtype)
        self.conv2 = _Conv(store, f"{prefix}.conv2", rng, bottleneck, growth_rate, 3,
                           padding=1, dtype=dtype)
        self.bn2 = _BatchNorm(store, f"{prefix}.bn2", growth_rate, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv block expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        h = relu(self.bn1.forward(self.conv1.forward(x), mode))
        h = relu(self.bn2.forward(self.conv2.forward(h), mode))
        return concat_channels(x, h)


class DenseBlock:
    """Stack of conv blocks, each consuming the running concatenation."""

    def __init__(self, store, prefix, rng, in_channels, growth_rate, num_layers,
                 dtype=np.float32):
        if num_layers < 1:
            raise InvalidConfigError(f"dense block needs at least 1 layer, got {num_layers}")
        self.layers = []
        ch = in_channels
        for i in range(num_layers):
            layer = ConvBlock(store, f"{prefix}.layer{i}", rng, ch, growth_rate, dtype=dtype)
            self.layers.append(layer)
            ch = layer.out_channels
        self.out_channels = ch

    def forward(self, x: Tensor, mode: str) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x


class TransitionBlock:
    """Channel compression plus downsampling between encoder stages.

    forward returns (out_a, out_b): out_b is the compressed full-resolution map
    kept as the decoder skip, out_a is its 2x2 average-pooled version feeding
    the next stage.
    """

    def __init__(self, store, prefix, rng, in_channels, compression, dtype=np.float32):
        self.out_channels = math.ceil(compression * in_channels)
        self.conv = _Conv(store, f"{prefix}.conv", rng, in_channels, self.out_channels, 1,
                          dtype=dtype)
        self.bn = _BatchNorm(store, f"{prefix}.bn", self.out_channels, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> tuple[Tensor, Tensor]:
        out_b = relu(self.bn.forward(self.conv.forward(x), mode))
        out_a = avg_pool2d(out_b)
        return out_a, out_b


class DecoderBlock:
    """Upsample the deeper feature map, concatenate the matching skip, convolve."""

    def __init__(self, store, prefix, rng, in_a_channels, in_b_channels, out_channels,
                 dtype=np.float32):
        self.out_channels = out_channels
        self.conv = _Conv(store, f"{prefix}.conv", rng, in_a_channels + in_b_channels,
                          out_channels, 3, padding=1, dtype=dtype)
        self.bn = _BatchNorm(store, f"{prefix}.bn", out_channels, dtype=dtype)

    def forward(self, in_a: Tensor, in_b: Tensor, mode: str) -> Tensor:
        up = upsample_nearest2x(in_a)
        if up.shape[2:] != in_b.shape[2:]:
            raise ShapeError(
                f"decoder block: upsampled input is {up.shape[2]}x{up.shape[3]} but the skip "
                f"is {in_b.shape[2]}x{in_b.shape[3]}"
            )
        y = concat_channels(up, in_b)
        return relu(self.bn.forward(self.conv.forward(y), mode))


class AvNetModel:
    """Built network: configuration, parameter store, and the wired blocks."""

    def __init__(self, config: AvNetConfig, store: ParameterStore, dtype):
        self.config = config
        self.store = store
        self.dtype = dtype
        self.stem_conv: _Conv
        self.stem_bn: _BatchNorm
        self.dense_blocks: list[DenseBlock]
        self.transitions: list[TransitionBlock]
        self.decoders: list[DecoderBlock]  # deepest first
        self.head_conv: _Conv
        self.head_bn: _BatchNorm
        self.classifier: _Conv

    def forward(self, batch: Tensor, mode: str) -> Tensor:
        return avnet_forward(self, batch, mode)


def build_avnet(config: AvNetConfig, seed: int, dtype=np.float32) -> AvNetModel:
    """Construct the network with He-normal weights drawn from ``seed``.

    The same (config, seed, dtype) always yields a bit-identical parameter
    store: creation order is fixed and every random draw comes from one
    seeded generator.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    model = AvNetModel(config, store, dtype)

    model.stem_conv = _Conv(store, "stem.conv", rng, config.input_channels,
                            config.stem_channels, 7, stride=2, padding=3, dtype=dtype)
    model.stem_bn = _BatchNorm(store, "stem.bn", config.stem_channels, dtype=dtype)

    model.dense_blocks = []
    model.transitions = []
    ch = config.stem_channels
    for i, num_layers in enumerate(config.dense_block_layers, start=1):
        dense = DenseBlock(store, f"encoder.dense{i}", rng, ch, config.growth_rate,
                           num_layers, dtype=dtype)
        trans = TransitionBlock(store, f"encoder.trans{i}", rng, dense.out_channels,
                                config.transition_compression, dtype=dtype)
        model.dense_blocks.append(dense)
        model.transitions.append(trans)
        ch = trans.out_channels

    # Decoder blocks run deepest first; block i consumes transition i's skip.
    model.decoders = []
    in_a = model.transitions[3].out_channels
    for level, out_ch in zip((4, 3, 2, 1), config.decoder_channels):
        skip_ch = model.transitions[level - 1].out_channels
        dec = DecoderBlock(store, f"decoder.block{level}", rng, in_a, skip_ch, out_ch,
                           dtype=dtype)
        model.decoders.append(dec)
        in_a = out_ch

    # One more upsample stage undoes the stem's stride before classification.
    head_ch = config.decoder_channels[-1]
    model.head_conv = _Conv(store, "head.conv", rng, head_ch, head_ch, 3, padding=1,
                            dtype=dtype)
    model.head_bn = _BatchNorm(store, "head.bn", head_ch, dtype=dtype)
    model.classifier = _Conv(store, "head.classifier", rng, head_ch, config.num_classes, 1,
                             bias=True, dtype=dtype)
    return model


def avnet_forward(model: AvNetModel, batch: Tensor, mode: str) -> Tensor:
    """Run the network; returns per-pixel class probabilities (softmax head)."""
    cfg = model.config
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if batch.data.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(
            f"batch shape {list(batch.shape)} does not match Nx{expected[0]}x"
            f"{expected[1]}x{expected[2]}"
        )
    x = relu(model.stem_bn.forward(model.stem_conv.forward(batch), mode))

    skips = []
    for dense, trans in zip(model.dense_blocks, model.transitions):
        x = dense.forward(x, mode)
        x, out_b = trans.forward(x, mode)
        skips.append(out_b)

    for dec, level in zip(model.decoders, (4, 3, 2, 1)):
        x = dec.forward(x, skips[level - 1], mode)

    x = upsample_nearest2x(x)
    x = relu(model.head_bn.forward(model.head_conv.forward(x), mode))
    x = model.classifier.forward(x)
    return softmax_channels(x)


def count_parameters(model: AvNetModel) -> int:
    """Total element count of trainable tensors (buffers excluded)."""
    return sum(t.size for _, t in model.store.parameters())


def count_conv_layers(model: AvNetModel) -> int:
    """Number of convolution layers, counted as rank-4 trainable weights."""
    return sum(1 for _, t in model.store.parameters() if t.data.ndim == 4)


def load_pretrained(model: AvNetModel, archive, strict: bool = False) -> LoadReport:
    """Copy matching tensors from a weight archive into the model.

    ``archive`` is a mapping of name -> array, or anything with a ``tensors``
    attribute holding one. A tensor matches when its name exists in the model
    store and the shapes agree; everything else is skipped, or raises when
    ``strict`` is set. Unmatched model tensors keep their current values.
    """
    tensors = getattr(archive, "tensors", archive)
    loaded, skipped = [], []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if name in model.store and model.store[name].shape == arr.shape:
            model.store[name].data[...] = arr.astype(model.store[name].dtype, copy=False)
            loaded.append(name)
        else:
            if strict:
                detail = "unknown name" if name not in model.store else (
                    f"shape {list(arr.shape)} != {list(model.store[name].shape)}"
                )
                raise ValueError(f"archive tensor {name!r} does not match the model: {detail}")
            skipped.append(name)
    return LoadReport(loaded=loaded, skipped=skipped)
