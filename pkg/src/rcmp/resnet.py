"""Residual-network construction, inspection and forward execution.

Two presets are built in: ``resnet18-full`` (18 weighted layers, 224px stem,
ImageNet-scale) and ``resnet-desk`` (a reduced variant for desk-scale
experiments: 64px input, 3x3/16 stem, one basic block per stage). All
compression operations are preset-agnostic.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import GradTape, ShapeError, Tensor


class ConfigError(ValueError):
    """Raised for inconsistent model configurations."""


@dataclass(frozen=True)
class LayerSpec:
    """One executable layer of the network, in execution order."""
    name: str
    kind: str  # conv | bn | relu | maxpool | avgpool | linear | add
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ModelConfig:
    input_size: int
    stem_kernel: int
    stem_stride: int
    stem_channels: int
    stem_pool: bool
    block_counts: tuple
    stage_channels: tuple
    num_classes: int
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    preset: str = "custom"

    @property
    def weighted_layers(self) -> int:
        # stem conv + two convs per basic block + fc; projection shortcuts
        # are not counted, per the usual "18-layer" naming convention.
        return 1 + 2 * sum(self.block_counts) + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_counts"] = list(self.block_counts)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["block_counts"] = tuple(d["block_counts"])
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


PRESETS = {
    "resnet18-full": dict(input_size=224, stem_kernel=7, stem_stride=2,
                          stem_channels=64, stem_pool=True,
                          block_counts=(2, 2, 2, 2),
                          stage_channels=(64, 128, 256, 512)),
    "resnet-desk": dict(input_size=64, stem_kernel=3, stem_stride=1,
                        stem_channels=16, stem_pool=True,
                        block_counts=(1, 1, 1, 1),
                        stage_channels=(16, 32, 64, 128)),
}


def make_config(preset: str, num_classes: int = 6) -> ModelConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
    return ModelConfig(num_classes=num_classes, preset=preset, **PRESETS[preset])


@dataclass(frozen=True)
class BlockSpec:
    """Basic block: two 3x3 convs plus an identity or projection skip."""
    name: str
    in_channels: int
    out_channels: int
    stride: int

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass
class Model:
    config: ModelConfig
    params: dict  # name -> Tensor (learnables and running buffers)
    blocks: list  # list[BlockSpec] in execution order
    masks: Optional[dict] = None  # param name -> uint8 ndarray (1 = kept)
    meta: dict = field(default_factory=dict)

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def learnable_names(self) -> list:
        return [n for n in self.params if not n.endswith(("running_mean", "running_var"))]

    def astype(self, dtype: str) -> "Model":
        """Copy with all float tensors cast (f64 copies are for gradient checks)."""
        params = {n: t.astype(dtype) for n, t in self.params.items()}
        for n, t in params.items():
            t.name = n
        masks = None if self.masks is None else {n: m.copy() for n, m in self.masks.items()}
        return Model(self.config, params, list(self.blocks), masks, dict(self.meta))

    def copy(self) -> "Model":
        params = {n: t.copy() for n, t in self.params.items()}
        masks = None if self.masks is None else {n: m.copy() for n, m in self.masks.items()}
        return Model(self.config, params, list(self.blocks), masks, dict(self.meta))


def _stage_plan(config: ModelConfig) -> list:
    blocks = []
    in_ch = config.stem_channels
    for s, (count, out_ch) in enumerate(zip(config.block_counts, config.stage_channels), start=1):
        for b in range(count):
            stride = 2 if (s > 1 and b == 0) else 1
            blocks.append(BlockSpec(f"layer{s}.{b}", in_ch, out_ch, stride))
            in_ch = out_ch
    return blocks


def _validate(config: ModelConfig):
    if len(config.block_counts) != 4 or len(config.stage_channels) != 4:
        raise ConfigError("block_counts and stage_channels must have 4 entries")
    ints = (config.input_size, config.stem_kernel, config.stem_stride,
            config.stem_channels, config.num_classes,
            *config.block_counts, *config.stage_channels)
    if any(int(v) != v or v < 1 for v in ints):
        raise ConfigError("all structural config values must be positive integers")
    # spatial size must survive to the average pool
    size = T.conv_output_size(config.input_size, config.stem_kernel,
                              config.stem_stride, (config.stem_kernel - 1) // 2)
    if config.stem_pool:
        size = T.conv_output_size(size, 3, 2, 1)
    for s in range(1, 4):
        if config.block_counts[s] > 0:
            size = T.conv_output_size(size, 3, 2, 1)
    if size < 1:
        raise ConfigError(f"input_size {config.input_size} collapses to zero spatial extent")


def _kaiming_conv(rng, out_ch, in_ch, k) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * k * k))
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(np.float32)


def _bn_params(params, rng, name, ch):
    params[f"{name}.gamma"] = Tensor(np.ones(ch, dtype=np.float32), name=f"{name}.gamma")
    params[f"{name}.beta"] = Tensor(np.zeros(ch, dtype=np.float32), name=f"{name}.beta")
    params[f"{name}.running_mean"] = Tensor(np.zeros(ch, dtype=np.float32),
                                            name=f"{name}.running_mean")
    params[f"{name}.running_var"] = Tensor(np.ones(ch, dtype=np.float32),
                                           name=f"{name}.running_var")


def build(config: ModelConfig, seed: int = 0) -> Model:
    """Construct a model with Kaiming fan-in init, deterministic per seed."""
    _validate(config)
    rng = np.random.default_rng(seed)
    params: dict = {}

    w = _kaiming_conv(rng, config.stem_channels, 3, config.stem_kernel)
    params["conv1.weight"] = Tensor(w, name="conv1.weight")
    _bn_params(params, rng, "bn1", config.stem_channels)

    blocks = _stage_plan(config)
    for blk in blocks:
        params[f"{blk.name}.conv1.weight"] = Tensor(
            _kaiming_conv(rng, blk.out_channels, blk.in_channels, 3),
            name=f"{blk.name}.conv1.weight")
        _bn_params(params, rng, f"{blk.name}.bn1", blk.out_channels)
        params[f"{blk.name}.conv2.weight"] = Tensor(
            _kaiming_conv(rng, blk.out_channels, blk.out_channels, 3),
            name=f"{blk.name}.conv2.weight")
        _bn_params(params, rng, f"{blk.name}.bn2", blk.out_channels)
        if blk.has_projection:
            params[f"{blk.name}.downsample.conv.weight"] = Tensor(
                _kaiming_conv(rng, blk.out_channels, blk.in_channels, 1),
                name=f"{blk.name}.downsample.conv.weight")
            _bn_params(params, rng, f"{blk.name}.downsample.bn", blk.out_channels)

    feat = config.stage_channels[3]
    std = np.sqrt(2.0 / feat)
    params["fc.weight"] = Tensor(
        (rng.standard_normal((config.num_classes, feat)) * std).astype(np.float32),
        name="fc.weight")
    params["fc.bias"] = Tensor(np.zeros(config.num_classes, dtype=np.float32),
                               name="fc.bias")
    return Model(config, params, blocks)


def forward(model: Model, batch: Tensor, tape: Optional[GradTape] = None,
            training: bool = False) -> Tensor:
    """Run the network on an Nx3xSxS batch; returns NxC logits.

    Softmax is *not* applied here; loss and metrics consumers own that.
    """
    cfg = model.config
    n = batch.shape[0]
    if batch.data.ndim != 4 or batch.shape[1] != 3 \
            or batch.shape[2] != cfg.input_size or batch.shape[3] != cfg.input_size:
        raise ShapeError(
            f"forward: expected Nx3x{cfg.input_size}x{cfg.input_size}, got {batch.shape}")
    p = model.params

    def bn(h, name):
        return T.batchnorm2d(h, p[f"{name}.gamma"], p[f"{name}.beta"],
                             p[f"{name}.running_mean"], p[f"{name}.running_var"],
                             eps=cfg.bn_eps, momentum=cfg.bn_momentum,
                             training=training, tape=tape)

    h = T.conv2d(batch, p["conv1.weight"], stride=cfg.stem_stride,
                 padding=(cfg.stem_kernel - 1) // 2, tape=tape)
    h = T.relu(bn(h, "bn1"), tape=tape)
    if cfg.stem_pool:
        h = T.maxpool2d(h, 3, 2, 1, tape=tape)

    for blk in model.blocks:
        identity = h
        out = T.conv2d(h, p[f"{blk.name}.conv1.weight"], stride=blk.stride,
                       padding=1, tape=tape)
        out = T.relu(bn(out, f"{blk.name}.bn1"), tape=tape)
        out = T.conv2d(out, p[f"{blk.name}.conv2.weight"], stride=1,
                       padding=1, tape=tape)
        out = bn(out, f"{blk.name}.bn2")
        if blk.has_projection:
            identity = T.conv2d(h, p[f"{blk.name}.downsample.conv.weight"],
                                stride=blk.stride, padding=0, tape=tape)
            identity = bn(identity, f"{blk.name}.downsample.bn")
        h = T.relu(T.add(out, identity, tape=tape), tape=tape)

    pooled = T.global_avgpool(h, tape=tape)
    logits = T.linear(pooled, p["fc.weight"], p["fc.bias"], tape=tape)
    assert logits.shape == (n, cfg.num_classes)
    return logits


def layer_specs(model: Model) -> list:
    """Flat, execution-ordered LayerSpec list (inspection and FLOP counting)."""
    cfg = model.config
    specs = [
        LayerSpec("conv1", "conv", 3, cfg.stem_channels, cfg.stem_kernel,
                  cfg.stem_stride, (cfg.stem_kernel - 1) // 2),
        LayerSpec("bn1", "bn", cfg.stem_channels, cfg.stem_channels),
        LayerSpec("relu1", "relu", cfg.stem_channels, cfg.stem_channels),
    ]
    if cfg.stem_pool:
        specs.append(LayerSpec("maxpool", "maxpool", cfg.stem_channels,
                               cfg.stem_channels, 3, 2, 1))
    for blk in model.blocks:
        nm = blk.name
        specs += [
            LayerSpec(f"{nm}.conv1", "conv", blk.in_channels, blk.out_channels,
                      3, blk.stride, 1),
            LayerSpec(f"{nm}.bn1", "bn", blk.out_channels, blk.out_channels),
            LayerSpec(f"{nm}.relu1", "relu", blk.out_channels, blk.out_channels),
            LayerSpec(f"{nm}.conv2", "conv", blk.out_channels, blk.out_channels,
                      3, 1, 1),
            LayerSpec(f"{nm}.bn2", "bn", blk.out_channels, blk.out_channels),
        ]
        if blk.has_projection:
            specs += [
                LayerSpec(f"{nm}.downsample.conv", "conv", blk.in_channels,
                          blk.out_channels, 1, blk.stride, 0),
                LayerSpec(f"{nm}.downsample.bn", "bn", blk.out_channels,
                          blk.out_channels),
            ]
        specs += [
            LayerSpec(f"{nm}.add", "add", blk.out_channels, blk.out_channels),
            LayerSpec(f"{nm}.relu2", "relu", blk.out_channels, blk.out_channels),
        ]
    specs += [
        LayerSpec("avgpool", "avgpool", cfg.stage_channels[3], cfg.stage_channels[3]),
        LayerSpec("fc", "linear", cfg.stage_channels[3], cfg.num_classes),
    ]
    names = [s.name for s in specs]
    assert len(names) == len(set(names)), "layer names must be unique"
    return specs


def count_parameters(model: Model) -> tuple:
    """(total, per-layer map) over stored learnables; running stats excluded."""
    per_layer: dict = {}
    total = 0
    for name in model.learnable_names():
        n = model.params[name].size
        per_layer[name] = n
        total += n
    return total, per_layer


def _spatial_trace(model: Model) -> dict:
    """Output spatial size (square side) after each conv/pool layer."""
    cfg = model.config
    sizes = {}
    size = T.conv_output_size(cfg.input_size, cfg.stem_kernel, cfg.stem_stride,
                              (cfg.stem_kernel - 1) // 2)
    sizes["conv1"] = size
    if cfg.stem_pool:
        size = T.conv_output_size(size, 3, 2, 1)
    for blk in model.blocks:
        size = T.conv_output_size(size, 3, blk.stride, 1)
        sizes[f"{blk.name}.conv1"] = size
        sizes[f"{blk.name}.conv2"] = size
        if blk.has_projection:
            sizes[f"{blk.name}.downsample.conv"] = size
        sizes[f"{blk.name}.add"] = size
    return sizes


def count_flops(model: Model, input_size: Optional[int] = None) -> int:
    """FLOPs under the one-MAC-equals-one-FLOP convention.

    Convolutions and the linear layer count output_elements * fan_in MACs;
    skip-connection adds count one FLOP per element; BN, ReLU and pooling
    are excluded (the convention under which ResNet-18 at 224px costs
    ~1.8e9).
    """
    if input_size is not None and input_size != model.config.input_size:
        model = Model(dataclasses.replace(model.config, input_size=input_size),
                      model.params, model.blocks)
    sizes = _spatial_trace(model)
    total = 0
    for spec in layer_specs(model):
        if spec.kind == "conv":
            hw = sizes[spec.name] ** 2
            total += spec.out_channels * spec.in_channels * spec.kernel ** 2 * hw
        elif spec.kind == "add":
            total += spec.out_channels * sizes[spec.name] ** 2
        elif spec.kind == "linear":
            total += spec.out_channels * spec.in_channels
    return total


def replace_head(model: Model, num_classes: int, seed: int = 0) -> Model:
    """Swap the final linear layer for a new class count; body untouched."""
    if num_classes < 1:
        raise ConfigError("num_classes must be positive")
    new = model.copy()
    new.config = dataclasses.replace(model.config, num_classes=num_classes)
    rng = np.random.default_rng(seed)
    feat = model.config.stage_channels[3]
    std = np.sqrt(2.0 / feat)
    new.params["fc.weight"] = Tensor(
        (rng.standard_normal((num_classes, feat)) * std).astype(np.float32),
        name="fc.weight")
    new.params["fc.bias"] = Tensor(np.zeros(num_classes, dtype=np.float32),
                                   name="fc.bias")
    if new.masks and "fc.weight" in new.masks:
        del new.masks["fc.weight"]
    return new
