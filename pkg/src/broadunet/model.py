"""Broad-UNet and plain-UNet assembly, parameter accounting and inference.

The encoder runs on 3D (T, H, W, C) data; every skip connection and the
bottleneck output pass through a temporal-reduction convolution with kernel
(T, 1, 1) and valid padding, collapsing T time steps to 1, so the decoder
runs on 2D data. Input (T, H, W, F) maps to output (1, H, W, F).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .archive import archive_load, archive_save
from .blocks import Aspp, AsppConfig, BlockConfig, MultiScaleBlock
from .layers import (
    Activation,
    Conv3D,
    ConvSpec,
    Dropout,
    Layer,
    MaxPoolSpatial,
    Sequential,
    UpsampleNearestSpatial,
)
from .tensor import ShapeError

LEVELS = 5


@dataclass(frozen=True)
class ModelConfig:
    lags: int
    height: int
    width: int
    features: int = 1
    base_filters: int = 64
    dropout_rate: float = 0.5
    factorized: bool = True
    head: str = "regression"
    aspp: AsppConfig | None = None

    def __post_init__(self):
        if min(self.lags, self.height, self.width, self.features,
               self.base_filters) < 1:
            raise ValueError("lags, extents, features and base_filters must be positive")
        divisor = 2 ** (LEVELS - 1)
        if self.height % divisor or self.width % divisor:
            raise ShapeError(
                f"H and W must be divisible by {divisor}, got "
                f"{self.height}x{self.width}")
        if self.head not in ("regression", "binary"):
            raise ValueError(f"head must be 'regression' or 'binary', got {self.head!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.aspp is not None:
            bottom = self.channel_plan[-1]
            if self.aspp.in_channels != bottom or self.aspp.out_channels != bottom:
                raise ValueError(
                    f"aspp channels must match bottleneck width {bottom}")

    @property
    def channel_plan(self) -> list:
        return [self.base_filters * 2 ** i for i in range(LEVELS)]

    def aspp_config(self) -> AsppConfig:
        if self.aspp is not None:
            return self.aspp
        bottom = self.channel_plan[-1]
        return AsppConfig(bottom, bottom)

    def to_dict(self) -> dict:
        aspp = self.aspp_config()
        return {
            "lags": self.lags, "height": self.height, "width": self.width,
            "features": self.features, "base_filters": self.base_filters,
            "dropout_rate": self.dropout_rate, "factorized": self.factorized,
            "head": self.head,
            "aspp": {
                "in_channels": aspp.in_channels,
                "out_channels": aspp.out_channels,
                "dilation_rates": list(aspp.dilation_rates),
                "include_pointwise_branch": aspp.include_pointwise_branch,
                "spatial_kernel": aspp.spatial_kernel,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        aspp = d.pop("aspp", None)
        if aspp is not None:
            aspp = AsppConfig(
                in_channels=aspp["in_channels"],
                out_channels=aspp["out_channels"],
                dilation_rates=tuple(aspp["dilation_rates"]),
                include_pointwise_branch=aspp["include_pointwise_branch"],
                spatial_kernel=aspp["spatial_kernel"],
            )
        return cls(aspp=aspp, **d)


def mini_config(lags=2, height=16, width=16, features=1, base_filters=2,
                **kwargs) -> ModelConfig:
    """Desk-scale configuration for gradient checks and fast tests."""
    return ModelConfig(lags=lags, height=height, width=width,
                       features=features, base_filters=base_filters, **kwargs)


class _UNetBase(Layer):
    """Shared encoder/decoder scaffolding; subclasses supply the level blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        plan = cfg.channel_plan
        self.enc = [self._level_block(
            cfg.features if i == 0 else plan[i - 1], plan[i], cfg.lags)
            for i in range(LEVELS)]
        self.pools = [MaxPoolSpatial() for _ in range(LEVELS - 1)]
        self.reduce_skip = [
            Conv3D(ConvSpec((cfg.lags, 1, 1), plan[i], plan[i], padding="valid"))
            for i in range(LEVELS - 1)
        ]
        self.reduce_mid = Conv3D(
            ConvSpec((cfg.lags, 1, 1), plan[-1], plan[-1], padding="valid"))
        self.ups = [UpsampleNearestSpatial() for _ in range(LEVELS - 1)]
        self.dec = [self._level_block(plan[i] + plan[i + 1], plan[i], 1)
                    for i in range(LEVELS - 1)]
        self.head = Conv3D(ConvSpec((1, 1, 1), plan[0], cfg.features))
        self.head_act = Activation(
            "sigmoid" if cfg.head == "binary" else "linear")

    def _level_block(self, in_channels, out_channels, time_extent) -> Layer:
        raise NotImplementedError

    def _bottleneck_children(self):
        return []

    def _bottleneck_forward(self, h, train, rng):
        return h

    def _bottleneck_backward(self, grad):
        return grad

    def _bottleneck_out_shape(self, shape):
        return shape

    def children(self):
        named = [(f"enc{i}", b) for i, b in enumerate(self.enc)]
        named += self._bottleneck_children()
        named += [(f"reduce_skip{i}", r) for i, r in enumerate(self.reduce_skip)]
        named.append(("reduce_mid", self.reduce_mid))
        named += [(f"dec{i}", b) for i, b in enumerate(self.dec)]
        named.append(("head", self.head))
        return named

    def out_shape(self, shape):
        t, h, w, c = shape
        cfg = self.cfg
        if t != cfg.lags or c != cfg.features:
            raise ValueError(
                f"expected input ({cfg.lags}, H, W, {cfg.features}), got {shape}")
        s = shape
        skip_shapes = []
        for i in range(LEVELS):
            s = self.enc[i].out_shape(s)
            if i < LEVELS - 1:
                skip_shapes.append(s)
                s = self.pools[i].out_shape(s)
        s = self._bottleneck_out_shape(s)
        s = self.reduce_mid.out_shape(s)
        for i in reversed(range(LEVELS - 1)):
            s = self.ups[i].out_shape(s)
            r = self.reduce_skip[i].out_shape(skip_shapes[i])
            s = (*s[:3], r[3] + s[3])
            s = self.dec[i].out_shape(s)
        return self.head.out_shape(s)

    def forward(self, x, train=False, rng=None):
        h = x
        skips = []
        for i in range(LEVELS):
            h = self.enc[i].forward(h, train=train, rng=rng)
            if i < LEVELS - 1:
                skips.append(h)
                h = self.pools[i].forward(h, train=train, rng=rng)
        h = self._bottleneck_forward(h, train, rng)
        h = self.reduce_mid.forward(h, train=train, rng=rng)
        self._skip_channels = []
        for i in reversed(range(LEVELS - 1)):
            h = self.ups[i].forward(h, train=train, rng=rng)
            s = self.reduce_skip[i].forward(skips[i], train=train, rng=rng)
            self._skip_channels.append(s.shape[3])
            h = np.concatenate([s, h], axis=3)
            h = self.dec[i].forward(h, train=train, rng=rng)
        h = self.head.forward(h, train=train, rng=rng)
        return self.head_act.forward(h, train=train, rng=rng)

    def backward(self, grad):
        g = self.head_act.backward(grad)
        g = self.head.backward(g)
        skip_grads = {}
        # decoder ran for i = LEVELS-2 .. 0; walk back up
        for i in range(LEVELS - 1):
            g = self.dec[i].backward(g)
            cs = self._skip_channels[LEVELS - 2 - i]
            gs = np.ascontiguousarray(g[..., :cs])
            g = np.ascontiguousarray(g[..., cs:])
            skip_grads[i] = self.reduce_skip[i].backward(gs)
            g = self.ups[i].backward(g)
        g = self.reduce_mid.backward(g)
        g = self._bottleneck_backward(g)
        g = self.enc[LEVELS - 1].backward(g)
        for i in reversed(range(LEVELS - 1)):
            g = self.pools[i].backward(g)
            g = g + skip_grads[i]
            g = self.enc[i].backward(g)
        return g


class BroadUNet(_UNetBase):
    """Multi-scale blocks in encoder and decoder, ASPP + dropout bottleneck."""

    def __init__(self, cfg: ModelConfig):
        self.aspp = Aspp(cfg.aspp_config())
        self.dropout = Dropout(cfg.dropout_rate)
        super().__init__(cfg)

    def _level_block(self, in_channels, out_channels, time_extent):
        return MultiScaleBlock(BlockConfig(
            in_channels, out_channels,
            factorized=self.cfg.factorized, time_extent=time_extent))

    def _bottleneck_children(self):
        return [("aspp", self.aspp)]

    def _bottleneck_forward(self, h, train, rng):
        h = self.aspp.forward(h, train=train, rng=rng)
        return self.dropout.forward(h, train=train, rng=rng)

    def _bottleneck_backward(self, grad):
        return self.aspp.backward(self.dropout.backward(grad))

    def _bottleneck_out_shape(self, shape):
        return self.aspp.out_shape(shape)


class _PlainBlock(Layer):
    """Two plain 3x3 spatial convolutions, each followed by ReLU."""

    def __init__(self, in_channels, out_channels, time_extent):
        super().__init__()
        kernel = (min(3, time_extent), 3, 3)
        self.body = Sequential([
            Conv3D(ConvSpec(kernel, in_channels, out_channels)),
            Activation("relu"),
            Conv3D(ConvSpec(kernel, out_channels, out_channels)),
            Activation("relu"),
        ])
        self.out_channels = out_channels

    def children(self):
        return [("body", self.body)]

    def out_shape(self, shape):
        return self.body.out_shape(shape)

    def forward(self, x, train=False, rng=None):
        return self.body.forward(x, train=train, rng=rng)

    def backward(self, grad):
        return self.body.backward(grad)


class PlainUNet(_UNetBase):
    """Classical UNet reference: double convs, no parallel branches, no ASPP."""

    def _level_block(self, in_channels, out_channels, time_extent):
        return _PlainBlock(in_channels, out_channels, time_extent)


class Model:
    """A built network plus its named parameter store.

    Building is cheap and symbolic; `initialize` allocates the parameter
    arrays. Shape queries and parameter counting work without allocation.
    """

    def __init__(self, root: Layer, config: ModelConfig, arch: str):
        self.root = root
        self.config = config
        self.arch = arch
        self.dtype = None

    # -- parameters ----------------------------------------------------------
    @property
    def initialized(self) -> bool:
        return self.dtype is not None

    def initialize(self, seed=0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        for _, layer in self.root.walk():
            layer.init_params(rng, dtype=dtype)
        self.dtype = np.dtype(dtype)
        return self

    def named_param_shapes(self) -> dict:
        shapes = {}
        for lname, layer in self.root.walk():
            for pname, shape in layer.param_shapes().items():
                shapes[f"{lname}.{pname}" if lname else pname] = shape
        return shapes

    def named_params(self) -> dict:
        out = {}
        for lname, layer in self.root.walk():
            for pname, arr in layer.params.items():
                out[f"{lname}.{pname}" if lname else pname] = arr
        return out

    def named_grads(self) -> dict:
        out = {}
        for lname, layer in self.root.walk():
            for pname, arr in layer.grads.items():
                out[f"{lname}.{pname}" if lname else pname] = arr
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        lname, _, pname = name.rpartition(".")
        for walked, layer in self.root.walk():
            if walked == lname and pname in layer.param_shapes():
                if tuple(value.shape) != tuple(layer.param_shapes()[pname]):
                    raise ValueError(f"shape mismatch for {name}")
                layer.params[pname] = value
                return
        raise KeyError(name)

    def zero_grads(self) -> None:
        self.root.zero_grads()

    def conv_specs(self) -> list:
        """(name, ConvSpec) for every convolution, in traversal order."""
        return [(name, layer.spec) for name, layer in self.root.walk()
                if isinstance(layer, Conv3D)]

    def multiscale_blocks(self) -> list:
        """(name, block) for every multi-scale block, forward order."""
        return [(name, layer) for name, layer in self.root.walk()
                if isinstance(layer, MultiScaleBlock)]

    # -- evaluation ------------------------------------------------------------
    def input_shape(self) -> tuple:
        c = self.config
        return (c.lags, c.height, c.width, c.features)

    def out_shape(self, in_shape=None) -> tuple:
        return self.root.out_shape(in_shape or self.input_shape())

    def forward(self, x, train=False, rng=None):
        if not self.initialized:
            raise RuntimeError("model parameters not initialized")
        return self.root.forward(x, train=train, rng=rng)

    def backward(self, grad):
        return self.root.backward(grad)

    def predict(self, x) -> np.ndarray:
        """Deterministic inference; regression output is clamped at 0."""
        if tuple(x.shape) != self.input_shape():
            raise ValueError(f"expected input {self.input_shape()}, got {x.shape}")
        y = self.forward(x, train=False)
        if self.config.head == "regression":
            y = np.maximum(y, 0)
        return y

    # -- accounting -------------------------------------------------------------
    def count_params(self):
        """(total, per-layer table); works before initialization."""
        table = [(name, int(np.prod(shape)))
                 for name, shape in self.named_param_shapes().items()]
        return sum(n for _, n in table), table

    # -- checkpointing -----------------------------------------------------------
    def save(self, path) -> None:
        if not self.initialized:
            raise RuntimeError("cannot checkpoint an uninitialized model")
        params = self.named_params()
        manifest = {
            "arch": self.arch,
            "config": self.config.to_dict(),
            "elem_type": {"float32": "f32", "float64": "f64"}[self.dtype.name],
            "param_names": list(params.keys()),
        }
        records = {"__manifest__": np.frombuffer(
            json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
        records.update(params)
        archive_save(path, records)

    @classmethod
    def load(cls, path) -> "Model":
        records = archive_load(path)
        manifest = json.loads(bytes(records.pop("__manifest__")).decode("utf-8"))
        cfg = ModelConfig.from_dict(manifest["config"])
        builder = {"broad-unet": build_broad_unet, "unet": build_plain_unet}
        model = builder[manifest["arch"]](cfg)
        dtype = {"f32": np.float32, "f64": np.float64}[manifest["elem_type"]]
        model.initialize(seed=0, dtype=dtype)
        for name in manifest["param_names"]:
            model.set_param(name, records[name].astype(dtype, copy=False))
        return model


def build_broad_unet(cfg: ModelConfig) -> Model:
    return Model(BroadUNet(cfg), cfg, "broad-unet")


def build_plain_unet(cfg: ModelConfig) -> Model:
    return Model(PlainUNet(cfg), cfg, "unet")


def count_params(model: Model):
    return model.count_params()


def persistence_predict(x: np.ndarray) -> np.ndarray:
    """Meteorological persistence baseline: repeat the last observed frame."""
    if x.ndim != 4:
        raise ValueError(f"expected a (T, H, W, F) tensor, got rank {x.ndim}")
    return x[-1:].copy()


def dump_feature_maps(model: Model, x: np.ndarray, block_index: int) -> list:
    """Per-branch activations of one multi-scale block after a forward pass.

    Returns [(label, tensor)] for the 1x1x1, 3x3x3 and 5x5x5 branches.
    """
    blocks = model.multiscale_blocks()
    if not 0 <= block_index < len(blocks):
        raise ValueError(
            f"block_index {block_index} out of range (model has {len(blocks)})")
    model.predict(x)
    _, block = blocks[block_index]
    return [(label, arr) for label, arr in block.branch_maps.items()]
