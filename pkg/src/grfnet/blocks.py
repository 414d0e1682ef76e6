"""Network building blocks: pointwise/strided convs, DDR blocks, the hybrid
down-sample layer and the light-weight ASPP head.

Every block can report its parameter shapes, run a forward pass over
parameters drawn from a :class:`~grfnet.params.ParamStore`, and account its
cost.  FLOPs count one multiply-accumulate as one FLOP; bias adds,
activations, residual adds and pooling reads count once per element.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .params import ParamStore
from .tensor import (
    ConvConfig,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    conv,
    global_avg_pool,
    max_pool,
    relu,
)

BlockParams = Mapping[str, Tensor]


@dataclass(frozen=True)
class Cost:
    params: int
    flops: int
    out_spatial: tuple
    out_channels: int


# ---------------------------------------------------------------- plain conv


@dataclass(frozen=True)
class ConvSpec:
    cin: int
    cout: int
    kernel: tuple
    stride: tuple = None
    dilation: tuple = None
    bias: bool = True

    def __post_init__(self):
        n = len(self.kernel)
        if self.stride is None:
            object.__setattr__(self, "stride", (1,) * n)
        if self.dilation is None:
            object.__setattr__(self, "dilation", (1,) * n)

    @classmethod
    def pointwise(cls, cin: int, cout: int, dims: int = 3, bias: bool = True) -> "ConvSpec":
        return cls(cin, cout, (1,) * dims, bias=bias)

    @property
    def config(self) -> ConvConfig:
        return ConvConfig(self.kernel, self.stride, self.dilation, "same", self.bias)

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {"w": tuple(self.kernel) + (self.cin, self.cout)}
        if self.bias:
            shapes["b"] = (self.cout,)
        return shapes

    def cost(self, spatial: Sequence[int]) -> Cost:
        out = self.config.output_shape(spatial)
        n_out = math.prod(out)
        params = math.prod(self.kernel) * self.cin * self.cout + (self.cout if self.bias else 0)
        flops = n_out * math.prod(self.kernel) * self.cin * self.cout
        if self.bias:
            flops += n_out * self.cout
        return Cost(params, flops, out, self.cout)

    def forward(self, x: Tensor, p: BlockParams, prefix: str = "") -> Tensor:
        return conv(x, p[prefix + "w"], p.get(prefix + "b") if self.bias else None, self.config)


# ---------------------------------------------------------------- DDR


@dataclass(frozen=True)
class DDRConfig:
    """DDR(k, w, s, d) block over ``dims`` spatial axes (2 or 3)."""

    k: int = 3
    w: int = 64
    s: int = 1
    d: int = 1
    dims: int = 3
    residual: bool = True

    def __post_init__(self):
        if self.w % 4 != 0:
            raise ValueError(f"DDR width {self.w} is not divisible by 4")
        if self.dims not in (2, 3):
            raise ValueError("DDR blocks are 2D or 3D")
        if min(self.k, self.s, self.d) < 1:
            raise ValueError("k, s, d must be >= 1")

    @property
    def bottleneck(self) -> int:
        return self.w // 4


def ddr_layers(cin: int, cfg: DDRConfig) -> list[tuple[str, ConvSpec]]:
    """Sub-layers in order: PWConv, one DDRConv per axis (last axis first), PWConv."""
    c = cfg.bottleneck
    layers = [("pw_in", ConvSpec.pointwise(cin, c, cfg.dims))]
    for i, axis in enumerate(reversed(range(cfg.dims))):
        kernel = [1] * cfg.dims
        stride = [1] * cfg.dims
        dil = [1] * cfg.dims
        kernel[axis], stride[axis], dil[axis] = cfg.k, cfg.s, cfg.d
        layers.append((f"conv{i}", ConvSpec(c, c, tuple(kernel), tuple(stride), tuple(dil))))
    layers.append(("pw_out", ConvSpec.pointwise(c, cfg.w, cfg.dims)))
    return layers


def _has_skip(cin: int, cfg: DDRConfig) -> bool:
    return cfg.residual and cfg.s == 1 and cin == cfg.w


def ddr_forward(x: Tensor, p: BlockParams, cfg: DDRConfig) -> Tensor:
    cin = x.shape[-1]
    if cfg.residual and cfg.s == 1 and cin != cfg.w:
        raise ShapeError(f"residual DDR needs {cfg.w} input channels, got {cin}")
    layers = ddr_layers(cin, cfg)
    y = layers[0][1].forward(x, p, "pw_in.")
    for name, spec in layers[1:-1]:
        y = relu(spec.forward(y, p, name + "."))
    y = layers[-1][1].forward(y, p, "pw_out.")
    if _has_skip(cin, cfg):
        y = y + x
    return relu(y)


def ddr_param_shapes(cin: int, cfg: DDRConfig) -> dict[str, tuple]:
    return {f"{name}.{k}": v for name, spec in ddr_layers(cin, cfg) for k, v in spec.param_shapes().items()}


def ddr_cost(cin: int, cfg: DDRConfig, spatial: Sequence[int]) -> Cost:
    params = flops = 0
    shape = tuple(spatial)
    layers = ddr_layers(cin, cfg)
    for i, (_, spec) in enumerate(layers):
        c = spec.cost(shape)
        params += c.params
        flops += c.flops
        shape = c.out_spatial
        if 0 < i < len(layers) - 1:
            flops += math.prod(shape) * c.out_channels  # relu
    n_out = math.prod(shape) * cfg.w
    if _has_skip(cin, cfg):
        flops += n_out
    flops += n_out
    return Cost(params, flops, shape, cfg.w)


# ---------------------------------------------------------------- down-sample


@dataclass(frozen=True)
class DownsampleConfig:
    """Max-pool(2) branch concatenated with a k=3, stride-2 conv branch."""

    cin: int
    conv_out: int
    dims: int = 3

    @property
    def conv(self) -> ConvSpec:
        return ConvSpec(self.cin, self.conv_out, (3,) * self.dims, (2,) * self.dims)

    @property
    def out_channels(self) -> int:
        return self.cin + self.conv_out


def downsample_forward(x: Tensor, p: BlockParams, cfg: DownsampleConfig) -> Tensor:
    spatial = x.shape[1:-1]
    if any(n % 2 for n in spatial):
        raise ShapeError(f"down-sample needs even extents, got {spatial}")
    if x.shape[-1] != cfg.cin:
        raise ShapeError(f"down-sample expects {cfg.cin} channels, got {x.shape[-1]}")
    pooled = max_pool(x, 2, 2)
    strided = cfg.conv.forward(x, p, "conv.")
    return concat([pooled, strided])


def downsample_param_shapes(cfg: DownsampleConfig) -> dict[str, tuple]:
    return {f"conv.{k}": v for k, v in cfg.conv.param_shapes().items()}


def downsample_cost(cfg: DownsampleConfig, spatial: Sequence[int]) -> Cost:
    if any(n % 2 for n in spatial):
        raise ShapeError(f"down-sample needs even extents, got {spatial}")
    c = cfg.conv.cost(spatial)
    pool_flops = math.prod(c.out_spatial) * cfg.cin * 2**cfg.dims
    return Cost(c.params, c.flops + pool_flops, c.out_spatial, cfg.out_channels)


# ---------------------------------------------------------------- LW-ASPP


@dataclass(frozen=True)
class ASPPConfig:
    channels: int = 64
    dilations: tuple = (3, 6, 9)
    k: int = 3

    @property
    def branches(self) -> int:
        return len(self.dilations) + 2

    @property
    def out_channels(self) -> int:
        return self.channels * self.branches

    def ddr(self, d: int) -> DDRConfig:
        return DDRConfig(k=self.k, w=self.channels, s=1, d=d, dims=3)


def lw_aspp_param_shapes(cfg: ASPPConfig) -> dict[str, tuple]:
    c = cfg.channels
    shapes = {f"pw.{k}": v for k, v in ConvSpec.pointwise(c, c).param_shapes().items()}
    for i, d in enumerate(cfg.dilations):
        shapes.update({f"ddr{i}.{k}": v for k, v in ddr_param_shapes(c, cfg.ddr(d)).items()})
    shapes.update({f"gap_pw.{k}": v for k, v in ConvSpec.pointwise(c, c).param_shapes().items()})
    return shapes


def _sub(p: BlockParams, prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def lw_aspp_forward(x: Tensor, p: BlockParams, cfg: ASPPConfig) -> Tensor:
    """Five parallel branches: PWConv, three dilated DDRs, and global
    average pooling followed by a PWConv, broadcast back over the volume."""
    c = cfg.channels
    if x.shape[-1] != c:
        raise ShapeError(f"LW-ASPP expects {c} channels, got {x.shape[-1]}")
    pw = ConvSpec.pointwise(c, c)
    branches = [pw.forward(x, p, "pw.")]
    for i, d in enumerate(cfg.dilations):
        branches.append(ddr_forward(x, _sub(p, f"ddr{i}."), cfg.ddr(d)))
    pooled = pw.forward(global_avg_pool(x), p, "gap_pw.")
    branches.append(broadcast_to(pooled, branches[0].shape))
    return concat(branches)


def lw_aspp_cost(cfg: ASPPConfig, spatial: Sequence[int]) -> Cost:
    c = cfg.channels
    pw = ConvSpec.pointwise(c, c)
    first = pw.cost(spatial)
    params, flops = first.params, first.flops
    for d in cfg.dilations:
        dc = ddr_cost(c, cfg.ddr(d), spatial)
        params += dc.params
        flops += dc.flops
    gap = pw.cost((1,) * len(spatial))
    params += gap.params
    flops += gap.flops + math.prod(spatial) * c
    return Cost(params, flops, tuple(spatial), cfg.out_channels)


# ---------------------------------------------------------------- registry


@dataclass
class Block:
    """A named block instance bound to a parameter store."""

    name: str
    kind: str  # "conv", "ddr", "downsample", "aspp"
    cfg: object
    cin: int
    store: ParamStore = field(repr=False)

    def param_shapes(self) -> dict[str, tuple]:
        if self.kind == "conv":
            return self.cfg.param_shapes()
        if self.kind == "ddr":
            return ddr_param_shapes(self.cin, self.cfg)
        if self.kind == "downsample":
            return downsample_param_shapes(self.cfg)
        if self.kind == "aspp":
            return lw_aspp_param_shapes(self.cfg)
        raise ValueError(self.kind)

    def register(self, rng: np.random.Generator) -> None:
        for local, shape in self.param_shapes().items():
            init = "zeros" if local.endswith("b") and len(shape) == 1 else "glorot"
            self.store.register(f"{self.name}.{local}", shape, init, rng)

    def params(self) -> dict[str, Tensor]:
        return {local: self.store[f"{self.name}.{local}"] for local in self.param_shapes()}

    def forward(self, x: Tensor) -> Tensor:
        p = self.params()
        if self.kind == "conv":
            return self.cfg.forward(x, p)
        if self.kind == "ddr":
            return ddr_forward(x, p, self.cfg)
        if self.kind == "downsample":
            return downsample_forward(x, p, self.cfg)
        return lw_aspp_forward(x, p, self.cfg)

    def cost(self, spatial: Sequence[int]) -> Cost:
        return block_cost(self.kind, self.cfg, spatial, self.cin)


def block_cost(kind: str, cfg, spatial: Sequence[int], cin: int | None = None) -> Cost:
    """Parameter and FLOP count of one block applied to ``spatial`` extents."""
    if kind == "conv":
        return cfg.cost(spatial)
    if kind == "ddr":
        return ddr_cost(cfg.w if cin is None else cin, cfg, spatial)
    if kind == "downsample":
        return downsample_cost(cfg, spatial)
    if kind == "aspp":
        return lw_aspp_cost(cfg, spatial)
    raise ValueError(f"unknown block kind {kind!r}")
