"""GRFNet assembly: two branch extractors, 2D->3D projection, N-stage
fusion, LW-ASPP and a pointwise classification head."""
from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blocks import ASPPConfig, Block, ConvSpec, Cost, DDRConfig, DownsampleConfig
from .fusion import STRATEGIES, FusionStrategy, fuse_stages, fusion_flops
from .params import ParamStore
from .projection import CameraIntrinsics, VoxelGridSpec, project_features
from .tensor import Tensor, relu

DEFAULT_DILATIONS = (1, 2, 3, 5)
BRANCHES = ("depth", "rgb")
BRANCH_INPUT_CHANNELS = {"depth": 1, "rgb": 3}


@dataclass(frozen=True)
class NetworkConfig:
    stages: int = 4
    width_2d: int = 8
    widths_3d: tuple = (16, 64)
    stage_dilations: Optional[tuple] = None
    grid_extents: tuple = (240, 144, 240)
    voxel_size: float = 0.02
    grid_z0: float = 0.0
    image_shape: tuple = (480, 640)  # (rows, cols)
    num_classes: int = 12
    fusion: str = "grf"
    aspp_dilations: tuple = (3, 6, 9)
    depth_max: float = 8.0
    profile: str = "paper"

    def __post_init__(self):
        for name in ("widths_3d", "grid_extents", "image_shape", "aspp_dilations"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.stage_dilations is None:
            if not 1 <= self.stages <= len(DEFAULT_DILATIONS):
                raise ValueError(f"stages must be 1..{len(DEFAULT_DILATIONS)} without explicit dilations")
            object.__setattr__(self, "stage_dilations", DEFAULT_DILATIONS[: self.stages])
        else:
            object.__setattr__(self, "stage_dilations", tuple(self.stage_dilations))
        self.validate()

    def validate(self) -> None:
        if self.stages < 1:
            raise ValueError("need at least one fusion stage")
        if len(self.stage_dilations) != self.stages:
            raise ValueError(f"{self.stages} stages but {len(self.stage_dilations)} dilations")
        if any(d < 1 for d in self.stage_dilations):
            raise ValueError("dilations must be >= 1")
        w2 = self.width_2d
        w3a, w3b = self.widths_3d
        for w in (w2, w3a, w3b):
            if w % 4:
                raise ValueError(f"width {w} is not divisible by 4")
        if w3a != 2 * w2:
            raise ValueError("first 3D width must be twice the 2D width (pool + conv halves)")
        if w3b <= w3a:
            raise ValueError("second 3D width must exceed the first")
        if any(n % 4 for n in self.grid_extents):
            raise ValueError("grid extents must be divisible by 4")
        if (5 * w3b) % 2:
            raise ValueError("head width 5C/2 must be an integer")
        if self.fusion not in STRATEGIES:
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @property
    def channels(self) -> int:
        return self.widths_3d[1]

    @property
    def output_extents(self) -> tuple:
        return tuple(n // 4 for n in self.grid_extents)

    def grid(self) -> VoxelGridSpec:
        return VoxelGridSpec.centered(self.grid_extents, self.voxel_size, self.grid_z0)

    def output_grid(self) -> VoxelGridSpec:
        return self.grid().scaled(4)

    def replace(self, **kw) -> "NetworkConfig":
        if "stages" in kw and "stage_dilations" not in kw:
            kw["stage_dilations"] = None
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def paper_config(stages: int = 4, **kw) -> NetworkConfig:
    return NetworkConfig(stages=stages, **kw)


def tiny_config(stages: int = 4, **kw) -> NetworkConfig:
    base = dict(
        width_2d=4,
        widths_3d=(8, 16),
        grid_extents=(32, 16, 32),
        voxel_size=0.1,
        grid_z0=0.0,
        image_shape=(48, 64),
        profile="tiny",
    )
    base.update(kw)
    return NetworkConfig(stages=stages, **base)


PROFILES = {"paper": paper_config, "tiny": tiny_config}


def _block_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class Model:
    config: NetworkConfig
    store: ParamStore
    blocks: dict = field(default_factory=dict)
    fusion: FusionStrategy = None

    def branch_blocks(self, branch: str) -> list[Block]:
        return [b for n, b in self.blocks.items() if n.startswith(branch + ".")]

    def fusion_params(self) -> dict[str, Tensor]:
        return {local: self.store[f"fusion.{local}"] for local in self.fusion.param_shapes()}


def _branch_plan(cfg: NetworkConfig, branch: str) -> list[tuple[str, str, object, int]]:
    w2 = cfg.width_2d
    w3a, w3b = cfg.widths_3d
    cin = BRANCH_INPUT_CHANNELS[branch]
    plan = [
        ("pw", "conv", ConvSpec.pointwise(cin, w2, dims=2), cin),
        ("ddr2d_0", "ddr", DDRConfig(3, w2, 1, 1, dims=2), w2),
        ("ddr2d_1", "ddr", DDRConfig(3, w2, 1, 1, dims=2), w2),
        ("down0", "downsample", DownsampleConfig(w2, w2), w2),
        ("ddr3d", "ddr", DDRConfig(3, w3a, 1, 1), w3a),
        ("down1", "downsample", DownsampleConfig(w3a, w3b - w3a), w3a),
    ]
    for i, d in enumerate(cfg.stage_dilations):
        plan.append((f"stage{i}", "ddr", DDRConfig(3, w3b, 1, d), w3b))
    return plan


def _head_plan(cfg: NetworkConfig) -> list[tuple[str, str, object, int]]:
    c = cfg.channels
    aspp = ASPPConfig(c, cfg.aspp_dilations)
    hidden = aspp.out_channels // 2
    return [
        ("aspp", "aspp", aspp, c),
        ("head.pw0", "conv", ConvSpec.pointwise(aspp.out_channels, hidden), aspp.out_channels),
        ("head.pw1", "conv", ConvSpec.pointwise(hidden, cfg.num_classes), hidden),
    ]


def build(config: NetworkConfig, seed: int = 0, dtype=np.float64) -> Model:
    """Instantiate parameters (Glorot-uniform weights, zero biases)."""
    store = ParamStore(dtype)
    model = Model(config, store, fusion=FusionStrategy(config.fusion, config.channels))
    for branch in BRANCHES:
        for local, kind, spec, cin in _branch_plan(config, branch):
            name = f"{branch}.{local}"
            blk = Block(name, kind, spec, cin, store)
            blk.register(_block_rng(seed, name))
            model.blocks[name] = blk
    frng = _block_rng(seed, "fusion")
    for local, shape in model.fusion.param_shapes().items():
        store.register(f"fusion.{local}", shape, "zeros" if local.startswith("b") else "glorot", frng)
    for name, kind, spec, cin in _head_plan(config):
        blk = Block(name, kind, spec, cin, store)
        blk.register(_block_rng(seed, name))
        model.blocks[name] = blk
    return model


def _normalize_inputs(cfg: NetworkConfig, rgb, depth, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = np.asarray(rgb)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 2:
        rgb, depth = rgb[None], depth[None]
    if depth.shape[1:] != cfg.image_shape or rgb.shape[1:3] != cfg.image_shape:
        raise ValueError(f"image extents {depth.shape[1:]} do not match config {cfg.image_shape}")
    rgb_in = (rgb.astype(np.float64) / 255.0 if rgb.dtype == np.uint8 else rgb.astype(np.float64)).astype(dtype)
    valid = np.isfinite(depth) & (depth > 0)
    depth_in = (np.where(valid, np.clip(depth / cfg.depth_max, 0.0, 1.0), 0.0)[..., None]).astype(dtype)
    return rgb_in, depth_in, np.where(valid, depth, 0.0)


def branch_features(model: Model, branch: str, image: np.ndarray, depth: np.ndarray, cam: CameraIntrinsics) -> list[Tensor]:
    """Run one extractor; returns the feature volume after every fusion-stage DDR."""
    blocks = model.branch_blocks(branch)
    x = Tensor(image)
    for blk in blocks[:3]:
        x = blk.forward(x)
    x = project_features(x, depth, cam, model.config.grid())
    for blk in blocks[3:6]:
        x = blk.forward(x)
    feats = []
    for blk in blocks[6:]:
        x = blk.forward(x)
        feats.append(x)
    return feats


def forward(model: Model, rgb, depth, cam: CameraIntrinsics) -> Tensor:
    """Unnormalised class scores ``(B, D/4, H/4, W/4, num_classes)``."""
    cfg = model.config
    rgb_in, depth_in, metric = _normalize_inputs(cfg, rgb, depth, model.store.dtype)
    f_d = branch_features(model, "depth", depth_in, metric, cam)
    f_rgb = branch_features(model, "rgb", rgb_in, metric, cam)
    seq = [f for pair in zip(f_d, f_rgb) for f in pair]
    fused = fuse_stages(model.fusion, seq, model.fusion_params())
    x = model.blocks["aspp"].forward(fused)
    x = relu(model.blocks["head.pw0"].forward(x))
    return model.blocks["head.pw1"].forward(x)


def predict(model: Model, rgb, depth, cam: CameraIntrinsics) -> np.ndarray:
    return forward(model, rgb, depth, cam).data.argmax(axis=-1).astype(np.uint8)


# ---------------------------------------------------------------- accounting


def count_params(model: Model) -> int:
    return model.store.count()


def layer_costs(cfg: NetworkConfig) -> list[tuple[str, str, Cost]]:
    """Analytic (module, layer, cost) rows in execution order, both branches included."""
    rows = []
    for branch in BRANCHES:
        spatial = cfg.image_shape
        plan = _branch_plan(cfg, branch)
        for i, (local, kind, spec, cin) in enumerate(plan):
            if i == 3:
                spatial = cfg.grid_extents
                rows.append((branch, "projection", Cost(0, 0, spatial, cfg.width_2d)))
            c = Block(local, kind, spec, cin, None).cost(spatial)
            rows.append((branch, local, c))
            spatial = c.out_spatial
    out = cfg.output_extents
    strategy = FusionStrategy(cfg.fusion, cfg.channels)
    rows.append(("fusion", cfg.fusion, Cost(strategy.param_count(), fusion_flops(strategy, out, cfg.stages), out, cfg.channels)))
    for name, kind, spec, cin in _head_plan(cfg):
        c = Block(name, kind, spec, cin, None).cost(out)
        if name == "head.pw0":
            c = dataclasses.replace(c, flops=c.flops + math.prod(out) * c.out_channels)  # relu
        rows.append(("head", name, c))
    return rows


def count_flops(cfg_or_model, image_shape: Optional[tuple] = None) -> int:
    cfg = cfg_or_model.config if isinstance(cfg_or_model, Model) else cfg_or_model
    if image_shape is not None:
        cfg = cfg.replace(image_shape=tuple(image_shape))
    return sum(c.flops for _, _, c in layer_costs(cfg))


def count_params_analytic(cfg: NetworkConfig) -> int:
    return sum(c.params for _, _, c in layer_costs(cfg))


def _fmt(spatial, channels) -> str:
    return "×".join(str(n) for n in (*spatial, channels))


def shape_table(cfg: NetworkConfig) -> list[tuple[str, str, str]]:
    """Structural walk of one branch plus the shared trunk, as
    (module, operation, output size) rows.  2D sizes are written width
    first, ``W×H×C``."""
    rows = []
    costs = {name: c for mod, name, c in layer_costs(cfg) if mod in ("depth", "head")}
    hgt, wid = cfg.image_shape
    for name, op in (("pw", "PWConv"), ("ddr2d_0", "2D DDR"), ("ddr2d_1", "2D DDR")):
        rows.append(("Feature Extractor", op, _fmt((wid, hgt), costs[name].out_channels)))
    rows.append(("Feature Extractor", "2D - 3D Projection", _fmt(cfg.grid_extents, cfg.width_2d)))
    for name, op in (("down0", "Down-sample"), ("ddr3d", "3D DDR"), ("down1", "Down-sample"), ("stage0", "3D DDR")):
        c = costs[name]
        rows.append(("Feature Extractor", op, _fmt(c.out_spatial, c.out_channels)))
    out, c = cfg.output_extents, cfg.channels
    for i in range(cfg.stages):
        if i > 0:
            s = costs[f"stage{i}"]
            rows.append(("Feature Fusion", "3D DDR", _fmt(s.out_spatial, s.out_channels)))
        rows.append(("Feature Fusion", f"GRF stage {i + 1}", _fmt(out, c)))
    aspp = ASPPConfig(c, cfg.aspp_dilations)
    rows.append(("LW-ASPP", "PWConv", _fmt(out, c)))
    for _ in aspp.dilations:
        rows.append(("LW-ASPP", "3D DDR", _fmt(out, c)))
    rows.append(("LW-ASPP", "GlobalAvgPool", _fmt(out, c)))
    rows.append(("LW-ASPP", "Concatenate", _fmt(out, aspp.out_channels)))
    rows.append(("Output", "PWConv", _fmt(out, costs["head.pw0"].out_channels)))
    rows.append(("Output", "PWConv", _fmt(out, cfg.num_classes)))
    # the argmax row lists the score volume it reduces over
    rows.append(("Output", "ArgMax", _fmt(out, cfg.num_classes)))
    return rows
