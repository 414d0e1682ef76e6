"""Gated recurrent fusion of depth and RGB feature volumes, plus the
baseline fusion strategies used for ablations.

All gate convolutions see the channel concatenation ``(f, h)`` of the
current modality feature and the hidden state, use a 3-wide kernel with
"same" padding, and map ``2C -> C`` channels.  One parameter set serves
every fusion step of a network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .blocks import ConvSpec
from .tensor import ConvConfig, ShapeError, Tensor, concat, conv, maximum, sigmoid, split, tanh

STRATEGIES = ("grf", "sum", "average", "max", "concat", "gated", "lstm")
PARAMETER_FREE = ("sum", "average", "max")

GRFParams = Mapping[str, Tensor]


@dataclass
class GRFStepTrace:
    r: Tensor
    z: Tensor
    h_reset: Tensor
    h_candidate: Tensor


@dataclass
class FusionState:
    h: Optional[Tensor]
    p: int = 0
    traces: list = field(default_factory=list)
    stage_outputs: list = field(default_factory=list)
    cell: Optional[Tensor] = None  # LSTM baseline only


def _gate_conv(channels: int, kernel: int, dims: int) -> ConvSpec:
    return ConvSpec(2 * channels, channels, (kernel,) * dims)


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def grf_param_shapes(channels: int, kernel: int = 3, dims: int = 3) -> dict[str, tuple]:
    spec = _gate_conv(channels, kernel, dims)
    out = {}
    for gate in ("r", "z", "h"):
        shapes = spec.param_shapes()
        out[f"w_{gate}"] = shapes["w"]
        out[f"b_{gate}"] = shapes["b"]
    return out


def _gate(f: Tensor, h: Tensor, params: GRFParams, gate: str) -> Tensor:
    w = params[f"w_{gate}"]
    dims = w.ndim - 2
    cfg = ConvConfig(tuple(w.shape[:dims]))
    return conv(concat([f, h]), w, params[f"b_{gate}"], cfg)


def _reset_update(f: Tensor, h: Tensor, params: GRFParams) -> list[Tensor]:
    # reset and update gates read the same input, so run them as one conv
    w = concat([params["w_r"], params["w_z"]])
    b = concat([params["b_r"], params["b_z"]])
    cfg = ConvConfig(tuple(w.shape[: w.ndim - 2]))
    return split(conv(concat([f, h]), w, b, cfg), [h.shape[-1], h.shape[-1]])


def grf_init(f_d: Tensor, f_rgb: Tensor) -> FusionState:
    """Hidden state initialised by sum fusion of the two modalities."""
    _check_same(f_d, f_rgb, "grf_init")
    return FusionState(h=f_d + f_rgb, p=0)


def grf_step(state: FusionState, f: Tensor, params: GRFParams) -> tuple[FusionState, GRFStepTrace]:
    """One GRF step consuming modality feature ``f``.

    r = sigmoid(W_r(f, h)); z = sigmoid(W_z(f, h)); h' = r*h;
    h_c = tanh(W_h(f, h')); h_next = z*h + (1-z)*h_c.
    """
    if state is None or state.h is None:
        raise ValueError("grf_step called on an uninitialised state")
    h = state.h
    _check_same(f, h, "grf_step")
    r, z = (sigmoid(t) for t in _reset_update(f, h, params))
    h_reset = r * h
    h_cand = tanh(_gate(f, h_reset, params, "h"))
    h_next = z * h + (1.0 - z) * h_cand
    trace = GRFStepTrace(r, z, h_reset, h_cand)
    new = FusionState(h=h_next, p=state.p + 1, traces=state.traces + [trace], stage_outputs=list(state.stage_outputs))
    return new, trace


def single_stage_fuse(f_d: Tensor, f_rgb: Tensor, params: GRFParams) -> FusionState:
    state = grf_init(f_d, f_rgb)
    state, _ = grf_step(state, f_d, params)
    state, _ = grf_step(state, f_rgb, params)
    state.stage_outputs.append(state.h)
    return state


def _pairs(features: Sequence[Tensor]) -> list[tuple[Tensor, Tensor]]:
    if len(features) == 0:
        raise ValueError("empty feature sequence")
    if len(features) % 2:
        raise ValueError("feature sequence must alternate depth/RGB pairs")
    ref = features[0].shape
    for f in features:
        if f.shape != ref:
            raise ShapeError(f"inconsistent feature shapes {ref} vs {f.shape}")
    return [(features[i], features[i + 1]) for i in range(0, len(features), 2)]


def multi_stage_fuse(features: Sequence[Tensor], params: GRFParams) -> FusionState:
    """Feed ``(f_d_1, f_rgb_1, ..., f_d_N, f_rgb_N)`` serially through one
    shared GRF block.  ``stage_outputs`` holds the hidden state after each
    depth/RGB pair."""
    pairs = _pairs(features)
    state = grf_init(*pairs[0])
    for f_d, f_rgb in pairs:
        state, _ = grf_step(state, f_d, params)
        state, _ = grf_step(state, f_rgb, params)
        state.stage_outputs.append(state.h)
    return state


# ---------------------------------------------------------------- baselines


@dataclass(frozen=True)
class FusionStrategy:
    tag: str
    channels: int
    kernel: int = 3
    dims: int = 3

    def __post_init__(self):
        if self.tag not in STRATEGIES:
            raise ValueError(f"unsupported fusion strategy {self.tag!r}")

    def param_shapes(self) -> dict[str, tuple]:
        c, k, nd = self.channels, self.kernel, self.dims
        if self.tag in PARAMETER_FREE:
            return {}
        if self.tag == "grf":
            return grf_param_shapes(c, k, nd)
        if self.tag == "concat":
            return ConvSpec.pointwise(2 * c, c, nd).param_shapes()
        if self.tag == "gated":
            s = _gate_conv(c, k, nd).param_shapes()
            return {"w_g": s["w"], "b_g": s["b"]}
        shapes = {}
        for gate in ("i", "f", "o", "g"):
            s = _gate_conv(c, k, nd).param_shapes()
            shapes[f"w_{gate}"] = s["w"]
            shapes[f"b_{gate}"] = s["b"]
        return shapes

    def param_count(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())


def lstm_step(state: FusionState, x: Tensor, params: GRFParams) -> FusionState:
    """Convolutional LSTM step with forget/input/output gates and a cell state."""
    h = state.h
    _check_same(x, h, "lstm_step")
    i = sigmoid(_gate(x, h, params, "i"))
    f = sigmoid(_gate(x, h, params, "f"))
    o = sigmoid(_gate(x, h, params, "o"))
    g = tanh(_gate(x, h, params, "g"))
    c = i * g if state.cell is None else f * state.cell + i * g
    h_next = o * tanh(c)
    return FusionState(h=h_next, p=state.p + 1, stage_outputs=list(state.stage_outputs), cell=c)


def lstm_fuse(features: Sequence[Tensor], params: GRFParams) -> FusionState:
    """Run the LSTM baseline over the interleaved sequence, starting from
    ``h0 = f_d_1 + f_rgb_1`` and a zero cell state."""
    pairs = _pairs(features)
    state = FusionState(h=pairs[0][0] + pairs[0][1])
    for f_d, f_rgb in pairs:
        state = lstm_step(state, f_d, params)
        state = lstm_step(state, f_rgb, params)
        state.stage_outputs.append(state.h)
    return state


def baseline_fuse(strategy: FusionStrategy, a: Tensor, b: Tensor, params: GRFParams | None = None) -> Tensor:
    """Single-stage fusion of depth feature ``a`` and RGB feature ``b``."""
    tag = strategy.tag
    params = params or {}
    if tag == "concat":
        if a.shape[:-1] != b.shape[:-1]:
            raise ShapeError(f"concat fusion: spatial shapes {a.shape} and {b.shape} differ")
        spec = ConvSpec.pointwise(a.shape[-1] + b.shape[-1], strategy.channels, a.ndim - 2)
        return spec.forward(concat([a, b]), params)
    _check_same(a, b, f"{tag} fusion")
    if tag == "sum":
        return a + b
    if tag == "average":
        return (a + b) * 0.5
    if tag == "max":
        return maximum(a, b)
    if tag == "gated":
        g = sigmoid(_gate(a, b, params, "g"))
        return g * a + (1.0 - g) * b
    if tag == "lstm":
        return lstm_fuse([a, b], params).h
    if tag == "grf":
        return single_stage_fuse(a, b, params).h
    raise ValueError(f"unsupported fusion strategy {tag!r}")


def fuse_stages(strategy: FusionStrategy, features: Sequence[Tensor], params: GRFParams) -> Tensor:
    """Fuse an interleaved ``(f_d_1, f_rgb_1, ...)`` sequence into one volume.

    Recurrent strategies (grf, lstm) thread their hidden state through all
    pairs.  The others fuse each pair with the shared parameters and sum
    the per-stage results so the head sees ``C`` channels for any N.
    """
    if strategy.tag == "grf":
        return multi_stage_fuse(features, params).h
    if strategy.tag == "lstm":
        return lstm_fuse(features, params).h
    out = None
    for a, b in _pairs(features):
        fused = baseline_fuse(strategy, a, b, params)
        out = fused if out is None else out + fused
    return out


def fusion_flops(strategy: FusionStrategy, spatial: Sequence[int], stages: int) -> int:
    """Cost of fusing ``stages`` depth/RGB pairs at ``spatial`` extents."""
    c, nd = strategy.channels, strategy.dims
    n = math.prod(spatial) * c
    gate = _gate_conv(c, strategy.kernel, nd).cost(spatial).flops
    tag = strategy.tag
    if tag == "grf":
        # per step: 3 gate convs; 2 sigmoid, r*h, tanh, z*h, 1-z, (1-z)*hc, add
        return n + stages * 2 * (3 * gate + 8 * n)
    if tag == "lstm":
        # per step: 4 gate convs; 3 sigmoid, 2 tanh, f*c, i*g, add, o*tanh(c)
        return n + stages * 2 * (4 * gate + 9 * n)
    per_pair = {
        "sum": n,
        "average": 2 * n,
        "max": n,
        "concat": ConvSpec.pointwise(2 * c, c, nd).cost(spatial).flops,
        "gated": gate + 5 * n,
    }[tag]
    return stages * per_pair + (stages - 1) * n
