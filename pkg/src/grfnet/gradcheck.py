"""Central finite-difference checks for the differentiable building blocks.

Relative error is measured in the infinity norm against the gradient scale
of the whole case: for each leaf,
``max|analytic - numeric| / max(G_analytic, G_numeric, 1e-12)`` where ``G`` is
the largest absolute gradient entry over all leaves.  A per-leaf scale is
ill-conditioned for leaves behind mostly inactive relus.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .blocks import (
    ASPPConfig,
    DDRConfig,
    DownsampleConfig,
    ddr_forward,
    ddr_param_shapes,
    downsample_forward,
    downsample_param_shapes,
    lw_aspp_forward,
    lw_aspp_param_shapes,
)
from .fusion import FusionState, FusionStrategy, baseline_fuse, grf_param_shapes, grf_step, lstm_step
from .losses import weighted_ce
from .tensor import Graph, Tensor, mul, sum_all


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> float:
    if scale is None:
        scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) / max(scale, 1e-12)


@dataclass
class GradCase:
    name: str
    leaves: dict[str, Tensor]
    loss: Callable[[], Tensor]


def numeric_grad(case: GradCase, name: str, eps: float) -> np.ndarray:
    t = case.leaves[name]
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(case.loss().data)
        flat[i] = orig - eps
        lo = float(case.loss().data)
        flat[i] = orig
        out.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return out


def check(case: GradCase, eps: float = 1e-5) -> dict[str, float]:
    """Relative error per leaf tensor."""
    for t in case.leaves.values():
        t.grad = None
    with Graph() as g:
        loss = case.loss()
    g.backward(loss)
    analytic = {n: t.grad for n, t in case.leaves.items()}
    numeric = {n: numeric_grad(case, n, eps) for n in case.leaves}
    scale = max(max(float(np.max(np.abs(a))) for a in analytic.values()), max(float(np.max(np.abs(v))) for v in numeric.values()))
    return {n: relative_error(analytic[n], numeric[n], scale) for n in case.leaves}


def _leaf(rng, shape, name, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name)


def _params(rng, shapes: dict, scale=0.5) -> dict[str, Tensor]:
    return {k: _leaf(rng, s, k, scale) for k, s in shapes.items()}


def _projected(out_fn, rng):
    """Scalarise an output with a fixed random projection."""
    cache = {}

    def loss():
        y = out_fn()
        if "proj" not in cache:
            cache["proj"] = rng.standard_normal(y.shape)
        return sum_all(mul(y, cache["proj"]))

    return loss


def make_case(kind: str, seed: int) -> GradCase:
    rng = np.random.default_rng(seed)
    if kind == "ddr2d":
        cfg = DDRConfig(k=3, w=4, d=1 + seed % 2, dims=2)
        x = _leaf(rng, (1, 5, 6, 4), "x")
        p = _params(rng, ddr_param_shapes(4, cfg))
        return GradCase(kind, {"x": x, **p}, _projected(lambda: ddr_forward(x, p, cfg), rng))
    if kind == "ddr3d":
        cfg = DDRConfig(k=3, w=4, d=1 + seed % 2, dims=3)
        x = _leaf(rng, (1, 4, 3, 5, 4), "x")
        p = _params(rng, ddr_param_shapes(4, cfg))
        return GradCase(kind, {"x": x, **p}, _projected(lambda: ddr_forward(x, p, cfg), rng))
    if kind == "downsample":
        cfg = DownsampleConfig(cin=2, conv_out=3)
        x = _leaf(rng, (1, 4, 2, 4, 2), "x")
        p = _params(rng, downsample_param_shapes(cfg))
        return GradCase(kind, {"x": x, **p}, _projected(lambda: downsample_forward(x, p, cfg), rng))
    if kind == "lw_aspp":
        cfg = ASPPConfig(channels=4, dilations=(1, 2, 3))
        x = _leaf(rng, (1, 3, 2, 4, 4), "x")
        p = _params(rng, lw_aspp_param_shapes(cfg))
        return GradCase(kind, {"x": x, **p}, _projected(lambda: lw_aspp_forward(x, p, cfg), rng))
    if kind == "grf_step":
        f = _leaf(rng, (1, 3, 2, 3, 2), "f")
        h = _leaf(rng, (1, 3, 2, 3, 2), "h")
        p = _params(rng, grf_param_shapes(2))
        return GradCase(kind, {"f": f, "h": h, **p}, _projected(lambda: grf_step(FusionState(h=h), f, p)[0].h, rng))
    if kind == "lstm_step":
        x = _leaf(rng, (1, 3, 2, 3, 2), "x")
        h = _leaf(rng, (1, 3, 2, 3, 2), "h")
        c = _leaf(rng, (1, 3, 2, 3, 2), "c")
        p = _params(rng, FusionStrategy("lstm", 2).param_shapes())

        def out():
            s = lstm_step(FusionState(h=h, cell=c), x, p)
            return s.h + s.cell

        return GradCase(kind, {"x": x, "h": h, "c": c, **p}, _projected(out, rng))
    if kind == "gated":
        strat = FusionStrategy("gated", 2)
        a = _leaf(rng, (1, 3, 2, 3, 2), "a")
        b = _leaf(rng, (1, 3, 2, 3, 2), "b")
        p = _params(rng, strat.param_shapes())
        return GradCase(kind, {"a": a, "b": b, **p}, _projected(lambda: baseline_fuse(strat, a, b, p), rng))
    if kind == "weighted_ce":
        logits = _leaf(rng, (2, 3, 2, 3, 12), "logits", 2.0)
        labels = rng.integers(0, 12, size=(2, 3, 2, 3))
        labels[rng.random(labels.shape) < 0.2] = 255
        mask = rng.random(labels.shape) < 0.7
        weights = rng.uniform(0.05, 2.0, size=12)
        return GradCase(kind, {"logits": logits}, lambda: weighted_ce(logits, labels, weights, mask))
    raise ValueError(f"unknown gradient case {kind!r}")


GRAD_CASES = ("ddr2d", "ddr3d", "downsample", "lw_aspp", "grf_step", "lstm_step", "gated", "weighted_ce")


def run_suite(eps: float = 1e-5, seeds=range(10), cases=GRAD_CASES) -> dict[str, float]:
    """Worst relative error per case over all seeds and leaves."""
    worst = {}
    for kind in cases:
        worst[kind] = max(max(check(make_case(kind, s), eps).values()) for s in seeds)
    return worst
