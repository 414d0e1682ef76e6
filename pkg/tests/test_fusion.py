import numpy as np
import pytest
from grf_oracle import grf_step_oracle

from grfnet.fusion import (
    PARAMETER_FREE,
    FusionState,
    FusionStrategy,
    baseline_fuse,
    fuse_stages,
    grf_init,
    grf_param_shapes,
    grf_step,
    lstm_fuse,
    multi_stage_fuse,
    single_stage_fuse,
)
from grfnet.gradcheck import check, make_case
from grfnet.params import ParamStore
from grfnet.tensor import Graph, ShapeError, Tensor, sum_all


def params(c, rng=None, scale=0.3):
    if rng is None:
        return {k: Tensor(np.zeros(s)) for k, s in grf_param_shapes(c).items()}
    return {k: Tensor(rng.standard_normal(s) * scale) for k, s in grf_param_shapes(c).items()}


def vol(values, shape=(1, 1, 1, 1)):
    return Tensor(np.asarray(values, dtype=float).reshape(*shape, -1))


def test_grf_init():
    h = grf_init(vol([1, 2]), vol([3, 4])).h
    assert h.data.ravel().tolist() == [4.0, 6.0]
    rgb = np.random.default_rng(0).standard_normal((1, 2, 2, 2, 3))
    np.testing.assert_array_equal(grf_init(Tensor(np.zeros_like(rgb)), Tensor(rgb)).h.data, rgb)
    with pytest.raises(ShapeError):
        grf_init(vol([1, 2]), vol([1, 2, 3]))


def test_grf_step_zero_weights_halves_state():
    h = Tensor(np.full((1, 2, 2, 2, 3), 2.0))
    f = Tensor(np.random.default_rng(1).standard_normal((1, 2, 2, 2, 3)))
    state, trace = grf_step(FusionState(h=h), f, params(3))
    assert np.all(trace.r.data == 0.5) and np.all(trace.z.data == 0.5)
    assert np.all(trace.h_candidate.data == 0.0)
    assert np.all(state.h.data == 1.0)
    assert state.p == 1


def test_grf_step_saturated_update_keeps_state():
    p = params(2)
    p["b_z"] = Tensor(np.full(2, 20.0))
    rng = np.random.default_rng(2)
    h = Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
    state, _ = grf_step(FusionState(h=h), Tensor(rng.standard_normal((1, 2, 2, 2, 2))), p)
    np.testing.assert_allclose(state.h.data, h.data, atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_grf_step_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((2, 2, 2, 2))
    h = rng.standard_normal((2, 2, 2, 2))
    p = params(2, rng)
    state, trace = grf_step(FusionState(h=Tensor(h)), Tensor(f), p)
    ref_h, ref_r, ref_z, ref_c = grf_step_oracle(f, h, {k: v.data for k, v in p.items()})
    np.testing.assert_allclose(state.h.data, ref_h, atol=1e-10, rtol=0)
    np.testing.assert_allclose(trace.r.data, ref_r, atol=1e-10, rtol=0)
    np.testing.assert_allclose(trace.z.data, ref_z, atol=1e-10, rtol=0)
    np.testing.assert_allclose(trace.h_candidate.data, ref_c, atol=1e-10, rtol=0)


def test_grf_step_errors():
    with pytest.raises(ValueError):
        grf_step(FusionState(h=None), vol([1.0]), params(1))
    with pytest.raises(ShapeError):
        grf_step(FusionState(h=vol([1.0, 2.0])), vol([1.0]), params(2))


def test_gate_ranges_and_convexity():
    # float64 sigmoid rounds to exactly 1 beyond ~36.7, so keep pre-activations moderate
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = Tensor(rng.standard_normal((1, 2, 3, 2, 2)) * 2)
        h = Tensor(rng.standard_normal((1, 2, 3, 2, 2)) * 2)
        state, t = grf_step(FusionState(h=h), f, params(2, rng, 0.3))
        assert np.all((t.r.data > 0) & (t.r.data < 1))
        assert np.all((t.z.data > 0) & (t.z.data < 1))
        assert np.all(np.abs(t.h_candidate.data) < 1)
        lo = np.minimum(h.data, t.h_candidate.data)
        hi = np.maximum(h.data, t.h_candidate.data)
        assert np.all((state.h.data >= lo - 1e-12) & (state.h.data <= hi + 1e-12))


def test_single_stage_is_composition():
    rng = np.random.default_rng(4)
    fd, frgb = (Tensor(rng.standard_normal((1, 2, 2, 2, 2))) for _ in range(2))
    p = params(2, rng)
    out = single_stage_fuse(fd, frgb, p)
    s, _ = grf_step(grf_init(fd, frgb), fd, p)
    s, _ = grf_step(s, frgb, p)
    np.testing.assert_array_equal(out.h.data, s.h.data)
    assert len(out.traces) == 2


def test_single_stage_zero_weights():
    rng = np.random.default_rng(5)
    fd, frgb = (rng.standard_normal((1, 2, 2, 2, 2)) for _ in range(2))
    out = single_stage_fuse(Tensor(fd), Tensor(frgb), params(2))
    np.testing.assert_allclose(out.h.data, 0.25 * (fd + frgb), atol=1e-15)


def test_multi_stage():
    rng = np.random.default_rng(6)
    feats = [Tensor(rng.standard_normal((1, 2, 2, 2, 2))) for _ in range(6)]
    p = params(2, rng)
    one = multi_stage_fuse(feats[:2], p)
    np.testing.assert_array_equal(one.h.data, single_stage_fuse(*feats[:2], p).h.data)
    three = multi_stage_fuse(feats, p)
    assert len(three.traces) == 6 and len(three.stage_outputs) == 3
    with pytest.raises(ValueError):
        multi_stage_fuse([], p)
    with pytest.raises(ValueError):
        multi_stage_fuse(feats[:3], p)
    with pytest.raises(ShapeError):
        multi_stage_fuse(feats[:3] + [Tensor(np.ones((1, 2, 2, 2, 3)))], p)


def test_shared_parameters_across_steps():
    store = ParamStore()
    for n in (1, 2, 4):
        for k, s in grf_param_shapes(2).items():
            store.register(f"fusion.{k}", s, "zeros")
    assert len(store) == 6
    rng = np.random.default_rng(7)
    feats = [Tensor(rng.standard_normal((1, 2, 2, 2, 2))) for _ in range(4)]
    p = {k.split(".", 1)[1]: v for k, v in store.items()}
    before = multi_stage_fuse(feats, p).h.data.copy()
    store["fusion.b_z"].data = np.full(2, 3.0)
    after = multi_stage_fuse(feats, p)
    # every step now leans on the previous state
    assert all(np.all(t.z.data > 0.9) for t in after.traces)
    assert not np.array_equal(before, after.h.data)


def test_shared_gradients_sum_over_steps():
    rng = np.random.default_rng(8)
    feats = [Tensor(rng.standard_normal((1, 2, 2, 2, 2))) for _ in range(4)]
    p = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in params(2, rng).items()}
    with Graph() as g:
        loss = sum_all(multi_stage_fuse(feats, p).h)
    grads = g.backward(loss)
    assert set(grads) == set(grf_param_shapes(2))


def test_baselines():
    a, b = vol([1, 2]), vol([3, 4])
    assert baseline_fuse(FusionStrategy("sum", 2), a, b).data.ravel().tolist() == [4.0, 6.0]
    assert baseline_fuse(FusionStrategy("average", 2), a, b).data.ravel().tolist() == [2.0, 3.0]
    assert baseline_fuse(FusionStrategy("max", 2), vol([1, 5]), vol([3, 4])).data.ravel().tolist() == [3.0, 5.0]
    gated = FusionStrategy("gated", 2)
    zero = {k: Tensor(np.zeros(s)) for k, s in gated.param_shapes().items()}
    assert baseline_fuse(gated, a, b, zero).data.ravel().tolist() == [2.0, 3.0]
    concat = FusionStrategy("concat", 2)
    cp = {k: Tensor(np.ones(s)) for k, s in concat.param_shapes().items()}
    assert baseline_fuse(concat, a, b, cp).data.ravel().tolist() == [11.0, 11.0]
    with pytest.raises(ShapeError):
        baseline_fuse(FusionStrategy("sum", 2), a, vol([1, 2, 3]))
    with pytest.raises(ValueError):
        FusionStrategy("bilinear", 2)


def test_parameter_counts_by_strategy():
    for tag in PARAMETER_FREE:
        assert FusionStrategy(tag, 8).param_count() == 0
    c = 8
    gate = 27 * 2 * c * c + c
    assert FusionStrategy("grf", c).param_count() == 3 * gate
    assert FusionStrategy("gated", c).param_count() == gate
    assert FusionStrategy("lstm", c).param_count() == 4 * gate
    assert FusionStrategy("concat", c).param_count() == 2 * c * c + c


def test_lstm_two_steps_and_stage_sum():
    rng = np.random.default_rng(9)
    strat = FusionStrategy("lstm", 2)
    p = {k: Tensor(rng.standard_normal(s) * 0.3) for k, s in strat.param_shapes().items()}
    a, b = (Tensor(rng.standard_normal((1, 2, 2, 2, 2))) for _ in range(2))
    state = lstm_fuse([a, b], p)
    assert state.p == 2 and state.cell is not None
    np.testing.assert_array_equal(baseline_fuse(strat, a, b, p).data, state.h.data)
    feats = [Tensor(rng.standard_normal((1, 2, 2, 2, 2))) for _ in range(4)]
    summed = fuse_stages(FusionStrategy("sum", 2), feats, {})
    np.testing.assert_allclose(summed.data, sum(f.data for f in feats))


@pytest.mark.parametrize("kind", ["grf_step", "lstm_step", "gated"])
@pytest.mark.parametrize("seed", range(3))
def test_fusion_gradients(kind, seed):
    assert max(check(make_case(kind, seed)).values()) < 1e-6
