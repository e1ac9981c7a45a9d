import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cagsplat import autodiff as ad
from cagsplat.errors import ConfigError, DimensionError, NumericError
from cagsplat.losses import (
    AdamState, LossConfig, adam_step, huber, perceptual_proxy, perceptual_weight, photometric_loss, total_loss,
)

from conftest import numeric_grad, rel_err

CFG = LossConfig()


def test_huber_examples():
    assert abs(huber(0.1, 0.1) - 0.005) <= 1e-15
    assert abs(huber(0.2, 0.1) - 0.015) <= 1e-15
    assert huber(-0.2, 0.1) == huber(0.2, 0.1)
    assert huber(0.0, 0.1) == 0.0


def test_huber_c1_at_boundary():
    d, e = 0.1, 1e-9
    lo, hi = huber(d - e, d), huber(d + e, d)
    assert abs(hi - lo) < 1e-9
    slope_lo = (huber(d - e, d) - huber(d - 2 * e, d)) / e
    slope_hi = (huber(d + 2 * e, d) - huber(d + e, d)) / e
    assert abs(slope_lo - slope_hi) < 1e-6


def test_photometric_hand_example():
    target = np.zeros((4, 4, 3))
    rendered = np.full((4, 4, 3), 0.2)
    mask = np.zeros((4, 4))
    mask[:, :2] = 1.0
    loss = float(photometric_loss(target, rendered, mask, CFG).data)
    assert abs(loss - 0.315) <= 1e-12


def test_photometric_zero_mask_reduces_to_mean_huber():
    rng = np.random.default_rng(0)
    t, r = rng.uniform(size=(2, 5, 6, 3))
    loss = float(photometric_loss(t, r, np.zeros((5, 6)), CFG).data)
    expect = np.mean([huber(x, 0.1) for x in (r - t).ravel()])
    assert abs(loss - expect) < 1e-15


@given(st.integers(0, 2**31))
def test_photometric_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(size=(4, 4, 3))
    mask = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    assert float(photometric_loss(t, t, mask, CFG).data) == 0.0
    r = t.copy()
    r[rng.integers(4), rng.integers(4), rng.integers(3)] += 0.01
    assert float(photometric_loss(t, r, mask, CFG).data) > 0.0


def test_shape_errors():
    with pytest.raises(DimensionError):
        photometric_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4)), CFG)
    with pytest.raises(DimensionError):
        photometric_loss(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 5)), CFG)
    with pytest.raises(ConfigError):
        LossConfig(huber_delta=0.0)
    with pytest.raises(ConfigError):
        LossConfig(lambda_mouth=-1.0)


def test_proxy_step_edge():
    step = np.tile(np.array([0.0, 0.0, 1.0, 1.0])[None, :, None], (4, 1, 3))
    blur = np.tile(np.array([0.0, 0.5, 0.5, 1.0])[None, :, None], (4, 1, 3))
    # full scale: x-diffs [0,1,0] vs [.5,0,.5] -> mean |.| 2/3, y-diffs 0 -> (2/3 + 0)/2 = 1/3
    # half scale: [0,1] vs [.25,.75] -> x-diff 1 vs .5 -> (0.5 + 0)/2 = 1/4
    # quarter scale is 1x1 and has no finite difference
    assert abs(float(perceptual_proxy(step, blur).data) - (1 / 3 + 1 / 4) / 2) < 1e-15


def test_proxy_constants_and_identity():
    a, b = np.full((8, 8, 3), 0.2), np.full((8, 8, 3), 0.7)
    assert float(perceptual_proxy(a, b).data) == 0.0
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(8, 8, 3))
    assert float(perceptual_proxy(x, x).data) == 0.0
    assert float(perceptual_proxy(np.zeros((1, 1, 3)), np.ones((1, 1, 3))).data) == 0.0


def test_schedule_single_breakpoint():
    rng = np.random.default_rng(2)
    t, r = rng.uniform(size=(2, 8, 8, 3))
    m = np.ones((8, 8))
    cfg = LossConfig(perceptual_start_iter=10)
    photo = float(photometric_loss(t, r, m, cfg).data)
    vals = [float(total_loss(t, r, m, it, cfg).data) for it in range(20)]
    assert all(v == photo for v in vals[:10])
    expect = photo + 0.05 * float(perceptual_proxy(t, r).data)
    assert all(v == vals[10] for v in vals[10:])
    assert abs(vals[10] - expect) < 1e-15
    assert perceptual_weight(9, cfg) == 0.0 and perceptual_weight(10, cfg) == 0.05
    assert perceptual_weight(100, LossConfig(use_perceptual=False)) == 0.0


def test_total_loss_gradient():
    rng = np.random.default_rng(3)
    t = rng.uniform(size=(8, 8, 3))
    r = t + rng.normal(0, 0.15, t.shape)
    m = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    cfg = LossConfig(perceptual_start_iter=0)
    p = ad.Parameter(r.copy(), "img")
    total_loss(t, p, m, 5, cfg).backward()
    num = numeric_grad(lambda: float(total_loss(t, p.data, m, 5, cfg).data), p.data, 1e-7)
    assert rel_err(p.grad, num) < 1e-4


def test_adam_one_step():
    p = {"x": np.array([0.0])}
    st_ = AdamState.for_params(p, 1e-4)
    adam_step(p, {"x": np.array([1.0])}, st_)
    assert abs(p["x"][0] - (-1e-4 / (1 + 1e-8))) < 1e-20
    assert st_.step == 1


def test_adam_zero_gradient_is_identity():
    rng = np.random.default_rng(4)
    p = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    before = {k: v.copy() for k, v in p.items()}
    st_ = AdamState.for_params(p, 1e-2)
    for _ in range(25):
        adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, st_)
    for k in p:
        np.testing.assert_array_equal(p[k], before[k])


def test_adam_deterministic_and_nan():
    rng = np.random.default_rng(5)
    a = {"w": rng.normal(size=5)}
    b = {"w": a["w"].copy()}
    sa, sb = AdamState.for_params(a, 1e-3), AdamState.for_params(b, 1e-3)
    for _ in range(5):
        g = rng.normal(size=5)
        adam_step(a, {"w": g}, sa)
        adam_step(b, {"w": g.copy()}, sb)
    np.testing.assert_array_equal(a["w"], b["w"])
    with pytest.raises(NumericError, match="'w'"):
        adam_step(a, {"w": np.array([0, 0, np.nan, 0, 0])}, sa)
