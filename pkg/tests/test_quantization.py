import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from oracles import exhaustive_rvq, random_scene_arrays, relative_error, ste_surrogate
from sgsplat.exceptions import ContractViolation
from sgsplat.metrics import psnr
from sgsplat.quantization import (
    CODEBOOK_STEP,
    LsqParams,
    QuantConfig,
    RvqCodebook,
    SceneGradients,
    bitwidth_loss,
    dequantize_codes,
    freeze,
    init_state,
    lsq_backward,
    lsq_forward,
    lsq_grads,
    nearest,
    quantize_backward,
    quantize_codes,
    quantize_scene,
    rvq_decode,
    rvq_encode,
    rvq_fit,
    to_fixed_point,
)
from sgsplat.splat import GaussianScene, render

seeds = st.integers(0, 2 ** 32 - 1)
finite = dict(allow_nan=False, allow_infinity=False)


def _scene(seed, n=30, w=24, h=24):
    rng = np.random.default_rng(seed)
    return GaussianScene(*random_scene_arrays(rng, n, w, h), w, h)


# ---------------------------------------------------------------- scalar LSQ

def test_lsq_forward_examples():
    assert lsq_forward(-0.3, LsqParams(-0.3, 2.0, 7.2)) == (0, -0.3)
    code, v = lsq_forward(0.5, LsqParams(0.0, 1.0, 6))
    assert code == 32 and v == pytest.approx(32 / 63, abs=1e-15)
    assert v == pytest.approx(0.507937, abs=1e-6)
    assert lsq_forward(1.2, LsqParams(0.0, 1.0, 6)) == (63, 1.0)


def test_lsq_param_contracts():
    with pytest.raises(ContractViolation):
        LsqParams(1.0, 1.0, 8)
    with pytest.raises(ContractViolation):
        lsq_forward(0.1, LsqParams(0.0, 1.0, 0.4))
    with pytest.raises(ContractViolation):
        lsq_forward(0.1, LsqParams(0.0, 1.0, 31))


def test_soft_bitwidth_rounds_half_even():
    assert LsqParams(0, 1, 6.5).bits == 6
    assert LsqParams(0, 1, 7.5).bits == 8


def test_lsq_backward_examples():
    d_vmax, d_vmin, _, d_v = lsq_backward(0.4, LsqParams(0.0, 1.0, 2))
    assert d_vmax == pytest.approx(-1 / 15, abs=1e-15)
    assert d_vmin == pytest.approx(1 / 15, abs=1e-15)
    assert d_v == 1.0
    d_vmax, d_vmin, _, d_v = lsq_backward(1.5, LsqParams(0.0, 1.0, 2))
    assert d_vmax == 1.0 and d_vmin == 0.0 and d_v == 0.0


def test_lsq_backward_db_at_reconstruction_level():
    # v on a level: no rounding residual, so the in-range d/db vanishes
    assert lsq_backward(2 / 7, LsqParams(0.0, 1.0, 3))[2] == pytest.approx(0.0, abs=1e-15)


def _fd_partials(v, v_min, v_max, b, h=1e-6):
    """Numerical partials of the straight-through surrogate around (v_min, v_max, b)."""
    q = 2.0 ** b - 1
    s = (v_max - v_min) / q
    code = min(max(np.rint((v - v_min) / s), 0.0), q)
    inside = v_min <= v <= v_max
    kw = dict(delta=code - (v - v_min) / s) if inside else dict(code=code)

    def f(a, c, bb, vv=v):
        return ste_surrogate(vv, a, c, bb, **kw)

    return (
        (f(v_min, v_max + h, b) - f(v_min, v_max - h, b)) / (2 * h),
        (f(v_min + h, v_max, b) - f(v_min - h, v_max, b)) / (2 * h),
        (f(v_min, v_max, b + h) - f(v_min, v_max, b - h)) / (2 * h),
        (f(v_min, v_max, b, v + h) - f(v_min, v_max, b, v - h)) / (2 * h),
    )


@given(st.floats(-5, 5, **finite), st.floats(0.01, 10, **finite), st.integers(1, 16),
       st.floats(-0.5, 1.5, **finite))
def test_ste_partials_match_numerical(v_min, width, bits, frac):
    v_max = v_min + width
    v = v_min + frac * width
    s = width / (2 ** bits - 1)
    x = (v - v_min) / s
    # stay away from rounding ties and from the range edges
    assume(abs(x - math.floor(x) - 0.5) > 1e-3)
    assume(min(abs(v - v_min), abs(v - v_max)) > 1e-6 * width)
    got = lsq_grads(v, v_min, v_max, bits)
    want = _fd_partials(v, v_min, v_max, float(bits))
    for g, w in zip(got, want):
        assert relative_error(g, w, floor=1e-6) < 1e-3


@given(st.integers(1, 12), st.floats(-3, 3, **finite), st.floats(0.01, 6, **finite),
       st.lists(st.floats(0, 1, **finite), min_size=1, max_size=50))
def test_round_trip_bound_and_idempotence(bits, v_min, width, fracs):
    v_max = v_min + width
    v = v_min + np.array(fracs) * width
    code = quantize_codes(v, v_min, v_max, bits)
    vh = dequantize_codes(code, v_min, v_max, bits)
    s = width / (2 ** bits - 1)
    assert np.all(np.abs(vh - v) <= s / 2 + 1e-12)
    again = dequantize_codes(quantize_codes(vh, v_min, v_max, bits), v_min, v_max, bits)
    assert np.array_equal(again, vh)
    assert code.min() >= 0 and code.max() <= 2 ** bits - 1


@given(seeds)
def test_monotone_precision(seed):
    v = np.random.default_rng(seed).uniform(-1, 1, 500)
    errs = [np.abs(dequantize_codes(quantize_codes(v, -1.0, 1.0, b), -1.0, 1.0, b) - v).max()
            for b in range(1, 17)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_bitwidth_loss_examples():
    assert bitwidth_loss([6.0, 6.0, 6.0])[0] == 6.0
    val, grad = bitwidth_loss([6.4, 9.6])
    assert val == 8.0 and grad.tolist() == [0.5, 0.5]
    assert bitwidth_loss([LsqParams(0, 1, 16.0)] * 3)[0] == 16.0
    with pytest.raises(ContractViolation):
        bitwidth_loss([])


# ---------------------------------------------------------------- RVQ

def test_rvq_identical_colors():
    colors = np.tile([0.25, 0.5, -0.125], (40, 1))
    book = rvq_fit(colors, stages=2, k=4)
    assert any(np.array_equal(row, colors[0]) for row in book.stages[0])
    _, quant, loss = rvq_encode(colors, book)
    assert loss == 0.0


def test_rvq_two_colors_exact():
    colors = np.array([[0.1, 0.2, 0.3]] * 5 + [[0.9, 0.1, 0.4]] * 7)
    book = rvq_fit(colors, stages=1, k=2)
    assert sorted(map(tuple, book.stages[0])) == sorted({tuple(c) for c in colors})
    assert rvq_encode(colors, book)[2] == 0.0


def test_rvq_mse_nonincreasing_in_stages():
    colors = np.random.default_rng(5).uniform(size=(400, 3))
    losses = [rvq_encode(colors, rvq_fit(colors, stages=s, k=8, seed=1))[2] for s in (1, 2, 3, 4)]
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


def test_rvq_fit_deterministic():
    colors = np.random.default_rng(2).uniform(size=(200, 3))
    a = rvq_fit(colors, 2, 16, seed=9)
    b = rvq_fit(colors, 2, 16, seed=9)
    assert np.array_equal(a.stages, b.stages)


def test_nearest_tie_lowest_index():
    cents = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    assert nearest(np.zeros((1, 3)), cents).tolist() == [0]
    assert nearest(np.array([[1.0, 0, 0]]), cents).tolist() == [0]


def test_rvq_exact_centroid_single_stage():
    book = RvqCodebook(np.array([[[0.0, 0, 0], [0.3, 0.6, 0.9]]]))
    idx, quant, loss = rvq_encode(np.array([[0.3, 0.6, 0.9]]), book)
    assert idx.tolist() == [[1]] and loss == 0.0


def test_rvq_greedy_vs_exhaustive():
    rng = np.random.default_rng(11)
    agree = trials = 0
    for trial in range(60):
        colors = rng.uniform(size=(25, 3))
        book = rvq_fit(colors, stages=2, k=int(rng.integers(2, 5)), seed=trial)
        _, quant, _ = rvq_encode(colors, book)
        greedy = np.sum((quant - colors) ** 2, axis=1)
        best = exhaustive_rvq(colors, list(book.stages))
        assert np.all(greedy >= best - 1e-12)
        agree += int(np.sum(np.isclose(greedy, best, rtol=0, atol=1e-12)))
        trials += colors.shape[0]
    assert agree / trials >= 0.95


def test_fixed_point_grid():
    vals = np.array([-5.0, -4.0, 0.0, 1e-5, 3.9998, 3.9999999, 10.0])
    fp = to_fixed_point(vals)
    assert fp[0] == -4.0 and fp[-1] == fp[-2] == 4.0 - CODEBOOK_STEP
    assert np.array_equal(to_fixed_point(fp), fp)
    assert np.all(np.abs(fp[1:5] - vals[1:5]) <= CODEBOOK_STEP / 2)


# ---------------------------------------------------------------- whole scene

def test_quant_config_contracts():
    with pytest.raises(ContractViolation):
        QuantConfig(bit_range=(8, 6))
    with pytest.raises(ContractViolation):
        QuantConfig(rvq_k=6)
    with pytest.raises(ContractViolation):
        QuantConfig(rvq_stages=0)


def test_high_precision_limit():
    rng = np.random.default_rng(4)
    palette = rng.uniform(0, 0.6, size=(8, 3))
    mu, chol, _ = random_scene_arrays(rng, 40, 32, 32)
    scene = GaussianScene(mu, chol, palette[rng.integers(0, 8, 40)], 32, 32)
    target = render(scene) + rng.normal(0, 0.05, size=(32, 32, 3))
    state = init_state(scene, QuantConfig(bit_range=(14, 16), init_bits=16, pos_bits=16, rvq_stages=1,
                                          rvq_k=8))
    deq = quantize_scene(scene, state)[0]
    assert abs(psnr(render(deq), target) - psnr(render(scene), target)) <= 1e-2


@given(seeds)
def test_quantize_scene_idempotent(seed):
    scene = _scene(seed)
    state = init_state(scene, QuantConfig(rvq_k=8))
    state.b[:] = np.random.default_rng(seed).uniform(6, 16, len(scene))
    deq, *_ = quantize_scene(scene, state)
    again, *_ = quantize_scene(deq, state)
    np.testing.assert_array_equal(again.mu, deq.mu)
    np.testing.assert_array_equal(again.chol, deq.chol)


@given(seeds)
def test_single_stage_rvq_idempotent(seed):
    # greedy multi-stage coding of a decoded sum may choose other indices; one stage cannot
    scene = _scene(seed)
    state = init_state(scene, QuantConfig(rvq_k=8, rvq_stages=1))
    deq, *_ = quantize_scene(scene, state)
    np.testing.assert_array_equal(quantize_scene(deq, state)[0].color, deq.color)


def test_more_bits_smaller_covariance_error():
    scene = _scene(8, 20)
    scene.chol[0] = (0.9, 0.05, 0.9)
    # full min/max range so the probe Gaussian is never clipped
    state = init_state(scene, QuantConfig(rvq_k=4, range_percentile=0.0))
    errs = {}
    for b in (6, 16):
        state.b[:] = b
        deq, *_ = quantize_scene(scene, state)
        errs[b] = np.abs(deq.chol[0] - scene.chol[0]).max()
    assert errs[16] < errs[6]


def test_bitwidth_bounds_after_projection():
    scene = _scene(1)
    state = init_state(scene, QuantConfig(rvq_k=4))
    assert np.all(state.b == 8.0)
    state.b[:3] = (2.0, 40.0, 11.3)
    state.project()
    assert state.b[:3].tolist() == [6.0, 16.0, 11.3]


def test_freeze_codes_in_range_and_grouped():
    scene = _scene(3, 60)
    state = init_state(scene, QuantConfig(rvq_k=16))
    state.b[:] = np.random.default_rng(0).uniform(6, 16, 60)
    q = freeze(scene, state)
    assert np.all(np.diff(q.cov_bits) >= 0)
    assert np.all(q.cov_codes >= 0) and np.all(q.cov_codes <= (2 ** q.cov_bits[:, None] - 1))
    assert np.all(q.pos_codes >= 0) and np.all(q.pos_codes <= 2 ** 12 - 1)
    assert np.all(q.color_indices >= 0) and np.all(q.color_indices < 16)
    assert q.mean_bits() == pytest.approx(np.rint(state.b).mean())
    # the frozen scene is the fake-quantized scene in group order
    deq, *_ = quantize_scene(scene, state)
    order = np.argsort(np.rint(state.b), kind="stable")
    np.testing.assert_array_equal(q.dequantize().chol, deq.chol[order])
    np.testing.assert_array_equal(q.dequantize().color, deq.color[order])


def test_freeze_empty_scene():
    empty = GaussianScene.empty(8, 8)
    state = init_state(empty, QuantConfig(rvq_k=4))
    q = freeze(empty, state)
    assert len(q) == 0 and len(q.dequantize()) == 0


def test_quantize_backward_residual_and_bitwidth_terms():
    scene = _scene(6, 25)
    state = init_state(scene, QuantConfig(rvq_k=8))
    deq, _, l_r, cache = quantize_scene(scene, state)
    zero = SceneGradients(np.zeros((25, 2)), np.zeros((25, 3)), np.zeros((25, 3)))
    g_scene, g_state = quantize_backward(state, cache, zero, lambda_b=0.5, lambda_r=1.0)
    np.testing.assert_allclose(g_state.d_b, 0.5 / 25, rtol=1e-15)
    assert not g_state.d_cov_min.any() and not g_state.d_cov_max.any()

    # residual loss as a function of the codebook with the assignments held fixed
    book = state.serial_codebook().stages

    def l_r_of(stages):
        q = rvq_decode(cache.indices, RvqCodebook(stages))
        return np.mean((q - scene.color) ** 2)

    assert l_r_of(book) == pytest.approx(l_r, rel=1e-12)
    h = 1e-6
    for s, k, c in [(0, int(cache.indices[0, 0]), 1), (1, int(cache.indices[1, 3]), 2)]:
        up, dn = book.copy(), book.copy()
        up[s, k, c] += h
        dn[s, k, c] -= h
        fd = (l_r_of(up) - l_r_of(dn)) / (2 * h)
        assert g_state.d_codebook[s, k, c] == pytest.approx(fd, rel=1e-6)


def test_quantize_backward_covariance_chain():
    scene = _scene(2, 10)
    state = init_state(scene, QuantConfig(rvq_k=4))
    _, _, _, cache = quantize_scene(scene, state)
    up = np.random.default_rng(0).standard_normal((10, 3))
    g = SceneGradients(np.ones((10, 2)), up, np.zeros((10, 3)))
    g_scene, g_state = quantize_backward(state, cache, g)
    d_vmax, d_vmin, d_b, d_v = lsq_grads(cache.chol, cache.cov_min, cache.cov_max, cache.bits)
    np.testing.assert_array_equal(g_scene.d_mu, np.ones((10, 2)))
    np.testing.assert_allclose(g_scene.d_chol, up * d_v)
    np.testing.assert_allclose(g_state.d_cov_max, (up * d_vmax).sum(0))
    np.testing.assert_allclose(g_state.d_b, (up * d_b).sum(1))


def test_range_percentile_ignores_outliers():
    scene = _scene(9, 200)
    scene.chol[0, 0] = 500.0
    wide = init_state(scene, QuantConfig(rvq_k=4, range_percentile=0.0))
    robust = init_state(scene, QuantConfig(rvq_k=4))
    assert wide.cov_max[0] == 500.0
    assert robust.cov_max[0] < 100.0
    with pytest.raises(ContractViolation):
        QuantConfig(range_percentile=50.0)
