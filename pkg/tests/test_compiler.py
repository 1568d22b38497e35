import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptfp.chip import default_chip
from ptfp.compiler import (
    compile_kernel,
    execute_plan,
    execute_plan_batch,
    expected_call_count,
    normalize_weights,
    plan_row_shift_2d,
    split_signs,
)
from ptfp.devices import NoiseModel
from ptfp.errors import CapacityError, EncodingError, ShapeError
from ptfp.signal_core import DataTensor, KernelTensor, direct_xcorr, oracle_tensor_conv

SOBEL_H = np.array([[-1.0, 0, 1], [-2, 0, 2], [-1, 0, 1]])
CHIP = default_chip()


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


# -- sign handling and normalisation ------------------------------------------


def test_split_signs_small():
    plus, minus = split_signs(KernelTensor(np.array([-1.0, 0, 1])[:, None, None]))
    assert plus.weights.ravel().tolist() == [0, 0, 1]
    assert minus.weights.ravel().tolist() == [1, 0, 0]


def test_split_signs_sobel():
    plus, minus = split_signs(KernelTensor.from_2d(SOBEL_H))
    assert np.count_nonzero(plus.weights) == 3
    assert np.count_nonzero(minus.weights) == 3
    assert np.array_equal(plus.weights - minus.weights, KernelTensor.from_2d(SOBEL_H).weights)


def test_positive_kernel_has_no_minus_calls():
    plan = compile_kernel(KernelTensor.from_2d(np.full((3, 3), 1 / 9)), CHIP)
    assert {c.sign_label for c in plan.calls} == {"plus"}


def test_normalize_examples():
    unit, scale = normalize_weights(KernelTensor(np.array([0.0, 0, 2])[:, None, None]))
    assert unit.weights.ravel().tolist() == [0, 0, 1] and scale == 2
    unit, scale = normalize_weights(KernelTensor.from_2d(np.full((3, 3), 1 / 9)))
    assert np.all(unit.weights == 1.0) and scale == pytest.approx(1 / 9)
    rng = np.random.default_rng(0)
    k = KernelTensor(rng.normal(size=(3, 3, 2, 2)))
    unit, scale = normalize_weights(k)
    assert np.allclose(unit.weights * scale, k.weights, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        normalize_weights(KernelTensor(np.zeros((3, 1, 1))))


# -- call counts -------------------------------------------------------------


def test_call_counts():
    rng = np.random.default_rng(1)
    k14 = KernelTensor(rng.random((3, 3, 1, 4)) + 0.1)
    k48 = KernelTensor(rng.random((3, 3, 4, 8)) + 0.1)
    assert compile_kernel(k14, CHIP).n_calls == 4
    assert compile_kernel(k48, CHIP).n_calls == 32
    assert expected_call_count((3, 3), 1, 4, CHIP.dims) == 4
    assert expected_call_count((3, 3), 4, 8, CHIP.dims) == 32
    assert expected_call_count((3, 3), 4, 8, CHIP.dims, sign_passes=2) == 64


def test_identity_plan():
    plan = compile_kernel(KernelTensor(np.ones((1, 1, 1))), CHIP)
    assert plan.n_calls == 1
    x = DataTensor(np.random.default_rng(2).random((1, 9)))
    assert np.allclose(execute_plan(plan, x, CHIP).samples, x.samples, rtol=1e-12)


def test_channel_packing_on_short_kernels():
    # 1x3 kernels leave room for four input channels per call
    k = KernelTensor(np.ones((3, 4, 2)))
    assert compile_kernel(k, CHIP).n_calls == 2
    assert compile_kernel(k, CHIP, optical_channel_sum=False).n_calls == 8


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6))
def test_slots_cover_kernel_exactly_once(kh, kw, c_in, c_out, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(kh, kw, c_in, c_out))
    plan = compile_kernel(KernelTensor(w), CHIP)
    seen = {}
    for _, _, _, _, sign, i, o, r, c, val in plan.slots():
        key = (i, o, r, c)
        assert key not in seen
        seen[key] = val
    assert len(seen) == np.count_nonzero(w)
    assert np.allclose(plan.reconstruct_kernel(), w, rtol=1e-12, atol=0)
    for call in plan.calls:
        assert call.weights.min() >= 0.0 and call.weights.max() <= 1.0 + 1e-15
    assert plan.n_calls <= expected_call_count((kh, kw), c_in, c_out, CHIP.dims, sign_passes=2)


def test_wide_kernel_without_tiling_is_capacity_error():
    with pytest.raises(CapacityError, match="d_t >= 5"):
        compile_kernel(KernelTensor(np.ones((1, 5, 1, 1))), CHIP, allow_tap_tiling=False)


def test_wide_kernel_tiles_over_taps():
    rng = np.random.default_rng(3)
    k = KernelTensor(rng.normal(size=(2, 7, 1, 1)))
    x = DataTensor(rng.random((1, 6, 12)))
    plan = compile_kernel(k, CHIP)
    assert rel_err(execute_plan(plan, x, CHIP).samples, oracle_tensor_conv(x, k).samples) < 1e-9


def test_tall_kernel_on_narrow_chip():
    cfg = default_chip(2, 3, 1)
    rng = np.random.default_rng(4)
    k = rng.normal(size=(3, 3))
    x = DataTensor(rng.random((1, 8, 8)))
    y = execute_plan(plan_row_shift_2d(k, cfg), x, cfg).samples
    assert rel_err(y, oracle_tensor_conv(x, KernelTensor.from_2d(k)).samples) < 1e-9


# -- execution ---------------------------------------------------------------


def test_row_shift_identity_centre():
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    x = np.random.default_rng(5).random((8, 8))
    y = execute_plan(plan_row_shift_2d(k, CHIP), DataTensor(x[None]), CHIP).samples[0]
    assert np.allclose(y, x[1:-1, 1:-1], rtol=1e-12)


def test_sobel_h_responds_only_at_vertical_edge():
    img = np.zeros((24, 24))
    img[:, 12:] = 1.0
    y = execute_plan(plan_row_shift_2d(SOBEL_H, CHIP), DataTensor(img[None]), CHIP).samples[0]
    cols = np.flatnonzero(np.abs(y).max(axis=0) > 1e-9)
    assert cols.tolist() == [10, 11]
    assert np.allclose(y[:, 10:12], 4.0, rtol=1e-12)


def test_sobel_v_extracts_horizontal_edges():
    img = np.zeros((24, 24))
    img[8:16, :] = 1.0
    y = execute_plan(plan_row_shift_2d(SOBEL_H.T, CHIP), DataTensor(img[None]), CHIP).samples[0]
    rows = np.flatnonzero(np.abs(y).max(axis=1) > 1e-9)
    assert rows.tolist() == [6, 7, 14, 15]


def test_sharpen_is_identity_plus_edge():
    sharpen = SOBEL_H.copy()
    sharpen[1, 1] += 1.0
    x = np.random.default_rng(6).random((10, 10))
    y = execute_plan(plan_row_shift_2d(sharpen, CHIP), DataTensor(x[None]), CHIP).samples[0]
    edge = direct_xcorr(x[None], SOBEL_H[:, :, None, None])[0]
    assert np.allclose(y, x[1:-1, 1:-1] + edge, rtol=1e-9, atol=1e-12)


def test_random_pairs_match_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        c_in, c_out = rng.integers(1, 5, size=2)
        kh, kw = [(1, 3), (3, 3)][rng.integers(2)]
        h, w = rng.integers(3, 9, size=2)
        x = DataTensor(rng.random((c_in, h, w)))
        k = KernelTensor(rng.normal(size=(kh, kw, c_in, c_out)))
        y = execute_plan(compile_kernel(k, CHIP), x, CHIP).samples
        assert rel_err(y, oracle_tensor_conv(x, k).samples) < 1e-9


def test_one_dimensional_data():
    rng = np.random.default_rng(8)
    x = DataTensor(rng.random((2, 15)))
    k = KernelTensor(rng.normal(size=(3, 2, 3)))
    y = execute_plan(compile_kernel(k, CHIP), x, CHIP).samples
    assert y.shape == (3, 13)
    assert rel_err(y, oracle_tensor_conv(x, k).samples) < 1e-9


def test_lut_programming_is_close():
    rng = np.random.default_rng(9)
    k = KernelTensor(rng.normal(size=(3, 3, 1, 2)))
    x = DataTensor(rng.random((1, 8, 8)))
    y = execute_plan(compile_kernel(k, CHIP, program="lut"), x, CHIP).samples
    assert rel_err(y, oracle_tensor_conv(x, k).samples) < 1e-3


def test_batch_equals_per_frame():
    rng = np.random.default_rng(10)
    k = KernelTensor(rng.normal(size=(3, 3, 2, 3)))
    frames = rng.random((4, 2, 7, 9))
    plan = compile_kernel(k, CHIP)
    y = execute_plan_batch(plan, frames, CHIP)
    for b in range(4):
        ref = execute_plan(plan, DataTensor(frames[b]), CHIP).samples
        assert np.allclose(y[b], ref, rtol=1e-12, atol=1e-14)


def test_noise_propagation_through_sign_passes():
    sigma = 0.1
    cfg = CHIP.with_noise(NoiseModel(sigma, seed=1))
    k = KernelTensor.from_2d(SOBEL_H)
    plan = compile_kernel(k, cfg)
    x = DataTensor(np.full((1, 40, 40), 0.5))
    resid = execute_plan(plan, x, cfg).samples - oracle_tensor_conv(x, k).samples
    # each of the two passes adds sigma * scale; the subtraction adds variances
    expected = sigma * np.sqrt(sum(t.coeff**2 for t in plan.post_combine))
    assert np.std(resid) == pytest.approx(expected, rel=0.05)


def test_execute_rejects_bad_inputs():
    plan = compile_kernel(KernelTensor.from_2d(SOBEL_H), CHIP)
    with pytest.raises(EncodingError):
        execute_plan(plan, DataTensor(np.full((1, 5, 5), 1.5)), CHIP)
    with pytest.raises(ShapeError):
        execute_plan(plan, DataTensor(np.ones((2, 5, 5))), CHIP)
    with pytest.raises(ShapeError):
        execute_plan(plan, DataTensor(np.ones((1, 5, 5))), default_chip(4, 3, 2))


def test_plan_json():
    plan = compile_kernel(KernelTensor.from_2d(SOBEL_H), CHIP)
    d = plan.to_dict()
    assert len(d["calls"]) == plan.n_calls == 2
    assert "calls=2" in plan.describe()
