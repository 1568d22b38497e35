import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptfp.errors import (
    AlignmentError,
    CalibrationError,
    CalibrationRangeError,
    ConfigError,
    UnreachableWeightError,
)
from ptfp.devices import (
    MRRModel,
    NoiseModel,
    WDMModel,
    WeightVoltageLUT,
    calibrate_lut,
    delay_line,
    electrical_combine,
    fractional_delay,
    in_band_ripple_db,
    mrr_transmission,
    photodetect,
    wdm_channel_passband,
    wdm_passband,
    weight_to_voltage,
)
from ptfp.signal_core import Waveform

LAM = 1552.8


def ring(dip_mv=800.0, **kw):
    c = kw.get("tuning_coeff", 0.5)
    return MRRModel(base_resonance=LAM - c * (dip_mv / 1000) ** 2, **kw)


# -- microring ---------------------------------------------------------------


def test_notch_centre_is_dark():
    m = ring(800.0)
    assert mrr_transmission(m, LAM, 800.0) == pytest.approx(0.0, abs=1e-15)


def test_half_width():
    m = MRRModel(base_resonance=LAM)
    assert mrr_transmission(m, LAM + 0.1, 0.0) == pytest.approx(0.5, rel=1e-12)


def test_worked_example():
    m = MRRModel(base_resonance=1552.8, linewidth_hwhm=0.1, extinction_depth=0.95, tuning_coeff=0.5)
    assert m.resonance(400.0) == pytest.approx(1552.88, abs=1e-12)
    assert mrr_transmission(m, 1552.8, 400.0) == pytest.approx(1 - 0.95 / 1.64, rel=1e-12)
    assert mrr_transmission(m, 1552.8, 400.0) == pytest.approx(0.4207, abs=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.floats(1549.0, 1556.0), st.floats(0.0, 1400.0), st.floats(0.0, 1.0))
def test_transmission_bounds(lam, v, d):
    m = MRRModel(base_resonance=1552.0, extinction_depth=d)
    t = m.transmission(lam, v)
    assert 1 - d - 1e-15 <= t <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1399.0), st.floats(0.5, 100.0))
def test_resonance_red_shifts(v1, dv):
    m = ring()
    v2 = min(v1 + dv, 1400.0)
    assert m.resonance(v2) > m.resonance(v1)


def test_voltage_outside_range():
    with pytest.raises(CalibrationRangeError):
        ring().transmission(LAM, 1500.0)
    with pytest.raises(CalibrationRangeError):
        ring().transmission(LAM, -1.0)


@pytest.mark.parametrize("dip", [700.0, 900.0, 1100.0, 1380.0])
@pytest.mark.parametrize("target", [0.0, 0.013, 0.4207, 0.77, 1.0])
def test_exact_inverse(dip, target):
    m = ring(dip)
    v = m.voltage_for_weight(LAM, target)
    assert m.weight(LAM, v) == pytest.approx(target, abs=1e-12)


# -- LUT ---------------------------------------------------------------------


def test_lut_decreasing_branch_before_dip():
    m = ring(1300.0)
    lut = calibrate_lut(m, LAM, 1.0)
    assert lut.weights.max() == pytest.approx(1.0)
    assert lut.direction == -1
    assert lut.weights[0] == pytest.approx(1.0)
    i, j = lut.branch
    assert lut.voltages[j] == pytest.approx(1300.0)
    assert np.all(np.diff(lut.weights[i : j + 1]) < 0)
    assert lut.weights[j] == pytest.approx(0.0, abs=1e-12)


def test_lut_zero_extinction_is_an_error():
    with pytest.raises(CalibrationError):
        calibrate_lut(MRRModel(base_resonance=1552.0, extinction_depth=0.0), LAM)


def test_lut_coarse_grid_has_eight_entries():
    lut = calibrate_lut(ring(), LAM, 200.0)
    assert lut.voltages.tolist() == [0, 200, 400, 600, 800, 1000, 1200, 1400]


def test_weight_to_voltage_endpoint():
    lut = calibrate_lut(ring(1000.0), LAM, 1.0)
    i, j = lut.branch
    top = lut.weights[i] if lut.direction < 0 else lut.weights[j]
    end = lut.voltages[i] if lut.direction < 0 else lut.voltages[j]
    assert weight_to_voltage(lut, top) == pytest.approx(end)


def test_weight_to_voltage_linear_table():
    lut = WeightVoltageLUT("lin", LAM, np.array([0.0, 1000.0]), np.array([1.0, 0.0]), 1.0, (0, 1))
    assert weight_to_voltage(lut, 0.5) == pytest.approx(500.0)


def test_weight_to_voltage_worked_example():
    # d = 0.95 ring whose resonance sits at 1552.8 nm with no bias
    m = MRRModel(base_resonance=1552.8, extinction_depth=0.95)
    lut = calibrate_lut(m, 1552.8, 1.0)
    t400 = m.transmission(1552.8, 400.0)
    v = weight_to_voltage(lut, t400 / lut.scale)
    assert v == pytest.approx(400.0, abs=1.0)
    assert m.weight(1552.8, v) == pytest.approx(t400 / lut.scale, abs=1e-3)


def test_unreachable_weight_reports_range():
    lut = calibrate_lut(MRRModel(base_resonance=1552.8, extinction_depth=0.5), 1552.8)
    with pytest.raises(UnreachableWeightError) as info:
        weight_to_voltage(lut, 0.0)
    lo, hi = info.value.achievable
    assert lo == pytest.approx(0.5 / lut.scale, rel=1e-6)
    assert hi == pytest.approx(1.0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 17), st.floats(0.0, 1.0))
def test_lut_round_trip_within_1e3(k, target):
    m = ring(700.0 + 40.0 * k)
    lut = calibrate_lut(m, LAM, 1.0)
    v = weight_to_voltage(lut, target)
    assert abs(m.weight(LAM, v) - target) <= 1e-3


# -- WDM ---------------------------------------------------------------------


def test_wdm_flat_at_centres():
    w = WDMModel()
    for c in w.channel_centers:
        assert 10 * np.log10(1 / wdm_passband(w, c)) <= 1.2
    assert in_band_ripple_db(w) <= 1.2


def test_wdm_midpoint_rejection():
    w = WDMModel()
    c = w.channel_centers
    for a, b in zip(c, c[1:]):
        assert wdm_passband(w, (a + b) / 2) <= 0.01


def test_wdm_periodic():
    w = WDMModel()
    for c in w.channel_centers:
        assert wdm_passband(w, c + w.fsr) == pytest.approx(wdm_passband(w, c), rel=1e-12)


def test_wdm_composite_is_max_of_channels():
    w = WDMModel()
    lams = np.linspace(1549, 1558, 301)
    chans = np.array([wdm_channel_passband(w, i, lams) for i in range(4)])
    assert np.allclose(wdm_passband(w, lams), chans.max(axis=0))


def test_wdm_rejects_uneven_spacing():
    with pytest.raises(ConfigError):
        WDMModel(channel_centers=(1550.8, 1552.8, 1555.0, 1556.8))


def test_wdm_rejects_ripple_above_bound():
    with pytest.raises(ConfigError):
        WDMModel(passband_hwhm=0.1, flatness_db=1.2)


# -- delay, detection, combining ----------------------------------------------


def test_delay_line():
    w = Waveform(np.array([1.0, 2.0, 3.0]))
    assert delay_line(w, 0) is w
    d = delay_line(w, 1)
    assert d.samples.tolist() == [0, 1, 2, 3]
    assert d.origin_offset == 1


def test_tap_spacing_is_one_symbol():
    w = Waveform(np.array([1.0, 0.0, 0.0]))
    starts = [delay_line(w, t).origin_offset * w.symbol_period for t in range(3)]
    assert np.allclose(np.diff(starts), 50e-12, rtol=0, atol=1e-24)


def test_fractional_delay_moves_centroid():
    x = np.zeros(80)
    x[40:48] = 1.0
    w = Waveform(x, oversampling=8)
    d = fractional_delay(w, 0.25)
    centroid = lambda s: np.sum(np.arange(len(s)) * s) / s.sum()
    assert centroid(d.samples) - centroid(x) == pytest.approx(2.0, abs=1e-9)


def test_photodetect_sum_and_identity():
    a, b = Waveform(np.array([1.0, 2.0])), Waveform(np.array([3.0, 4.0]))
    assert photodetect([a]).samples.tolist() == [1, 2]
    assert photodetect([a, b]).samples.tolist() == [4, 6]


def test_photodetect_needs_common_origin():
    a = Waveform(np.array([1.0, 2.0, 0.0]))
    b = delay_line(Waveform(np.array([1.0, 2.0])), 1)
    with pytest.raises(AlignmentError):
        photodetect([a, b])


def test_photodetect_noise_statistics():
    noise = NoiseModel(0.1, seed=3)
    w = Waveform(np.full(100_000, 0.5))
    y1 = photodetect([w], noise, noise.rng(0)).samples
    y2 = photodetect([w], noise, noise.rng(0)).samples
    assert np.array_equal(y1, y2)
    assert np.std(y1) == pytest.approx(0.1, abs=0.003)


def test_zero_noise_is_bit_identical():
    w = Waveform(np.linspace(0, 1, 50))
    assert np.array_equal(photodetect([w], NoiseModel(0.0, 1)).samples, w.samples)


def test_combine():
    a, b = Waveform(np.array([1.0, 0.0])), Waveform(np.array([0.0, 1.0]))
    assert electrical_combine([a]).samples.tolist() == [1, 0]
    assert electrical_combine([a, b]).samples.tolist() == [1, 1]
    with pytest.raises(AlignmentError):
        electrical_combine([a, Waveform(np.zeros(3))])


def test_pd_and_epc_sums_commute():
    rng = np.random.default_rng(5)
    x = rng.random((4, 3, 20))  # (wavelength, tap, time)
    waves = [[Waveform(x[w, t]) for t in range(3)] for w in range(4)]
    pd_first = electrical_combine([photodetect([waves[w][t] for w in range(4)]) for t in range(3)])
    epc_first = photodetect([electrical_combine(waves[w]) for w in range(4)])
    assert np.allclose(pd_first.samples, epc_first.samples, rtol=0, atol=1e-12)


def test_noise_model_validation():
    with pytest.raises(ConfigError):
        NoiseModel(-0.1)
