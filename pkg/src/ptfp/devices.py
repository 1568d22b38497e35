"""Component models: WDM, microring weights, delay lines, photodetector, combiner, noise."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import groupby
from typing import Sequence

import numpy as np

from .errors import (
    AlignmentError,
    CalibrationError,
    CalibrationRangeError,
    ConfigError,
    UnreachableWeightError,
)
from .signal_core import Waveform


@dataclass(frozen=True)
class MRRModel:
    """Thermally tuned microring notch filter.

    Transmission is a Lorentzian notch whose centre red-shifts with heater
    power: ``lambda_res(V) = base_resonance + tuning_coeff * V**2`` (V in volts).
    """

    base_resonance: float  # nm, at 0 V
    linewidth_hwhm: float = 0.1  # nm
    extinction_depth: float = 1.0
    tuning_coeff: float = 0.5  # nm / V^2
    max_voltage: float = 1400.0  # mV
    fsr: float = 10.0  # nm

    def __post_init__(self):
        if not 0.0 <= self.extinction_depth <= 1.0:
            raise ConfigError("extinction_depth must lie in [0, 1]")
        if self.linewidth_hwhm <= 0 or self.tuning_coeff <= 0 or self.max_voltage <= 0:
            raise ConfigError("linewidth, tuning coefficient and max voltage must be positive")

    def resonance(self, voltage_mv):
        v = np.asarray(voltage_mv, dtype=float) / 1000.0
        return self.base_resonance + self.tuning_coeff * v * v

    def _check(self, wavelength, voltage_mv):
        v = np.asarray(voltage_mv, dtype=float)
        if np.any(v < 0) or np.any(v > self.max_voltage) or not np.all(np.isfinite(v)):
            raise CalibrationRangeError(
                f"voltage {voltage_mv!r} mV outside calibrated range [0, {self.max_voltage:g}] mV"
            )
        if np.any(np.abs(np.asarray(wavelength) - self.base_resonance) > self.fsr):
            raise ValueError(f"wavelength {wavelength!r} nm is more than one FSR from the ring resonance")

    def transmission(self, wavelength, voltage_mv):
        self._check(wavelength, voltage_mv)
        u = (np.asarray(wavelength, dtype=float) - self.resonance(voltage_mv)) / self.linewidth_hwhm
        t = 1.0 - self.extinction_depth / (1.0 + u * u)
        return float(t) if np.ndim(t) == 0 else t

    def peak_transmission(self, wavelength: float) -> float:
        """Maximum of T over [0, max_voltage]; T is unimodal so one endpoint wins."""
        return max(self.transmission(wavelength, 0.0), self.transmission(wavelength, self.max_voltage))

    def weight(self, wavelength: float, voltage_mv):
        """Normalised weight, transmission divided by the sweep maximum."""
        return self.transmission(wavelength, voltage_mv) / self.peak_transmission(wavelength)

    def voltage_for_weight(self, wavelength: float, weight: float) -> float:
        """Closed-form inverse of :meth:`weight` on the branch that reaches weight 1."""
        t0 = self.transmission(wavelength, 0.0)
        t1 = self.transmission(wavelength, self.max_voltage)
        scale = max(t0, t1)
        target = weight * scale
        d = self.extinction_depth
        lo = 1.0 - d
        if not (lo - 1e-15 <= target <= scale + 1e-15):
            raise UnreachableWeightError(weight, lo / scale, 1.0)
        target = min(max(target, lo), scale)
        if d == 0.0:
            raise CalibrationError("ring with zero extinction cannot set weights")
        u = np.sqrt(max(d / (1.0 - target) - 1.0, 0.0))
        # decreasing branch: resonance approaches from below; increasing: moves away above
        offset = -u if t0 >= t1 else u
        lam_res = wavelength + offset * self.linewidth_hwhm
        v2 = (lam_res - self.base_resonance) / self.tuning_coeff
        if v2 < -1e-12:
            raise UnreachableWeightError(weight, lo / scale, 1.0)
        v = 1000.0 * np.sqrt(max(v2, 0.0))
        if v > self.max_voltage * (1 + 1e-12):
            raise UnreachableWeightError(weight, lo / scale, 1.0)
        return float(min(v, self.max_voltage))


def mrr_transmission(m: MRRModel, wavelength, voltage_mv):
    return m.transmission(wavelength, voltage_mv)


@dataclass(frozen=True, eq=False)
class WeightVoltageLUT:
    mrr_id: object
    operating_wavelength: float
    voltages: np.ndarray  # mV, uniform grid
    weights: np.ndarray  # normalised so max == 1
    scale: float  # sweep maximum of raw transmission
    branch: tuple[int, int]  # inclusive index range of the monotone branch

    @property
    def monotone_branch(self) -> tuple[float, float]:
        i, j = self.branch
        return float(self.voltages[i]), float(self.voltages[j])

    @property
    def direction(self) -> int:
        i, j = self.branch
        return 1 if self.weights[j] > self.weights[i] else -1

    @property
    def weight_range(self) -> tuple[float, float]:
        i, j = self.branch
        seg = self.weights[i : j + 1]
        return float(seg.min()), float(seg.max())

    def rows(self):
        return list(zip(self.voltages.tolist(), self.weights.tolist()))


def _monotone_runs(w: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive index ranges over which ``w`` is strictly monotone."""
    runs = []
    pos = 0
    for sign, grp in groupby(np.sign(np.diff(w))):
        n = len(list(grp))
        if sign != 0:
            runs.append((pos, pos + n))
        pos += n
    return runs


def calibrate_lut(m: MRRModel, operating_wavelength: float, grid_step: float = 1.0, mrr_id=None) -> WeightVoltageLUT:
    """Sweep the ring voltage, normalise, and keep the widest strictly monotone branch."""
    if grid_step <= 0:
        raise ValueError("grid_step must be > 0")
    n = int(np.floor(m.max_voltage / grid_step + 1e-9)) + 1
    volts = np.arange(n) * grid_step
    t = m.transmission(operating_wavelength, volts)
    if np.ptp(t) <= 1e-12:
        raise CalibrationError(f"ring {mrr_id!r}: transmission is constant over the sweep")
    scale = float(t.max())
    w = t / scale
    runs = _monotone_runs(w)
    # widest weight span first, then longest voltage span
    best = max(runs, key=lambda r: (abs(w[r[1]] - w[r[0]]), r[1] - r[0]))
    return WeightVoltageLUT(mrr_id, float(operating_wavelength), volts, w, scale, best)


def weight_to_voltage(lut: WeightVoltageLUT, target_weight: float, slack: float = 1e-9) -> float:
    """Linear interpolation on the LUT's monotone branch.

    Targets within ``slack`` of the branch ends are clamped onto it.
    """
    lo, hi = lut.weight_range
    if not (lo - slack <= target_weight <= hi + slack):
        raise UnreachableWeightError(target_weight, lo, hi)
    target_weight = min(max(target_weight, lo), hi)
    i, j = lut.branch
    v = lut.voltages[i : j + 1]
    w = lut.weights[i : j + 1]
    if lut.direction < 0:
        v, w = v[::-1], w[::-1]
    return float(np.interp(target_weight, w, v))


@dataclass(frozen=True, eq=False)
class WDMModel:
    """Flat-top (super-Gaussian) multiplexer passbands, periodic in the FSR."""

    channel_centers: tuple[float, ...] = (1550.8, 1552.8, 1554.8, 1556.8)
    channel_spacing: float = 2.0
    flatness_db: float = 1.2
    fsr: float = 8.0
    passband_hwhm: float = 0.7  # nm, half width at half maximum
    order: int = 4
    channel_loss_db: tuple[float, ...] | None = None

    def __post_init__(self):
        c = np.asarray(self.channel_centers, dtype=float)
        if len(c) > 1 and not np.allclose(np.diff(c), self.channel_spacing, atol=1e-9):
            raise ConfigError("WDM channel centres must be equally spaced by channel_spacing")
        loss = np.zeros(len(c)) if self.channel_loss_db is None else np.asarray(self.channel_loss_db, float)
        if loss.shape != c.shape:
            raise ConfigError("channel_loss_db must have one entry per channel")
        object.__setattr__(self, "channel_centers", tuple(c.tolist()))
        object.__setattr__(self, "channel_loss_db", tuple(loss.tolist()))
        ripple = in_band_ripple_db(self)
        if ripple > self.flatness_db:
            raise ConfigError(f"in-band ripple {ripple:.3f} dB exceeds flatness bound {self.flatness_db} dB")

    def channel_index(self, wavelength: float) -> int:
        return int(np.argmin([abs(_fold(wavelength, c, self.fsr)) for c in self.channel_centers]))


def _fold(wavelength, center, fsr):
    """Signed distance to ``center`` folded into [-fsr/2, fsr/2)."""
    return (np.asarray(wavelength, dtype=float) - center + fsr / 2) % fsr - fsr / 2


def wdm_channel_passband(w: WDMModel, channel: int, wavelength):
    """Transmission of a single demultiplexer channel."""
    x = _fold(wavelength, w.channel_centers[channel], w.fsr) / w.passband_hwhm
    band = 10 ** (-w.channel_loss_db[channel] / 10) * np.exp(-np.log(2) * np.abs(x) ** (2 * w.order))
    return float(band) if np.ndim(band) == 0 else band


def wdm_passband(w: WDMModel, wavelength):
    """Composite transmission of the multiplexer at ``wavelength``."""
    out = 0.0
    for c in range(len(w.channel_centers)):
        out = np.maximum(out, wdm_channel_passband(w, c, wavelength))
    return float(out) if np.ndim(out) == 0 else out


def in_band_ripple_db(w: WDMModel, half_band: float = 0.1, n: int = 21) -> float:
    """Peak-to-trough ripple over +-``half_band`` nm around every channel centre."""
    pts = np.concatenate([np.linspace(c - half_band, c + half_band, n) for c in w.channel_centers])
    t = wdm_passband(w, pts)
    return float(10 * np.log10(t.max() / t.min()))


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean additive Gaussian noise at the photodetector output."""

    sigma_noise: float = 0.0
    seed: int = 0
    injection_point: str = "pd_output"

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise ConfigError("sigma_noise must be >= 0")
        if self.injection_point != "pd_output":
            raise ConfigError(f"unsupported injection point {self.injection_point!r}")

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])


def delay_line(w: Waveform, n_symbols: int, loss_db: float = 0.0) -> Waveform:
    """Integer-symbol optical delay: prepend ``n_symbols`` empty symbols."""
    if n_symbols < 0:
        raise ValueError("delay must be >= 0 symbols")
    gain = 10 ** (-loss_db / 10)
    if n_symbols == 0 and gain == 1.0:
        return w
    m = w.oversampling
    return Waveform(
        np.concatenate([np.zeros(n_symbols * m), w.samples * gain if gain != 1.0 else w.samples]),
        w.symbol_period,
        np.concatenate([np.zeros(n_symbols, dtype=bool), w.guard_map]),
        w.origin_offset + n_symbols,
        m,
    )


def fractional_delay(w: Waveform, delay_symbols: float) -> Waveform:
    """Tunable delay by a fraction of a symbol, realised by linear interpolation
    on the oversampled grid. Length and origin are unchanged; content shifted past
    either end is lost."""
    if delay_symbols == 0:
        return w
    m = w.oversampling
    n = np.arange(len(w.samples), dtype=float)
    shifted = np.interp(n - delay_symbols * m, n, w.samples, left=0.0, right=0.0)
    return w.with_samples(shifted)


def _check_aligned(waves: Sequence[Waveform], same_origin: bool):
    if not waves:
        raise AlignmentError("nothing to sum")
    ref = waves[0]
    for w in waves[1:]:
        if w.symbol_period != ref.symbol_period or w.oversampling != ref.oversampling:
            raise AlignmentError("waveforms differ in symbol period or oversampling")
        if len(w.samples) != len(ref.samples):
            raise AlignmentError(f"waveform lengths differ ({len(w.samples)} vs {len(ref.samples)})")
        if same_origin and w.origin_offset != ref.origin_offset:
            raise AlignmentError(
                f"origins differ ({w.origin_offset} vs {ref.origin_offset}); synchronize inputs first"
            )


def photodetect(
    weighted_waveforms: Sequence[Waveform],
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
) -> Waveform:
    """Sum optical power across wavelengths, then add detector noise."""
    _check_aligned(weighted_waveforms, same_origin=True)
    ref = weighted_waveforms[0]
    total = np.sum([w.samples for w in weighted_waveforms], axis=0)
    if noise is not None and noise.sigma_noise > 0:
        gen = rng if rng is not None else noise.rng()
        total = total + gen.normal(0.0, noise.sigma_noise, size=total.shape)
    guard = np.logical_or.reduce([w.guard_map for w in weighted_waveforms])
    return Waveform(total, ref.symbol_period, guard, ref.origin_offset, ref.oversampling)


def electrical_combine(branch_waveforms: Sequence[Waveform]) -> Waveform:
    """Pointwise sum of electrical branches sharing one time grid."""
    _check_aligned(branch_waveforms, same_origin=False)
    ref = branch_waveforms[0]
    total = np.sum([w.samples for w in branch_waveforms], axis=0)
    first = min(branch_waveforms, key=lambda w: w.origin_offset)
    return Waveform(total, ref.symbol_period, first.guard_map, first.origin_offset, ref.oversampling)
