"""One PTFP chip invocation: WDM -> delay/split tree -> MRR banks -> PDs -> EPCs.

For space port ``s`` the ideal chip computes
``y_s[n] = sum_t sum_w W[w, t, s] * x_w[n - t]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .devices import (
    MRRModel,
    NoiseModel,
    WDMModel,
    calibrate_lut,
    electrical_combine,
    fractional_delay,
    wdm_passband,
    weight_to_voltage,
)
from .errors import ConfigError, ShapeError, SynchronizationError
from .signal_core import Waveform

SCHEMA_VERSION = 1
DEFAULT_WAVELENGTHS = (1550.8, 1552.8, 1554.8, 1556.8)
# 480 GOP/s / 588 GOP/s/mm^2, back-computed rather than measured
DERIVED_FOOTPRINT_MM2 = 480.0 / 588.0


def _arr(a, shape, name, fill=0.0):
    out = np.full(shape, fill, dtype=float) if a is None else np.array(a, dtype=float)
    if out.shape != shape:
        raise ConfigError(f"{name} must have shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ChipConfig:
    d_w: int
    d_t: int
    d_s: int
    operating_wavelengths: tuple[float, ...]
    mrrs: tuple[MRRModel, ...]  # flattened (w, t, s) in C order
    voltages: np.ndarray | None = None  # mV, [d_w, d_t, d_s]
    symbol_rate: float = 20e9
    wdm: WDMModel = field(default_factory=WDMModel)
    noise: NoiseModel = field(default_factory=NoiseModel)
    input_skews: np.ndarray | None = None  # symbols, [d_w]
    output_skews: np.ndarray | None = None  # symbols, [d_t, d_s]
    split_gains: np.ndarray | None = None  # directional-coupler imbalance, [d_t, d_s]
    crossing_loss_db: float = 0.0
    crosstalk: bool = False
    footprint_mm2: float | None = None

    def __post_init__(self):
        if min(self.d_w, self.d_t, self.d_s) < 1:
            raise ConfigError("chip dimensions must all be >= 1")
        shape = (self.d_w, self.d_t, self.d_s)
        if len(self.operating_wavelengths) != self.d_w:
            raise ConfigError(f"need {self.d_w} operating wavelengths, got {len(self.operating_wavelengths)}")
        if len(self.mrrs) != self.d_w * self.d_t * self.d_s:
            raise ConfigError(f"need {self.d_w * self.d_t * self.d_s} rings, got {len(self.mrrs)}")
        if self.symbol_rate <= 0:
            raise ConfigError("symbol_rate must be > 0")
        object.__setattr__(self, "operating_wavelengths", tuple(float(x) for x in self.operating_wavelengths))
        object.__setattr__(self, "mrrs", tuple(self.mrrs))
        object.__setattr__(self, "voltages", _arr(self.voltages, shape, "voltages"))
        object.__setattr__(self, "input_skews", _arr(self.input_skews, (self.d_w,), "input_skews"))
        object.__setattr__(self, "output_skews", _arr(self.output_skews, (self.d_t, self.d_s), "output_skews"))
        object.__setattr__(self, "split_gains", _arr(self.split_gains, (self.d_t, self.d_s), "split_gains", 1.0))
        channels = [self.wdm.channel_index(lam) for lam in self.operating_wavelengths]
        if len(set(channels)) != len(channels):
            raise ConfigError("operating wavelengths must sit in distinct WDM channels")
        floor = 10 ** (-self.wdm.flatness_db / 10)
        for lam in self.operating_wavelengths:
            if wdm_passband(self.wdm, lam) < floor:
                raise ConfigError(f"operating wavelength {lam} nm is outside the WDM flat band")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.d_w, self.d_t, self.d_s

    @property
    def symbol_period(self) -> float:
        return 1.0 / self.symbol_rate

    def mrr(self, w: int, t: int, s: int) -> MRRModel:
        return self.mrrs[(w * self.d_t + t) * self.d_s + s]

    def with_voltages(self, voltages) -> "ChipConfig":
        return replace(self, voltages=np.asarray(voltages, dtype=float))

    def with_noise(self, noise: NoiseModel) -> "ChipConfig":
        return replace(self, noise=noise)

    def with_output_skews(self, skews) -> "ChipConfig":
        return replace(self, output_skews=np.asarray(skews, dtype=float))

    def path_gains(self) -> np.ndarray:
        """Non-ring gain of every (w, t, s) path: WDM, coupler split, crossings."""
        wdm = np.array([wdm_passband(self.wdm, lam) for lam in self.operating_wavelengths])
        cross = 10 ** (-self.crossing_loss_db / 10)
        return wdm[:, None, None] * self.split_gains[None, :, :] * cross

    def ring_weights(self, voltages=None) -> np.ndarray:
        """Normalised ring weights at the given (or configured) voltages."""
        v = self.voltages if voltages is None else np.asarray(voltages, dtype=float)
        out = np.empty(self.dims)
        for (w, t, s), volt in np.ndenumerate(v):
            out[w, t, s] = self.mrr(w, t, s).weight(self.operating_wavelengths[w], volt)
        if self.crosstalk:
            for (w, t, s), _ in np.ndenumerate(out):
                lam = self.operating_wavelengths[w]
                for other in range(self.d_w):
                    if other != w:
                        out[w, t, s] *= self.mrr(other, t, s).transmission(lam, v[other, t, s])
        return out

    def effective_weights(self) -> np.ndarray:
        return self.ring_weights() * self.path_gains()

    def luts(self, grid_step: float = 1.0) -> dict:
        return {
            (w, t, s): calibrate_lut(self.mrr(w, t, s), self.operating_wavelengths[w], grid_step, (w, t, s))
            for w in range(self.d_w)
            for t in range(self.d_t)
            for s in range(self.d_s)
        }

    def program(self, weights, method: str = "exact", luts: dict | None = None) -> np.ndarray:
        """Voltages realising target normalised ``weights`` ([d_w, d_t, d_s], in [0, 1]).

        ``exact`` inverts the ring model in closed form; ``lut`` interpolates
        calibrated weight-voltage tables as the hardware would.
        """
        weights = np.asarray(weights, dtype=float)
        if weights.shape != self.dims:
            raise ShapeError(f"weights must have shape {self.dims}, got {weights.shape}")
        if method == "lut" and luts is None:
            luts = self.luts()
        volts = np.empty(self.dims)
        for idx, target in np.ndenumerate(weights):
            w = idx[0]
            if method == "exact":
                volts[idx] = self.mrr(*idx).voltage_for_weight(self.operating_wavelengths[w], target)
            elif method == "lut":
                volts[idx] = weight_to_voltage(luts[idx], target)
            else:
                raise ValueError(f"unknown programming method {method!r}")
        return volts


def default_mrrs(
    d_w: int,
    d_t: int,
    d_s: int,
    wavelengths,
    dip_voltages_mv=None,
    **mrr_kwargs,
) -> tuple[MRRModel, ...]:
    """Rings whose resonance crosses their operating wavelength at ``dip_voltages_mv``.

    The default spreads the crossing voltage over whole millivolts from 700 mV
    upwards in 40 mV steps so that, as on real banks, some rings use the falling
    branch and some the rising one.
    """
    n = d_w * d_t * d_s
    if dip_voltages_mv is None:
        dip_voltages_mv = 700.0 + 40.0 * (np.arange(n) % 18)
    dips = np.asarray(dip_voltages_mv, dtype=float).reshape(d_w, d_t, d_s)
    coeff = mrr_kwargs.get("tuning_coeff", 0.5)
    rings = []
    for (w, t, s), vd in np.ndenumerate(dips):
        base = wavelengths[w] - coeff * (vd / 1000.0) ** 2
        rings.append(MRRModel(base_resonance=float(base), **mrr_kwargs))
    return tuple(rings)


def default_chip(d_w: int = 4, d_t: int = 3, d_s: int = 1, **kwargs) -> ChipConfig:
    """The fabricated [4, 3, 1] chip (or a resized variant on a 2 nm grid)."""
    if d_w <= len(DEFAULT_WAVELENGTHS):
        lams = DEFAULT_WAVELENGTHS[:d_w]
        wdm = kwargs.pop("wdm", WDMModel())
    else:
        lams = tuple(1550.8 + 2.0 * i for i in range(d_w))
        wdm = kwargs.pop("wdm", WDMModel(channel_centers=lams, fsr=2.0 * d_w))
    mrrs = kwargs.pop("mrrs", None) or default_mrrs(d_w, d_t, d_s, lams, fsr=max(10.0, 2.0 * d_w + 2))
    kwargs.setdefault("footprint_mm2", DERIVED_FOOTPRINT_MM2 if (d_w, d_t, d_s) == (4, 3, 1) else None)
    return ChipConfig(d_w, d_t, d_s, lams, mrrs, wdm=wdm, **kwargs)


@dataclass(frozen=True, eq=False)
class ChipOutput:
    ports: tuple[Waveform, ...]
    effective_weights: np.ndarray

    def __post_init__(self):
        if len(self.ports) != self.effective_weights.shape[2]:
            raise ShapeError("one output waveform per space port expected")


def _check_inputs(cfg: ChipConfig, inputs):
    if len(inputs) != cfg.d_w:
        raise ShapeError(f"chip takes exactly {cfg.d_w} input waveforms, got {len(inputs)}")
    ref = inputs[0]
    for w in inputs:
        if w.n_symbols != ref.n_symbols or w.oversampling != ref.oversampling:
            raise ShapeError("all chip inputs must have equal length and oversampling")
        if not np.isclose(w.symbol_period, cfg.symbol_period, rtol=1e-9):
            raise ShapeError(f"input symbol period {w.symbol_period} s does not match chip clock")


def branch_outputs(
    cfg: ChipConfig,
    inputs,
    weights: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> list[list[Waveform]]:
    """Photodetected (tap, port) branches before the electrical combiners.

    ``weights`` overrides the voltage-derived effective weights (used for the
    synchronisation probe). Each PD gets ``sigma / sqrt(d_t)`` so that a combined
    port carries ``sigma_noise`` per sample.
    """
    _check_inputs(cfg, inputs)
    W = cfg.effective_weights() if weights is None else np.asarray(weights, dtype=float)
    n_out = inputs[0].n_symbols + cfg.d_t - 1
    xs = [fractional_delay(x, sk) for x, sk in zip(inputs, cfg.input_skews)]
    pd_noise = None
    if cfg.noise.sigma_noise > 0:
        pd_noise = NoiseModel(cfg.noise.sigma_noise / np.sqrt(cfg.d_t), cfg.noise.seed)
        rng = rng if rng is not None else cfg.noise.rng()
    m = xs[0].oversampling
    X = np.stack([x.samples for x in xs])
    guard_in = np.logical_or.reduce([x.guard_map for x in xs])
    branches = []
    for t in range(cfg.d_t):
        # integer delay line of t symbols, zero padded to the common length
        delayed = np.zeros((cfg.d_w, n_out * m))
        delayed[:, t * m : t * m + X.shape[1]] = X
        guard = np.zeros(n_out, dtype=bool)
        guard[t : t + len(guard_in)] = guard_in
        power = W[:, t, :].T @ delayed
        row = []
        for s in range(cfg.d_s):
            total = power[s]
            if pd_noise is not None:
                total = total + rng.normal(0.0, pd_noise.sigma_noise, size=total.shape)
            pd = Waveform(total, xs[0].symbol_period, guard, xs[0].origin_offset + t, m)
            row.append(fractional_delay(pd, cfg.output_skews[t, s]))
        branches.append(row)
    return branches


def chip_forward(cfg: ChipConfig, inputs, rng: np.random.Generator | None = None) -> ChipOutput:
    """Stream ``d_w`` input waveforms through the chip; one output per space port.

    Output streams are ``N + d_t - 1`` symbols long; valid trimming is left to
    the decoder.
    """
    W = cfg.effective_weights()
    branches = branch_outputs(cfg, inputs, W, rng)
    n_out = inputs[0].n_symbols + cfg.d_t - 1
    guard = inputs[0].padded_to(n_out).guard_map
    ports = []
    for s in range(cfg.d_s):
        combined = electrical_combine([branches[t][s] for t in range(cfg.d_t)])
        ports.append(
            Waveform(combined.samples, combined.symbol_period, guard, inputs[0].origin_offset, combined.oversampling)
        )
    return ChipOutput(tuple(ports), W)


def _estimate_delay(y: np.ndarray, p: np.ndarray) -> float:
    """Delay of ``y`` relative to ``p`` in samples.

    Coarse lag from the cross-correlation peak, then the fractional part by
    least squares on ``y ~ a * p[n - k] + b * p[n - k - 1]`` (exact for a
    linearly interpolated shift), ``frac = b / (a + b)``.
    """
    n = len(y)
    p = np.pad(p, (0, max(0, n - len(p))))[:n]
    corr = np.correlate(y, p, mode="full")
    k0 = int(np.argmax(corr)) - (n - 1)

    def shifted(k):
        out = np.zeros(n)
        if k >= 0:
            out[k:] = p[: n - k]
        else:
            out[:k] = p[-k:]
        return out

    best = None
    for k in (k0 - 1, k0):
        A = np.stack([shifted(k), shifted(k + 1)], axis=1)
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        a, b = coef
        if a + b == 0:
            continue
        frac = b / (a + b)
        resid = float(np.sum((A @ coef - y) ** 2))
        if -1e-9 <= frac <= 1 + 1e-9 and (best is None or resid < best[0]):
            best = (resid, k + frac)
    if best is None:
        return float(k0)
    return best[1]


def measure_tap_delays(cfg: ChipConfig, probe: Waveform, oversampling: int = 8, active: int = 0) -> np.ndarray:
    """Delay (in symbols) of every (tap, port) branch for a single-channel probe."""
    x = np.asarray(probe.samples if probe.oversampling == 1 else probe.decimate().samples, dtype=float)
    if np.ptp(x) == 0:
        raise SynchronizationError("probe is flat; it has no autocorrelation contrast to lock onto")
    pad = 4 + int(np.ceil(np.abs(cfg.input_skews).max() + np.abs(cfg.output_skews).max()))
    x = np.pad(x, (pad, pad))
    base = Waveform(x, cfg.symbol_period).upsample(oversampling)
    zero = base.with_samples(np.zeros_like(base.samples))
    inputs = [base if w == active else zero for w in range(cfg.d_w)]
    weights = np.zeros(cfg.dims)
    weights[active] = 1.0
    quiet = replace(cfg, noise=NoiseModel(0.0, cfg.noise.seed))
    branches = branch_outputs(quiet, inputs, weights)
    out = np.empty((cfg.d_t, cfg.d_s))
    for t in range(cfg.d_t):
        for s in range(cfg.d_s):
            out[t, s] = _estimate_delay(branches[t][s].samples, base.samples) / oversampling
    return out


def synchronize_outputs(cfg: ChipConfig, probe: Waveform, oversampling: int = 8, active: int = 0) -> np.ndarray:
    """Per-(tap, port) skew corrections, in symbols, that make tap ``t`` lag the
    reference branch (tap 0, port 0) by exactly ``t`` symbols."""
    tau = measure_tap_delays(cfg, probe, oversampling, active)
    nominal = np.arange(cfg.d_t, dtype=float)[:, None]
    corr = nominal - (tau - tau[0, 0])
    corr[np.abs(corr) < 1e-12] = 0.0
    return corr


def apply_corrections(cfg: ChipConfig, corrections) -> ChipConfig:
    return cfg.with_output_skews(cfg.output_skews + np.asarray(corrections, dtype=float))


def throughput(cfg: ChipConfig) -> float:
    """Operations per second; one multiply-accumulate counts as two operations."""
    return 2.0 * cfg.d_w * cfg.d_t * cfg.d_s * cfg.symbol_rate


def compute_density(cfg: ChipConfig, footprint_mm2: float | None = None) -> float:
    area = cfg.footprint_mm2 if footprint_mm2 is None else footprint_mm2
    if area is None or not area > 0:
        raise ValueError(f"footprint must be a positive area in mm^2, got {area!r}")
    return throughput(cfg) / area


# -- JSON chip description -------------------------------------------------


def chip_to_dict(cfg: ChipConfig) -> dict:
    m0 = cfg.mrrs[0]
    return {
        "schema": SCHEMA_VERSION,
        "dims": {"d_w": cfg.d_w, "d_t": cfg.d_t, "d_s": cfg.d_s},
        "symbol_rate_baud": cfg.symbol_rate,
        "operating_wavelengths_nm": list(cfg.operating_wavelengths),
        "wdm": {
            "channel_centers_nm": list(cfg.wdm.channel_centers),
            "channel_spacing_nm": cfg.wdm.channel_spacing,
            "flatness_db": cfg.wdm.flatness_db,
            "fsr_nm": cfg.wdm.fsr,
            "passband_hwhm_nm": cfg.wdm.passband_hwhm,
            "order": cfg.wdm.order,
            "channel_loss_db": list(cfg.wdm.channel_loss_db),
        },
        "mrr_defaults": {
            "linewidth_hwhm_nm": m0.linewidth_hwhm,
            "extinction_depth": m0.extinction_depth,
            "tuning_coeff_nm_per_v2": m0.tuning_coeff,
            "max_voltage_mv": m0.max_voltage,
            "fsr_nm": m0.fsr,
        },
        "rings": [
            {"index": [w, t, s], "base_resonance_nm": cfg.mrr(w, t, s).base_resonance}
            for w in range(cfg.d_w)
            for t in range(cfg.d_t)
            for s in range(cfg.d_s)
        ],
        "voltages_mv": cfg.voltages.tolist(),
        "voltage_sweep_mv": {"start": 0.0, "stop": m0.max_voltage, "step": 200.0},
        "noise": {"sigma": cfg.noise.sigma_noise, "seed": cfg.noise.seed},
        "input_skews_symbols": cfg.input_skews.tolist(),
        "output_skews_symbols": cfg.output_skews.tolist(),
        "split_gains": cfg.split_gains.tolist(),
        "crossing_loss_db": cfg.crossing_loss_db,
        "crosstalk": cfg.crosstalk,
        "footprint_mm2": cfg.footprint_mm2,
    }


def _get(d: dict, key: str, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"chip description is missing required field {key!r}")
        return default
    return d[key]


def chip_from_dict(d: dict) -> ChipConfig:
    if d.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported chip description schema {d.get('schema')!r} (expected {SCHEMA_VERSION})")
    try:
        dims = _get(d, "dims", required=True)
        d_w, d_t, d_s = int(dims["d_w"]), int(dims["d_t"]), int(dims["d_s"])
        lams = tuple(_get(d, "operating_wavelengths_nm", DEFAULT_WAVELENGTHS[:d_w]))
        wd = _get(d, "wdm", {})
        wdm = WDMModel(
            channel_centers=tuple(wd.get("channel_centers_nm", DEFAULT_WAVELENGTHS)),
            channel_spacing=wd.get("channel_spacing_nm", 2.0),
            flatness_db=wd.get("flatness_db", 1.2),
            fsr=wd.get("fsr_nm", 8.0),
            passband_hwhm=wd.get("passband_hwhm_nm", 0.7),
            order=wd.get("order", 4),
            channel_loss_db=tuple(wd["channel_loss_db"]) if "channel_loss_db" in wd else None,
        )
        md = _get(d, "mrr_defaults", {})
        mrr_kwargs = dict(
            linewidth_hwhm=md.get("linewidth_hwhm_nm", 0.1),
            extinction_depth=md.get("extinction_depth", 1.0),
            tuning_coeff=md.get("tuning_coeff_nm_per_v2", 0.5),
            max_voltage=md.get("max_voltage_mv", 1400.0),
            fsr=md.get("fsr_nm", 10.0),
        )
        rings = _get(d, "rings")
        if rings is None:
            mrrs = default_mrrs(d_w, d_t, d_s, lams, **mrr_kwargs)
        else:
            table = {}
            for r in rings:
                w, t, s = (int(i) for i in r["index"])
                if "base_resonance_nm" in r:
                    base = r["base_resonance_nm"]
                else:
                    base = lams[w] - mrr_kwargs["tuning_coeff"] * (r["dip_voltage_mv"] / 1000.0) ** 2
                table[(w, t, s)] = MRRModel(base_resonance=float(base), **mrr_kwargs)
            try:
                mrrs = tuple(table[(w, t, s)] for w in range(d_w) for t in range(d_t) for s in range(d_s))
            except KeyError as exc:
                raise ConfigError(f"ring {list(exc.args[0])} missing from chip description") from None
        volts = _get(d, "voltages_mv")
        if volts is not None and np.size(volts) == 0:
            raise ConfigError("voltages_mv is empty")
        nd = _get(d, "noise", {})
        return ChipConfig(
            d_w,
            d_t,
            d_s,
            lams,
            mrrs,
            voltages=volts,
            symbol_rate=float(_get(d, "symbol_rate_baud", 20e9)),
            wdm=wdm,
            noise=NoiseModel(float(nd.get("sigma", 0.0)), int(nd.get("seed", 0))),
            input_skews=_get(d, "input_skews_symbols"),
            output_skews=_get(d, "output_skews_symbols"),
            split_gains=_get(d, "split_gains"),
            crossing_loss_db=float(_get(d, "crossing_loss_db", 0.0)),
            crosstalk=bool(_get(d, "crosstalk", False)),
            footprint_mm2=_get(d, "footprint_mm2"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed chip description: {exc}") from exc


def voltage_sweep(d: dict) -> np.ndarray:
    """Voltage grid for characterisation sweeps (0-1400 mV in 200 mV steps by default)."""
    sw = d.get("voltage_sweep_mv", {"start": 0.0, "stop": 1400.0, "step": 200.0})
    if isinstance(sw, list):
        grid = np.asarray(sw, dtype=float)
    else:
        try:
            start, stop, step = float(sw["start"]), float(sw["stop"]), float(sw["step"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed voltage_sweep_mv: {exc}") from exc
        if step <= 0 or stop < start:
            raise ConfigError("voltage_sweep_mv needs step > 0 and stop >= start")
        grid = start + step * np.arange(int(np.floor((stop - start) / step + 1e-9)) + 1)
    if grid.size == 0:
        raise ConfigError("voltage sweep grid is empty")
    return grid


def load_chip_description(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from exc


def load_chip_config(path) -> ChipConfig:
    return chip_from_dict(load_chip_description(path))


def save_chip_config(cfg: ChipConfig, path) -> None:
    Path(path).write_text(json.dumps(chip_to_dict(cfg), indent=2) + "\n")
