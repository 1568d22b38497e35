"""Map a logical KernelTensor onto chip invocations and recombine the results.

Each chip call feeds wavelength ``l`` with one (input channel, kernel row)
pair: the input image shifted up by that row. Kernel columns go on the taps in
reverse order so the delay-line FIR ``y[n] = sum_t W[t] x[n - t]`` realises
cross-correlation. Space ports carry different output channels. Optical weights
are non-negative, so signed kernels run as a ``plus`` and a ``minus`` pass that
are subtracted digitally, each scaled back by one factor per (sign, output
channel).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import ceil

import numpy as np

from .chip import ChipConfig, chip_forward
from .errors import CapacityError, EncodingError, ShapeError
from .signal_core import DataTensor, KernelTensor, decode_channel, encode_channel

SIGNS = ("plus", "minus")


@dataclass(frozen=True)
class Slot:
    """What one wavelength carries in a call."""

    in_channel: int
    row: int  # kernel row == row shift applied to the image
    col_offset: int  # first kernel column of this call's column tile
    col_width: int  # number of kernel columns (taps) used


@dataclass(frozen=True, eq=False)
class ChipCall:
    weights: np.ndarray  # unit target weights [d_w, d_t, d_s] in [0, 1]
    voltages: np.ndarray  # mV, realising ``weights``
    routing: tuple  # per wavelength: Slot or None
    port_channels: tuple  # per space port: output channel or None
    sign_label: str
    scales: tuple  # per space port: digital rescale factor

    @property
    def scale(self) -> float:
        return self.scales[0]

    @property
    def col_width(self) -> int:
        return next(s.col_width for s in self.routing if s is not None)


@dataclass(frozen=True)
class CombineTerm:
    call: int
    port: int
    out_channel: int
    coeff: float  # +scale for plus passes, -scale for minus passes


@dataclass(frozen=True, eq=False)
class ExecutionPlan:
    calls: tuple
    post_combine: tuple
    kernel_shape: tuple  # (kh, kw) after promoting 1D kernels to one row
    in_channels: int
    out_channels: int
    chip_dims: tuple
    strategy: str
    program_method: str
    one_dimensional: bool = False

    @property
    def n_calls(self) -> int:
        return len(self.calls)

    def slots(self):
        """Yield ``(call, wavelength, tap, port, sign, in_ch, out_ch, row, col, signed_weight)``
        for every non-empty slot."""
        terms = {(t.call, t.port): t for t in self.post_combine}
        for ci, call in enumerate(self.calls):
            for wl, slot in enumerate(call.routing):
                if slot is None:
                    continue
                for tap in range(slot.col_width):
                    col = slot.col_offset + slot.col_width - 1 - tap
                    for port, o in enumerate(call.port_channels):
                        if o is None:
                            continue
                        w = call.weights[wl, tap, port]
                        if w != 0.0:
                            coeff = terms[(ci, port)].coeff
                            yield ci, wl, tap, port, call.sign_label, slot.in_channel, o, slot.row, col, coeff * w

    def reconstruct_kernel(self) -> np.ndarray:
        """Kernel ``(kh, kw, C_in, C_out)`` rebuilt from the slot multiset."""
        kh, kw = self.kernel_shape
        k = np.zeros((kh, kw, self.in_channels, self.out_channels))
        for *_, i, o, r, c, w in self.slots():
            k[r, c, i, o] += w
        return k

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "kernel_shape": list(self.kernel_shape),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "chip_dims": list(self.chip_dims),
            "program_method": self.program_method,
            "calls": [
                {
                    "sign": c.sign_label,
                    "scales": list(c.scales),
                    "port_channels": list(c.port_channels),
                    "routing": [
                        None if s is None else {
                            "in_channel": s.in_channel, "row_shift": s.row,
                            "col_offset": s.col_offset, "col_width": s.col_width,
                        }
                        for s in c.routing
                    ],
                    "weights": c.weights.tolist(),
                    "voltages_mv": c.voltages.tolist(),
                }
                for c in self.calls
            ],
            "post_combine": [
                {"call": t.call, "port": t.port, "out_channel": t.out_channel, "coeff": t.coeff}
                for t in self.post_combine
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def describe(self) -> str:
        lines = [
            f"strategy={self.strategy} kernel={self.kernel_shape[0]}x{self.kernel_shape[1]} "
            f"C_in={self.in_channels} C_out={self.out_channels} chip={list(self.chip_dims)} calls={self.n_calls}",
            f"{'call':>4} {'sign':>5} {'wavelength routing (ch:row+col)':<40} {'ports -> out ch (scale)'}",
        ]
        for i, c in enumerate(self.calls):
            routes = " ".join(
                "-" if s is None else f"{s.in_channel}:{s.row}+{s.col_offset}" for s in c.routing
            )
            ports = " ".join(
                "-" if o is None else f"{o}({sc:.4g})" for o, sc in zip(c.port_channels, c.scales)
            )
            lines.append(f"{i:>4} {c.sign_label:>5} {routes:<40} {ports}")
        return "\n".join(lines)


def split_signs(k: KernelTensor) -> tuple[KernelTensor, KernelTensor]:
    """Non-negative parts with ``k == plus - minus`` and disjoint support."""
    w = k.weights
    return KernelTensor(np.maximum(w, 0.0)), KernelTensor(np.maximum(-w, 0.0))


def normalize_weights(k: KernelTensor) -> tuple[KernelTensor, float]:
    scale = float(np.abs(k.weights).max())
    if scale == 0.0:
        raise ValueError("cannot normalise an all-zero kernel")
    return KernelTensor(k.weights / scale), scale


def _layout(kh: int, kw: int, c_in: int, c_out: int, dims, optical_channel_sum: bool):
    d_w, d_t, d_s = dims
    if kh <= d_w:
        row_tiles = [tuple(range(kh))]
        per_call = d_w // kh if optical_channel_sum else 1
    else:
        row_tiles = [tuple(range(r, min(r + d_w, kh))) for r in range(0, kh, d_w)]
        per_call = 1
    col_tiles = [(c, min(d_t, kw - c)) for c in range(0, kw, d_t)]
    in_groups = [tuple(range(i, min(i + per_call, c_in))) for i in range(0, c_in, per_call)]
    out_groups = [tuple(range(o, min(o + d_s, c_out))) for o in range(0, c_out, d_s)]
    return row_tiles, col_tiles, in_groups, out_groups


def expected_call_count(
    kernel_shape, c_in: int, c_out: int, dims, sign_passes: int = 1, optical_channel_sum: bool = True
) -> int:
    """Calls for a dense kernel:
    ``sign_passes * ceil(C_in / channels_per_call) * ceil(C_out / d_s) * ceil(kh / d_w) * ceil(kw / d_t)``
    with ``channels_per_call = d_w // kh`` when ``kh <= d_w`` (1 otherwise or
    when optical channel summation is disabled)."""
    kh, kw = (1, kernel_shape[0]) if len(kernel_shape) == 1 else kernel_shape
    d_w, d_t, d_s = dims
    per_call = d_w // kh if (kh <= d_w and optical_channel_sum) else 1
    return sign_passes * ceil(c_in / per_call) * ceil(c_out / d_s) * ceil(kh / d_w) * ceil(kw / d_t)


def compile_kernel(
    k: KernelTensor,
    cfg: ChipConfig,
    program: str = "exact",
    optical_channel_sum: bool = True,
    allow_tap_tiling: bool = True,
) -> ExecutionPlan:
    """Build the chip-call schedule and post-combine recipe for ``k``."""
    k2 = k.as_2d()
    kh, kw, c_in, c_out = k2.shape
    d_w, d_t, d_s = cfg.dims
    if kw > d_t and not allow_tap_tiling:
        raise CapacityError(f"kernel row width {kw} needs d_t >= {kw}; chip has d_t = {d_t}")
    parts = dict(zip(SIGNS, (np.maximum(k2, 0.0), np.maximum(-k2, 0.0))))
    # one scale per (sign pass, output channel)
    scales = {sg: parts[sg].reshape(-1, c_out).max(axis=0) for sg in SIGNS}
    row_tiles, col_tiles, in_groups, out_groups = _layout(kh, kw, c_in, c_out, cfg.dims, optical_channel_sum)

    calls, terms = [], []
    luts = cfg.luts() if program == "lut" else None
    for sg in SIGNS:
        part = parts[sg]
        for og in out_groups:
            for ig in in_groups:
                for rows in row_tiles:
                    for c0, tw in col_tiles:
                        routing = [Slot(i, r, c0, tw) for i in ig for r in rows]
                        routing += [None] * (d_w - len(routing))
                        weights = np.zeros(cfg.dims)
                        for wl, slot in enumerate(routing):
                            if slot is None:
                                continue
                            for s, o in enumerate(og):
                                if scales[sg][o] == 0:
                                    continue
                                cols = part[slot.row, c0 : c0 + tw, slot.in_channel, o][::-1]
                                weights[wl, :tw, s] = cols / scales[sg][o]
                        if not weights.any():
                            continue
                        port_channels = tuple(og) + (None,) * (d_s - len(og))
                        port_scales = tuple(float(scales[sg][o]) for o in og) + (0.0,) * (d_s - len(og))
                        idx = len(calls)
                        calls.append(
                            ChipCall(
                                weights=weights,
                                voltages=cfg.program(weights, program, luts),
                                routing=tuple(routing),
                                port_channels=port_channels,
                                sign_label=sg,
                                scales=port_scales,
                            )
                        )
                        sign = 1.0 if sg == "plus" else -1.0
                        for s, o in enumerate(og):
                            if scales[sg][o] != 0:
                                terms.append(CombineTerm(idx, s, o, sign * float(scales[sg][o])))
    return ExecutionPlan(
        calls=tuple(calls),
        post_combine=tuple(terms),
        kernel_shape=(kh, kw),
        in_channels=c_in,
        out_channels=c_out,
        chip_dims=cfg.dims,
        strategy="row_shift" if kh > 1 else "wavelength_parallel",
        program_method=program,
        one_dimensional=k.weights.ndim == 3,
    )


def plan_row_shift_2d(k2d, cfg: ChipConfig, program: str = "exact") -> ExecutionPlan:
    """Plan a single-in/single-out 2D kernel with the row-shift mapping.

    Chips with fewer wavelengths than kernel rows fall back to one call per
    group of ``d_w`` rows; narrow time dimensions tile the columns.
    """
    k2d = np.asarray(k2d, dtype=float)
    if k2d.ndim != 2:
        raise ShapeError("plan_row_shift_2d expects one 2D kernel")
    return compile_kernel(KernelTensor.from_2d(k2d), cfg, program)


def execute_plan(plan: ExecutionPlan, x: DataTensor, cfg: ChipConfig, seed_offset: int = 0) -> DataTensor:
    """Run every call on the simulated chip, decode valid outputs, combine digitally.

    Call ``i`` draws detector noise from stream ``seed_offset + i`` of the
    chip's noise seed.
    """
    if cfg.dims != plan.chip_dims:
        raise ShapeError(f"plan compiled for chip {plan.chip_dims}, got {cfg.dims}")
    if x.channels != plan.in_channels:
        raise ShapeError(f"plan expects {plan.in_channels} input channels, data has {x.channels}")
    if x.samples.ndim == 2 and plan.kernel_shape[0] != 1:
        raise ShapeError("2D kernel plan applied to 1D data")
    if x.samples.min() < 0 or x.samples.max() > 1:
        raise EncodingError("chip inputs must be normalised intensities in [0, 1]")
    xs = x.as_2d()
    kh, kw = plan.kernel_shape
    _, h, w = xs.shape
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than data {h}x{w}")
    guard = cfg.d_t - 1
    out = np.zeros((plan.out_channels, ho, wo))
    by_call = {}
    for t in plan.post_combine:
        by_call.setdefault(t.call, []).append(t)
    for ci, call in enumerate(plan.calls):
        tw = call.col_width
        c0 = next(s.col_offset for s in call.routing if s is not None)
        win = wo + tw - 1
        waves = {}
        for wl, slot in enumerate(call.routing):
            if slot is not None:
                img = xs[slot.in_channel, slot.row : slot.row + ho, c0 : c0 + win]
                waves[wl] = encode_channel(img, guard, cfg.symbol_period)
        ref = next(iter(waves.values()))
        dark = ref.with_samples(np.zeros_like(ref.samples))
        inputs = [waves.get(wl, dark) for wl in range(cfg.d_w)]
        rng = cfg.noise.rng(seed_offset + ci) if cfg.noise.sigma_noise > 0 else None
        result = chip_forward(cfg.with_voltages(call.voltages), inputs, rng)
        for term in by_call.get(ci, ()):
            out[term.out_channel] += term.coeff * decode_channel(result.ports[term.port], (ho, win), tw)
    if x.samples.ndim == 2:
        out = out[:, 0, :]
    return DataTensor(out)


def execute_plan_batch(plan: ExecutionPlan, frames: np.ndarray, cfg: ChipConfig, seed_offset: int = 0) -> np.ndarray:
    """Stream a batch of ``(B, C, H, W)`` frames back to back through the chip.

    Frames are stacked as one tall image; output rows that straddle two frames
    are discarded. Returns ``(B, C_out, H - kh + 1, W - kw + 1)``.
    """
    b, c, h, w = frames.shape
    kh, _ = plan.kernel_shape
    tall = frames.transpose(1, 0, 2, 3).reshape(c, b * h, w)
    y = execute_plan(plan, DataTensor(tall), cfg, seed_offset).samples
    ho = h - kh + 1
    rows = (np.arange(b)[:, None] * h + np.arange(ho)[None, :]).ravel()
    return y[:, rows, :].reshape(y.shape[0], b, ho, -1).transpose(1, 0, 2, 3)
