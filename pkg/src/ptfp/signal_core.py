"""Tensor/waveform data model, row-major temporal encoding and brute-force oracles.

Conventions used throughout the package:

* convolution means cross-correlation, ``y[n] = sum_j k[j] * x[n + j]`` (no kernel flip);
* only "valid" outputs are produced (``N - K + 1`` per axis);
* a DataTensor stores samples as ``(C, N)`` or ``(C, H, W)``;
* a KernelTensor stores weights as ``(K, C_in, C_out)`` or ``(kh, kw, C_in, C_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EncodingError, NumericError, ShapeError

DEFAULT_SYMBOL_PERIOD = 50e-12  # one symbol at 20 Gbaud


def _frozen(a, dtype=float) -> np.ndarray:
    if isinstance(a, np.ndarray) and a.dtype == dtype and not a.flags.writeable:
        return a
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DataTensor:
    """Multi-channel data ``[D_data, C]`` stored channel-first.

    Samples must be finite. Chip inputs must also be non-negative; that is
    enforced when a channel is encoded onto a waveform, so convolution outputs
    (which may be signed) can reuse this type.
    """

    samples: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.samples)
        if arr.ndim not in (2, 3):
            raise ShapeError(f"DataTensor expects (C, N) or (C, H, W) samples, got shape {arr.shape}")
        if arr.shape[0] < 1 or 0 in arr.shape:
            raise ShapeError(f"DataTensor needs at least one channel and non-empty data, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
            raise EncodingError(f"non-finite sample at index {bad}")
        object.__setattr__(self, "samples", arr)

    @classmethod
    def from_channels(cls, channels: Sequence[np.ndarray]) -> "DataTensor":
        return cls(np.stack([np.asarray(c, dtype=float) for c in channels]))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.samples.shape[1:]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def channel(self, i: int) -> np.ndarray:
        return self.samples[i]

    def as_2d(self) -> np.ndarray:
        """Samples as ``(C, H, W)``; 1D data becomes a single row."""
        if self.samples.ndim == 2:
            return self.samples[:, None, :]
        return self.samples

    def is_intensity(self) -> bool:
        return bool(np.all(self.samples >= 0))

    def pad(self, width: int) -> "DataTensor":
        """Zero-pad every spatial axis by ``width`` on both sides."""
        if width < 0:
            raise ValueError("pad width must be >= 0")
        spec = [(0, 0)] + [(width, width)] * (self.samples.ndim - 1)
        return DataTensor(np.pad(self.samples, spec))


@dataclass(frozen=True, eq=False)
class KernelTensor:
    """Convolution kernel ``[D_kernel, C_in, C_out]`` with signed weights."""

    weights: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.weights)
        if arr.ndim not in (3, 4):
            raise ShapeError(
                f"KernelTensor expects (K, C_in, C_out) or (kh, kw, C_in, C_out), got shape {arr.shape}"
            )
        if 0 in arr.shape:
            raise ShapeError(f"empty kernel shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("kernel weights must be finite")
        object.__setattr__(self, "weights", arr)

    @classmethod
    def from_2d(cls, k2d, in_channels: int = 1, out_channels: int = 1) -> "KernelTensor":
        """Single 2D kernel broadcast to ``[k2d.shape, 1, 1]`` (or tiled)."""
        k2d = np.asarray(k2d, dtype=float)
        w = np.broadcast_to(k2d[..., None, None], k2d.shape + (in_channels, out_channels))
        return cls(w)

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        return self.weights.shape[:-2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[-2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[-1]

    @property
    def taps(self) -> int:
        """``|D_kernel|``, the number of taps in one single-channel convolution."""
        return int(np.prod(self.kernel_shape))

    def as_2d(self) -> np.ndarray:
        """Weights as ``(kh, kw, C_in, C_out)``; 1D kernels become one row."""
        if self.weights.ndim == 3:
            return self.weights[None]
        return self.weights


@dataclass(frozen=True, eq=False)
class Waveform:
    """Temporal symbol stream.

    ``samples`` holds ``n_symbols * oversampling`` values. ``guard_map`` is per
    symbol. ``origin_offset`` is the symbol index of the first payload symbol;
    sample 0 of every waveform in a simulation sits at the same absolute time.
    """

    samples: np.ndarray
    symbol_period: float = DEFAULT_SYMBOL_PERIOD
    guard_map: np.ndarray | None = None
    origin_offset: int = 0
    oversampling: int = 1

    def __post_init__(self):
        s = _frozen(self.samples)
        if s.ndim != 1:
            raise ShapeError("waveform samples must be one-dimensional")
        if not np.all(np.isfinite(s)):
            raise NumericError("waveform samples must be finite")
        if not self.symbol_period > 0:
            raise ValueError("symbol_period must be > 0")
        if int(self.oversampling) != self.oversampling or self.oversampling < 1:
            raise ValueError("oversampling must be an integer >= 1")
        if len(s) % self.oversampling:
            raise ShapeError("sample count must be a multiple of the oversampling factor")
        n_sym = len(s) // self.oversampling
        g = np.zeros(n_sym, dtype=bool) if self.guard_map is None else _frozen(self.guard_map, dtype=bool)
        if g.shape != (n_sym,):
            raise ShapeError(f"guard_map length {g.shape} != symbol count {n_sym}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "guard_map", g)
        object.__setattr__(self, "oversampling", int(self.oversampling))
        object.__setattr__(self, "origin_offset", int(self.origin_offset))

    @property
    def n_symbols(self) -> int:
        return len(self.samples) // self.oversampling

    @property
    def duration(self) -> float:
        return self.n_symbols * self.symbol_period

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.symbol_period, self.guard_map, self.origin_offset, self.oversampling)

    def padded_to(self, n_symbols: int) -> "Waveform":
        """Append zero symbols so the stream is ``n_symbols`` long."""
        extra = n_symbols - self.n_symbols
        if extra < 0:
            raise ShapeError(f"cannot pad {self.n_symbols} symbols down to {n_symbols}")
        if extra == 0:
            return self
        return Waveform(
            np.concatenate([self.samples, np.zeros(extra * self.oversampling)]),
            self.symbol_period,
            np.concatenate([self.guard_map, np.zeros(extra, dtype=bool)]),
            self.origin_offset,
            self.oversampling,
        )

    def upsample(self, factor: int) -> "Waveform":
        """Rectangular (sample-and-hold) upsampling of a symbol-rate waveform."""
        if self.oversampling != 1:
            raise ValueError("waveform is already oversampled")
        return Waveform(np.repeat(self.samples, factor), self.symbol_period, self.guard_map, self.origin_offset, factor)

    def decimate(self) -> "Waveform":
        """Back to one sample per symbol, sampling mid-symbol."""
        m = self.oversampling
        if m == 1:
            return self
        return Waveform(self.samples[m // 2 :: m], self.symbol_period, self.guard_map, self.origin_offset, 1)


def encode_channel(channel, guard_len: int = 0, symbol_period: float = DEFAULT_SYMBOL_PERIOD) -> Waveform:
    """Flatten one channel row by row, inserting ``guard_len`` zeros between rows."""
    x = np.asarray(channel, dtype=float)
    if guard_len < 0:
        raise ValueError("guard_len must be >= 0")
    if x.ndim not in (1, 2) or x.size == 0:
        raise ShapeError(f"channel must be 1D or a non-empty 2D image, got shape {x.shape}")
    bad = ~np.isfinite(x) | (x < 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise EncodingError(
            f"cannot encode sample {x[idx]!r} at index {idx}: optical intensity must be finite and >= 0"
        )
    if x.ndim == 1:
        x = x[None, :]
    rows, width = x.shape
    n = rows * width + guard_len * (rows - 1)
    samples = np.pad(x, ((0, 0), (0, guard_len))).ravel()[:n]
    guard = np.zeros((rows, width + guard_len), dtype=bool)
    guard[:, width:] = True
    return Waveform(samples, symbol_period, guard.ravel()[:n], 0)


def decode_channel(w: Waveform, original_shape, kernel_width: int = 1) -> np.ndarray:
    """Recover a channel from an encoded (and possibly filtered) waveform.

    ``original_shape`` is the shape that was encoded. When the waveform went
    through a ``kernel_width``-tap delay-line FIR, output position ``m`` of row
    ``r`` sits ``kernel_width - 1`` symbols after the start of that row, and only
    ``W - kernel_width + 1`` positions per row are kept.
    """
    if w.oversampling != 1:
        w = w.decimate()
    shape = tuple(int(s) for s in np.atleast_1d(original_shape))
    rows, width = (1, shape[0]) if len(shape) == 1 else shape
    if kernel_width < 1 or kernel_width > width:
        raise ShapeError(f"kernel width {kernel_width} incompatible with row width {width}")
    n_guard = int(w.guard_map.sum())
    if rows > 1:
        if n_guard % (rows - 1):
            raise ShapeError(f"{n_guard} guard symbols cannot separate {rows} rows evenly")
        guard_len = n_guard // (rows - 1)
    else:
        guard_len = 0
    stride = width + guard_len
    out_w = width - kernel_width + 1
    first = w.origin_offset + kernel_width - 1
    needed = first + (rows - 1) * stride + out_w
    if len(w.samples) < needed:
        raise ShapeError(f"waveform has {len(w.samples)} symbols, shape {shape} needs {needed}")
    idx = first + np.arange(rows)[:, None] * stride + np.arange(out_w)[None, :]
    out = w.samples[idx]
    return out[0].copy() if len(shape) == 1 else out.copy()


def oracle_xcorr_1d(x: Sequence[float], k: Sequence[float]) -> list[float]:
    """Valid cross-correlation by explicit nested loops."""
    x = [float(v) for v in x]
    k = [float(v) for v in k]
    if not x or not k:
        raise ValueError("oracle_xcorr_1d needs non-empty inputs")
    if len(k) > len(x):
        raise ValueError(f"kernel length {len(k)} exceeds data length {len(x)}")
    out = []
    for n in range(len(x) - len(k) + 1):
        acc = 0.0
        for j in range(len(k)):
            acc += k[j] * x[n + j]
        out.append(acc)
    return out


def direct_xcorr(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Shift-and-add valid tensor cross-correlation.

    ``x`` is ``(..., C_in, H, W)`` and ``k`` is ``(kh, kw, C_in, C_out)``; the
    result is ``(..., C_out, H - kh + 1, W - kw + 1)``. Loops run over every
    (tap, input channel, output channel) triple; only the positions are
    vectorised.
    """
    kh, kw, c_in, c_out = k.shape
    if x.shape[-3] != c_in:
        raise ShapeError(f"kernel expects {c_in} input channels, data has {x.shape[-3]}")
    h, w = x.shape[-2:]
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than data {h}x{w}")
    out = np.zeros(x.shape[:-3] + (c_out, ho, wo))
    for o in range(c_out):
        for i in range(c_in):
            for r in range(kh):
                for c in range(kw):
                    wt = k[r, c, i, o]
                    if wt != 0.0:
                        out[..., o, :, :] += wt * x[..., i, r : r + ho, c : c + wo]
    return out


def _check_conv_shapes(x: DataTensor, k: KernelTensor):
    if k.in_channels != x.channels:
        raise ShapeError(f"kernel has C_in={k.in_channels} but data has {x.channels} channels")
    if len(k.kernel_shape) == 2 and x.samples.ndim == 2 and k.kernel_shape[0] != 1:
        raise ShapeError(f"2D kernel {k.kernel_shape} applied to 1D data")


def oracle_tensor_conv(x: DataTensor, k: KernelTensor) -> DataTensor:
    """Reference tensor convolution: ``out[o] = sum_i xcorr(x[i], k[:, i, o])``."""
    _check_conv_shapes(x, k)
    out = direct_xcorr(x.as_2d(), k.as_2d())
    if x.samples.ndim == 2:
        out = out[:, 0, :]
    return DataTensor(out)


@dataclass(frozen=True)
class MemoryReport:
    input_elements: int
    kernel_taps: int
    in_channels: int
    im2col_elements: int  # D_data * |D_kernel| * C_in
    duplication_factor: int
    materialized_shape: tuple[int, int]  # valid-output rows x |D_kernel| * C_in
    gemm_max_rel_error: float
    flow_delay_symbols: int  # per-branch delay-line registers replacing duplication
    flow_extra_elements: int = 0

    def as_rows(self) -> list[tuple[str, object]]:
        return [
            ("input_elements", self.input_elements),
            ("kernel_taps", self.kernel_taps),
            ("in_channels", self.in_channels),
            ("im2col_elements", self.im2col_elements),
            ("duplication_factor", self.duplication_factor),
            ("materialized_rows", self.materialized_shape[0]),
            ("materialized_cols", self.materialized_shape[1]),
            ("flow_extra_elements", self.flow_extra_elements),
            ("flow_delay_symbols_per_branch", self.flow_delay_symbols),
            ("gemm_max_rel_error", f"{self.gemm_max_rel_error:.3e}"),
        ]


def im2col_matrix(x: DataTensor, k: KernelTensor) -> np.ndarray:
    """Materialise the GeMM input matrix, one row per valid output position."""
    _check_conv_shapes(x, k)
    xs = x.as_2d()
    kh, kw = k.as_2d().shape[:2]
    c_in, h, w = xs.shape
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than data {h}x{w}")
    mat = np.empty((ho * wo, kh * kw * c_in))
    for p in range(ho):
        for q in range(wo):
            # column order (r, c, i) matches k.as_2d().reshape(-1, C_out)
            mat[p * wo + q] = xs[:, p : p + kh, q : q + kw].transpose(1, 2, 0).ravel()
    return mat


def im2col_accounting(x: DataTensor, k: KernelTensor, rtol: float = 1e-12) -> MemoryReport:
    """Count GeMM duplication and self-check the materialised product against the oracle."""
    mat = im2col_matrix(x, k)
    k2 = k.as_2d()
    gemm = mat @ k2.reshape(-1, k.out_channels)
    ref = oracle_tensor_conv(x, k).samples.reshape(k.out_channels, -1).T
    scale = max(np.abs(ref).max(), np.finfo(float).tiny)
    err = float(np.abs(gemm - ref).max() / scale)
    if err > rtol:
        raise NumericError(f"im2col GeMM disagrees with oracle (max rel err {err:.3e})")
    return MemoryReport(
        input_elements=x.size * x.channels,
        kernel_taps=k.taps,
        in_channels=x.channels,
        im2col_elements=x.size * k.taps * x.channels,
        duplication_factor=k.taps,
        materialized_shape=mat.shape,
        gemm_max_rel_error=err,
        flow_delay_symbols=k2.shape[1] - 1,
    )
