"""File formats: binary PGM images and ``#``-headed CSV for tensors and waveforms."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .signal_core import DataTensor, Waveform

_PGM_TOKEN = re.compile(rb"(?:#[^\n]*\n|\s)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM and return floats in [0, 1]."""
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise ConfigError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, width, height, maxval = tokens
    if magic != b"P5":
        raise ConfigError(f"{path}: only binary P5 PGM is supported, got {magic!r}")
    width, height, maxval = int(width), int(height), int(maxval)
    if maxval > 255:
        raise ConfigError(f"{path}: 16-bit PGM not supported (maxval={maxval})")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(float) / maxval


def write_pgm(path, image) -> None:
    """Write a uint8 (or [0,1] float) image as P5 with maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeError("PGM images must be 2D")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def _header(**fields) -> str:
    return "# " + ";".join(f"{k}={v}" for k, v in fields.items()) + "\n"


def _parse_header(line: str) -> dict[str, str]:
    if not line.startswith("#"):
        raise ConfigError("CSV is missing its '# shape=...' header line")
    out = {}
    for part in line[1:].strip().split(";"):
        if part:
            key, _, value = part.partition("=")
            out[key.strip()] = value.strip()
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def write_tensor_csv(path, x: DataTensor, symbol_period: float = 50e-12) -> None:
    shape = "x".join(str(s) for s in x.shape)
    lines = [_header(shape=shape, channels=x.channels, symbol_period_ps=_fmt(symbol_period * 1e12))]
    for ch in x.as_2d():
        for row in ch:
            lines.append(",".join(_fmt(v) for v in row) + "\n")
    Path(path).write_text("".join(lines))


def read_tensor_csv(path) -> DataTensor:
    text = Path(path).read_text().splitlines()
    meta = _parse_header(text[0])
    shape = tuple(int(s) for s in meta["shape"].split("x"))
    channels = int(meta["channels"])
    rows = [[float(v) for v in line.split(",")] for line in text[1:] if line and not line.startswith("#")]
    arr = np.array(rows, dtype=float)
    try:
        arr = arr.reshape((channels,) + shape)
    except ValueError as exc:
        raise ShapeError(f"{path}: data does not match header shape {shape} x {channels}") from exc
    return DataTensor(arr)


def write_waveform_csv(path, w: Waveform) -> None:
    lines = [
        _header(
            shape=w.n_symbols,
            channels=1,
            symbol_period_ps=_fmt(w.symbol_period * 1e12),
            oversampling=w.oversampling,
            origin_offset=w.origin_offset,
        ),
        "# sample_index,value,guard\n",
    ]
    m = w.oversampling
    for i, v in enumerate(w.samples):
        lines.append(f"{i},{_fmt(v)},{int(w.guard_map[i // m])}\n")
    Path(path).write_text("".join(lines))


def read_waveform_csv(path) -> Waveform:
    text = Path(path).read_text().splitlines()
    meta = _parse_header(text[0])
    m = int(meta.get("oversampling", 1))
    vals, guards = [], []
    for line in text[1:]:
        if not line or line.startswith("#"):
            continue
        _, v, g = line.split(",")
        vals.append(float(v))
        guards.append(bool(int(g)))
    return Waveform(
        np.array(vals),
        float(meta["symbol_period_ps"]) * 1e-12,
        np.array(guards[::m], dtype=bool),
        int(meta.get("origin_offset", 0)),
        m,
    )


def write_csv_table(path, header: list[str], rows, comments: list[str] = ()) -> None:
    """Plain CSV table with optional ``#`` comment lines at the top."""
    lines = [f"# {c}\n" for c in comments]
    lines.append(",".join(header) + "\n")
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")
    Path(path).write_text("".join(lines))
