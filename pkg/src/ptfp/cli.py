"""``ptfp`` command line: characterize, convolve, memreport, train, eval, sweep, plan.

Every command that writes files also writes one JSON run manifest next to its
outputs, including when the command fails part way. All randomness comes from
the single ``--seed`` flag.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .chip import chip_from_dict, chip_to_dict, default_chip, load_chip_description, voltage_sweep
from .compiler import compile_kernel, execute_plan
from .devices import NoiseModel, wdm_channel_passband
from .errors import ConfigError, PTFPError, UsageError
from .io import read_pgm, write_csv_table, write_pgm
from .signal_core import DataTensor, KernelTensor, im2col_accounting, oracle_tensor_conv

SOBEL_H = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
BUILTIN_KERNELS = {
    "sobel-h": SOBEL_H,
    "sobel-v": SOBEL_H.T.copy(),
    "blur": np.full((3, 3), 1.0 / 9.0),
    "sharpen": np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]) + SOBEL_H,
}
DEFAULT_SIGMAS = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5)
FLAT_SPAN = 1e-9


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__
    duration_s: float = 0.0
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=str) + "\n")


# -- helpers ---------------------------------------------------------------


def _chip_description(path):
    return chip_to_dict(default_chip()) if path is None else load_chip_description(path)


def _chip(path, sigma: float | None = None, seed: int = 0):
    cfg = chip_from_dict(_chip_description(path))
    if sigma is not None:
        cfg = cfg.with_noise(NoiseModel(sigma, seed))
    return cfg


def parse_dims(text: str, n: int, what: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"{what} must look like {'x'.join(['N'] * n)}, got {text!r}") from None
    if len(dims) != n or min(dims) < 1:
        raise UsageError(f"{what} must be {n} positive integers separated by 'x', got {text!r}")
    return dims


def load_kernel(spec: str, seed: int = 0) -> KernelTensor:
    """Built-in name, ``KHxKWxCINxCOUT`` (seeded random weights) or a JSON file.

    JSON files hold either a 2D list or ``{"weights": [...]}`` with shape
    ``(kh, kw, C_in, C_out)``.
    """
    if spec in BUILTIN_KERNELS:
        return KernelTensor.from_2d(BUILTIN_KERNELS[spec])
    if "x" in spec and not spec.endswith(".json"):
        kh, kw, ci, co = parse_dims(spec, 4, "kernel shape")
        return KernelTensor(np.random.default_rng(seed).uniform(-1, 1, (kh, kw, ci, co)))
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"unknown kernel {spec!r}: not a built-in ({', '.join(BUILTIN_KERNELS)}) or a file")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    w = np.asarray(data["weights"] if isinstance(data, dict) else data, dtype=float)
    if w.ndim == 2:
        return KernelTensor.from_2d(w)
    return KernelTensor(w)


def affine_to_bytes(y: np.ndarray, offset: float | None = None, scale: float | None = None):
    """Map real values to [0, 255]; returns (uint8 image, offset, scale)."""
    if offset is None:
        offset = float(y.min())
    if scale is None:
        span = float(y.max()) - offset
        # spans at roundoff level are a flat image, not signal
        scale = 255.0 / span if span > FLAT_SPAN else 0.0
    # rounding first keeps last-ulp differences from flipping a byte
    v = np.round(np.round((y - offset) * scale, 9))
    return np.clip(v, 0, 255).astype(np.uint8), offset, scale


def _eval_segments(n: int, seed: int):
    from .nn import DEFAULT_HYPERPARAMS, DEFAULT_SEED, synth_dataset

    pool = synth_dataset(DEFAULT_HYPERPARAMS["n_test"], DEFAULT_SEED + 1)
    if n > len(pool):
        raise UsageError(f"only {len(pool)} held-out segments are available")
    idx = np.sort(np.random.default_rng(seed).choice(len(pool), size=n, replace=False))
    return [pool[i] for i in idx]


def _checkpoint(path):
    from .nn import load_checkpoint, shipped_checkpoint_path

    return load_checkpoint(shipped_checkpoint_path() if path is None else path)


# -- commands --------------------------------------------------------------


def cmd_characterize(args, m: RunManifest):
    desc = _chip_description(args.config)
    volts = voltage_sweep(desc)
    cfg = chip_from_dict(desc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    lams = np.round(np.arange(1548.0, 1559.6 + 1e-9, 0.02), 6)
    wdm = cfg.wdm
    n_ch = len(wdm.channel_centers)
    bands = np.array([wdm_channel_passband(wdm, c, lams) for c in range(n_ch)])
    rows = [[float(lam)] + bands[:, i].tolist() for i, lam in enumerate(lams)]
    path = out / "wdm_transmission.csv"
    write_csv_table(
        path,
        ["wavelength_nm"] + [f"ch{c}" for c in range(n_ch)],
        rows,
        [f"channel_centers_nm={';'.join(str(c) for c in wdm.channel_centers)}"],
    )
    m.outputs.append(str(path))

    for (w, t, s), lut in sorted(cfg.luts().items()):
        ring = cfg.mrr(w, t, s)
        lo = cfg.operating_wavelengths[w] - 3.0
        grid = np.round(np.linspace(lo, lo + 6.0, 601), 6)
        spectra = [[float(lam)] + [float(ring.transmission(lam, v)) for v in volts] for lam in grid]
        path = out / f"mrr_spectrum_w{w}_t{t}_s{s}.csv"
        write_csv_table(path, ["wavelength_nm"] + [f"v{v:g}mV" for v in volts], spectra,
                        [f"ring=({w},{t},{s});operating_wavelength_nm={cfg.operating_wavelengths[w]}"])
        m.outputs.append(str(path))
        path = out / f"lut_w{w}_t{t}_s{s}.csv"
        lo_i, hi_i = lut.branch
        write_csv_table(path, ["voltage_mv", "weight"], lut.rows(),
                        [f"ring=({w},{t},{s});operating_wavelength_nm={lut.operating_wavelength}",
                         f"monotone_branch_mv={lut.voltages[lo_i]:g}..{lut.voltages[hi_i]:g};direction={lut.direction}"])
        m.outputs.append(str(path))
    print(f"wrote {len(m.outputs)} files to {out}")


def cmd_convolve(args, m: RunManifest):
    image = read_pgm(args.image)
    m.inputs.append(args.image)
    k = load_kernel(args.kernel, args.seed)
    if k.in_channels != 1:
        raise UsageError("PGM input has one channel; kernel must have C_in = 1")
    x = DataTensor(image[None])
    if args.backend == "oracle":
        y = oracle_tensor_conv(x, k).samples
        m.extra["n_calls"] = 0
    else:
        cfg = _chip(args.config, args.sigma, args.seed)
        plan = compile_kernel(k, cfg, args.program)
        y = execute_plan(plan, x, cfg).samples
        m.extra["n_calls"] = plan.n_calls
    out = Path(args.out)
    scales = []
    for o in range(y.shape[0]):
        img, offset, scale = affine_to_bytes(y[o], args.offset, args.scale)
        path = out if y.shape[0] == 1 else out.with_name(f"{out.stem}_c{o}{out.suffix}")
        write_pgm(path, img)
        m.outputs.append(str(path))
        scales.append({"channel": o, "offset": offset, "scale": scale})
    m.extra.update(rescale=scales, sigma=args.sigma, backend=args.backend, kernel=args.kernel)
    if args.csv:
        write_csv_table(args.csv, ["channel", "row", "col", "value"],
                        [(o, r, c, float(v)) for (o, r, c), v in np.ndenumerate(y)])
        m.outputs.append(args.csv)
    print(f"{args.kernel}: output {y.shape[1]}x{y.shape[2]} x {y.shape[0]} -> {out}")


def cmd_memreport(args, m: RunManifest):
    h, w, c = parse_dims(args.shape, 3, "tensor shape")
    kh, kw, ci, co = parse_dims(args.kernel, 4, "kernel shape")
    if ci != c:
        raise UsageError(f"kernel C_in={ci} does not match tensor channels {c}")
    rng = np.random.default_rng(args.seed)
    rep = im2col_accounting(DataTensor(rng.random((c, h, w))), KernelTensor(rng.uniform(-1, 1, (kh, kw, ci, co))))
    rows = rep.as_rows()
    for name, value in rows:
        print(f"{name:<32} {value}")
    if args.out:
        write_csv_table(args.out, ["quantity", "value"], rows, [f"tensor={args.shape};kernel={args.kernel}"])
        m.outputs.append(args.out)


def cmd_train(args, m: RunManifest):
    from .nn import accuracy, make_splits, save_checkpoint, train

    tr, te = make_splits(args.seed, args.n_train, args.n_test)
    hp = {"epochs": args.epochs, "n_train": args.n_train, "n_test": args.n_test}
    res = train(tr, hp, seed=args.seed)
    save_checkpoint(res.spec, args.out)
    m.outputs.append(args.out)
    curve = args.curve or str(Path(args.out).with_suffix(".curve.csv"))
    write_csv_table(curve, ["epoch", "loss", "train_accuracy"], [(e, float(l), float(a)) for e, l, a in res.curve])
    m.outputs.append(curve)
    acc = accuracy(res.spec, te)
    m.extra["test_accuracy"] = acc
    print(f"test accuracy {acc:.4f} ({len(te)} segments)")


def cmd_eval(args, m: RunManifest):
    from .nn import CLASS_NAMES, ChipBackend, confusion_matrix, predict, stack

    spec = _checkpoint(args.checkpoint)
    m.inputs.append(args.checkpoint or "<shipped>")
    clips, labels = stack(_eval_segments(args.segments, args.seed))
    if args.backend == "chip":
        pred, _ = predict(spec, clips, ChipBackend(_chip(args.config, args.sigma, args.seed)))
    else:
        pred, _ = predict(spec, clips, "digital")
    cm = confusion_matrix(labels, pred)
    correct, total = int(np.trace(cm)), int(cm.sum())
    write_csv_table(args.out, ["true\\pred"] + list(CLASS_NAMES),
                    [[CLASS_NAMES[i]] + cm[i].tolist() for i in range(len(CLASS_NAMES))],
                    [f"backend={args.backend};sigma={args.sigma};accuracy={correct}/{total}"])
    m.outputs.append(args.out)
    m.extra.update(correct=correct, total=total)
    print(f"{correct}/{total}={100.0 * correct / total:.1f}%")


def cmd_sweep(args, m: RunManifest):
    from .nn import noise_accuracy_sweep

    spec = _checkpoint(args.checkpoint)
    m.inputs.append(args.checkpoint or "<shipped>")
    try:
        sigmas = [float(s) for s in args.sigmas.split(",")]
    except ValueError:
        raise UsageError(f"--sigmas must be comma-separated numbers, got {args.sigmas!r}") from None
    segs = _eval_segments(args.segments, args.seed)
    points = noise_accuracy_sweep(spec, segs, _chip(args.config), sigmas, args.trials, args.seed)
    write_csv_table(args.out, ["sigma", "mean", "p5", "p95"], [(p.sigma, p.mean, p.p5, p.p95) for p in points],
                    [f"trials={args.trials};segments={args.segments};seed={args.seed}"])
    m.outputs.append(args.out)
    for p in points:
        print(f"sigma={p.sigma:<6g} mean={p.mean:.4f} band=[{p.p5:.4f}, {p.p95:.4f}]")


def cmd_plan(args, m: RunManifest):
    k = load_kernel(args.kernel, args.seed)
    plan = compile_kernel(k, _chip(args.config), args.program,
                          optical_channel_sum=not args.no_channel_sum, allow_tap_tiling=not args.no_tiling)
    print(plan.describe())
    if args.out:
        Path(args.out).write_text(plan.to_json() + "\n")
        m.outputs.append(args.out)


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptfp", description="Photonic tensor-flow processor simulator.")
    p.add_argument("--version", action="version", version=f"ptfp {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text, out_required=False):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
        sp.add_argument("--config", default=None, help="chip description JSON (default: built-in [4,3,1] chip)")
        sp.add_argument("--manifest", default=None, help="manifest path (default: next to the outputs)")
        sp.set_defaults(func=func, out_required=out_required)
        return sp

    sp = add("characterize", cmd_characterize, "Dump WDM spectra, MRR spectra and weight-voltage LUTs as CSV.")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("convolve", cmd_convolve, "Convolve a PGM image on the simulated chip.")
    sp.add_argument("image", help="input image (binary PGM)")
    sp.add_argument("--kernel", required=True,
                    help=f"built-in ({', '.join(BUILTIN_KERNELS)}), KHxKWx1xCOUT, or JSON weights file")
    sp.add_argument("--out", required=True, help="output PGM")
    sp.add_argument("--sigma", type=float, default=0.0, help="detector noise std at each output port")
    sp.add_argument("--backend", choices=("chip", "oracle"), default="chip")
    sp.add_argument("--program", choices=("exact", "lut"), default="exact", help="ring programming method")
    sp.add_argument("--offset", type=float, default=None, help="fixed rescale offset (default: output min)")
    sp.add_argument("--scale", type=float, default=None, help="fixed rescale factor (default: fit to 0..255)")
    sp.add_argument("--csv", default=None, help="also write the real-valued output as CSV")

    sp = add("memreport", cmd_memreport, "Compare im2col memory use with streaming delay lines.")
    sp.add_argument("--shape", required=True, help="input tensor HxWxC, e.g. 32x32x3")
    sp.add_argument("--kernel", required=True, help="kernel KHxKWxCINxCOUT, e.g. 3x3x3x8")
    sp.add_argument("--out", default=None, help="optional CSV table")

    sp = add("train", cmd_train, "Train the video classifier on the synthetic dataset.")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--curve", default=None, help="training curve CSV (default: <out>.curve.csv)")
    sp.add_argument("--epochs", type=int, default=12)
    sp.add_argument("--n-train", type=int, default=1500)
    sp.add_argument("--n-test", type=int, default=500)

    sp = add("eval", cmd_eval, "Classify held-out segments and write a confusion matrix.")
    sp.add_argument("--checkpoint", default=None, help="checkpoint (default: the shipped one)")
    sp.add_argument("--segments", type=int, default=96)
    sp.add_argument("--backend", choices=("chip", "digital"), default="chip")
    sp.add_argument("--sigma", type=float, default=0.0)
    sp.add_argument("--out", required=True, help="confusion matrix CSV")

    sp = add("sweep", cmd_sweep, "Chip-backend accuracy versus detector noise.")
    sp.add_argument("--checkpoint", default=None, help="checkpoint (default: the shipped one)")
    sp.add_argument("--sigmas", default=",".join(f"{s:g}" for s in DEFAULT_SIGMAS))
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--segments", type=int, default=96)
    sp.add_argument("--out", required=True, help="sweep CSV")

    sp = add("plan", cmd_plan, "Compile a kernel and print its chip-call schedule.")
    sp.add_argument("--kernel", required=True, help="built-in name, KHxKWxCINxCOUT, or JSON weights file")
    sp.add_argument("--program", choices=("exact", "lut"), default="exact")
    sp.add_argument("--no-channel-sum", action="store_true", help="one input channel per call")
    sp.add_argument("--no-tiling", action="store_true", help="fail instead of tiling wide kernels")
    sp.add_argument("--out", default=None, help="optional plan JSON")
    return p


def _manifest_path(args) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    out = getattr(args, "out", None)
    if out is None:
        return None
    out = Path(out)
    if args.command == "characterize":
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    m = RunManifest(command=args.command, config=args.config, seed=args.seed, extra={"argv": list(sys.argv[1:] if argv is None else argv)})
    start = time.perf_counter()
    code = 0
    try:
        args.func(args, m)
    except PTFPError as exc:
        m.error = f"{type(exc).__name__}: {exc}"
        print(f"error: {exc}", file=sys.stderr)
        code = exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        m.error = f"{type(exc).__name__}: {exc}"
        print(f"error: {exc}", file=sys.stderr)
        code = UsageError.exit_code
    m.duration_s = time.perf_counter() - start
    mpath = _manifest_path(args)
    if mpath is not None:
        mpath.parent.mkdir(parents=True, exist_ok=True)
        m.write(mpath)
    return code


if __name__ == "__main__":
    sys.exit(main())
