import json
import re

import numpy as np
import pytest

from ptfp.chip import chip_to_dict, default_chip
from ptfp.cli import BUILTIN_KERNELS, affine_to_bytes, build_parser, main
from ptfp.io import read_pgm, write_pgm
from ptfp.signal_core import DataTensor, KernelTensor, oracle_tensor_conv


@pytest.fixture
def edge_image(tmp_path):
    img = np.zeros((24, 24))
    img[:, 12:] = 1.0
    path = tmp_path / "edge.pgm"
    write_pgm(path, img)
    return path


def manifest(path):
    return json.loads(path.with_name(path.name + ".manifest.json").read_text())


def read_table(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return lines[0].split(","), np.array([[float(v) for v in l.split(",")] for l in lines[1:]])


# -- characterize ------------------------------------------------------------


def test_characterize_default(tmp_path, capsys):
    out = tmp_path / "char"
    assert main(["characterize", "--out", str(out)]) == 0
    luts = sorted(out.glob("lut_*.csv"))
    assert len(luts) == 12
    assert len(list(out.glob("mrr_spectrum_*.csv"))) == 12
    header, data = read_table(out / "wdm_transmission.csv")
    assert header == ["wavelength_nm", "ch0", "ch1", "ch2", "ch3"]
    data = data[data[:, 0] > 1549.8]  # skip the periodic image of the last channel
    peaks = data[np.argmax(data[:, 1:], axis=0), 0]
    assert np.allclose(np.diff(peaks), 2.0, atol=0.05)
    header, spec = read_table(out / "mrr_spectrum_w0_t0_s0.csv")
    assert header[1:] == [f"v{v}mV" for v in range(0, 1401, 200)]
    # the notch moves to longer wavelengths as voltage rises
    notch = spec[np.argmin(spec[:, 1:], axis=0), 0]
    assert np.all(np.diff(notch) > 0)
    m = json.loads((out / "manifest.json").read_text())
    assert m["error"] is None and len(m["outputs"]) == 25


def test_characterize_empty_voltage_grid(tmp_path, capsys):
    d = chip_to_dict(default_chip())
    d["voltage_sweep_mv"] = []
    cfg = tmp_path / "chip.json"
    cfg.write_text(json.dumps(d))
    out = tmp_path / "char"
    assert main(["characterize", "--config", str(cfg), "--out", str(out)]) == 3
    assert "empty" in json.loads((out / "manifest.json").read_text())["error"]


def test_characterize_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "chip.json"
    cfg.write_text('{\n  "schema": 1,\n  oops\n}')
    assert main(["characterize", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 3
    assert "chip.json:3:" in capsys.readouterr().err


# -- convolve ----------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(BUILTIN_KERNELS))
def test_convolve_builtins_match_oracle_bytes(tmp_path, edge_image, name, capsys):
    out = tmp_path / f"{name}.pgm"
    assert main(["convolve", str(edge_image), "--kernel", name, "--out", str(out)]) == 0
    resc = manifest(out)["extra"]["rescale"][0]
    x = DataTensor(read_pgm(edge_image)[None])
    ref = oracle_tensor_conv(x, KernelTensor.from_2d(BUILTIN_KERNELS[name])).samples[0]
    ref_img, _, _ = affine_to_bytes(ref, resc["offset"], resc["scale"])
    assert out.read_bytes() == b"P5\n22 22\n255\n" + ref_img.tobytes()


def test_convolve_sobel_h_edge_columns(tmp_path, edge_image, capsys):
    out = tmp_path / "s.pgm"
    csv = tmp_path / "s.csv"
    main(["convolve", str(edge_image), "--kernel", "sobel-h", "--out", str(out), "--csv", str(csv)])
    _, rows = read_table(csv)
    hot = sorted({int(c) for _, _, c, v in rows if abs(v) > 1e-9})
    assert hot == [10, 11]


def test_blur_is_nine_equal_weights():
    assert np.all(BUILTIN_KERNELS["blur"] == 1 / 9)


def test_convolve_multi_output_channels(tmp_path, edge_image, capsys):
    out = tmp_path / "m.pgm"
    assert main(["convolve", str(edge_image), "--kernel", "3x3x1x2", "--out", str(out)]) == 0
    assert (tmp_path / "m_c0.pgm").exists() and (tmp_path / "m_c1.pgm").exists()


def test_convolve_missing_image(tmp_path, capsys):
    out = tmp_path / "x.pgm"
    assert main(["convolve", str(tmp_path / "nope.pgm"), "--kernel", "blur", "--out", str(out)]) == 2
    assert manifest(out)["error"]


def test_capacity_error_reports_dims(tmp_path, capsys):
    code = main(["plan", "--kernel", "3x5x1x1", "--no-tiling", "--out", str(tmp_path / "p.json")])
    assert code == 4
    assert "d_t >= 5" in capsys.readouterr().err


# -- memreport ---------------------------------------------------------------


def test_memreport_values(tmp_path, capsys):
    out = tmp_path / "mem.csv"
    assert main(["memreport", "--shape", "32x32x3", "--kernel", "3x3x3x8", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "im2col_elements                  27648" in text
    assert "duplication_factor               9" in text
    main(["memreport", "--shape", "8x8x1", "--kernel", "1x1x1x1"])
    assert "duplication_factor               1" in capsys.readouterr().out


def test_memreport_bad_shape(capsys):
    assert main(["memreport", "--shape", "32x32", "--kernel", "3x3x3x8"]) == 2


# -- plan --------------------------------------------------------------------


def test_plan_counts(tmp_path, capsys):
    main(["plan", "--kernel", "sobel-h", "--out", str(tmp_path / "p.json")])
    assert "calls=2" in capsys.readouterr().out
    assert len(json.loads((tmp_path / "p.json").read_text())["calls"]) == 2


# -- network commands --------------------------------------------------------


def test_eval_chip_matches_digital(tmp_path, capsys):
    chip, dig = tmp_path / "chip.csv", tmp_path / "dig.csv"
    assert main(["eval", "--segments", "20", "--out", str(chip)]) == 0
    line = capsys.readouterr().out.strip()
    assert re.fullmatch(r"\d+/20=\d+\.\d%", line)
    main(["eval", "--segments", "20", "--backend", "digital", "--out", str(dig)])
    strip = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("#")]
    assert strip(chip) == strip(dig)


def test_eval_missing_checkpoint(tmp_path, capsys):
    out = tmp_path / "cm.csv"
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--out", str(out)]) == 2
    assert "not found" in manifest(out)["error"]


def test_sweep_csv_rows(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--trials", "2", "--segments", "5", "--out", str(out)]) == 0
    header, data = read_table(out)
    assert header == ["sigma", "mean", "p5", "p95"]
    assert data[:, 0].tolist() == [0, 0.05, 0.1, 0.2, 0.3, 0.5]


def test_train_small(tmp_path, capsys):
    ck = tmp_path / "net.ckpt"
    args = ["train", "--out", str(ck), "--epochs", "1", "--n-train", "10", "--n-test", "5", "--seed", "2"]
    assert main(args) == 0
    assert ck.exists() and (tmp_path / "net.curve.csv").exists()
    assert main(["eval", "--checkpoint", str(ck), "--segments", "5", "--out", str(tmp_path / "cm.csv")]) == 0


# -- argument handling -------------------------------------------------------


def test_help_lists_every_flag():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0]
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["memreport", "--shape", "8x8x1", "--kernel", "1x1x1x1", "--bogus"])
    assert info.value.code == 2


# -- determinism -------------------------------------------------------------


def _run_twice(tmp_path, make_args, outputs):
    blobs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        assert main(make_args(d)) == 0
        blobs.append({o: (d / o).read_bytes() for o in outputs(d)})
    return blobs


def test_noisy_convolve_is_deterministic(tmp_path, edge_image, capsys):
    make = lambda d: ["convolve", str(edge_image), "--kernel", "sharpen", "--sigma", "0.1", "--seed", "5",
                      "--out", str(d / "o.pgm"), "--csv", str(d / "o.csv")]
    a, b = _run_twice(tmp_path, make, lambda d: ["o.pgm", "o.csv"])
    assert a == b
