import logging

import numpy as np
import pytest

from nwcrf.checkpoint import load_checkpoint
from nwcrf.cli import main
from nwcrf.metrics import CSV_HEADER, read_metrics_csv
from nwcrf.netpbm import (NetpbmError, decode_depth, encode_depth, read_depth_pgm, read_pgm,
                          read_ppm, write_depth_pgm, write_pgm16, write_ppm)

TINY_CFG = """\
# small model for fast command-line tests
seed = 0
model.heads = 2, 2, 1, 1
model.head_dim = 4
model.encoder_widths = 4, 6, 8, 8
model.window_size = 2
data.height = 32
data.width = 32
data.train_size = 4
data.val_size = 2
train.steps = 3
train.batch_size = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG, encoding="utf-8")
    return path


@pytest.fixture
def trained(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    return out


class TestNetpbm:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0
        write_ppm(tmp_path / "a.ppm", img)
        assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)

    def test_header_comments(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n# max\n255\n" + bytes(range(6)))
        assert read_ppm(tmp_path / "c.ppm").shape == (1, 2, 3)

    @pytest.mark.parametrize("raw", [b"P5\n1 1\n255\n\0", b"P6\n2 2\n255\n\0\0", b"P6\n2", b""])
    def test_invalid_ppm(self, tmp_path, raw):
        (tmp_path / "bad.ppm").write_bytes(raw)
        with pytest.raises(NetpbmError):
            read_ppm(tmp_path / "bad.ppm")

    def test_pgm16_is_big_endian(self, tmp_path):
        write_pgm16(tmp_path / "d.pgm", np.array([[256, 65535]], dtype=np.uint16))
        raw = (tmp_path / "d.pgm").read_bytes()
        assert raw.startswith(b"P5\n2 1\n65535\n") and raw.endswith(b"\x01\x00\xff\xff")
        assert np.array_equal(read_pgm(tmp_path / "d.pgm"), [[256, 65535]])

    def test_depth_scale(self):
        assert encode_depth(np.array([1.0]))[0] == 256
        assert decode_depth(np.array([512]))[0] == 2.0

    def test_saturation_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert encode_depth(np.array([300.0]))[0] == 65535
        assert "saturated" in caplog.text

    def test_depth_round_trip_precision(self, tmp_path):
        depth = np.random.default_rng(1).uniform(0.5, 200.0, size=(6, 6))
        write_depth_pgm(tmp_path / "d.pgm", depth)
        assert np.max(np.abs(read_depth_pgm(tmp_path / "d.pgm") - depth)) <= 1 / 256


class TestTrainCommand:
    def test_writes_outputs(self, trained):
        assert (trained / "checkpoint.nwcf").is_file()
        rows = (trained / "loss.csv").read_text().splitlines()
        assert rows[0] == "step,lr,loss" and len(rows) == 4
        assert CSV_HEADER in (trained / "metrics.csv").read_text()

    def test_zero_steps(self, tmp_path, cfg_file):
        out = tmp_path / "zero"
        assert main(["train", "--config", str(cfg_file), "--steps", "0", "--out", str(out)]) == 0
        assert (out / "loss.csv").read_text().splitlines() == ["step,lr,loss"]
        assert load_checkpoint(out / "checkpoint.nwcf").step == 0

    def test_override_wins(self, tmp_path, cfg_file):
        out = tmp_path / "ov"
        assert main(["train", "--config", str(cfg_file), "--override", "steps=1", "--out", str(out)]) == 0
        assert len((out / "loss.csv").read_text().splitlines()) == 2

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 2

    def test_unknown_key_reported(self, tmp_path, cfg_file, capsys):
        code = main(["train", "--config", str(cfg_file), "--override", "model.depth=3",
                     "--out", str(tmp_path)])
        assert code == 2 and "model.depth" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, tmp_path, cfg_file):
        code = main(["train", "--config", str(cfg_file), "--override", "train.lr_start=1e300",
                     "--override", "train.lr_end=1e300", "--out", str(tmp_path / "nan")])
        assert code == 3

    def test_rerun_is_idempotent(self, tmp_path, cfg_file, trained):
        first = (trained / "checkpoint.nwcf").read_bytes()
        assert main(["train", "--config", str(cfg_file), "--out", str(trained)]) == 0
        assert (trained / "checkpoint.nwcf").read_bytes() == first


class TestEvalCommand:
    def test_split(self, trained, tmp_path, capsys):
        out = tmp_path / "m.csv"
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.nwcf"), "--out", str(out)]) == 0
        report = read_metrics_csv(out.read_text())
        assert report.abs_rel > 0 and CSV_HEADER in capsys.readouterr().out

    def test_directory_dataset_with_threads(self, trained, tmp_path, monkeypatch):
        data = tmp_path / "data"
        assert main(["synth", "--out", str(data), "--count", "3", "--height", "32", "--width", "32"]) == 0
        ckpt = str(trained / "checkpoint.nwcf")
        assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path / "a.csv")]) == 0
        monkeypatch.setenv("NWCRF_THREADS", "3")
        assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()

    def test_cap(self, trained, tmp_path):
        ckpt = str(trained / "checkpoint.nwcf")
        main(["eval", "--checkpoint", ckpt, "--cap", "10", "--out", str(tmp_path / "c10.csv")])
        main(["eval", "--checkpoint", ckpt, "--cap", "2", "--out", str(tmp_path / "c2.csv")])
        r10 = read_metrics_csv((tmp_path / "c10.csv").read_text())
        r2 = read_metrics_csv((tmp_path / "c2.csv").read_text())
        assert r10 != r2

    def test_empty_dataset(self, trained, tmp_path):
        (tmp_path / "empty").mkdir()
        (tmp_path / "empty" / "index.txt").write_text("")
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.nwcf"),
                     "--data", str(tmp_path / "empty")]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.nwcf")]) == 4

    def test_corrupt_checkpoint(self, trained, tmp_path):
        bad = tmp_path / "bad.nwcf"
        bad.write_bytes((trained / "checkpoint.nwcf").read_bytes()[:100])
        assert main(["eval", "--checkpoint", str(bad)]) == 4


class TestInferCommand:
    def test_extents_and_sidecar(self, trained, tmp_path):
        write_ppm(tmp_path / "in.ppm", np.random.default_rng(2).uniform(size=(64, 64, 3)))
        out = tmp_path / "depth.pgm"
        assert main(["infer", "--checkpoint", str(trained / "checkpoint.nwcf"),
                     "--image", str(tmp_path / "in.ppm"), "--out", str(out)]) == 0
        assert read_pgm(out).shape == (64, 64) and read_pgm(out).dtype == np.uint16
        assert "256" in (tmp_path / "depth.pgm.scale.txt").read_text()

    def test_padding_for_odd_extents(self, trained, tmp_path):
        write_ppm(tmp_path / "odd.ppm", np.random.default_rng(3).uniform(size=(40, 50, 3)))
        out = tmp_path / "odd.pgm"
        assert main(["infer", "--checkpoint", str(trained / "checkpoint.nwcf"),
                     "--image", str(tmp_path / "odd.ppm"), "--out", str(out)]) == 0
        assert read_pgm(out).shape == (40, 50)

    def test_invalid_image(self, trained, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"not an image")
        assert main(["infer", "--checkpoint", str(trained / "checkpoint.nwcf"),
                     "--image", str(tmp_path / "x.ppm"), "--out", str(tmp_path / "o.pgm")]) == 2

    def test_checkpoint_mismatch(self, tmp_path):
        write_ppm(tmp_path / "in.ppm", np.zeros((32, 32, 3)))
        (tmp_path / "c.nwcf").write_bytes(b"XXXX" + bytes(20))
        assert main(["infer", "--checkpoint", str(tmp_path / "c.nwcf"),
                     "--image", str(tmp_path / "in.ppm"), "--out", str(tmp_path / "o.pgm")]) == 4


class TestCheckCommand:
    def test_whole_window(self, capsys):
        assert main(["check", "--grid", "8", "8", "--window", "8"]) == 0
        out = capsys.readouterr().out
        assert "window formula 4032 vs measured 4032" in out
        assert "dense formula 4032 vs measured 4032" in out
        assert out.count("PASS") == 4

    def test_small_windows(self, capsys):
        assert main(["check", "--grid", "8", "8", "--window", "2"]) == 0
        out = capsys.readouterr().out
        assert "window formula 192 vs measured 192" in out and "dense formula 4032" in out

    def test_window_exceeds_grid(self):
        assert main(["check", "--grid", "8", "8", "--window", "16"]) == 2

    def test_grid_too_large(self):
        assert main(["check", "--grid", "13", "8", "--window", "2"]) == 2

    def test_failed_property(self, capsys):
        # singleton windows can never link neighbours
        assert main(["check", "--grid", "4", "4", "--window", "1"]) == 5
        assert "shift-connectivity" in capsys.readouterr().err


class TestSynthCommand:
    def test_index_and_files(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--count", "2", "--height", "32", "--width", "32"]) == 0
        lines = (tmp_path / "index.txt").read_text().splitlines()
        assert len(lines) == 2
        img, depth = lines[0].split("\t")
        assert read_ppm(tmp_path / img).shape == (32, 32, 3)
        assert read_pgm(tmp_path / depth).dtype == np.uint16

    def test_bad_count(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--count", "0"]) == 2

    def test_usage_error(self):
        assert main(["frobnicate"]) == 2
