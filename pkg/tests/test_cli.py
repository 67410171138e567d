"""Command-line behavior: config plumbing, file pipeline, exit codes."""

import argparse
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from flowcodec import __version__
from flowcodec.cli import (_parse_ablate, build_train_config, main,
                           pad_to_factor, parse_config_file)
from flowcodec.errors import ConfigError
from flowcodec.training import load_image, save_image


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    rng = np.random.default_rng(42)
    for i in range(3):
        xx, yy = np.meshgrid(np.linspace(0, 1, 48), np.linspace(0, 1, 48))
        img = np.stack([xx, 1 - yy, 0.5 + 0.3 * np.cos(7 * xx)], -1)
        img = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
        save_image(root / f"img{i}.png", img)
    return root


@pytest.fixture(scope="module")
def codec_ckpt(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    rc = main(["train", "--preset", "desk", "--seed", "3", "--steps", "4",
               "--batch-size", "1", "--crop", "32", "--ablate", "noKDM",
               "--data-dir", str(corpus), "--out-dir", str(out),
               "--eval-every", "4", "--checkpoint-every", "4"])
    assert rc == 0
    return str(out / "ckpt_0000004.fck")


@pytest.fixture(scope="module")
def other_ckpt(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run_b")
    rc = main(["train", "--preset", "desk", "--seed", "9", "--steps", "2",
               "--batch-size", "1", "--crop", "32", "--ablate", "noKDM",
               "--data-dir", str(corpus), "--out-dir", str(out),
               "--eval-every", "2", "--checkpoint-every", "2"])
    assert rc == 0
    return str(out / "ckpt_0000002.fck")


# ---------------------------------------------------------------------------
# config plumbing


class TestConfigFile:
    def test_comments_and_blanks(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# a comment\n\nseed = 7  # trailing\ncrop=48\n")
        assert parse_config_file(path) == {"seed": "7", "crop": "48"}

    def test_bad_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed 7\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_file(path)

    def _args(self, **kw):
        ns = argparse.Namespace(config=None, ablate=None)
        for key in ("preset", "seed", "steps", "batch_size", "crop",
                    "data_dir", "out_dir", "lambda1", "lambda2", "lambda3",
                    "lambda4", "lr_iem", "lr_em", "eval_every",
                    "checkpoint_every"):
            setattr(ns, key, None)
        for key, value in kw.items():
            setattr(ns, key, value)
        return ns

    def test_flag_beats_config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 7\ncrop = 48\nnokdm = true\n")
        cfg = build_train_config(self._args(config=str(path), seed=11))
        assert cfg.seed == 11
        assert cfg.crop == 48
        assert cfg.nokdm is True

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("sede = 7\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            build_train_config(self._args(config=str(path)))

    def test_bad_bool(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("no1x1 = maybe\n")
        with pytest.raises(ConfigError, match="boolean"):
            build_train_config(self._args(config=str(path)))

    def test_ablate_spec(self):
        assert _parse_ablate("no1x1") == {"no1x1": True, "nokdm": False}
        assert _parse_ablate("noKDM") == {"no1x1": False, "nokdm": True}
        assert _parse_ablate("no1x1,noKDM") == {"no1x1": True, "nokdm": True}
        assert _parse_ablate("no_1x1") == {"no1x1": True, "nokdm": False}
        with pytest.raises(ConfigError, match="unknown ablation"):
            _parse_ablate("no2x2")


class TestPadding:
    def test_multiples_unchanged(self):
        img = np.random.default_rng(0).random((8, 12, 3))
        assert pad_to_factor(img, 4).shape == (8, 12, 3)
        assert np.array_equal(pad_to_factor(img, 4), img)

    def test_edge_replication(self):
        img = np.arange(6, dtype=float).reshape(2, 3, 1)
        out = pad_to_factor(img, 4)
        assert out.shape == (4, 4, 1)
        assert np.array_equal(out[2], out[1])
        assert np.array_equal(out[3], out[1])
        assert np.array_equal(out[:, 3], out[:, 2])


# ---------------------------------------------------------------------------
# file pipeline


class TestCompressDecompress:
    def test_roundtrip_even_size(self, corpus, codec_ckpt, tmp_path, capsys):
        src = str(corpus / "img0.png")
        ilc = str(tmp_path / "img0.ilc")
        png = str(tmp_path / "img0_out.png")
        assert main(["compress", src, ilc, "--checkpoint", codec_ckpt]) == 0
        out = capsys.readouterr().out
        assert "bytes" in out and "bpp" in out
        assert main(["decompress", ilc, png, "--checkpoint", codec_ckpt]) == 0
        assert "48x48" in capsys.readouterr().out
        back = load_image(png)
        assert back.shape == (48, 48, 3)

    @pytest.mark.parametrize("size", [(45, 37), (17, 63), (33, 20)])
    def test_odd_sizes_pad_and_crop(self, codec_ckpt, tmp_path, size):
        h, w = size
        rng = np.random.default_rng(h * 100 + w)
        src = tmp_path / f"odd_{h}x{w}.png"
        save_image(src, rng.random((h, w, 3)))
        ilc = str(tmp_path / f"odd_{h}x{w}.ilc")
        png = str(tmp_path / f"odd_{h}x{w}_out.png")
        assert main(["compress", str(src), ilc,
                     "--checkpoint", codec_ckpt]) == 0
        assert main(["decompress", ilc, png,
                     "--checkpoint", codec_ckpt]) == 0
        assert load_image(png).shape == (h, w, 3)

    def test_decompress_deterministic(self, corpus, codec_ckpt, tmp_path):
        src = str(corpus / "img1.png")
        ilc = str(tmp_path / "x.ilc")
        main(["compress", src, ilc, "--checkpoint", codec_ckpt])
        a = str(tmp_path / "a.png")
        b = str(tmp_path / "b.png")
        main(["decompress", ilc, a, "--checkpoint", codec_ckpt])
        main(["decompress", ilc, b, "--checkpoint", codec_ckpt])
        assert Path(a).read_bytes() == Path(b).read_bytes()

    def test_nq_stream_roundtrips_input(self, corpus, codec_ckpt, tmp_path):
        src = corpus / "img2.png"
        ilc = str(tmp_path / "nq.ilc")
        png = str(tmp_path / "nq.png")
        main(["compress", str(src), ilc, "--checkpoint", codec_ckpt, "--nq"])
        main(["decompress", ilc, png, "--checkpoint", codec_ckpt])
        ref = load_image(src)
        back = load_image(png)
        # only the discarded detail code and 8-bit rounding stand between them
        assert np.mean((ref - back) ** 2) < np.mean((ref - 0.5) ** 2)

    def test_nq_bpp_is_code_size(self, corpus, codec_ckpt, tmp_path, capsys):
        src = str(corpus / "img0.png")
        ilc = str(tmp_path / "nq.ilc")
        main(["compress", src, ilc, "--checkpoint", codec_ckpt, "--nq"])
        out = capsys.readouterr().out
        # 16 channels of float32 at 1/16 the pixels: 32 bits per pixel
        assert "32.0000 bpp" in out

    def test_sample_z_zero_matches_default(self, corpus, codec_ckpt,
                                           tmp_path):
        src = str(corpus / "img0.png")
        ilc = str(tmp_path / "x.ilc")
        main(["compress", src, ilc, "--checkpoint", codec_ckpt])
        plain = str(tmp_path / "plain.png")
        zero = str(tmp_path / "zero.png")
        drawn = str(tmp_path / "drawn.png")
        main(["decompress", ilc, plain, "--checkpoint", codec_ckpt])
        main(["decompress", ilc, zero, "--checkpoint", codec_ckpt,
              "--sample-z", "0.0"])
        main(["decompress", ilc, drawn, "--checkpoint", codec_ckpt,
              "--sample-z", "1.0", "--seed", "1"])
        assert Path(plain).read_bytes() == Path(zero).read_bytes()
        assert Path(plain).read_bytes() != Path(drawn).read_bytes()

    def test_external_tables_need_matching_model(self, corpus, codec_ckpt,
                                                 tmp_path):
        src = str(corpus / "img0.png")
        ilc = str(tmp_path / "x.ilc")
        main(["compress", src, ilc, "--checkpoint", codec_ckpt,
              "--no-embed-tables"])
        png = str(tmp_path / "x.png")
        assert main(["decompress", ilc, png,
                     "--checkpoint", codec_ckpt]) == 0


# ---------------------------------------------------------------------------
# exit codes


class TestExitCodes:
    def test_missing_dataset_dir(self, tmp_path, capsys):
        rc = main(["train", "--data-dir", str(tmp_path / "nope"),
                   "--out-dir", str(tmp_path), "--steps", "1",
                   "--ablate", "noKDM"])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_wrong_checkpoint_kind(self, corpus, tmp_path, capsys):
        out = tmp_path / "teach"
        rc = main(["train-teacher", "--preset", "desk", "--steps", "1",
                   "--batch-size", "1", "--crop", "32",
                   "--data-dir", str(corpus), "--out-dir", str(out)])
        assert rc == 0
        capsys.readouterr()
        rc = main(["compress", str(corpus / "img0.png"),
                   str(tmp_path / "x.ilc"),
                   "--checkpoint", str(out / "teacher.fck")])
        assert rc == 2
        assert "teacher" in capsys.readouterr().err

    def test_corrupt_stream(self, corpus, codec_ckpt, tmp_path, capsys):
        src = str(corpus / "img0.png")
        ilc = tmp_path / "x.ilc"
        main(["compress", src, str(ilc), "--checkpoint", codec_ckpt])
        blob = bytearray(ilc.read_bytes())
        blob[0] ^= 0xFF
        ilc.write_bytes(bytes(blob))
        capsys.readouterr()
        rc = main(["decompress", str(ilc), str(tmp_path / "x.png"),
                   "--checkpoint", codec_ckpt])
        assert rc == 2

    def test_truncated_stream(self, corpus, codec_ckpt, tmp_path):
        src = str(corpus / "img0.png")
        ilc = tmp_path / "x.ilc"
        main(["compress", src, str(ilc), "--checkpoint", codec_ckpt])
        ilc.write_bytes(ilc.read_bytes()[:10])
        rc = main(["decompress", str(ilc), str(tmp_path / "x.png"),
                   "--checkpoint", codec_ckpt])
        assert rc == 2

    def test_stream_bound_to_weights(self, corpus, codec_ckpt, other_ckpt,
                                     tmp_path, capsys):
        src = str(corpus / "img0.png")
        ilc = str(tmp_path / "x.ilc")
        main(["compress", src, ilc, "--checkpoint", codec_ckpt])
        capsys.readouterr()
        rc = main(["decompress", ilc, str(tmp_path / "x.png"),
                   "--checkpoint", other_ckpt])
        assert rc == 2
        assert "different weights" in capsys.readouterr().err

    def test_missing_input_file(self, codec_ckpt, tmp_path):
        rc = main(["compress", str(tmp_path / "ghost.png"),
                   str(tmp_path / "x.ilc"), "--checkpoint", codec_ckpt])
        assert rc == 2


# ---------------------------------------------------------------------------
# self-checks


class TestCheck:
    def test_all_pass(self, capsys):
        assert main(["check"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 6
        assert "FAIL" not in out

    def test_injected_fault_caught(self, capsys):
        rc = main(["check", "--inject-fault", "exp.x:1.5"])
        assert rc == 1
        out = capsys.readouterr().out
        assert "FAIL coupling" in out
        assert out.count("PASS") >= 4

    def test_fault_cleared_afterwards(self, capsys):
        main(["check", "--inject-fault", "exp.x:1.5"])
        capsys.readouterr()
        assert main(["check"]) == 0


# ---------------------------------------------------------------------------
# evaluation reports


@pytest.fixture(scope="module")
def report_base(corpus, codec_ckpt, tmp_path_factory):
    out = tmp_path_factory.mktemp("report") / "rep"
    rc = main(["eval", "--checkpoint", codec_ckpt,
               "--data-dir", str(corpus), "--out", str(out)])
    assert rc == 0
    return out


class TestEval:
    def test_report_rows(self, report_base):
        lines = report_base.with_suffix(".csv").read_text().splitlines()
        assert lines[0].startswith("# {")
        rows = [l for l in lines[2:] if l]
        # 3 images x 2 modes, plus one average row per mode
        assert len(rows) == 8
        assert sum(1 for r in rows if r.startswith("average,")) == 2

    def test_provenance(self, report_base):
        first = json.loads(
            report_base.with_suffix(".jsonl").read_text().splitlines()[0])
        prov = first["provenance"]
        assert prov["checkpoint_step"] == 4
        assert len(prov["arch_hash"]) == 32
        assert prov["config"]["seed"] == 3
        assert "data_dir" not in prov["config"]

    def test_mean_lines_printed(self, corpus, codec_ckpt, tmp_path, capsys):
        out = tmp_path / "rep2"
        main(["eval", "--checkpoint", codec_ckpt, "--data-dir", str(corpus),
              "--out", str(out)])
        text = capsys.readouterr().out
        assert "Q: n=3" in text
        assert "NQ: n=3" in text

    def test_nq_only(self, corpus, codec_ckpt, tmp_path, capsys):
        out = tmp_path / "rep3"
        main(["eval", "--checkpoint", codec_ckpt, "--data-dir", str(corpus),
              "--out", str(out), "--nq"])
        text = capsys.readouterr().out
        assert "NQ: n=3" in text
        assert "\nQ:" not in "\n" + text

    def test_plot_data(self, report_base, capsys):
        assert main(["plot-data", "--report",
                     str(report_base.with_suffix(".csv"))]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 4
        for line in lines:
            bpp, db = line.split()
            float(bpp), float(db)

    def test_plot_data_average_only(self, report_base, capsys):
        assert main(["plot-data", "--report",
                     str(report_base.with_suffix(".csv")),
                     "--mode", "NQ", "--average-only"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1


# ---------------------------------------------------------------------------
# entry point


class TestEntryPoint:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "flowcodec.cli",
                               "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert __version__ in proc.stdout
