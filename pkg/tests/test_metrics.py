import numpy as np
import pytest

from flowcodec.errors import ShapeError
from flowcodec.metrics import (EvalReport, EvalRow, bits_per_pixel, luma_bt601,
                               ms_ssim, mse, psnr)


class TestPsnr:
    def test_known_value(self):
        a = np.zeros((4, 4))
        b = np.ones((4, 4))  # MSE = 1
        assert psnr(a, b) == pytest.approx(10 * np.log10(255.0 ** 2), rel=1e-9)

    def test_identical_capped(self):
        a = np.full((8, 8, 3), 17.0)
        assert psnr(a, a) == 100.0

    def test_tiny_error_capped(self):
        a = np.zeros((4, 4))
        b = np.full((4, 4), 1e-9)
        assert psnr(a, b) == 100.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_monotone_in_error(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 255, (16, 16, 3))
        assert psnr(a, a + 2) > psnr(a, a + 8)


class TestLuma:
    def test_coefficients(self):
        rgb = np.array([[[100.0, 200.0, 50.0]]])
        want = 0.299 * 100 + 0.587 * 200 + 0.114 * 50
        assert luma_bt601(rgb)[0, 0] == pytest.approx(want)

    def test_white_is_255(self):
        assert luma_bt601(np.full((2, 2, 3), 255.0))[0, 0] == pytest.approx(255.0)

    def test_needs_rgb_axis(self):
        with pytest.raises(ShapeError):
            luma_bt601(np.zeros((4, 4)))


class TestMsSsim:
    def _smooth_image(self, seed, size=256):
        rng = np.random.default_rng(seed)
        img = rng.uniform(0, 255, (size // 8, size // 8))
        img = np.kron(img, np.ones((8, 8)))
        return img + rng.normal(0, 2, (size, size))

    def test_identical_is_one(self):
        img = self._smooth_image(1)
        res = ms_ssim(img, img)
        assert res.value == pytest.approx(1.0, abs=1e-9)
        assert res.scales_used == 5
        assert not res.reduced

    def test_noise_scores_low(self):
        rng = np.random.default_rng(2)
        img = self._smooth_image(3)
        other = rng.uniform(0, 255, img.shape)
        assert ms_ssim(img, other).value < 0.3

    def test_mild_blur_beats_heavy_blur(self):
        img = self._smooth_image(4)

        def blur(x, n):
            for _ in range(n):
                x = (x + np.roll(x, 1, 0) + np.roll(x, 1, 1) + np.roll(np.roll(x, 1, 0), 1, 1)) / 4
            return x

        assert ms_ssim(img, blur(img, 1)).value > ms_ssim(img, blur(img, 8)).value

    def test_small_image_reduces_scales(self):
        img = self._smooth_image(5, size=64)
        res = ms_ssim(img, img + 1)
        assert res.reduced
        assert 1 <= res.scales_used < 5

    def test_too_small_raises(self):
        with pytest.raises(ShapeError):
            ms_ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_matches_reference_implementation(self):
        tf = pytest.importorskip("tensorflow")
        a = self._smooth_image(6)
        b = np.clip(a + np.random.default_rng(7).normal(0, 12, a.shape), 0, 255)
        got = ms_ssim(a, b).value
        want = float(tf.image.ssim_multiscale(
            tf.constant(a[None, :, :, None], dtype=tf.float64),
            tf.constant(b[None, :, :, None], dtype=tf.float64),
            max_val=255.0))
        assert got == pytest.approx(want, abs=5e-3)


class TestBpp:
    def test_basic(self):
        assert bits_per_pixel(1000, (100, 80)) == pytest.approx(1.0)

    def test_prepad_dims(self):
        # bpp must use source pixels, not padded pixels
        assert bits_per_pixel(4096, (63, 65)) == pytest.approx(4096 * 8 / (63 * 65))

    def test_empty_raises(self):
        with pytest.raises(ShapeError):
            bits_per_pixel(10, (0, 4))


class TestEvalReport:
    def _row(self, i, mode="Q"):
        return EvalRow(image=f"img{i}.png", mode=mode, bpp=0.5 + i, psnr=30.0 + i,
                       msssim=0.9, msssim_scales=5, payload_bytes=100, header_bytes=54)

    def test_mean(self):
        rep = EvalReport()
        rep.add(self._row(0))
        rep.add(self._row(2))
        m = rep.mean("Q")
        assert m["n"] == 2
        assert m["psnr"] == pytest.approx(31.0)

    def test_csv_roundtrip(self, tmp_path):
        rep = EvalReport()
        rep.add(self._row(0))
        rep.add(self._row(1, mode="NQ"))
        path = tmp_path / "report.csv"
        rep.write_csv(path)
        back = EvalReport.read_csv(path)
        assert back.rows == rep.rows

    def test_jsonl(self, tmp_path):
        import json
        rep = EvalReport(provenance={"seed": 7})
        rep.add(self._row(0))
        path = tmp_path / "report.jsonl"
        rep.write_jsonl(path)
        lines = path.read_text().splitlines()
        assert json.loads(lines[0]) == {"provenance": {"seed": 7}}
        rec = json.loads(lines[1])
        assert rec["image"] == "img0.png"
        assert rec["mode"] == "Q"
        assert json.loads(lines[-1])["image"] == "average"

    def test_csv_provenance_and_average(self, tmp_path):
        rep = EvalReport(provenance={"config_hash": "ab12", "code_version": "0.1.0"})
        rep.add(self._row(0))
        rep.add(self._row(2))
        path = tmp_path / "report.csv"
        rep.write_csv(path)
        text = path.read_text().splitlines()
        assert text[0].startswith("#")
        assert "ab12" in text[0]
        assert text[-1].startswith("average,Q,")
        back = EvalReport.read_csv(path)
        assert back.provenance == rep.provenance
        assert back.rows == rep.rows

    def test_plot_pairs(self):
        rep = EvalReport()
        rep.add(self._row(0))
        rep.add(self._row(1))
        rep.add(self._row(2, mode="NQ"))
        assert rep.plot_pairs("Q") == [(0.5, 30.0), (1.5, 31.0)]
