"""Image quality metrics and rate accounting.

PSNR works on RGB in 0..255 units.  MS-SSIM runs on BT.601 full-range
luma with the standard 5-scale weights, an 11-tap Gaussian window
(sigma 1.5), valid-mode filtering, and 2x2 average-pool downsampling;
images too small for all five scales use as many scales as fit, with
the weights renormalized and the reduction flagged in the result.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PSNR_CAP = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN = 11
_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def mse(a, b):
    """Mean squared error between arrays in 0..255 units."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak=255.0):
    """10*log10(peak^2 / MSE), capped at 100 dB for (near-)identical inputs."""
    err = mse(a, b)
    if err <= 0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / err), PSNR_CAP)


def luma_bt601(rgb):
    """Full-range BT.601 luma from an (..., 3) RGB array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ShapeError(f"expected trailing RGB axis, got {rgb.shape}")
    return rgb @ np.array([0.299, 0.587, 0.114])


def _gaussian_window(n=_WIN, sigma=_SIGMA):
    x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, win):
    v = sliding_window_view(img, win.size, axis=0)
    v = np.tensordot(v, win, axes=([2], [0]))
    h = sliding_window_view(v, win.size, axis=1)
    return np.tensordot(h, win, axes=([2], [0]))


def _downsample2(img):
    h2, w2 = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    return img[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2).mean(axis=(1, 3))


def _ssim_maps(a, b, peak):
    win = _gaussian_window()
    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    mu1 = _filter_valid(a, win)
    mu2 = _filter_valid(b, win)
    s11 = _filter_valid(a * a, win) - mu1 * mu1
    s22 = _filter_valid(b * b, win) - mu2 * mu2
    s12 = _filter_valid(a * b, win) - mu1 * mu2
    cs = (2.0 * s12 + c2) / (s11 + s22 + c2)
    lum = (2.0 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1)
    return lum, cs


@dataclass
class MsSsimResult:
    value: float
    scales_used: int
    reduced: bool

    def __float__(self):
        return self.value


def ms_ssim(a, b, peak=255.0):
    """Multi-scale SSIM on 2-D luma arrays in 0..peak units."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ms_ssim needs matching 2-D arrays, got {a.shape}, {b.shape}")
    n_scales = 0
    sa, sb = a, b
    sizes = []
    while n_scales < len(MSSSIM_WEIGHTS) and min(sa.shape) >= _WIN:
        sizes.append(sa.shape)
        n_scales += 1
        if n_scales < len(MSSSIM_WEIGHTS):
            sa, sb = _downsample2(sa), _downsample2(sb)
            if min(sa.shape) < _WIN:
                break
    if n_scales == 0:
        raise ShapeError(f"image {a.shape} smaller than the {_WIN}x{_WIN} window")
    weights = np.asarray(MSSSIM_WEIGHTS[:n_scales])
    weights = weights / weights.sum()

    sa, sb = a, b
    score = 1.0
    for k in range(n_scales):
        lum, cs = _ssim_maps(sa, sb, peak)
        cs_mean = float(np.mean(np.maximum(cs, 0.0)))
        if k == n_scales - 1:
            last = float(np.mean(np.maximum(lum * cs, 0.0)))
            score *= last ** weights[k]
        else:
            score *= cs_mean ** weights[k]
            sa, sb = _downsample2(sa), _downsample2(sb)
    return MsSsimResult(value=float(score), scales_used=n_scales,
                        reduced=n_scales < len(MSSSIM_WEIGHTS))


def bits_per_pixel(payload_bytes, orig_size):
    """Payload bits per source pixel (pre-padding dimensions)."""
    h, w = orig_size
    if h * w == 0:
        raise ShapeError("empty image has no bpp")
    return payload_bytes * 8.0 / (h * w)


@dataclass
class EvalRow:
    image: str
    mode: str                 # "Q" or "NQ"
    bpp: float
    psnr: float
    msssim: float
    msssim_scales: int
    payload_bytes: int
    header_bytes: int


AVERAGE_ROW = "average"


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, row):
        self.rows.append(row)

    def modes(self):
        return sorted({r.mode for r in self.rows})

    def mean(self, mode):
        rows = [r for r in self.rows
                if r.mode == mode and r.image != AVERAGE_ROW]
        if not rows:
            raise ValueError(f"no rows with mode {mode!r}")
        return {
            "mode": mode,
            "n": len(rows),
            "bpp": sum(r.bpp for r in rows) / len(rows),
            "psnr": sum(r.psnr for r in rows) / len(rows),
            "msssim": sum(r.msssim for r in rows) / len(rows),
        }

    def _average_rows(self):
        out = []
        for mode in self.modes():
            m = self.mean(mode)
            out.append(EvalRow(image=AVERAGE_ROW, mode=mode, bpp=m["bpp"],
                               psnr=m["psnr"], msssim=m["msssim"],
                               msssim_scales=0, payload_bytes=0,
                               header_bytes=0))
        return out

    def write_csv(self, path):
        fields = [f.name for f in EvalRow.__dataclass_fields__.values()]
        with open(path, "w", newline="") as f:
            f.write("# " + json.dumps(self.provenance, sort_keys=True) + "\n")
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for r in self.rows + self._average_rows():
                writer.writerow(asdict(r))

    def write_jsonl(self, path):
        with open(path, "w") as f:
            f.write(json.dumps({"provenance": self.provenance},
                               sort_keys=True) + "\n")
            for r in self.rows + self._average_rows():
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def read_csv(cls, path):
        report = cls()
        with open(path, newline="") as f:
            first = f.readline()
            if first.startswith("#"):
                report.provenance = json.loads(first[1:])
            else:
                f.seek(0)
            for rec in csv.DictReader(f):
                row = EvalRow(
                    image=rec["image"], mode=rec["mode"], bpp=float(rec["bpp"]),
                    psnr=float(rec["psnr"]), msssim=float(rec["msssim"]),
                    msssim_scales=int(rec["msssim_scales"]),
                    payload_bytes=int(rec["payload_bytes"]),
                    header_bytes=int(rec["header_bytes"]))
                if row.image != AVERAGE_ROW:
                    report.add(row)
        return report

    def plot_pairs(self, mode):
        """(bpp, psnr) pairs for rate-distortion plotting."""
        return [(r.bpp, r.psnr) for r in self.rows if r.mode == mode]
