"""Invertible multi-scale image transform.

The analysis direction maps an image to a pair (y, z): y is the compact
code that gets quantized and entropy-coded, z carries the remaining
detail and is trained toward a standard normal so the synthesis
direction can run with z = 0.  Each scale applies a 2x2 wavelet step
(space to channels) followed by a stack of [invertible 1x1 convolution,
affine coupling] blocks.  Every constituent is exactly invertible, so
decode(encode(x)) reproduces x up to float roundoff.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvertibilityError, NumericsError, ShapeError

LEAKY_SLOPE = 0.01
DET_FLOOR = 1e-12


def _param(params, name, arr, dtype):
    if name in params:
        raise ValueError(f"duplicate parameter name {name}")
    t = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
    params[name] = t
    return t


class TransformNet:
    """Conv stack K -> 1x1 -> K used inside couplings.

    Hidden convs use leaky-ReLU; the final conv is zero-initialized so a
    fresh network computes the zero function.  When bounded, the output
    passes through tanh, keeping downstream exponent arguments in [-1, 1].
    """

    def __init__(self, params, name, cin, cout, width, ksize, bounded, rng, dtype):
        self.ksize = int(ksize)
        self.pad = self.ksize // 2
        self.bounded = bool(bounded)
        std1 = math.sqrt(2.0 / (self.ksize * self.ksize * cin))
        std2 = math.sqrt(2.0 / width)
        self.w1 = _param(params, f"{name}/conv1/w",
                         rng.normal(0.0, std1, (self.ksize, self.ksize, cin, width)), dtype)
        self.b1 = _param(params, f"{name}/conv1/b", np.zeros(width), dtype)
        self.w2 = _param(params, f"{name}/conv2/w",
                         rng.normal(0.0, std2, (1, 1, width, width)), dtype)
        self.b2 = _param(params, f"{name}/conv2/b", np.zeros(width), dtype)
        self.w3 = _param(params, f"{name}/conv3/w",
                         np.zeros((self.ksize, self.ksize, width, cout)), dtype)
        self.b3 = _param(params, f"{name}/conv3/b", np.zeros(cout), dtype)

    def __call__(self, h):
        h = ad.leaky_relu(ad.bias_add(ad.conv2d(h, self.w1, 1, self.pad), self.b1), LEAKY_SLOPE)
        h = ad.leaky_relu(ad.bias_add(ad.conv2d(h, self.w2, 1, 0), self.b2), LEAKY_SLOPE)
        h = ad.bias_add(ad.conv2d(h, self.w3, 1, self.pad), self.b3)
        if self.bounded:
            h = ad.tanh(h)
        return h


class AffineCoupling:
    """Two-sided affine coupling over a 1:2 channel split.

    Forward updates the low third from the raw high part, then the high
    part from the already-updated low third; the inverse unwinds in the
    opposite order.  Scale branches are tanh-bounded, shift branches are
    linear.
    """

    def __init__(self, params, name, channels, width, ksize, rng, dtype, alpha=1.0):
        if channels % 3:
            raise ShapeError(f"coupling needs channels divisible by 3, got {channels}")
        self.name = name
        self.d = channels // 3
        self.channels = channels
        self.alpha = float(alpha)
        hi = channels - self.d
        self.scale_low = TransformNet(params, f"{name}/scale_low", hi, self.d,
                                      width, ksize, True, rng, dtype)
        self.shift_low = TransformNet(params, f"{name}/shift_low", hi, self.d,
                                      width, ksize, False, rng, dtype)
        self.scale_high = TransformNet(params, f"{name}/scale_high", self.d, hi,
                                       width, ksize, True, rng, dtype)
        self.shift_high = TransformNet(params, f"{name}/shift_high", self.d, hi,
                                       width, ksize, False, rng, dtype)

    def _check_finite(self, s):
        if not np.all(np.isfinite(s.data)):
            raise NumericsError(f"non-finite scale in coupling {self.name}")

    def forward(self, h):
        if h.data.shape[-1] != self.channels:
            raise ShapeError(f"coupling {self.name} expects {self.channels} channels, "
                             f"got {h.data.shape[-1]}")
        h1 = ad.channel_slice(h, 0, self.d)
        h2 = ad.channel_slice(h, self.d, self.channels)
        s1 = self.scale_low(h2)
        self._check_finite(s1)
        y1 = ad.add(ad.mul(h1, ad.exp(ad.mul(s1, self.alpha))), self.shift_low(h2))
        s2 = self.scale_high(y1)
        self._check_finite(s2)
        y2 = ad.add(ad.mul(h2, ad.exp(ad.mul(s2, self.alpha))), self.shift_high(y1))
        return ad.concat_channels([y1, y2])

    def inverse(self, y):
        if y.data.shape[-1] != self.channels:
            raise ShapeError(f"coupling {self.name} expects {self.channels} channels, "
                             f"got {y.data.shape[-1]}")
        y1 = ad.channel_slice(y, 0, self.d)
        y2 = ad.channel_slice(y, self.d, self.channels)
        s2 = self.scale_high(y1)
        self._check_finite(s2)
        h2 = ad.mul(ad.sub(y2, self.shift_high(y1)), ad.exp(ad.mul(s2, -self.alpha)))
        s1 = self.scale_low(h2)
        self._check_finite(s1)
        h1 = ad.mul(ad.sub(y1, self.shift_low(h2)), ad.exp(ad.mul(s1, -self.alpha)))
        return ad.concat_channels([h1, h2])


class InvConv1x1:
    """Learned invertible channel mixing, identity at init."""

    def __init__(self, params, name, channels, dtype):
        self.name = name
        self.channels = channels
        self.w = _param(params, f"{name}/w", np.eye(channels), dtype)

    def _guard(self):
        wd = self.w.data
        if not np.all(np.isfinite(wd)):
            raise InvertibilityError(f"non-finite weights in {self.name}")
        _, logdet = np.linalg.slogdet(wd)
        if not np.isfinite(logdet) or logdet < math.log(DET_FLOOR):
            raise InvertibilityError(f"{self.name} is numerically singular "
                                     f"(log|det| = {logdet:.3g})")

    def forward(self, h):
        self._guard()
        return ad.channel_matmul(h, self.w)

    def inverse(self, h):
        self._guard()
        # channel_matmul applies W^T on the right; feed it inv(W) so the
        # composition with forward cancels exactly
        return ad.channel_matmul(h, ad.matinv(self.w))


@dataclass(frozen=True)
class ScaleSpec:
    """Per-scale architecture: hidden width, conv kernel, coupling count."""
    width: int
    kernel: int
    couplings: int


@dataclass(frozen=True)
class CodecConfig:
    scales: tuple
    in_channels: int = 3
    use_inv1x1: bool = True
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(
            s if isinstance(s, ScaleSpec) else ScaleSpec(*s) for s in self.scales))

    @property
    def levels(self):
        return len(self.scales)

    @property
    def factor(self):
        return 2 ** self.levels

    @property
    def total_channels(self):
        return self.in_channels * 4 ** self.levels

    @property
    def y_channels(self):
        return self.total_channels // 3

    @property
    def z_channels(self):
        return self.total_channels - self.y_channels

    def to_dict(self):
        return {
            "scales": [[s.width, s.kernel, s.couplings] for s in self.scales],
            "in_channels": self.in_channels,
            "use_inv1x1": self.use_inv1x1,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(scales=tuple(ScaleSpec(*s) for s in d["scales"]),
                   in_channels=d["in_channels"],
                   use_inv1x1=d["use_inv1x1"],
                   alpha=d["alpha"])


def desk_preset(**overrides):
    """Small two-scale model for CPU work: 64x64x3 -> y 16x16x16, z 16x16x32."""
    return CodecConfig(scales=(ScaleSpec(64, 3, 2), ScaleSpec(128, 3, 2)), **overrides)


def paper_preset(**overrides):
    """Full four-scale model: 256x256x3 -> y 16x16x256, z 16x16x512."""
    return CodecConfig(scales=(ScaleSpec(0, 0, 0),
                               ScaleSpec(128, 5, 4),
                               ScaleSpec(256, 3, 4),
                               ScaleSpec(1024, 3, 4)), **overrides)


PRESETS = {"desk": desk_preset, "paper": paper_preset}


class InvertibleCodec:
    """The invertible analysis/synthesis transform."""

    def __init__(self, config, rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.dtype = dtype
        self.params = {}
        self._stages = []
        ch = config.in_channels
        for li, spec in enumerate(config.scales):
            ch *= 4
            blocks = []
            if spec.couplings and ch % 3:
                raise ShapeError(f"scale {li}: {ch} channels not divisible by 3")
            for ci in range(spec.couplings):
                name = f"scale{li}/block{ci}"
                mix = (InvConv1x1(self.params, f"{name}/mix", ch, dtype)
                       if config.use_inv1x1 else None)
                coup = AffineCoupling(self.params, f"{name}/coupling", ch,
                                      spec.width, spec.kernel, rng, dtype,
                                      alpha=config.alpha)
                blocks.append((mix, coup))
            self._stages.append(blocks)

    def _check_input(self, x):
        f = self.config.factor
        if x.data.ndim != 4 or x.data.shape[3] != self.config.in_channels:
            raise ShapeError(f"expected NHWC with {self.config.in_channels} channels, "
                             f"got {x.data.shape}")
        if x.data.shape[1] % f or x.data.shape[2] % f:
            raise ShapeError(f"spatial dims {x.data.shape[1:3]} not divisible by {f}")

    def encode(self, x):
        """Image -> (y, z); channels of the final stack split 1:2."""
        self._check_input(x)
        h = x
        for blocks in self._stages:
            h = ad.haar_fwd(h)
            for mix, coup in blocks:
                if mix is not None:
                    h = mix.forward(h)
                h = coup.forward(h)
        yc = self.config.y_channels
        return ad.channel_slice(h, 0, yc), ad.channel_slice(h, yc, h.data.shape[-1])

    def decode(self, y, z):
        """(y, z) -> image; exact inverse of encode."""
        if y.data.shape[-1] != self.config.y_channels:
            raise ShapeError(f"y must have {self.config.y_channels} channels, "
                             f"got {y.data.shape[-1]}")
        if z.data.shape[-1] != self.config.z_channels:
            raise ShapeError(f"z must have {self.config.z_channels} channels, "
                             f"got {z.data.shape[-1]}")
        if y.data.shape[:3] != z.data.shape[:3]:
            raise ShapeError("y and z disagree on batch or spatial dims")
        h = ad.concat_channels([y, z])
        for blocks in reversed(self._stages):
            for mix, coup in reversed(blocks):
                h = coup.inverse(h)
                if mix is not None:
                    h = mix.inverse(h)
            h = ad.haar_inv(h)
        return h

    def state(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)[:3]}, "
                             f"extra {sorted(extra)[:3]}")
        for name, t in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.astype(self.dtype)

    def cast(self, dtype):
        self.dtype = dtype
        ad.cast_params(self.params, dtype)
        return self
