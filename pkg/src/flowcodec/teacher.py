"""Convolutional autoencoder used as a latent-space distillation target.

The encoder halves resolution once per stride-2 stage, so its output grid
matches the invertible codec's coarse latent when both use the same number
of levels, and ``out_channels`` is chosen to match that latent's channel
count.  The decoder mirrors it with stride-2 transposed convolutions
(kernel 4, padding 1: exact doubling).  A factorized entropy model rides
along so the teacher can be trained with a genuine rate term, and its
fitted tables can seed the codec's entropy model.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .entropy import FactorizedEntropyModel
from .errors import ShapeError

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class TeacherConfig:
    stages: int
    hidden: int
    out_channels: int
    in_channels: int = 3
    kernel: int = 5

    @property
    def factor(self):
        return 2 ** self.stages

    def to_dict(self):
        return {"stages": self.stages, "hidden": self.hidden,
                "out_channels": self.out_channels,
                "in_channels": self.in_channels, "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_teacher():
    return TeacherConfig(stages=2, hidden=64, out_channels=16)


def paper_teacher():
    return TeacherConfig(stages=4, hidden=256, out_channels=256)


TEACHER_PRESETS = {"desk": desk_teacher, "paper": paper_teacher}


def _he_conv(rng, kh, kw, cin, cout, dtype):
    fan_in = kh * kw * cin
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kh, kw, cin, cout))
    return w.astype(dtype)


class TeacherModel:
    """Plain strided autoencoder with an attached entropy model."""

    def __init__(self, config, rng=None, dtype=np.float32, name="teacher"):
        if config.stages < 1:
            raise ShapeError("teacher needs at least one stride-2 stage")
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.name = name
        self.dtype = np.dtype(dtype)
        self.params = {}
        c = config
        k = c.kernel
        enc_ch = [c.in_channels] + [c.hidden] * (c.stages - 1) + [c.out_channels]
        for i in range(c.stages):
            self._add(f"enc{i}/w", _he_conv(rng, k, k, enc_ch[i], enc_ch[i + 1],
                                            self.dtype))
            self._add(f"enc{i}/b", np.zeros(enc_ch[i + 1], self.dtype))
        dec_ch = [c.out_channels] + [c.hidden] * (c.stages - 1) + [c.in_channels]
        for i in range(c.stages):
            self._add(f"dec{i}/w", _he_conv(rng, 4, 4, dec_ch[i], dec_ch[i + 1],
                                            self.dtype))
            self._add(f"dec{i}/b", np.zeros(dec_ch[i + 1], self.dtype))
        self.entropy = FactorizedEntropyModel(c.out_channels, rng=rng,
                                              dtype=self.dtype,
                                              name=f"{name}/em")

    def _add(self, key, value):
        self.params[f"{self.name}/{key}"] = ad.Tensor(value, requires_grad=True)

    def _p(self, key):
        return self.params[f"{self.name}/{key}"]

    def encode(self, x):
        c = self.config
        if x.data.ndim != 4 or x.data.shape[3] != c.in_channels:
            raise ShapeError(f"teacher expects NHWC with {c.in_channels} "
                             f"channels, got {x.data.shape}")
        if x.data.shape[1] % c.factor or x.data.shape[2] % c.factor:
            raise ShapeError(f"spatial dims {x.data.shape[1:3]} not divisible "
                             f"by {c.factor}")
        pad = c.kernel // 2
        h = x
        for i in range(c.stages):
            h = ad.conv2d(h, self._p(f"enc{i}/w"), stride=2, padding=pad)
            h = ad.bias_add(h, self._p(f"enc{i}/b"))
            if i < c.stages - 1:
                h = ad.leaky_relu(h, LEAKY_SLOPE)
        return h

    def decode(self, y):
        c = self.config
        if y.data.ndim != 4 or y.data.shape[3] != c.out_channels:
            raise ShapeError(f"teacher latent must be NHWC with "
                             f"{c.out_channels} channels, got {y.data.shape}")
        h = y
        for i in range(c.stages):
            h = ad.conv2d_transpose(h, self._p(f"dec{i}/w"), stride=2,
                                    padding=1)
            h = ad.bias_add(h, self._p(f"dec{i}/b"))
            if i < c.stages - 1:
                h = ad.leaky_relu(h, LEAKY_SLOPE)
        return h

    def all_params(self):
        out = dict(self.params)
        out.update(self.entropy.params)
        return out

    def state(self):
        return {k: v.data.copy() for k, v in self.all_params().items()}

    def load_state(self, state):
        params = self.all_params()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ShapeError(f"teacher state mismatch: missing {missing}, "
                             f"extra {extra}")
        for k, t in params.items():
            if state[k].shape != t.data.shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != "
                                 f"{t.data.shape}")
            t.data = np.asarray(state[k], dtype=t.data.dtype)

    def cast(self, dtype):
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)
        self.entropy.cast(dtype)
        return self
