"""Training: the four-term objective, Adam with grouped learning rates,
the decay schedule, the patch pipeline, and the teacher/codec loops.

One `numpy` Generator drives initialization, patch sampling, and rate
noise in a fixed draw order, and its state rides along in every
checkpoint, so a resumed run replays the exact trajectory of an
uninterrupted one. Held-out evaluation patches come from an independent
generator derived from the seed, so evaluating never perturbs training.
"""

import csv
import hashlib
import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from . import autodiff as ad
from .autodiff import GradTape, Tensor, backward
from .checkpoint import (load_checkpoint, rng_from_json, rng_state_to_json,
                         save_checkpoint)
from .entropy import FactorizedEntropyModel, uniform_noise
from .errors import (CheckpointError, ConfigError, InvertibilityError,
                     NumericsError, ShapeError)
from .invnet import CodecConfig, InvertibleCodec, PRESETS
from .metrics import psnr
from .teacher import TEACHER_PRESETS, TeacherConfig, TeacherModel

HALF_LN_TWO_PI = 0.5 * math.log(2.0 * math.pi)

# derived-generator tags so eval never consumes training draws
EVAL_STREAM = 0x45564131


# ---------------------------------------------------------------------------
# configuration


@dataclass
class LossWeights:
    """Multipliers for distortion, rate, divergence-from-normal, distillation."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1e-2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")


@dataclass
class TrainConfig:
    preset: str = "desk"
    seed: int = 0
    steps: int = 5000
    batch_size: int = 4
    crop: int = 64
    data_dir: str = ""
    out_dir: str = ""
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1e-2
    lr_iem: float = 1e-4
    lr_em: float = 1e-3
    decay_start: int = 100000
    gamma: float = 0.999995
    eval_every: int = 500
    checkpoint_every: int = 1000
    eval_patches: int = 8
    no1x1: bool = False
    nokdm: bool = False
    teacher_checkpoint: str = ""
    teacher_lr: float = 1e-3
    teacher_rd_lambda: float = 0.01

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        if self.steps < 1 or self.batch_size < 1 or self.crop < 4:
            raise ConfigError("steps, batch_size, crop must be positive")

    @property
    def weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.lambda3,
                           0.0 if self.nokdm else self.lambda4)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown config keys: {bad}")
        return cls(**d)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# Filesystem locations are where a run happens, not what it computes, so
# they stay out of the provenance identity; otherwise two byte-identical
# trainings in different directories would disagree about what they are.
PATH_FIELDS = frozenset({"data_dir", "out_dir", "teacher_checkpoint"})


def semantic_config(cfg):
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg)
    return {k: v for k, v in d.items() if k not in PATH_FIELDS}


def config_hash(cfg):
    return hashlib.sha256(
        canonical_json(semantic_config(cfg)).encode()).hexdigest()[:16]


def provenance(cfg):
    return {"config": semantic_config(cfg), "config_hash": config_hash(cfg),
            "code_version": __version__}


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_at(step, base, decay_start=100000, gamma=0.999995):
    """Constant until decay_start, then exponential decay per step."""
    if step <= decay_start:
        return base
    return base * gamma ** (step - decay_start)


class Adam:
    """Adam with bias correction and per-group base learning rates.

    Parameters are visited in sorted-name order so two runs with the
    same seed take bit-identical trajectories, and the moment arrays
    serialize under ``opt/m/`` and ``opt/v/`` for exact resume.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, groups):
        self._entries = []
        seen = set()
        for params, base_lr in groups:
            for name in sorted(params):
                if name in seen:
                    raise ConfigError(f"parameter {name} in two groups")
                seen.add(name)
                self._entries.append((name, params[name], float(base_lr)))
        self._entries.sort(key=lambda e: e[0])
        self.m = {n: np.zeros_like(t.data) for n, t, _ in self._entries}
        self.v = {n: np.zeros_like(t.data) for n, t, _ in self._entries}
        self.t = 0
        self.skips = 0

    def step(self, schedule_step, decay_start, gamma):
        """Apply one update from the .grad fields; returns False on skip."""
        grads = {}
        for name, tensor, _ in self._entries:
            g = tensor.grad
            if g is None:
                g = np.zeros_like(tensor.data)
            if not np.all(np.isfinite(g)):
                self.skips += 1
                return False
            grads[name] = g
        self.t += 1
        c1 = 1.0 - self.BETA1 ** self.t
        c2 = 1.0 - self.BETA2 ** self.t
        for name, tensor, base_lr in self._entries:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * np.square(g)
            lr = lr_at(schedule_step, base_lr, decay_start, gamma)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.EPS)
            tensor.data -= update.astype(tensor.data.dtype, copy=False)
        return True

    def zero_grads(self):
        for _, tensor, _ in self._entries:
            tensor.grad = None

    def state(self):
        out = {}
        for name in self.m:
            out[f"opt/m/{name}"] = self.m[name].copy()
            out[f"opt/v/{name}"] = self.v[name].copy()
        return out

    def load_state(self, arrays, t, skips=0):
        for name in self.m:
            for tag, store in (("m", self.m), ("v", self.v)):
                key = f"opt/{tag}/{name}"
                if key not in arrays:
                    raise CheckpointError(f"optimizer state missing {key}")
                if arrays[key].shape != store[name].shape:
                    raise CheckpointError(f"{key}: shape mismatch")
                store[name] = arrays[key].astype(store[name].dtype)
        self.t = int(t)
        self.skips = int(skips)


# ---------------------------------------------------------------------------
# images and patches


def load_image(path):
    """PNG -> float32 HWC in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, arr01):
    """float HWC in [0, 1] -> 8-bit PNG (values clamped)."""
    a = np.clip(np.asarray(arr01), 0.0, 1.0)
    Image.fromarray((np.rint(a * 255.0)).astype(np.uint8)).save(path)


def bilinear_resize(img, out_h, out_w):
    """Separable bilinear resample with edge clamping (HWC float array)."""
    h, w = img.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ShapeError("target size must be positive")

    def axis_coords(n_in, n_out):
        c = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        i0 = np.floor(c).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (c - i0).astype(img.dtype)

    y0, y1, wy = axis_coords(h, out_h)
    x0, x1, wx = axis_coords(w, out_w)
    rows = img[y0] * (1.0 - wy)[:, None, None] + img[y1] * wy[:, None, None]
    out = (rows[:, x0] * (1.0 - wx)[None, :, None]
           + rows[:, x1] * wx[None, :, None])
    return out.astype(img.dtype)


class PatchSampler:
    """Random rescale in [0.75, 1] then uniform crop, from a folder of PNGs."""

    def __init__(self, data_dir, crop, rng, scale_range=(0.75, 1.0)):
        self.paths = sorted(Path(data_dir).glob("*.png"))
        if not self.paths:
            raise ConfigError(f"no PNG files in {data_dir}")
        self.crop = int(crop)
        self.rng = rng
        self.scale_range = scale_range
        self._cache = {}

    def _image(self, idx):
        if idx not in self._cache:
            self._cache[idx] = load_image(self.paths[idx])
        return self._cache[idx]

    def sample(self):
        for _ in range(100):
            idx = int(self.rng.integers(len(self.paths)))
            s = float(self.rng.uniform(*self.scale_range))
            img = self._image(idx)
            nh = int(round(img.shape[0] * s))
            nw = int(round(img.shape[1] * s))
            if nh < self.crop or nw < self.crop:
                continue
            scaled = bilinear_resize(img, nh, nw)
            oy = int(self.rng.integers(nh - self.crop + 1))
            ox = int(self.rng.integers(nw - self.crop + 1))
            return scaled[oy:oy + self.crop, ox:ox + self.crop]
        raise ConfigError(f"no source image supports a {self.crop}px crop "
                          f"after rescaling")

    def batch(self, n):
        return np.stack([self.sample() for _ in range(n)])


# ---------------------------------------------------------------------------
# loss terms


def distortion_loss(x, x_hat):
    """Pixel MSE on the 0..255 scale; inputs are [0, 1] tensors."""
    d = ad.sub(x_hat, x)
    return ad.mul(ad.tmean(ad.mul(d, d)), 255.0 * 255.0)


def rate_loss(em, y_noisy, n_pixels):
    """Estimated code length in bits per source pixel."""
    return ad.mul(em.total_bits(y_noisy), 1.0 / float(n_pixels))


def distribution_loss(z):
    """Mean negative log-density of z under a standard normal, in nats."""
    zz = ad.tmean(ad.mul(z, z))
    return ad.add(ad.mul(zz, 0.5), HALF_LN_TWO_PI)


def distillation_loss(y_student, y_teacher):
    """Mean squared gap to the (already detached) teacher code."""
    if y_student.data.shape != y_teacher.data.shape:
        raise ShapeError(f"distillation shapes differ: "
                         f"{y_student.data.shape} vs {y_teacher.data.shape}")
    d = ad.sub(y_student, y_teacher.detach())
    return ad.tmean(ad.mul(d, d))


def total_loss(codec, em, x, weights, rng, y_teacher=None, noise=None,
               quantize=True):
    """One shared forward pass feeding all four objective terms.

    Call under an active GradTape. Returns (total Tensor, parts dict);
    parts carries plain floats for logging. quantize=False evaluates the
    reconstruction term on the unrounded code, which is the configuration
    whose numerical derivatives match the straight-through gradient.
    """
    w = weights
    y, z = codec.encode(x)
    n, h, wdt, _ = x.data.shape
    parts = {}
    terms = []

    if w.lambda1 > 0:
        y_hat = ad.round_ste(y) if quantize else y
        zeros = Tensor(np.zeros_like(z.data))
        x_hat = codec.decode(y_hat, zeros)
        parts["distortion"] = distortion_loss(x, x_hat)
    if w.lambda2 > 0:
        if noise is None:
            noise = uniform_noise(rng, y.data.shape, y.data.dtype)
        y_noisy = ad.add(y, Tensor(np.asarray(noise, dtype=y.data.dtype)))
        parts["rate"] = rate_loss(em, y_noisy, n * h * wdt)
    if w.lambda3 > 0:
        parts["distribution"] = distribution_loss(z)
    if w.lambda4 > 0:
        if y_teacher is None:
            raise ConfigError("distillation weight is positive but no "
                              "teacher code was provided")
        parts["distillation"] = distillation_loss(y, y_teacher)

    for name, tensor in parts.items():
        if not np.isfinite(tensor.data):
            raise NumericsError(f"non-finite {name} loss component")

    lam = {"distortion": w.lambda1, "rate": w.lambda2,
           "distribution": w.lambda3, "distillation": w.lambda4}
    for name in ("distortion", "rate", "distribution", "distillation"):
        if name in parts:
            terms.append(ad.mul(parts[name], lam[name]))
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
    else:
        total = Tensor(np.zeros((), dtype=x.data.dtype))

    out = {name: float(t.data) for name, t in parts.items()}
    for name in ("distortion", "rate", "distribution", "distillation"):
        out.setdefault(name, 0.0)
    out["total"] = float(total.data)
    return total, out


# ---------------------------------------------------------------------------
# model assembly


def build_models(cfg, rng):
    """Codec + entropy model from one generator in a fixed draw order."""
    codec_cfg = PRESETS[cfg.preset](use_inv1x1=not cfg.no1x1)
    codec = InvertibleCodec(codec_cfg, rng=rng)
    em = FactorizedEntropyModel(codec_cfg.y_channels, rng=rng, name="em")
    return codec, em


def load_teacher(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "teacher":
        raise CheckpointError(f"{path}: checkpoint kind {ckpt.kind!r}, "
                              f"expected 'teacher'")
    config = TeacherConfig.from_dict(ckpt.meta["arch"])
    teacher = TeacherModel(config, rng=np.random.default_rng(0))
    teacher.load_state({k: v for k, v in ckpt.arrays.items()
                        if not k.startswith("opt/")})
    return teacher


def load_codec(path):
    """Rebuild codec + entropy model from a checkpoint."""
    ckpt = load_checkpoint(path)
    if ckpt.kind != "codec":
        raise CheckpointError(f"{path}: checkpoint kind {ckpt.kind!r}, "
                              f"expected 'codec'")
    codec_cfg = CodecConfig.from_dict(ckpt.meta["arch"])
    codec = InvertibleCodec(codec_cfg, rng=np.random.default_rng(0))
    em = FactorizedEntropyModel(codec_cfg.y_channels,
                                rng=np.random.default_rng(0), name="em")
    codec.load_state({k: v for k, v in ckpt.arrays.items()
                      if k in codec.params})
    em.load_state({k: v for k, v in ckpt.arrays.items()
                   if k in em.params})
    return codec, em, ckpt


def seed_entropy_from_teacher(em, teacher):
    """Copy the teacher's fitted prior into the codec's entropy model.

    Only possible when channel counts agree; returns whether it happened.
    """
    if teacher.entropy.channels != em.channels:
        return False
    prefix = teacher.entropy.name + "/"
    state = {em.name + "/" + k[len(prefix):]: v
             for k, v in teacher.entropy.state().items()}
    em.load_state(state)
    return True


def teacher_code(teacher, x):
    """Teacher forward pass outside any tape; gradients never reach it."""
    y = teacher.encode(x)
    return y.detach()


# ---------------------------------------------------------------------------
# training loops


LOG_COLUMNS = ("step", "lr_iem", "lr_em", "total", "distortion", "rate",
               "distribution", "distillation", "bpp", "skips")
EVAL_COLUMNS = ("step", "patch", "psnr_q", "psnr_nq")


class _CsvLog:
    def __init__(self, path, columns, append=False):
        new = not (append and Path(path).exists())
        self._f = open(path, "a" if append else "w", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(columns)
        self._cols = columns

    def row(self, values):
        self._w.writerow([values[c] for c in self._cols])
        self._f.flush()

    def close(self):
        self._f.close()


def _eval_patches(cfg):
    """Held-out patches from a generator independent of the training stream."""
    rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    sampler = PatchSampler(cfg.data_dir, cfg.crop, rng)
    return sampler.batch(cfg.eval_patches)


def eval_snapshot(codec, patches):
    """Reconstruction PSNR per patch, with and without code rounding."""
    rows = []
    for i in range(patches.shape[0]):
        x = Tensor(patches[i:i + 1])
        y, z = codec.encode(x)
        zeros = Tensor(np.zeros_like(z.data))
        xq = np.clip(codec.decode(Tensor(np.rint(y.data)), zeros).data, 0, 1)
        xn = np.clip(codec.decode(y, zeros).data, 0, 1)
        rows.append({
            "patch": i,
            "psnr_q": psnr(patches[i] * 255.0, xq[0] * 255.0),
            "psnr_nq": psnr(patches[i] * 255.0, xn[0] * 255.0),
        })
    return rows


def _save_codec_checkpoint(path, cfg, codec, em, opt, rng, step, best_loss,
                           window, parts):
    arrays = {}
    arrays.update(codec.state())
    arrays.update(em.state())
    arrays.update(opt.state())
    meta = {
        "arch": codec.config.to_dict(),
        "em_channels": em.channels,
        "config": semantic_config(cfg),
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "rng_state": rng_state_to_json(rng),
        "adam_t": opt.t,
        "adam_skips": opt.skips,
        "best_loss": best_loss,
        "loss_window": list(window),
        "loss_snapshot": parts,
    }
    save_checkpoint(path, kind="codec", step=step, meta=meta, arrays=arrays)
    return path


def train_codec(cfg, resume=None):
    """Main loop; returns a dict with checkpoint and log paths.

    With resume set to an earlier checkpoint from the same config, the
    remaining steps replay exactly what an uninterrupted run would do.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    codec, em = build_models(cfg, rng)

    weights = cfg.weights
    teacher = None
    if weights.lambda4 > 0:
        if not cfg.teacher_checkpoint:
            raise ConfigError("distillation is enabled (lambda4 > 0, no "
                              "nokdm flag) but teacher_checkpoint is empty")
        teacher = load_teacher(cfg.teacher_checkpoint)
        try:
            teacher.encode(Tensor(np.zeros(
                (1, cfg.crop, cfg.crop, 3), np.float32)))
        except ShapeError as e:
            raise ConfigError(f"teacher incompatible with crop "
                              f"{cfg.crop}: {e}") from None
        t_shape = (cfg.crop // teacher.config.factor,
                   cfg.crop // teacher.config.factor,
                   teacher.config.out_channels)
        c_shape = (cfg.crop // codec.config.factor,
                   cfg.crop // codec.config.factor,
                   codec.config.y_channels)
        if t_shape != c_shape:
            raise ConfigError(f"teacher code shape {t_shape} does not match "
                              f"codec code shape {c_shape}")
        seed_entropy_from_teacher(em, teacher)

    opt = Adam([(codec.params, cfg.lr_iem), (em.params, cfg.lr_em)])
    sampler = PatchSampler(cfg.data_dir, cfg.crop, rng)
    eval_patches = _eval_patches(cfg)

    start_step = 0
    best_loss = math.inf
    window = deque(maxlen=100)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.kind != "codec":
            raise CheckpointError(f"cannot resume codec from {ckpt.kind!r} "
                                  f"checkpoint")
        if ckpt.meta["config_hash"] != config_hash(cfg):
            raise CheckpointError("resume config differs from checkpoint "
                                  "config")
        codec.load_state({k: v for k, v in ckpt.arrays.items()
                          if k in codec.params})
        em.load_state({k: v for k, v in ckpt.arrays.items()
                       if k in em.params})
        opt.load_state(ckpt.arrays, ckpt.meta["adam_t"],
                       ckpt.meta["adam_skips"])
        rng.bit_generator.state = rng_from_json(
            ckpt.meta["rng_state"]).bit_generator.state
        start_step = ckpt.step
        best_loss = ckpt.meta["best_loss"]
        window.extend(ckpt.meta["loss_window"])

    log = _CsvLog(out_dir / "train_log.csv", LOG_COLUMNS,
                  append=start_step > 0)
    eval_log = _CsvLog(out_dir / "eval_log.csv", EVAL_COLUMNS,
                       append=start_step > 0)
    parts = {}
    consecutive_failures = 0
    ckpt_path = None
    t0 = time.monotonic()
    try:
        for step in range(start_step + 1, cfg.steps + 1):
            batch = sampler.batch(cfg.batch_size)
            x = Tensor(batch)
            y_t = teacher_code(teacher, x) if teacher is not None else None
            opt.zero_grads()
            try:
                with GradTape() as tape:
                    total, parts = total_loss(codec, em, x, weights, rng,
                                              y_teacher=y_t)
                backward(total, tape)
            except (NumericsError, InvertibilityError) as e:
                consecutive_failures += 1
                opt.skips += 1
                print(f"step {step}: aborted ({e})")
                if consecutive_failures >= 25:
                    raise NumericsError(
                        f"training diverged: 25 consecutive failed steps, "
                        f"last error: {e}") from e
                continue
            consecutive_failures = 0
            applied = opt.step(step, cfg.decay_start, cfg.gamma)
            if applied:
                window.append(parts["total"])
                smoothed = sum(window) / len(window)
                best_loss = min(best_loss, smoothed)
            log.row({
                "step": step,
                "lr_iem": lr_at(step, cfg.lr_iem, cfg.decay_start, cfg.gamma),
                "lr_em": lr_at(step, cfg.lr_em, cfg.decay_start, cfg.gamma),
                "bpp": parts["rate"],
                "skips": opt.skips,
                **{k: parts[k] for k in ("total", "distortion", "rate",
                                         "distribution", "distillation")},
            })
            if step % cfg.eval_every == 0 or step == cfg.steps:
                for row in eval_snapshot(codec, eval_patches):
                    eval_log.row({"step": step, **row})
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                ckpt_path = _save_codec_checkpoint(
                    out_dir / f"ckpt_{step:07d}.fck", cfg, codec, em, opt,
                    rng, step, best_loss, window, parts)
    finally:
        log.close()
        eval_log.close()
    return {
        "checkpoint": str(ckpt_path),
        "train_log": str(out_dir / "train_log.csv"),
        "eval_log": str(out_dir / "eval_log.csv"),
        "best_loss": best_loss,
        "last_parts": parts,
        "seconds": time.monotonic() - t0,
    }


def train_teacher(cfg):
    """Rate-distortion training of the distillation teacher."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    teacher = TeacherModel(TEACHER_PRESETS[cfg.preset](), rng=rng)
    conv_params = dict(teacher.params)
    opt = Adam([(conv_params, cfg.teacher_lr),
                (teacher.entropy.params, cfg.lr_em)])
    sampler = PatchSampler(cfg.data_dir, cfg.crop, rng)
    log = _CsvLog(out_dir / "teacher_log.csv",
                  ("step", "total", "distortion", "rate", "skips"))
    parts = {}
    try:
        for step in range(1, cfg.steps + 1):
            batch = sampler.batch(cfg.batch_size)
            x = Tensor(batch)
            opt.zero_grads()
            with GradTape() as tape:
                y = teacher.encode(x)
                n, h, w, _ = batch.shape
                noise = uniform_noise(rng, y.data.shape, y.data.dtype)
                l_rate = rate_loss(teacher.entropy, ad.add(y, Tensor(noise)),
                                   n * h * w)
                x_hat = teacher.decode(ad.round_ste(y))
                l_dist = distortion_loss(x, x_hat)
                total = ad.add(l_rate, ad.mul(l_dist,
                                              cfg.teacher_rd_lambda))
            if not np.isfinite(total.data):
                opt.skips += 1
                continue
            backward(total, tape)
            opt.step(step, cfg.decay_start, cfg.gamma)
            parts = {"step": step, "total": float(total.data),
                     "distortion": float(l_dist.data),
                     "rate": float(l_rate.data), "skips": opt.skips}
            log.row(parts)
    finally:
        log.close()
    path = out_dir / "teacher.fck"
    arrays = {}
    arrays.update(teacher.state())
    arrays.update(opt.state())
    meta = {
        "arch": teacher.config.to_dict(),
        "config": semantic_config(cfg),
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "rng_state": rng_state_to_json(rng),
        "adam_t": opt.t,
        "adam_skips": opt.skips,
        "loss_snapshot": parts,
    }
    save_checkpoint(path, kind="teacher", step=cfg.steps, meta=meta,
                    arrays=arrays)
    return {"checkpoint": str(path),
            "train_log": str(out_dir / "teacher_log.csv"),
            "last_parts": parts}
