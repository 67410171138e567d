"""Command-line front end: training, compression, evaluation, self-checks.

Exit codes: 0 success, 1 invariant failure (self-check or numerical
guard tripped), 2 usage or IO error.
"""

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .checkpoint import load_checkpoint
from .coder import compress_code, compress_code_raw, decompress_code
from .entropy import FactorizedEntropyModel, quantize_round
from .errors import (CheckpointError, ConfigError, CorruptStream,
                     FlowcodecError, InvertibilityError, NumericsError,
                     ShapeError, TruncatedStream, UnsupportedVersion)
from .invnet import AffineCoupling, InvConv1x1, InvertibleCodec, desk_preset
from .metrics import (EvalReport, EvalRow, bits_per_pixel, luma_bt601,
                      ms_ssim, psnr)
from .rangecoder import BACKENDS
from .training import (TrainConfig, load_codec, load_image, save_image,
                       train_codec, train_teacher)

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2

USAGE_ERRORS = (ConfigError, CheckpointError, UnsupportedVersion,
                CorruptStream, TruncatedStream, ShapeError, OSError)
INVARIANT_ERRORS = (NumericsError, InvertibilityError)


# ---------------------------------------------------------------------------
# configuration plumbing


def parse_config_file(path):
    """key = value lines; # starts a comment; keys match TrainConfig fields."""
    out = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key, value):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    ftype = _FIELD_TYPES[key]
    if ftype == "bool" or ftype is bool:
        low = str(value).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {value!r}")
    if ftype == "int" or ftype is int:
        return int(value)
    if ftype == "float" or ftype is float:
        return float(value)
    return str(value)


def _parse_ablate(spec):
    flags = {"no1x1": False, "nokdm": False}
    if spec:
        for item in spec.split(","):
            key = item.strip().lower().replace("_", "")
            if key == "no1x1":
                flags["no1x1"] = True
            elif key == "nokdm":
                flags["nokdm"] = True
            elif key:
                raise ConfigError(f"unknown ablation {item!r}; "
                                  f"known: no1x1, noKDM")
    return flags


def build_train_config(args):
    """defaults < config file < explicit command-line flags."""
    values = {}
    if getattr(args, "config", None):
        for key, raw in parse_config_file(args.config).items():
            values[key] = _coerce(key, raw)
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "ablate", None):
        values.update(_parse_ablate(args.ablate))
    return TrainConfig.from_dict(values)


def _add_train_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=("desk", "paper"))
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--crop", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--lambda4", type=float)
    p.add_argument("--lr-iem", type=float, dest="lr_iem")
    p.add_argument("--lr-em", type=float, dest="lr_em")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--ablate", help="comma list: no1x1, noKDM")


# ---------------------------------------------------------------------------
# compression pipeline


def pad_to_factor(img, factor):
    """Replicate-edge padding up to the next multiple of factor."""
    h, w = img.shape[:2]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return img


def compress_image(codec, em, img01, arch_hash, *, raw_float=False,
                   embed_tables=True):
    """[0,1] HWC image -> stream bytes; returns (blob, info dict)."""
    orig = img01.shape[:2]
    padded = pad_to_factor(img01, codec.config.factor)
    x = Tensor(padded[None].astype(np.float32))
    y, _ = codec.encode(x)
    if raw_float:
        blob = compress_code_raw(y.data[0], orig_size=orig,
                                 padded_size=padded.shape[:2],
                                 arch_hash=arch_hash)
    else:
        symbols = quantize_round(y.data[0])
        table = em.build_tables()
        blob = compress_code(symbols, orig_size=orig,
                             padded_size=padded.shape[:2],
                             arch_hash=arch_hash, table=table,
                             include_tables=embed_tables)
    return blob


def decompress_image(codec, em, blob, arch_hash, *, sigma=0.0, seed=0):
    """Stream bytes -> [0,1] HWC image cropped to the original size."""
    table = None if raw_or_embedded(blob) else em.build_tables()
    info, code = decompress_code(blob, table=table)
    if info.arch_hash != arch_hash:
        raise CheckpointError(
            "stream was produced by different weights than this checkpoint "
            f"(stream {info.arch_hash.hex()}, checkpoint {arch_hash.hex()})")
    y = Tensor(np.asarray(code, dtype=np.float32)[None])
    zc = codec.config.z_channels
    zshape = (1, info.y_shape[0], info.y_shape[1], zc)
    if sigma > 0:
        z = np.random.default_rng(seed).normal(0.0, sigma, zshape)
        z = Tensor(z.astype(np.float32))
    else:
        z = Tensor(np.zeros(zshape, np.float32))
    x = codec.decode(y, z).data[0]
    oh, ow = info.orig_size
    return np.clip(x, 0.0, 1.0)[:oh, :ow], info


def raw_or_embedded(blob):
    """True if the stream needs no external tables (raw float or embedded)."""
    from .coder import unpack_stream
    info = unpack_stream(blob)
    return info.raw_float or info.self_describing


def _open_checkpoint(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "codec":
        raise CheckpointError(f"{path} is a {ckpt.kind!r} checkpoint, "
                              f"need 'codec'")
    codec, em, _ = load_codec(path)
    return codec, em, ckpt


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(args):
    cfg = build_train_config(args)
    result = train_teacher(cfg)
    print(f"teacher checkpoint: {result['checkpoint']}")
    print(f"log: {result['train_log']}")
    if result["last_parts"]:
        parts = result["last_parts"]
        print(f"final: total={parts['total']:.4f} "
              f"distortion={parts['distortion']:.4f} rate={parts['rate']:.4f}")
    return EXIT_OK


def cmd_train(args):
    cfg = build_train_config(args)
    result = train_codec(cfg, resume=args.resume)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"train log: {result['train_log']}")
    print(f"eval log: {result['eval_log']}")
    parts = result["last_parts"]
    if parts:
        print("final: " + " ".join(f"{k}={v:.4f}" for k, v in parts.items()))
    return EXIT_OK


def cmd_compress(args):
    codec, em, ckpt = _open_checkpoint(args.checkpoint)
    img = load_image(args.input)
    blob = compress_image(codec, em, img, ckpt.arch_hash,
                          raw_float=args.nq,
                          embed_tables=not args.no_embed_tables)
    Path(args.output).write_bytes(blob)
    from .coder import unpack_stream
    info = unpack_stream(blob)
    bpp = bits_per_pixel(len(info.payload), info.orig_size)
    print(f"{args.output}: {len(blob)} bytes, "
          f"payload {len(info.payload)} bytes, {bpp:.4f} bpp")
    return EXIT_OK


def cmd_decompress(args):
    codec, em, ckpt = _open_checkpoint(args.checkpoint)
    blob = Path(args.input).read_bytes()
    img, info = decompress_image(codec, em, blob, ckpt.arch_hash,
                                 sigma=args.sample_z, seed=args.seed)
    save_image(args.output, img)
    print(f"{args.output}: {info.orig_size[1]}x{info.orig_size[0]}")
    return EXIT_OK


def cmd_eval(args):
    codec, em, ckpt = _open_checkpoint(args.checkpoint)
    data_dir = Path(args.data_dir)
    if not data_dir.is_dir():
        raise ConfigError(f"dataset directory not found: {data_dir}")
    paths = sorted(data_dir.glob("*.png"))
    if not paths:
        raise ConfigError(f"no PNG files in {data_dir}")
    report = EvalReport(provenance={
        "config": ckpt.meta.get("config", {}),
        "config_hash": ckpt.meta.get("config_hash", ""),
        "code_version": __version__,
        "checkpoint_step": ckpt.step,
        "arch_hash": ckpt.arch_hash.hex(),
    })
    modes = ("NQ",) if args.nq else ("Q", "NQ")
    for path in paths:
        img = load_image(path)
        ref255 = img * 255.0
        for mode in modes:
            blob = compress_image(codec, em, img, ckpt.arch_hash,
                                  raw_float=(mode == "NQ"))
            out, info = decompress_image(codec, em, blob, ckpt.arch_hash)
            ms = ms_ssim(luma_bt601(ref255), luma_bt601(out * 255.0))
            report.add(EvalRow(
                image=path.name, mode=mode,
                bpp=bits_per_pixel(len(info.payload), info.orig_size),
                psnr=psnr(ref255, out * 255.0),
                msssim=ms.value, msssim_scales=ms.scales_used,
                payload_bytes=len(info.payload),
                header_bytes=info.header_bytes))
    out_base = Path(args.out)
    csv_path = out_base.with_suffix(".csv")
    report.write_csv(csv_path)
    report.write_jsonl(out_base.with_suffix(".jsonl"))
    for mode in report.modes():
        m = report.mean(mode)
        print(f"{mode}: n={m['n']} bpp={m['bpp']:.4f} "
              f"psnr={m['psnr']:.2f} msssim={m['msssim']:.4f}")
    print(f"report: {csv_path}")
    return EXIT_OK


def cmd_plot_data(args):
    report = EvalReport.read_csv(args.report)
    pairs = report.plot_pairs(args.mode)
    if not pairs:
        raise ConfigError(f"no {args.mode!r} rows in {args.report}")
    if not args.average_only:
        for bpp, db in pairs:
            print(f"{bpp:.6f} {db:.4f}")
    m = report.mean(args.mode)
    print(f"{m['bpp']:.6f} {m['psnr']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# self-check suites


def _check_haar():
    block = np.array([[1.0, 2.0], [3.0, 4.0]], np.float64)
    x = Tensor(block.reshape(1, 2, 2, 1))
    out = ad.haar_fwd(x).data[0, 0, 0]
    expect = np.array([2.5, -1.0, -0.5, 0.0])
    if not np.array_equal(out, expect):
        raise NumericsError(f"hand example gave {out}, expected {expect}")
    rng = np.random.default_rng(101)
    for _ in range(20):
        img = Tensor(rng.random((1, 16, 16, 3)))
        fwd = ad.haar_fwd(img)
        avg = img.data.reshape(1, 8, 2, 8, 2, 3).mean(axis=(2, 4))
        if not np.array_equal(fwd.data[..., :3], avg):
            raise NumericsError("coarse channel differs from 2x2 averaging")
        back = ad.haar_inv(fwd)
        if not np.allclose(back.data, img.data, atol=1e-12):
            raise NumericsError("wavelet round trip failed")


def _check_coupling():
    rng = np.random.default_rng(202)
    for trial in range(10):
        params = {}
        coup = AffineCoupling(params, f"c{trial}", 12, 16, 3, rng, np.float64)
        for t in params.values():
            t.data = rng.normal(0.0, 0.05, t.data.shape)
        h = Tensor(rng.normal(0.0, 1.0, (1, 8, 8, 12)))
        back = coup.inverse(coup.forward(h))
        err = np.max(np.abs(back.data - h.data))
        if err > 1e-9:
            raise NumericsError(f"coupling round trip err {err:.3e}")
    params = {}
    coup = AffineCoupling(params, "zero", 12, 16, 3, rng, np.float64)
    h = Tensor(rng.normal(0.0, 1.0, (1, 8, 8, 12)))
    if not np.array_equal(coup.forward(h).data, h.data):
        raise NumericsError("fresh coupling is not the identity")
    # gradient spot check (catches corrupted adjoints)
    params = {}
    coup = AffineCoupling(params, "fd", 6, 8, 3, rng, np.float64)
    for t in params.values():
        t.data = rng.normal(0.0, 0.05, t.data.shape)
    x0 = rng.normal(0.0, 1.0, (1, 4, 4, 6))

    def loss_fn():
        out = coup.forward(Tensor(x0))
        return ad.tmean(ad.mul(out, out))

    errs = finite_diff_check(loss_fn, params, mode="directional",
                             rng=np.random.default_rng(7))
    worst = max(errs.values())
    if worst > 1e-3:
        raise NumericsError(f"coupling gradient err {worst:.3e}")


def _check_inv1x1():
    rng = np.random.default_rng(303)
    params = {}
    mix = InvConv1x1(params, "m", 12, np.float64)
    w = params["m/w"]
    q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (12, 12)))
    w.data = q
    h = Tensor(rng.normal(0.0, 1.0, (2, 6, 6, 12)))
    back = mix.inverse(mix.forward(h))
    err = np.max(np.abs(back.data - h.data))
    if err > 1e-9:
        raise NumericsError(f"1x1 conv round trip err {err:.3e}")
    w.data = np.zeros((12, 12))
    try:
        mix.forward(h)
    except InvertibilityError:
        pass
    else:
        raise NumericsError("singular mixing matrix not rejected")


def _check_codec():
    rng = np.random.default_rng(404)
    codec = InvertibleCodec(desk_preset(), rng=rng, dtype=np.float64)
    for t in codec.params.values():
        t.data = t.data + rng.normal(0.0, 0.02, t.data.shape)
    x = Tensor(rng.random((1, 64, 64, 3)))
    y, z = codec.encode(x)
    back = codec.decode(y, z)
    err = np.max(np.abs(back.data - x.data))
    if err > 1e-9:
        raise NumericsError(f"codec round trip err {err:.3e}")


def _check_coder():
    from .coder import decode_grid, encode_grid
    from .entropy import CdfTable, quantize_pmf
    rng = np.random.default_rng(505)
    grid = np.arange(-8, 9)
    raw = np.exp(-np.abs(grid) / 2.0)
    counts = quantize_pmf(np.append(raw / raw.sum() * 0.999, 0.001))
    table = CdfTable(offsets=np.array([-8, -8], np.int32),
                     cdfs=[np.concatenate([[0], np.cumsum(counts)]).astype(np.uint32)] * 2)
    for trial in range(50):
        syms = rng.integers(-8, 9, (6, 7, 2)).astype(np.int32)
        if trial % 3 == 0:
            syms[0, 0, 0] = 5000  # escape path
        payload = encode_grid(syms, table)
        back = decode_grid(payload, table, 6, 7)
        if not np.array_equal(back, syms):
            raise NumericsError(f"coder round trip failed on trial {trial}")
    if len(BACKENDS) > 1:
        flat = rng.integers(-8, 9, 64).astype(np.int32)
        blobs = set()
        from .coder import _flatten_tables
        cdf_flat, cdf_starts = _flatten_tables(table)
        starts = np.array([0, 32, 64], np.int64)
        for backend in BACKENDS.values():
            blobs.add(backend.encode_channels(flat, starts, cdf_flat,
                                              cdf_starts, table.offsets))
        if len(blobs) != 1:
            raise NumericsError("backends disagree on stream bytes")


def _check_entropy():
    rng = np.random.default_rng(606)
    em = FactorizedEntropyModel(3, rng=rng, dtype=np.float64)
    grid = np.arange(-256, 257, dtype=np.float64)
    t = np.broadcast_to(grid, (3, 1, grid.size)).copy()
    p = em.bin_prob(Tensor(t)).data
    mass = p.sum(axis=-1)
    if not np.all(np.abs(mass - 1.0) < 1e-3):
        raise NumericsError(f"bin probabilities sum to {mass}, not 1")
    table = em.build_tables()
    for c, cdf in enumerate(table.cdfs):
        if cdf[-1] != 1 << 16 or np.any(np.diff(cdf.astype(np.int64)) <= 0):
            raise NumericsError(f"channel {c} frequency table invalid")


CHECK_SUITES = (
    ("haar", _check_haar),
    ("coupling", _check_coupling),
    ("inv1x1", _check_inv1x1),
    ("codec", _check_codec),
    ("coder", _check_coder),
    ("entropy", _check_entropy),
)


def cmd_check(args):
    if args.inject_fault:
        name, _, scale = args.inject_fault.partition(":")
        ad.inject_fault(name, float(scale) if scale else 10.0)
    failures = 0
    try:
        for name, fn in CHECK_SUITES:
            try:
                fn()
            except FlowcodecError as e:
                failures += 1
                print(f"FAIL {name}: {e}")
            else:
                print(f"PASS {name}")
    finally:
        ad.clear_faults()
    if failures:
        print(f"{failures} of {len(CHECK_SUITES)} suites failed")
        return EXIT_INVARIANT
    print(f"all {len(CHECK_SUITES)} suites passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(
        prog="flowcodec",
        description="Invertible learned image codec: train, compress, "
                    "decompress, evaluate.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-teacher", help="train the distillation teacher")
    _add_train_flags(t)
    t.add_argument("--teacher-lr", type=float, dest="teacher_lr")
    t.add_argument("--teacher-rd-lambda", type=float,
                   dest="teacher_rd_lambda")
    t.set_defaults(func=cmd_train_teacher)

    t = sub.add_parser("train", help="train the invertible codec")
    _add_train_flags(t)
    t.add_argument("--teacher-checkpoint", dest="teacher_checkpoint")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    t = sub.add_parser("compress", help="PNG -> .ilc stream")
    t.add_argument("input")
    t.add_argument("output")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--nq", action="store_true",
                   help="store the unquantized code verbatim (debug)")
    t.add_argument("--no-embed-tables", action="store_true",
                   help="rely on the checkpoint for frequency tables")
    t.set_defaults(func=cmd_compress)

    t = sub.add_parser("decompress", help=".ilc stream -> PNG")
    t.add_argument("input")
    t.add_argument("output")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--sample-z", type=float, default=0.0, metavar="SIGMA",
                   help="draw the detail latent from N(0, sigma^2) "
                        "instead of zeros")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_decompress)

    t = sub.add_parser("eval", help="compress+decompress a folder, report")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--data-dir", required=True, dest="data_dir")
    t.add_argument("--out", default="eval_report",
                   help="report basename (.csv and .jsonl added)")
    t.add_argument("--nq", action="store_true",
                   help="evaluate only the unquantized mode")
    t.set_defaults(func=cmd_eval)

    t = sub.add_parser("check", help="run the invariant self-checks")
    t.add_argument("--inject-fault", metavar="NAME[:SCALE]",
                   help="corrupt a named adjoint to demonstrate detection")
    t.set_defaults(func=cmd_check)

    t = sub.add_parser("plot-data", help="emit (bpp, psnr) pairs from a report")
    t.add_argument("--report", required=True)
    t.add_argument("--mode", default="Q", choices=("Q", "NQ"))
    t.add_argument("--average-only", action="store_true")
    t.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except INVARIANT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
