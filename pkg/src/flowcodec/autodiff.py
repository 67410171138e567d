"""Reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small: a Tensor wrapper, an explicit gradient
tape, and the fixed set of primitives the codec needs.  Ops execute
eagerly in numpy; when a GradTape is active, each op appends a record
(output id, inputs, vector-Jacobian product) and backward() replays the
records in reverse.  Records are stored in execution order, which is a
valid topological order, so a single reversed pass accumulates exact
gradients including fan-out.

Two dtypes are supported: float32 for training, float64 for gradient
checks.  Binary ops require matching shapes; broadcasting is confined
to bias_add/scale_mul so every adjoint is explicit.
"""

import itertools
import warnings

import numpy as np

from .errors import NumericsError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

# Fault injection for negative-control tests: mapping "op.input" -> scale
# applied to that input's gradient.  Empty in normal operation.
_FAULTS = {}


def inject_fault(name, scale):
    """Corrupt the named adjoint by a multiplicative factor (tests only)."""
    _FAULTS[name] = float(scale)


def clear_faults():
    _FAULTS.clear()


def _maybe_fault(name, grad):
    if _FAULTS and name in _FAULTS and grad is not None:
        return grad * _FAULTS[name]
    return grad


class Tensor:
    """A numpy array plus gradient metadata."""

    __slots__ = ("data", "requires_grad", "grad", "tid")
    _ids = itertools.count()

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tid = next(Tensor._ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor division is not a primitive; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Records ops while active (as a context manager)."""

    def __init__(self):
        self._ops = []        # (out_tid, inputs tuple, vjp)
        self._produced = set()
        self._leaves = {}     # tid -> Tensor

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False


_TAPES = []


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out, inputs, vjp):
    """Attach an op record to the active tape, if any input needs grad."""
    if not _TAPES:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    tape = _TAPES[-1]
    out.requires_grad = True
    tape._ops.append((out.tid, inputs, vjp))
    tape._produced.add(out.tid)
    for t in inputs:
        if t.requires_grad and t.tid not in tape._produced:
            tape._leaves.setdefault(t.tid, t)
    return out


def backward(root, tape):
    """Accumulate d(root)/d(leaf) for every leaf tensor on the tape.

    Returns a dict tid -> gradient array and also stores each gradient
    on the leaf's .grad attribute.  root must be a scalar produced on
    the tape; a detached root yields a warning and no gradients.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    if root.tid not in tape._produced:
        warnings.warn("backward root is not connected to this tape; no gradients")
        return {}
    grads = {root.tid: np.ones((), dtype=root.data.dtype)}
    for out_tid, inputs, vjp in reversed(tape._ops):
        g = grads.pop(out_tid, None)
        if g is None:
            continue
        gins = vjp(g)
        for t, gin in zip(inputs, gins):
            if gin is None or not t.requires_grad:
                continue
            acc = grads.get(t.tid)
            grads[t.tid] = gin if acc is None else acc + gin
    out = {}
    for tid, leaf in tape._leaves.items():
        if tid in grads:
            g = np.asarray(grads[tid], dtype=leaf.data.dtype)
            if g.shape != leaf.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} != leaf shape {leaf.data.shape}"
                )
            leaf.grad = g
            out[tid] = g
    return out


def _unbroadcast(g, shape):
    """Reduce a gradient back to the broadcast source shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        bval = float(b)
        out = Tensor(a.data + np.asarray(bval, dtype=a.data.dtype))
        return _record(out, (a,), lambda g: (g,))
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a, b):
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -float(b))


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype))
        return _record(out, (a,), lambda g: (g * np.asarray(s, dtype=a.data.dtype),))
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def bias_add(x, b):
    """x + b with b broadcast against x (adjoint sums over broadcast axes)."""
    try:
        out_data = x.data + b.data
    except ValueError as e:
        raise ShapeError(f"bias_add broadcast failed: {e}") from None
    if out_data.shape != x.data.shape:
        raise ShapeError("bias_add must not grow x")
    out = Tensor(out_data)
    bshape = b.data.shape

    def vjp(g):
        return (g, _maybe_fault("bias_add.bias", _unbroadcast(g, bshape)))

    return _record(out, (x, b), vjp)


def scale_mul(x, s):
    """x * s with s broadcast against x."""
    try:
        out_data = x.data * s.data
    except ValueError as e:
        raise ShapeError(f"scale_mul broadcast failed: {e}") from None
    if out_data.shape != x.data.shape:
        raise ShapeError("scale_mul must not grow x")
    out = Tensor(out_data)
    xd, sd, sshape = x.data, s.data, s.data.shape

    def vjp(g):
        return (g * sd, _unbroadcast(g * xd, sshape))

    return _record(out, (x, s), vjp)


def exp(a):
    out_data = np.exp(a.data)
    out = Tensor(out_data)
    return _record(out, (a,), lambda g: (_maybe_fault("exp.x", g * out_data),))


def log(a):
    out = Tensor(np.log(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,))


def tanh(a):
    out_data = np.tanh(a.data)
    out = Tensor(out_data)
    return _record(out, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def sigmoid(a):
    # numerically stable logistic
    out_data = np.where(a.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out_data = out_data.astype(a.data.dtype, copy=False)
    out = Tensor(out_data)
    return _record(out, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def softplus(a):
    ad = a.data
    out_data = np.logaddexp(np.zeros((), dtype=ad.dtype), ad)
    out = Tensor(out_data.astype(ad.dtype, copy=False))
    sig = np.where(ad >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(ad))),
                   np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad))))
    return _record(out, (a,), lambda g: (g * sig,))


def leaky_relu(a, slope=0.01):
    ad = a.data
    out = Tensor(np.where(ad > 0, ad, ad * slope).astype(ad.dtype, copy=False))
    return _record(out, (a,), lambda g: (g * np.where(ad > 0, 1.0, slope).astype(ad.dtype),))


def round_ste(a):
    """Round half-to-even; gradient passes through unchanged."""
    out = Tensor(np.rint(a.data))
    return _record(out, (a,), lambda g: (g,))


def lower_bound(a, bound):
    """max(a, bound) whose gradient also passes when pushing a upward.

    Standard clamping would zero the gradient in the clipped region and
    stall training; here the gradient passes whenever a >= bound or the
    incoming gradient would increase a (g < 0 for a minimized loss).
    """
    b = float(bound)
    ad = a.data
    out = Tensor(np.maximum(ad, b))

    def vjp(g):
        passthrough = (ad >= b) | (g < 0)
        return (g * passthrough.astype(g.dtype),)

    return _record(out, (a,), vjp)


def tsum(a):
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    shape, dtype = a.data.shape, a.data.dtype

    def vjp(g):
        return (np.broadcast_to(np.asarray(g, dtype=dtype), shape),)

    return _record(out, (a,), vjp)


def tmean(a):
    n = a.data.size
    return mul(tsum(a), 1.0 / n)


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes):
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def channel_slice(a, lo, hi):
    """Slice the trailing (channel) axis: a[..., lo:hi]."""
    if not (0 <= lo <= hi <= a.data.shape[-1]):
        raise ShapeError(f"bad channel slice [{lo}:{hi}] of {a.data.shape}")
    out = Tensor(a.data[..., lo:hi])
    shape, dtype = a.data.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., lo:hi] = g
        return (full,)

    return _record(out, (a,), vjp)


def concat_channels(tensors):
    """Concatenate along the trailing axis."""
    tensors = list(tensors)
    base = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.shape[:-1] != base:
            raise ShapeError("concat_channels: leading shapes differ")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
    sizes = [t.data.shape[-1] for t in tensors]

    def vjp(g):
        outs, pos = [], 0
        for n in sizes:
            outs.append(g[..., pos:pos + n])
            pos += n
        return tuple(outs)

    return _record(out, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# linear algebra primitives


def matmul(a, b):
    """Matrix product; 2-D, or batched with identical leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul shapes: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)

    def vjp(g):
        ga = _maybe_fault("matmul.a", g @ bd.swapaxes(-1, -2))
        gb = ad.swapaxes(-1, -2) @ g
        return (ga, gb)

    return _record(out, (a, b), vjp)


def channel_matmul(x, w):
    """Per-pixel linear map over channels: (..., Ci) x (Co, Ci) -> (..., Co)."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"channel_matmul shapes: {xd.shape} x {wd.shape}")
    out = Tensor(xd @ wd.T)
    ci, co = wd.shape[1], wd.shape[0]

    def vjp(g):
        gx = g @ wd
        gw = g.reshape(-1, co).T @ xd.reshape(-1, ci)
        return (gx, _maybe_fault("channel_matmul.w", gw))

    return _record(out, (x, w), vjp)


def matinv(w):
    """Matrix inverse (square 2-D)."""
    wd = w.data
    if wd.ndim != 2 or wd.shape[0] != wd.shape[1]:
        raise ShapeError(f"matinv needs a square matrix, got {wd.shape}")
    inv = np.linalg.inv(wd)
    out = Tensor(inv)

    def vjp(g):
        return (-(inv.T @ g @ inv.T),)

    return _record(out, (w,), vjp)


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(xp, kh, kw, s, ho, wo):
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
    return cols


def _col2im(dcols, xp_shape, kh, kw, s, ho, wo):
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
    return dxp


def conv2d(x, k, stride=1, padding=0):
    """2-D convolution, NHWC input, HWIO kernel, zero padding."""
    xd, kd = x.data, k.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d shapes: {xd.shape}, kernel {kd.shape}")
    kh, kw, ci, co = kd.shape
    if xd.shape[3] != ci:
        raise ShapeError(f"conv2d channels: input {xd.shape[3]}, kernel {ci}")
    s, p = int(stride), int(padding)
    ho = _conv_out_size(xd.shape[1], kh, s, p)
    wo = _conv_out_size(xd.shape[2], kw, s, p)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {xd.shape}")
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    cols = _im2col(xp, kh, kw, s, ho, wo)
    kr = kd.reshape(kh * kw * ci, co)
    out_data = (cols.reshape(-1, kh * kw * ci) @ kr).reshape(xd.shape[0], ho, wo, co)
    out = Tensor(out_data)
    xp_shape = xp.shape

    def vjp(g):
        gr = g.reshape(-1, co)
        gk = (cols.reshape(-1, kh * kw * ci).T @ gr).reshape(kd.shape)
        dcols = (gr @ kr.T).reshape(g.shape[0], ho, wo, kh, kw, ci)
        dxp = _col2im(dcols, xp_shape, kh, kw, s, ho, wo)
        dx = dxp[:, p:xp_shape[1] - p, p:xp_shape[2] - p, :] if p else dxp
        return (dx, _maybe_fault("conv2d.kernel", gk))

    return _record(out, (x, k), vjp)


def conv2d_transpose(x, k, stride=1, padding=0):
    """Transposed 2-D convolution (adjoint of conv2d's data path).

    Input NHWC, kernel (kh, kw, Ci, Co); output spatial size is
    (n - 1) * stride + k - 2 * padding.
    """
    xd, kd = x.data, k.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d_transpose shapes: {xd.shape}, kernel {kd.shape}")
    kh, kw, ci, co = kd.shape
    if xd.shape[3] != ci:
        raise ShapeError(f"conv2d_transpose channels: input {xd.shape[3]}, kernel {ci}")
    s, p = int(stride), int(padding)
    n, h, w, _ = xd.shape
    ho = (h - 1) * s + kh - 2 * p
    wo = (w - 1) * s + kw - 2 * p
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d_transpose output would be empty")
    kr = kd.transpose(2, 0, 1, 3).reshape(ci, kh * kw * co)
    tmp = (xd.reshape(-1, ci) @ kr).reshape(n, h, w, kh, kw, co)
    full = np.zeros((n, (h - 1) * s + kh, (w - 1) * s + kw, co), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, i:i + s * h:s, j:j + s * w:s, :] += tmp[:, :, :, i, j, :]
    out_data = full[:, p:p + ho, p:p + wo, :]
    out = Tensor(np.ascontiguousarray(out_data))
    full_shape = full.shape

    def vjp(g):
        gfull = np.zeros(full_shape, dtype=g.dtype)
        gfull[:, p:p + ho, p:p + wo, :] = g
        dtmp = np.empty((n, h, w, kh, kw, co), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dtmp[:, :, :, i, j, :] = gfull[:, i:i + s * h:s, j:j + s * w:s, :]
        dtmp2 = dtmp.reshape(-1, kh * kw * co)
        dx = (dtmp2 @ kr.T).reshape(n, h, w, ci)
        gkr = xd.reshape(-1, ci).T @ dtmp2
        gk = gkr.reshape(ci, kh, kw, co).transpose(1, 2, 0, 3)
        return (dx, gk)

    return _record(out, (x, k), vjp)


# ---------------------------------------------------------------------------
# 2x2 orthogonal-family wavelet step

def _haar_fwd_data(xd):
    a = xd[:, 0::2, 0::2, :]
    b = xd[:, 0::2, 1::2, :]
    c = xd[:, 1::2, 0::2, :]
    d = xd[:, 1::2, 1::2, :]
    ll = (a + b + c + d) * 0.25
    lh = (a + b - c - d) * 0.25
    hl = (a - b + c - d) * 0.25
    hh = (a - b - c + d) * 0.25
    return np.concatenate([ll, lh, hl, hh], axis=-1).astype(xd.dtype, copy=False)


def _haar_inv_data(yd):
    c4 = yd.shape[-1]
    c = c4 // 4
    ll = yd[..., 0 * c:1 * c]
    lh = yd[..., 1 * c:2 * c]
    hl = yd[..., 2 * c:3 * c]
    hh = yd[..., 3 * c:4 * c]
    a = ll + lh + hl + hh
    b = ll + lh - hl - hh
    cc = ll - lh + hl - hh
    d = ll - lh - hl + hh
    n, h, w, _ = yd.shape
    out = np.empty((n, 2 * h, 2 * w, c), dtype=yd.dtype)
    out[:, 0::2, 0::2, :] = a
    out[:, 0::2, 1::2, :] = b
    out[:, 1::2, 0::2, :] = cc
    out[:, 1::2, 1::2, :] = d
    return out


def haar_fwd(x):
    """Invertible 2x2 average/difference step: (N,H,W,C) -> (N,H/2,W/2,4C).

    Output channel blocks are [mean, row-diff, col-diff, diagonal], each
    scaled by 1/4 so the first block equals 2x2 average pooling.
    """
    xd = x.data
    if xd.ndim != 4 or xd.shape[1] % 2 or xd.shape[2] % 2:
        raise ShapeError(f"haar_fwd needs even spatial dims, got {xd.shape}")
    out = Tensor(_haar_fwd_data(xd))

    def vjp(g):
        # adjoint of (1/4)H is (1/4)H^T = H^{-1}/4 elementwise in each block
        return (_maybe_fault("haar_fwd.x", _haar_inv_data(g) * 0.25),)

    return _record(out, (x,), vjp)


def haar_inv(y):
    """Exact inverse of haar_fwd: (N,H,W,4C) -> (N,2H,2W,C)."""
    yd = y.data
    if yd.ndim != 4 or yd.shape[-1] % 4:
        raise ShapeError(f"haar_inv needs 4k channels, got {yd.shape}")
    out = Tensor(_haar_inv_data(yd))

    def vjp(g):
        return (_haar_fwd_data(g) * 4.0,)

    return _record(out, (y,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


def _eval_loss(loss_fn):
    val = loss_fn()
    if isinstance(val, Tensor):
        val = val.item()
    return float(val)


def finite_diff_check(loss_fn, params, eps=1e-4, mode="full", rng=None):
    """Compare analytic gradients of loss_fn against finite differences.

    loss_fn takes no arguments, reads params (a name -> Tensor dict),
    and must be deterministic; params are perturbed in place for the
    numeric side.  mode "full" checks every element; mode "directional"
    checks one random direction per parameter block (rng required).
    Returns a dict name -> max relative error, where the relative error
    is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    v0 = _eval_loss(loss_fn)
    v1 = _eval_loss(loss_fn)
    if v0 != v1:
        raise NumericsError("loss_fn is not deterministic; cannot finite-difference")

    with GradTape() as tape:
        loss = loss_fn()
        grads = backward(loss, tape)

    errors = {}
    for name in sorted(params):
        p = params[name]
        g = grads.get(p.tid)
        if g is None:
            g = np.zeros_like(p.data)
        if mode == "full":
            worst = 0.0
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                lo_hi = _eval_loss(loss_fn)
                flat[i] = orig - eps
                lo_lo = _eval_loss(loss_fn)
                flat[i] = orig
                num = (lo_hi - lo_lo) / (2 * eps)
                ana = float(gflat[i])
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
                worst = max(worst, rel)
            errors[name] = worst
        elif mode == "directional":
            if rng is None:
                raise ValueError("directional mode needs an rng")
            v = rng.standard_normal(p.data.shape)
            v /= max(np.linalg.norm(v), 1e-12)
            v = v.astype(p.data.dtype)
            orig = p.data.copy()
            p.data += eps * v
            lo_hi = _eval_loss(loss_fn)
            p.data[...] = orig - eps * v
            lo_lo = _eval_loss(loss_fn)
            p.data[...] = orig
            num = (lo_hi - lo_lo) / (2 * eps)
            ana = float(np.vdot(g, v))
            errors[name] = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
        else:
            raise ValueError(f"unknown finite-diff mode {mode!r}")
    return errors


def cast_params(params, dtype):
    """Cast a name -> Tensor dict in place to a new dtype."""
    for p in params.values():
        p.data = p.data.astype(dtype)
    return params
