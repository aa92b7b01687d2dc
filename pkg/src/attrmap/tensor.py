"""Layer primitives with explicit forward and backward passes.

Tensors are plain ``numpy.ndarray`` values in N x C x H x W layout. Every
operation keeps the dtype of its inputs, so the same code runs in float32 for
training and in float64 for finite-difference verification.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class FormatError(ValueError):
    pass


def seeded_rng(*seed: int) -> np.random.Generator:
    """PCG64 stream keyed by one or more integers (e.g. ``(seed, index)``)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed))))


@dataclass
class LayerGrads:
    grad_input: np.ndarray
    grad_params: dict[str, np.ndarray] = field(default_factory=dict)


def _check_ndim(x: np.ndarray, ndim: int, what: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{what}: expected {ndim}-d tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if k > size + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad, ho, wo):
    """(N, C*kh*kw, Ho*Wo) matrix of receptive fields, rows ordered (c, i, j)."""
    n, c = x.shape[:2]
    if kh == kw == 1 and stride == 1 and pad == 0:
        return x.reshape(n, c, ho * wo)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def conv2d_forward(x, weight, bias=None, stride=1, pad=0):
    """2-d cross-correlation (no kernel flip).

    Parameters
    ----------
    x : array, shape (N, C_in, H, W)
    weight : array, shape (C_out, C_in, kh, kw)
    bias : array, shape (C_out,), optional
    stride, pad : int
        Same stride and zero padding on both spatial axes.

    Returns
    -------
    array, shape (N, C_out, H', W') with H' = (H + 2 pad - kh) // stride + 1.
    """
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(weight, 4, "conv2d weight")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)

    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    out = np.matmul(weight.reshape(c_out, -1), cols).reshape(n, c_out, ho, wo)
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d_backward(x, weight, grad_output, stride=1, pad=0, with_bias=True) -> LayerGrads:
    """Exact gradients of :func:`conv2d_forward` w.r.t. input, weight and bias."""
    _check_ndim(x, 4, "conv2d input")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, weight expects {c_in}")
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    if grad_output.shape != (n, c_out, ho, wo):
        raise ShapeError(f"grad_output shape {grad_output.shape} != {(n, c_out, ho, wo)}")

    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    g = grad_output.reshape(n, c_out, ho * wo)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    grad_cols = np.matmul(weight.reshape(c_out, -1).T, g).reshape(n, c, kh, kw, ho, wo)
    grad_xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_cols.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += grad_cols[:, :, i, j]
    grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
    grads = {"weight": grad_w}
    if with_bias:
        grads["bias"] = grad_output.sum(axis=(0, 2, 3))
    return LayerGrads(np.ascontiguousarray(grad_x), grads)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormResult(NamedTuple):
    out: np.ndarray
    cache: tuple
    running_mean: np.ndarray
    running_var: np.ndarray


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True,
                      momentum=0.1, eps=1e-5) -> BatchNormResult:
    """Per-channel batch normalization over (N, H, W).

    In train mode the batch statistics normalize the input and the returned
    running statistics are updated by an exponential moving average (the
    variance estimate is unbiased). In infer mode the running statistics are
    used and returned unchanged. Inputs are never mutated.
    """
    _check_ndim(x, 4, "batchnorm input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if train:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(f"train-mode batch norm needs N*H*W >= 2, got {m}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_mean = ((1 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var + momentum * var * (m / (m - 1))).astype(running_var.dtype)
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps).astype(x.dtype)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma[:, None, None] * xhat + beta[:, None, None]
    return BatchNormResult(out, (xhat, gamma, inv_std, train), new_mean, new_var)


def batchnorm_backward(cache, grad_output) -> LayerGrads:
    xhat, gamma, inv_std, train = cache
    if grad_output.shape != xhat.shape:
        raise ShapeError(f"grad_output shape {grad_output.shape} != {xhat.shape}")
    axes = (0, 2, 3)
    grad_beta = grad_output.sum(axis=axes)
    grad_gamma = (grad_output * xhat).sum(axis=axes)
    scale = (gamma * inv_std)[:, None, None]
    if train:
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        grad_x = scale * (grad_output - grad_beta[:, None, None] / m
                          - xhat * grad_gamma[:, None, None] / m)
    else:
        grad_x = scale * grad_output
    return LayerGrads(grad_x, {"gamma": grad_gamma, "beta": grad_beta})


# ---------------------------------------------------------------------------
# elementwise, pooling, dense, loss
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x, grad_output):
    # subgradient 0 at exactly 0
    return np.where(x > 0, grad_output, 0).astype(grad_output.dtype, copy=False)


def avgpool2d(x, window, stride=None):
    """Mean over ``window x window`` cells taken every ``stride`` pixels."""
    _check_ndim(x, 4, "avgpool input")
    stride = window if stride is None else stride
    h, w = x.shape[2:]
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    if window == stride and ho * window == h and wo * window == w:
        n, c = x.shape[:2]
        return x.reshape(n, c, ho, window, wo, window).mean(axis=(3, 5))
    out = np.zeros(x.shape[:2] + (ho, wo), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            out += x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return out / x.dtype.type(window * window)


def avgpool2d_backward(input_shape, grad_output, window, stride=None):
    stride = window if stride is None else stride
    h, w = input_shape[2:]
    ho, wo = grad_output.shape[2:]
    g = grad_output / grad_output.dtype.type(window * window)
    if window == stride and ho * window == h and wo * window == w:
        return np.repeat(np.repeat(g, window, axis=2), window, axis=3)
    grad_x = np.zeros(input_shape, dtype=grad_output.dtype)
    for i in range(window):
        for j in range(window):
            grad_x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g
    return grad_x


def global_avg_pool(x):
    """Spatial mean per channel: (N, C, H, W) -> (N, C)."""
    _check_ndim(x, 4, "global_avg_pool input")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(input_shape, grad_output):
    h, w = input_shape[2:]
    g = grad_output / grad_output.dtype.type(h * w)
    return np.broadcast_to(g[:, :, None, None], input_shape).copy()


def fully_connected(x, weight, bias=None):
    """``x @ weight.T + bias`` for x of shape (N, D) and weight (A, D)."""
    _check_ndim(x, 2, "fully_connected input")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def fully_connected_backward(x, weight, grad_output) -> LayerGrads:
    if grad_output.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"grad_output shape {grad_output.shape} mismatched")
    return LayerGrads(grad_output @ weight,
                      {"weight": grad_output.T @ x, "bias": grad_output.sum(axis=0)})


def mse_loss(pred, target, weights=None):
    """Mean squared error over all N x A entries, optionally weighted per column.

    Returns ``(loss, grad)`` with ``grad`` the derivative w.r.t. ``pred``.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    scale = pred.dtype.type(1.0 / diff.size)
    if weights is None:
        return float(np.sum(diff * diff) * scale), 2 * diff * scale
    w = np.asarray(weights, dtype=pred.dtype)
    return float(np.sum(w * diff * diff) * scale), 2 * w * diff * scale


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float
    checked: int = 0
    refined: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _split(result):
    if isinstance(result, tuple):
        return float(result[0]), result[1]
    return float(result), None


def grad_check(f: Callable[[dict], float], point: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], step=1e-3, tolerance=1e-4,
               floor=1e-8, min_step=1e-7) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``f``.

    ``f`` is evaluated on copies of ``point`` in float64. For each named array
    the error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``,
    i.e. elementwise error relative to that gradient's own scale.

    ``f`` may return ``(value, state)`` where ``state`` is the on/off pattern
    of every rectifier. When a stencil point's state differs from the centre's,
    the difference straddles a kink and does not estimate the derivative, so
    that coordinate is retried with a step ten times smaller (down to
    ``min_step``). ``report.refined`` counts such coordinates.
    """
    x = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    _, base = _split(f(x))
    per_param, checked, refined = {}, 0, 0
    for name, arr in x.items():
        numeric = np.zeros_like(arr)
        flat, num_flat = arr.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig, h = flat[i], step
            while True:
                flat[i] = orig + h
                fp, sp = _split(f(x))
                flat[i] = orig - h
                fm, sm = _split(f(x))
                flat[i] = orig
                smooth = base is None or (np.array_equal(sp, base) and np.array_equal(sm, base))
                if smooth or h / 10 < min_step:
                    break
                h /= 10
            refined += h != step
            num_flat[i] = (fp - fm) / (2 * h)
        checked += flat.size
        a = np.asarray(analytic[name], dtype=np.float64)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        per_param[name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, tolerance, checked, int(refined))


# ---------------------------------------------------------------------------
# TNSR snapshot files
# ---------------------------------------------------------------------------

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1


def encode_tensor(x) -> bytes:
    """Little-endian snapshot: magic, u32 version, u32 ndim, u32 dims, f32 data."""
    x = np.asarray(x)
    if x.ndim > 4:
        raise ShapeError(f"snapshots hold at most 4 dims, got {x.ndim}")
    header = TNSR_MAGIC + struct.pack(f"<II{x.ndim}I", TNSR_VERSION, x.ndim, *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one snapshot starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != TNSR_MAGIC:
        raise FormatError("bad tensor magic")
    if len(buf) < offset + 12:
        raise FormatError("truncated tensor header")
    version, ndim = struct.unpack_from("<II", buf, offset + 4)
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if ndim > 4:
        raise FormatError(f"tensor ndim {ndim} > 4")
    pos = offset + 12
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise FormatError("truncated tensor data")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
    return data.reshape(dims), end


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    x, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor")
    return x
