"""Differentiable operations for the segmentation engine.

Every operation takes and returns :class:`Tensor` values, validates its
arguments eagerly, and (when given a tape) records a backward rule.
Convolutions run as im2col GEMMs with the column matrix laid out
``(channels * k * k, batch * out_h * out_w)``, which keeps the strided
copies cache-friendly on CPU.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument
from .tensor import Tape, Tensor


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidArgument(msg)


def _check_feature_map(x: Tensor, op: str) -> None:
    _require(x.data.ndim == 4, f"{op}: expected rank-4 input (N,C,H,W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution kernels (plain ndarray level)
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded input (N,C,Hp,Wp) -> columns (C*k*k, N*ho*wo).

    Channel-major layout, so rows of any channel group are contiguous and
    grouped convolutions can slice the same matrix.
    """
    n, c = xp.shape[:2]
    if k == 1 and stride == 1:
        return xp.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    cols = np.empty((c, k * k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            v = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            cols[:, i * k + j] = v.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(dcols: np.ndarray, in_shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to (N,C,H,W)."""
    n, c, h, w = in_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dc = dcols.reshape(c, k, k, n, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dc[
                :, i, j
            ].transpose(1, 0, 2, 3)
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def _pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


def _group_matmul(a: np.ndarray, b: np.ndarray, groups: int) -> np.ndarray:
    """(G*M, K) x (G*K, L) block-diagonal product -> (G*M, L)."""
    if groups == 1:
        return a @ b
    m = a.shape[0] // groups
    kk = a.shape[1]
    out = np.matmul(a.reshape(groups, m, kk), b.reshape(groups, kk, -1))
    return out.reshape(groups * m, -1)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, groups: int, cols=None):
    """Returns (output, cols); cols is reusable for the weight gradient."""
    n, c, h, wi = x.shape
    cout, cg, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wi + 2 * pad - k) // stride + 1
    if cols is None:
        cols = _im2col(_pad_input(x, pad), k, stride, ho, wo)
    out_t = _group_matmul(w.reshape(cout, cg * k * k), cols, groups)
    out = np.ascontiguousarray(out_t.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    return out, cols


def _conv_backward_data(dy: np.ndarray, w: np.ndarray, stride: int, pad: int, groups: int, in_shape) -> np.ndarray:
    n, c, h, wi = in_shape
    cout, cg, k, _ = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dy_t = dy.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
    og = cout // groups
    w_t = w.reshape(groups, og, cg * k * k).transpose(0, 2, 1).reshape(groups * cg * k * k, og)
    dcols = _group_matmul(w_t, dy_t, groups)
    return _col2im(dcols, in_shape, k, stride, pad, ho, wo)


def _conv_backward_weights(
    x: np.ndarray, dy: np.ndarray, k: int, stride: int, pad: int, groups: int, cols=None
) -> np.ndarray:
    n, c, h, wi = x.shape
    cout = dy.shape[1]
    ho, wo = dy.shape[2], dy.shape[3]
    cg = c // groups
    og = cout // groups
    if cols is None:
        cols = _im2col(_pad_input(x, pad), k, stride, ho, wo)
    length = n * ho * wo
    dy_t = dy.transpose(1, 0, 2, 3).reshape(cout, length)
    if groups == 1:
        return (dy_t @ cols.T).reshape(cout, cg, k, k)
    dwg = np.matmul(
        dy_t.reshape(groups, og, length),
        cols.reshape(groups, cg * k * k, length).transpose(0, 2, 1),
    )
    return dwg.reshape(cout, cg, k, k)


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
    tape: Optional[Tape] = None,
) -> Tensor:
    """2-D cross-correlation with optional bias and channel groups."""
    _check_feature_map(x, "conv2d")
    _require(w.data.ndim == 4, f"conv2d: weight must be rank 4, got shape {w.shape}")
    n, cin, h, wi = x.shape
    cout, cg, k, k2 = w.shape
    _require(k == k2, f"conv2d: kernel must be square, got {k}x{k2}")
    _require(stride >= 1 and pad >= 0 and groups >= 1, "conv2d: stride/pad/groups out of range")
    _require(cin % groups == 0, f"conv2d: in-channels {cin} not divisible by groups {groups}")
    _require(cout % groups == 0, f"conv2d: out-channels {cout} not divisible by groups {groups}")
    _require(
        cg == cin // groups,
        f"conv2d: weight in-channels {cg} != input channels {cin} / groups {groups}",
    )
    _require(h + 2 * pad >= k, f"conv2d: height {h} + 2*pad {pad} smaller than kernel {k}")
    _require(wi + 2 * pad >= k, f"conv2d: width {wi} + 2*pad {pad} smaller than kernel {k}")
    if b is not None:
        _require(b.data.shape == (cout,), f"conv2d: bias shape {b.shape} != ({cout},)")

    out, cols = _conv_forward(x.data, w.data, stride, pad, groups)
    if b is not None:
        out += b.data[None, :, None, None]
    y = Tensor(out, dtype=x.dtype)

    if tape is not None:
        xd, wd = x.data, w.data

        def bwd(dy: np.ndarray):
            dx = _conv_backward_data(dy, wd, stride, pad, groups, xd.shape)
            dw = _conv_backward_weights(xd, dy, k, stride, pad, groups, cols=cols)
            if b is None:
                return dx, dw
            return dx, dw, dy.sum(axis=(0, 2, 3))

        inputs = (x, w) if b is None else (x, w, b)
        tape.record(inputs, y, bwd)
    return y


def deconv_geometry(ratio: int) -> tuple[int, int, int]:
    """Default (kernel, stride, pad) so the output is exactly ratio * input.

    Even ratios use kernel 2r, pad r/2; odd ratios use kernel 2r+1,
    pad (r+1)/2.  Both give out = r*in with no output padding.
    """
    _require(ratio >= 2, f"deconv ratio must be >= 2, got {ratio}")
    if ratio % 2 == 0:
        return 2 * ratio, ratio, ratio // 2
    return 2 * ratio + 1, ratio, (ratio + 1) // 2


def deconv2d(
    x: Tensor,
    w: Tensor,
    ratio: int,
    groups: int = 1,
    kernel: Optional[int] = None,
    stride: Optional[int] = None,
    pad: Optional[int] = None,
    tape: Optional[Tape] = None,
) -> Tensor:
    """Transposed convolution upsampling by an exact integer ratio.

    The weight is laid out ``(in_channels, out_channels // groups, k, k)``;
    the forward pass is the adjoint of :func:`conv2d`'s data path, so this
    spreads each input pixel over a k-by-k output window.
    """
    _check_feature_map(x, "deconv2d")
    _require(w.data.ndim == 4, f"deconv2d: weight must be rank 4, got shape {w.shape}")
    if kernel is None and stride is None and pad is None:
        kernel, stride, pad = deconv_geometry(ratio)
    else:
        _require(
            kernel is not None and stride is not None and pad is not None,
            "deconv2d: kernel, stride and pad must be supplied together",
        )
    n, cin, h, wi = x.shape
    wcin, og, k, k2 = w.shape
    _require(k == k2, f"deconv2d: kernel must be square, got {k}x{k2}")
    _require(k == kernel, f"deconv2d: weight kernel {k} does not match requested kernel {kernel}")
    _require(wcin == cin, f"deconv2d: weight in-channels {wcin} != input channels {cin}")
    _require(cin % groups == 0, f"deconv2d: in-channels {cin} not divisible by groups {groups}")
    cout = og * groups
    h_out = (h - 1) * stride - 2 * pad + kernel
    w_out = (wi - 1) * stride - 2 * pad + kernel
    _require(
        h_out == ratio * h and w_out == ratio * wi,
        f"deconv2d: kernel={kernel} stride={stride} pad={pad} gives {h_out}x{w_out}, "
        f"not the required {ratio * h}x{ratio * wi}",
    )

    # The underlying correlation maps the (N,Cout,rH,rW) space down to x's
    # space, so the forward here is that correlation's backward-data pass.
    out_shape = (n, cout, h_out, w_out)
    y = Tensor(_conv_backward_data(x.data, w.data, stride, pad, groups, out_shape), dtype=x.dtype)

    if tape is not None:
        xd, wd = x.data, w.data
        s, p, g = stride, pad, groups

        def bwd(dy: np.ndarray):
            dx, cols = _conv_forward(dy, wd, s, p, g)
            dw = _conv_backward_weights(dy, xd, k, s, p, g, cols=cols)
            return dx, dw

        tape.record((x, w), y, bwd)
    return y


_INTERP_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _interp_matrix(n_in: int, ratio: int, dtype) -> np.ndarray:
    """1-D bilinear interpolation as a dense (n_in*ratio, n_in) matrix.

    Half-pixel-center convention: output sample i reads source coordinate
    (i + 0.5)/ratio - 0.5, clamped to the valid range.  Rows sum to one,
    so constants are preserved.
    """
    key = (n_in, ratio, np.dtype(dtype).name)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    n_out = n_in * ratio
    src = np.clip((np.arange(n_out) + 0.5) / ratio - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    a = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - a)
    np.add.at(m, (np.arange(n_out), i1), a)
    _INTERP_CACHE[key] = m
    return m


def bilinear_upsample(x: Tensor, ratio: int, tape: Optional[Tape] = None) -> Tensor:
    """Fixed (non-learnable) bilinear upsampling by an integer ratio."""
    _check_feature_map(x, "bilinear_upsample")
    _require(ratio >= 1, f"bilinear_upsample: ratio must be >= 1, got {ratio}")
    if ratio == 1:
        y = Tensor(x.data.copy(), dtype=x.dtype)
        if tape is not None:
            tape.record((x,), y, lambda dy: (dy,))
        return y
    n, c, h, w = x.shape
    rm = _interp_matrix(h, ratio, x.dtype)
    cm = _interp_matrix(w, ratio, x.dtype)
    out = rm @ x.data @ cm.T
    y = Tensor(out, dtype=x.dtype)
    if tape is not None:
        # Gradient of a fixed linear map is its transpose.
        tape.record((x,), y, lambda dy: (rm.T @ dy @ cm,))
    return y


def maxpool2d(x: Tensor, ratio: int, tape: Optional[Tape] = None) -> Tensor:
    """Non-overlapping max pooling with window and stride ``ratio``."""
    _check_feature_map(x, "maxpool2d")
    _require(ratio >= 1, f"maxpool2d: ratio must be >= 1, got {ratio}")
    n, c, h, w = x.shape
    _require(h % ratio == 0, f"maxpool2d: height {h} not divisible by ratio {ratio}")
    _require(w % ratio == 0, f"maxpool2d: width {w} not divisible by ratio {ratio}")
    ho, wo = h // ratio, w // ratio
    windows = np.ascontiguousarray(
        x.data.reshape(n, c, ho, ratio, wo, ratio).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, ho, wo, ratio * ratio)
    # argmax picks the first (row-major) maximum, which fixes tie routing.
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    y = Tensor(out, dtype=x.dtype)
    if tape is not None:

        def bwd(dy: np.ndarray):
            buf = np.zeros((n, c, ho, wo, ratio * ratio), dtype=dy.dtype)
            np.put_along_axis(buf, idx[..., None], dy[..., None], axis=-1)
            dx = buf.reshape(n, c, ho, wo, ratio, ratio).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (np.ascontiguousarray(dx),)

        tape.record((x,), y, bwd)
    return y


def batchnorm2d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    mode: str,
    running_mean: Tensor,
    running_var: Tensor,
    momentum: float = 0.1,
    eps: float = 1e-5,
    tape: Optional[Tape] = None,
) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics over (N,H,W) and updates
    the running buffers in place by exponential moving average; eval mode
    normalizes with the running buffers.
    """
    _check_feature_map(x, "batchnorm2d")
    c = x.shape[1]
    _require(scale.data.shape == (c,), f"batchnorm2d: scale shape {scale.shape} != ({c},)")
    _require(shift.data.shape == (c,), f"batchnorm2d: shift shape {shift.shape} != ({c},)")
    _require(running_mean.data.shape == (c,), f"batchnorm2d: running mean shape != ({c},)")
    _require(running_var.data.shape == (c,), f"batchnorm2d: running var shape != ({c},)")
    _require(eps > 0, "batchnorm2d: eps must be positive")
    _require(mode in ("train", "eval"), f"batchnorm2d: unknown mode {mode!r}")

    xd = x.data
    if mode == "train":
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mean.astype(running_mean.dtype)
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.data.astype(xd.dtype)
        var = running_var.data.astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]
    y = Tensor(out, dtype=x.dtype)

    if tape is not None:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]

        if mode == "train":

            def bwd(dy: np.ndarray):
                dxhat = dy * scale.data[None, :, None, None]
                sum_dxhat = dxhat.sum(axis=(0, 2, 3))
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
                dx = (
                    inv_std[None, :, None, None]
                    / m
                    * (m * dxhat - sum_dxhat[None, :, None, None] - xhat * sum_dxhat_xhat[None, :, None, None])
                )
                dscale = (dy * xhat).sum(axis=(0, 2, 3))
                dshift = dy.sum(axis=(0, 2, 3))
                return dx.astype(dy.dtype, copy=False), dscale, dshift

        else:

            def bwd(dy: np.ndarray):
                dx = dy * (scale.data * inv_std)[None, :, None, None]
                dscale = (dy * xhat).sum(axis=(0, 2, 3))
                dshift = dy.sum(axis=(0, 2, 3))
                return dx, dscale, dshift

        tape.record((x, scale, shift), y, bwd)
    return y


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise max(0, x)."""
    out = np.maximum(x.data, 0)
    y = Tensor(out, dtype=x.dtype)
    if tape is not None:
        mask = x.data > 0
        tape.record((x,), y, lambda dy: (dy * mask,))
    return y


def concat(xs: Sequence[Tensor], tape: Optional[Tape] = None) -> Tensor:
    """Concatenate feature maps along the channel axis, in argument order."""
    _require(len(xs) >= 1, "concat: needs at least one input")
    for t in xs:
        _check_feature_map(t, "concat")
    n, _, h, w = xs[0].shape
    for i, t in enumerate(xs[1:], start=1):
        _require(
            t.shape[0] == n and t.shape[2] == h and t.shape[3] == w,
            f"concat: input {i} has shape {t.shape}, expected (N,*,H,W) = ({n},*,{h},{w})",
        )
    out = np.concatenate([t.data for t in xs], axis=1)
    y = Tensor(out, dtype=xs[0].dtype)
    if tape is not None:
        sizes = [t.shape[1] for t in xs]
        offsets = np.cumsum([0] + sizes)

        def bwd(dy: np.ndarray):
            return tuple(
                np.ascontiguousarray(dy[:, offsets[i] : offsets[i + 1]]) for i in range(len(sizes))
            )

        tape.record(tuple(xs), y, bwd)
    return y


def dropout(
    x: Tensor,
    p: float,
    mode: str,
    rng: Optional[np.random.Generator] = None,
    tape: Optional[Tape] = None,
) -> Tensor:
    """Inverted dropout: zero with probability p in train mode, scale
    survivors by 1/(1-p); identity in eval mode."""
    _require(0.0 <= p < 1.0, f"dropout: p must be in [0, 1), got {p}")
    _require(mode in ("train", "eval"), f"dropout: unknown mode {mode!r}")
    if mode == "eval" or p == 0.0:
        y = Tensor(x.data.copy(), dtype=x.dtype)
        if tape is not None:
            tape.record((x,), y, lambda dy: (dy,))
        return y
    _require(rng is not None, "dropout: train mode with p > 0 requires an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    y = Tensor(x.data * keep * scale, dtype=x.dtype)
    if tape is not None:
        tape.record((x,), y, lambda dy: (dy * keep * scale,))
    return y


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, tape: Optional[Tape] = None) -> Tensor:
    """Mean pixelwise cross-entropy of softmaxed logits against class indices.

    ``labels`` is an integer map of shape (N, H, W) with values in [0, K).
    Numerically stabilized by max subtraction.
    """
    _check_feature_map(logits, "softmax_cross_entropy")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    _require(
        labels.shape == (n, h, w),
        f"softmax_cross_entropy: labels shape {labels.shape} != ({n},{h},{w})",
    )
    _require(np.issubdtype(labels.dtype, np.integer), "softmax_cross_entropy: labels must be integers")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        bn, bh, bw = np.argwhere(bad)[0]
        raise InvalidArgument(
            f"softmax_cross_entropy: label {labels[bn, bh, bw]} out of range [0,{k}) "
            f"at pixel (n={bn}, h={bh}, w={bw})"
        )

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    log_p = z - np.log(denom)
    picked = np.take_along_axis(log_p, labels[:, None, :, :], axis=1)[:, 0]
    count = n * h * w
    loss = Tensor(np.asarray(-picked.sum() / count, dtype=logits.dtype))

    if tape is not None:
        softmax = ez / denom
        onehot_idx = (
            np.arange(n)[:, None, None],
            labels,
            np.arange(h)[None, :, None],
            np.arange(w)[None, None, :],
        )

        def bwd(dy: np.ndarray):
            g = softmax.copy()
            g[onehot_idx] -= 1.0
            g *= dy / count
            return (g.astype(logits.dtype, copy=False),)

        tape.record((logits,), loss, bwd)
    return loss


def sum_all(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Sum every element to a scalar; handy for tests and penalties."""
    y = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    if tape is not None:
        tape.record((x,), y, lambda dy: (np.broadcast_to(dy, x.shape).astype(x.dtype).copy(),))
    return y


def xavier_init(
    shape: Sequence[int],
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> Tensor:
    """Uniform init on [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    _require(fan_in > 0 and fan_out > 0, "xavier_init: fan_in and fan_out must be positive")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype))
