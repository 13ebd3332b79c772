""" Spatial kernels with hand-written adjoints.

All functions accept C x H x W or N x C x H x W tensors; a 3-D input is
treated as a batch of one and the result is returned without the batch
axis.
"""
from __future__ import annotations

import functools
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Tensor, as_tensor, make_result, reshape


def _batched(fn):
    """ Lift a 4-D kernel so that it also accepts unbatched 3-D tensors. """
    @functools.wraps(fn)
    def wrapper(x: Tensor, *args, **kwds):
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwds)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise DimensionError(f"{fn.__name__}: expected 3-D or 4-D input, got shape {x.shape}.")
        return fn(x, *args, **kwds)
    return wrapper


@_batched
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """ 2-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        input, N x C x H x W (or C x H x W)
    weight : Tensor
        O x C x Kh x Kw, with odd kernel extents
    bias : Tensor or None
        O
    stride : int
    padding : int
        zero padding on every side

    Returns
    -------
    Tensor
        N x O x H' x W' with H' = (H + 2p - Kh) / s + 1
    """
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be O x C x Kh x Kw, got shape {weight.shape}.")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: input channels ({c}) do not match weight in-channels ({wc}).")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {kh} x {kw}.")
    if padding < 0 or stride < 1:
        raise DimensionError(f"conv2d: invalid padding {padding} or stride {stride}.")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias extent {bias.shape} does not match out-channels ({o}).")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: output height/width would be {ho} x {wo} for input {h} x {w}.")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward_fn(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = [gx, gw.astype(weight.dtype)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(bias.dtype))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, inputs, backward_fn)


def interpolation_matrix(n_in: int, n_out: int, align_corners: bool, dtype=np.float64) -> np.ndarray:
    """ Dense n_out x n_in matrix of 1-D linear interpolation weights. """
    r = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = r * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(n_out)
    else:
        src = (r + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m.astype(dtype)


@_batched
def upsample_bilinear(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """ Separable bilinear resize to out_h x out_w. """
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"upsample_bilinear: target extent {out_h} x {out_w} must be positive.")
    _, _, h, w = x.shape
    mh = interpolation_matrix(h, out_h, align_corners, x.dtype)
    mw = interpolation_matrix(w, out_w, align_corners, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return make_result("upsample_bilinear", out, (x,),
                       lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


@_batched
def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise DimensionError(f"avg_pool2d: extent {h} x {w} is not divisible by {kernel}.")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def backward_fn(g):
        gx = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        return (gx.astype(x.dtype),)
    return make_result("avg_pool2d", out.astype(x.dtype), (x,), backward_fn)


@_batched
def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """ Normalise every (sample, channel) plane to zero mean and unit variance. """
    m = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward_fn(g):
        gsum = g.sum(axis=(2, 3), keepdims=True)
        gxhat = (g * xhat).sum(axis=(2, 3), keepdims=True)
        return ((inv / m) * (m * g - gsum - xhat * gxhat),)
    return make_result("instance_norm", xhat.astype(x.dtype), (x,), backward_fn)


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - idx)


@_batched
def pad_reflect(x: Tensor, pad: int) -> Tensor:
    """ Reflection padding (edge pixel not repeated) on the spatial axes. """
    n, c, h, w = x.shape
    ih = _reflect_index(h, pad)
    iw = _reflect_index(w, pad)
    out = x.data[:, :, ih][:, :, :, iw]

    def backward_fn(g):
        rows = np.zeros((n, c, h, g.shape[3]), dtype=g.dtype)
        np.add.at(rows, (slice(None), slice(None), ih), g)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), iw), rows)
        return (gx,)
    return make_result("pad_reflect", np.ascontiguousarray(out), (x,), backward_fn)


def _corner_indices(coord: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n == 1:
        zero = np.zeros(coord.shape, dtype=int)
        return zero, zero, np.zeros_like(coord)
    i0 = np.minimum(np.floor(coord).astype(int), n - 2)
    return i0, i0 + 1, (coord - i0).astype(coord.dtype)


def sample_bilinear(image: Tensor, flow: Tensor) -> Tensor:
    """ Backward-warp image by an additive per-pixel displacement.

    out(n, c, y, x) samples image(n, c) at (x + u, y + v) with bilinear
    weights. Sampling positions are clamped to the image border; the
    adjoint w.r.t. the flow is zero where clamping is active.

    Parameters
    ----------
    image : Tensor
        N x C x H x W
    flow : Tensor
        N x 2 x H x W, channel 0 horizontal, channel 1 vertical, pixels
    """
    n, c, h, w = image.shape
    flow = as_tensor(flow, image)
    f = flow.data
    gy, gx = np.meshgrid(np.arange(h, dtype=f.dtype), np.arange(w, dtype=f.dtype), indexing="ij")
    sx_raw = gx[None] + f[:, 0]
    sy_raw = gy[None] + f[:, 1]
    sx = np.clip(sx_raw, 0, w - 1)
    sy = np.clip(sy_raw, 0, h - 1)
    inside_x = (sx_raw >= 0) & (sx_raw <= w - 1)
    inside_y = (sy_raw >= 0) & (sy_raw <= h - 1)
    x0, x1, wx = _corner_indices(sx, w)
    y0, y1, wy = _corner_indices(sy, h)
    nidx = np.arange(n)[:, None, None]

    img = image.data.transpose(0, 2, 3, 1)
    ia = img[nidx, y0, x0]
    ib = img[nidx, y0, x1]
    ic = img[nidx, y1, x0]
    id_ = img[nidx, y1, x1]
    wx_ = wx[..., None]
    wy_ = wy[..., None]
    w00 = (1 - wx_) * (1 - wy_)
    w01 = wx_ * (1 - wy_)
    w10 = (1 - wx_) * wy_
    w11 = wx_ * wy_
    out = w00 * ia + w01 * ib + w10 * ic + w11 * id_
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=image.dtype)

    def backward_fn(g):
        gt = g.transpose(0, 2, 3, 1)
        gimg = np.zeros_like(img)
        np.add.at(gimg, (nidx, y0, x0), w00 * gt)
        np.add.at(gimg, (nidx, y0, x1), w01 * gt)
        np.add.at(gimg, (nidx, y1, x0), w10 * gt)
        np.add.at(gimg, (nidx, y1, x1), w11 * gt)
        dsx = (1 - wy_) * (ib - ia) + wy_ * (id_ - ic)
        dsy = (1 - wx_) * (ic - ia) + wx_ * (id_ - ib)
        gu = (gt * dsx).sum(axis=-1) * inside_x
        gv = (gt * dsy).sum(axis=-1) * inside_y
        gflow = np.stack([gu, gv], axis=1).astype(flow.dtype)
        return gimg.transpose(0, 3, 1, 2), gflow

    return make_result("sample_bilinear", out, (image, flow), backward_fn)


logger = logging.getLogger(__name__)
