""" Spatial transformation of images by dense appearance flow or TPS.

Flow convention: an additive displacement, in pixels of the field's own
resolution, evaluated at the output pixel (backward warping). Channel 0
is the horizontal offset u, channel 1 the vertical offset v. Sampling
positions outside the image are clamped to the border.
"""
from __future__ import annotations

import logging

import numpy as np

from . import functional as F
from .errors import DimensionError, NumericalError, SolverError
from .tensor import Tensor, as_tensor, mul, no_grad, reshape


class FlowField(object):
    """ Per-pixel displacement field, 2 x H x W (or N x 2 x H x W).

    Parameters
    ----------
    displacements : Tensor or array_like
        channel 0 = u (horizontal), channel 1 = v (vertical)
    """
    def __init__(self, displacements):
        displacements = as_tensor(displacements)
        if displacements.ndim not in (3, 4) or displacements.shape[-3] != 2:
            raise DimensionError(f"FlowField needs exactly 2 channels, got shape {displacements.shape}.")
        self.displacements: Tensor = displacements

    @property
    def height(self) -> int:
        return self.displacements.shape[-2]

    @property
    def width(self) -> int:
        return self.displacements.shape[-1]

    @property
    def extent(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def u(self) -> np.ndarray:
        return self.displacements.data[..., 0, :, :]

    @property
    def v(self) -> np.ndarray:
        return self.displacements.data[..., 1, :, :]

    def numpy(self) -> np.ndarray:
        return self.displacements.data

    def __repr__(self) -> str:
        return f"FlowField(shape={self.displacements.shape})"


def _as_flow(flow) -> FlowField:
    return flow if isinstance(flow, FlowField) else FlowField(flow)


def check_finite(flow: FlowField, what: str = "flow") -> FlowField:
    if not np.all(np.isfinite(flow.displacements.data)):
        raise NumericalError(f"{what} contains NaN or Inf values")
    return flow


def warp_with_flow(image: Tensor, flow: FlowField | Tensor) -> Tensor:
    """ Bilinearly sample image at (x + u, y + v); differentiable in both arguments. """
    flow = _as_flow(flow)
    image = as_tensor(image)
    d = flow.displacements
    if image.shape[-2:] != d.shape[-2:]:
        raise DimensionError(f"warp_with_flow: flow extent {d.shape[-2:]} differs from image extent "
                             f"{image.shape[-2:]} (height/width axes).")
    check_finite(flow)
    if image.ndim == 3 and d.ndim == 3:
        out = F.sample_bilinear(reshape(image, (1,) + image.shape), reshape(d, (1,) + d.shape))
        return reshape(out, out.shape[1:])
    if image.ndim != 4 or d.ndim != 4 or image.shape[0] != d.shape[0]:
        raise DimensionError(f"warp_with_flow: batch axes differ, image {image.shape} vs flow {d.shape}.")
    return F.sample_bilinear(image, d)


def resize_flow(flow: FlowField | Tensor, out_h: int, out_w: int) -> FlowField:
    """ Bilinear resize keeping displacements in target-resolution pixels. """
    flow = _as_flow(flow)
    h, w = flow.extent
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize_flow: target extent {out_h} x {out_w} must be positive.")
    d = flow.displacements
    resized = F.upsample_bilinear(d, out_h, out_w, align_corners=False)
    scale = np.array([out_w / w, out_h / h], dtype=d.dtype).reshape((2, 1, 1))
    if (out_h, out_w) != (h, w):
        resized = mul(resized, Tensor(scale, dtype=d.dtype))
    return check_finite(FlowField(resized), "resized flow")


def endpoint_error(pred: FlowField | Tensor, gt: FlowField | Tensor,
                   mask: np.ndarray | None = None) -> float:
    """ Mean Euclidean norm of the displacement difference.

    Parameters
    ----------
    pred, gt : FlowField
        equal extents
    mask : ndarray or None
        optional H x W (or N x 1 x H x W) weights; the mean is taken over
        the masked pixels only
    """
    p, g = _as_flow(pred), _as_flow(gt)
    if p.displacements.shape != g.displacements.shape:
        raise DimensionError(f"endpoint_error: shapes {p.displacements.shape} and {g.displacements.shape} differ.")
    norm = np.hypot(p.u.astype(np.float64) - g.u, p.v.astype(np.float64) - g.v)
    if mask is None:
        return float(norm.mean())
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == norm.ndim + 1:
        m = m[..., 0, :, :]
    m = np.broadcast_to(m, norm.shape)
    total = m.sum()
    if total == 0:
        return 0.0
    return float((norm * m).sum() / total)


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        k = r2 * np.log(r2)
    return np.where(r2 > 0, k, 0.0)


def _check_control_points(src: np.ndarray, dst: np.ndarray) -> None:
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise SolverError(f"TPS needs two equally long lists of (x, y) points, got {src.shape} and {dst.shape}.")
    if len(src) < 3:
        raise SolverError(f"TPS needs at least 3 control points, got {len(src)}.")
    affine = np.hstack([np.ones((len(dst), 1)), dst])
    if np.linalg.matrix_rank(affine) < 3:
        raise SolverError("TPS control points are collinear; the system is singular.")


def tps_flow(src_points, dst_points, height: int, width: int) -> np.ndarray:
    """ Dense backward flow of the TPS that maps dst_points onto src_points.

    Returns
    -------
    ndarray
        2 x height x width displacement, so that output pixel p samples
        the source at p + flow(p)
    """
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    _check_control_points(src, dst)
    n = len(dst)
    r2 = ((dst[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
    p = np.hstack([np.ones((n, 1)), dst])
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = _tps_kernel(r2)
    system[:n, n:] = p
    system[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = src
    try:
        coeffs = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise SolverError(f"TPS system could not be solved: {e}")

    gy, gx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                         indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    d2 = ((grid[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
    mapped = _tps_kernel(d2) @ coeffs[:n] + np.hstack([np.ones((len(grid), 1)), grid]) @ coeffs[n:]
    flow = (mapped - grid).T.reshape(2, height, width)
    if not np.all(np.isfinite(flow)):
        raise SolverError("TPS evaluation produced non-finite values.")
    return flow


def tps_warp(image, src_points, dst_points) -> Tensor:
    """ Warp image with the thin-plate spline taking src_points to dst_points.

    A pixel at a dst point in the output shows the content found at the
    matching src point of the input. Not differentiable.
    """
    image = as_tensor(image)
    h, w = image.shape[-2:]
    flow = tps_flow(src_points, dst_points, h, w).astype(image.dtype)
    with no_grad():
        if image.ndim == 4:
            flow = np.broadcast_to(flow, (image.shape[0],) + flow.shape)
        return warp_with_flow(image.detach(), FlowField(Tensor(flow, dtype=image.dtype)))


def fit_tps_to_flow(flow: FlowField | Tensor, grid: int = 5) -> np.ndarray:
    """ Fit a grid x grid TPS to a known dense flow; returns the TPS flow. """
    f = _as_flow(flow).numpy()
    h, w = f.shape[-2:]
    ys = np.round(np.linspace(0, h - 1, grid)).astype(int)
    xs = np.round(np.linspace(0, w - 1, grid)).astype(int)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    dst = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    src = dst + np.stack([f[0, yy, xx].ravel(), f[1, yy, xx].ravel()], axis=1)
    return tps_flow(src, dst, h, w)


logger = logging.getLogger(__name__)
