""" Training objectives of the three stages and their combination.

    L_w(I, M, f) = b1 |I*M - I_m*M_gt|_1 + b2 perceptual(I*M, I_m*M_gt)
                 + b3 |M - M_gt|_1 + b4 tv(f)
    L_wrp        = L_w(final) + sum over levels l = 0..K of L_w(level l)
    L_cs         = weighted cross-entropy of the clothing segmentation
    L_fus        = l1 |I_tryon - I_m|_1 + l2 perceptual + l3 edge + l4 recon
    L_total      = a1 L_wrp + a2 L_cs + a3 L_fus

All L1 terms are means over elements.
"""
from __future__ import annotations

import logging
import typing
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .constants import DEFAULT_CLASS_WEIGHTS, LOG_FLOOR, PERCEPTUAL_SEED
from .errors import ContractError, DimensionError
from .layers import Conv2d, Module
from .tensor import (Tensor, as_tensor, channel_axis, clamp_min, get_default_dtype, log, mean, mul,
                     relu, reshape, smooth_l1, tabs, tsum)
from .warp import FlowField


@dataclass
class LossWeights:
    beta1: float = 1.0
    beta2: float = 0.25
    beta3: float = 1.0
    beta4: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.25
    lambda3: float = 0.5
    lambda4: float = 0.5
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    class_weights: tuple[float, ...] = field(default=DEFAULT_CLASS_WEIGHTS)

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        values = [v for k, v in vars(self).items() if k != "class_weights"] + list(self.class_weights)
        if any(v < 0 for v in values):
            raise ContractError(f"Loss weights must be non-negative: {self}.")
        if len(self.class_weights) != 7:
            raise ContractError(f"Expected 7 class weights, got {len(self.class_weights)}.")

    @property
    def beta(self) -> tuple[float, float, float, float]:
        return self.beta1, self.beta2, self.beta3, self.beta4

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return self.lambda1, self.lambda2, self.lambda3, self.lambda4

    @property
    def alpha(self) -> tuple[float, float, float]:
        return self.alpha1, self.alpha2, self.alpha3

    @classmethod
    def from_config(cls, loss: dict[str, typing.Any]) -> "LossWeights":
        return cls(**loss)


def _same_extent(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: prediction {a.shape} and target {b.shape} differ in extent.")


def l1(pred: Tensor, target: Tensor) -> Tensor:
    return mean(tabs(pred - target))


def masked_l1(pred: Tensor, target: Tensor, mask_p: Tensor, mask_t: Tensor) -> Tensor:
    """ Mean absolute difference of pred * mask_p and target * mask_t. """
    pred, target = as_tensor(pred), as_tensor(target)
    _same_extent(pred, target, "masked_l1")
    mask_p, mask_t = as_tensor(mask_p, pred), as_tensor(mask_t, pred)
    if mask_p.shape[-2:] != pred.shape[-2:] or mask_t.shape[-2:] != pred.shape[-2:]:
        raise DimensionError(f"masked_l1: mask extents {mask_p.shape}, {mask_t.shape} differ from {pred.shape}.")
    return l1(pred * mask_p, target * mask_t)


class PerceptualExtractor(Module):
    """ Frozen, seeded three-layer feature extractor.

    Stands in for a pretrained VGG: 3 -> 8 -> 16 -> 16 channels, 3x3
    kernels with stride 2, ReLU between layers. The weights are buffers
    (requires_grad False) and are saved with the model checkpoint.
    """
    def __init__(self, seed: int = PERCEPTUAL_SEED, widths: tuple[int, ...] = (8, 16, 16)):
        rng = np.random.default_rng(seed)
        channels = (3,) + tuple(widths)
        self.layers = [Conv2d(channels[i], channels[i + 1], 3, stride=2, rng=rng) for i in range(len(widths))]
        for conv in self.layers:
            conv.bias.data[:] = rng.uniform(-0.1, 0.1, size=conv.bias.shape)
        self.freeze()

    def features(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for i, conv in enumerate(self.layers):
            h = conv(h)
            feats.append(h)
            if i + 1 < len(self.layers):
                h = relu(h)
        return feats


_default_extractor: PerceptualExtractor | None = None


def default_extractor() -> PerceptualExtractor:
    global _default_extractor
    if _default_extractor is None or _default_extractor.layers[0].weight.dtype != np.dtype(get_default_dtype()):
        _default_extractor = PerceptualExtractor()
    return _default_extractor


def perceptual_loss(pred: Tensor, target: Tensor, extractor: PerceptualExtractor | None = None) -> Tensor:
    """ Sum over extractor layers of the mean L1 distance between feature maps. """
    pred, target = as_tensor(pred), as_tensor(target)
    _same_extent(pred, target, "perceptual_loss")
    if pred.shape[channel_axis(pred)] != 3:
        raise DimensionError(f"perceptual_loss expects 3-channel images, got {pred.shape}.")
    extractor = extractor or default_extractor()
    total = None
    for fp, ft in zip(extractor.features(pred), extractor.features(target)):
        term = l1(fp, ft)
        total = term if total is None else total + term
    return total


def _flow_tensor(flow: FlowField | Tensor) -> Tensor:
    return flow.displacements if isinstance(flow, FlowField) else as_tensor(flow)


def tv_loss(flow: FlowField | Tensor) -> Tensor:
    """ Mean |d/dx f| + mean |d/dy f| with forward differences. """
    f = _flow_tensor(flow)
    h, w = f.shape[-2:]
    total = None
    if w > 1:
        total = mean(tabs(f[..., :, 1:] - f[..., :, :-1]))
    if h > 1:
        dy = mean(tabs(f[..., 1:, :] - f[..., :-1, :]))
        total = dy if total is None else total + dy
    if total is None:
        return Tensor(0.0, dtype=f.dtype)
    return total


def warp_term(image: Tensor, mask: Tensor, flow: FlowField | Tensor, model_image: Tensor,
              model_mask: Tensor, weights: LossWeights,
              extractor: PerceptualExtractor | None = None) -> Tensor:
    """ L_w for one (warped image, warped mask, flow) triple. """
    b1, b2, b3, b4 = weights.beta
    target = model_image * model_mask
    loss = b1 * masked_l1(image, model_image, mask, model_mask)
    if b2:
        loss = loss + b2 * perceptual_loss(image * mask, target, extractor)
    loss = loss + b3 * l1(mask, model_mask)
    if b4:
        loss = loss + b4 * tv_loss(flow)
    return loss


def warp_stage_loss(final: tuple, intermediates: list[tuple], model_image: Tensor, model_mask: Tensor,
                    weights: LossWeights, extractor: PerceptualExtractor | None = None) -> Tensor:
    """ L_wrp = L_w(final) + sum over the K + 1 levels of L_w(level).

    Parameters
    ----------
    final : tuple
        (I_wrp, M_wrp, f_agg)
    intermediates : list[tuple]
        (I_wrp^l, M_wrp^l, f_l) for l = 0..K
    """
    if not intermediates:
        raise ContractError("warp_stage_loss needs at least one intermediate level.")
    for i, triple in enumerate([final] + list(intermediates)):
        if triple is None or len(triple) != 3 or any(t is None for t in triple):
            raise ContractError(f"warp_stage_loss: level {i - 1 if i else 'final'} is missing.")
    loss = warp_term(*final, model_image, model_mask, weights, extractor)
    for triple in intermediates:
        loss = loss + warp_term(*triple, model_image, model_mask, weights, extractor)
    return loss


def weighted_cross_entropy(pred_probs: Tensor, target_onehot: Tensor,
                           w: typing.Sequence[float] | None = None) -> Tensor:
    """ -(1/n) sum_n sum_i w_i P_gt_i log(P_pred_i), n = number of pixels. """
    pred_probs = as_tensor(pred_probs)
    target = as_tensor(target_onehot, pred_probs)
    _same_extent(pred_probs, target, "weighted_cross_entropy")
    axis = channel_axis(pred_probs)
    c = pred_probs.shape[axis]
    if not np.allclose(target.data.sum(axis=axis), 1.0, atol=1e-5):
        raise ContractError("weighted_cross_entropy: target is not normalised per pixel.")
    weights = np.ones(c) if w is None else np.asarray(w, dtype=np.float64)
    if weights.shape != (c,):
        raise DimensionError(f"weighted_cross_entropy: {len(weights)} class weights for {c} channels.")
    shape = [1] * pred_probs.ndim
    shape[axis] = c
    wt = Tensor(weights.reshape(shape), dtype=pred_probs.dtype)
    logp = log(clamp_min(pred_probs, LOG_FLOOR))
    per_pixel = tsum(target.detach() * wt * logp, axis=axis)
    return -mean(per_pixel)


def cross_entropy(pred_probs: Tensor, target: Tensor) -> Tensor:
    return weighted_cross_entropy(pred_probs, target, None)


def compose_tryon(m_out: Tensor, i_wrp: Tensor, i_rp: Tensor) -> Tensor:
    """ I_tryon = M_out * I_wrp + (1 - M_out) * I_rp. """
    if np.any(m_out.data < 0) or np.any(m_out.data > 1):
        raise ContractError("compose_tryon: M_out must lie in [0, 1].")
    if i_wrp.shape != i_rp.shape:
        raise DimensionError(f"compose_tryon: I_wrp {i_wrp.shape} and I_rp {i_rp.shape} differ.")
    return m_out * i_wrp + (1.0 - m_out) * i_rp


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


def sobel(x: Tensor) -> Tensor:
    """ Per-channel Sobel responses, N x C x H x W -> N x 2C x H x W (reflection padding). """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    planes = reshape(x, (n * c, 1, h, w))
    kernel = Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None], dtype=x.dtype)
    out = F.conv2d(F.pad_reflect(planes, 1), kernel)
    out = reshape(out, (n, 2 * c, h, w))
    return reshape(out, out.shape[1:]) if squeeze else out


def edge_loss(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _same_extent(pred, target, "edge_loss")
    return l1(sobel(pred), sobel(target))


def smooth_l1_loss(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    _same_extent(pred, target, "smooth_l1_loss")
    return mean(smooth_l1(pred - target, delta))


def recon_loss(m_exp_pred: Tensor, m_exp: Tensor, m_bp_pred: Tensor, m_bp_gt: Tensor,
               i_uv_pred: Tensor, i_uv: Tensor) -> Tensor:
    """ CE(M_exp_pred, M_exp) + CE(M_bp_pred, M_bp_gt) + smoothL1(I_uv_pred - I_uv). """
    checks = ((m_exp_pred, m_exp, 7, "M_exp"), (m_bp_pred, m_bp_gt, 11, "M_bp"), (i_uv_pred, i_uv, 2, "I_uv"))
    for pred, target, channels, what in checks:
        axis = channel_axis(pred)
        if pred.shape[axis] != channels or target.shape[axis] != channels:
            raise DimensionError(f"recon_loss: {what} needs {channels} channels, got "
                                 f"{pred.shape[axis]} and {target.shape[axis]}.")
    return (cross_entropy(m_exp_pred, m_exp.detach())
            + cross_entropy(m_bp_pred, m_bp_gt)
            + smooth_l1_loss(i_uv_pred, i_uv.detach()))


def fusion_loss(i_tryon: Tensor, i_m: Tensor, recon: Tensor, weights: LossWeights,
                extractor: PerceptualExtractor | None = None) -> Tensor:
    l1_, l2_, l3_, l4_ = weights.lambdas
    loss = l1_ * l1(i_tryon, i_m)
    if l2_:
        loss = loss + l2_ * perceptual_loss(i_tryon, i_m, extractor)
    if l3_:
        loss = loss + l3_ * edge_loss(i_tryon, i_m)
    if l4_:
        loss = loss + l4_ * recon
    return loss


def total_loss(l_wrp: Tensor, l_cs: Tensor, l_fus: Tensor, weights: LossWeights) -> Tensor:
    a1, a2, a3 = weights.alpha
    return mul(l_wrp, a1) + mul(l_cs, a2) + mul(l_fus, a3)


logger = logging.getLogger(__name__)
