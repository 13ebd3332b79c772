""" The ZFlow model: garment warping, conditional segmentation and texture fusion.

    warp net    [I_p; M_p; I_priors]                 (37) -> decoder features
                -> candidate flows f_0 .. f_K -> gated f_agg -> I_wrp, M_wrp
    seg net     [I_p; I_priors]                      (36) -> softmax -> M_exp (7)
    fusion net  [I_wrp; M_exp; I_ttp; I_uv; M_bp_gt] (26) -> I_rp, M_out,
                M_exp_pred, M_bp_pred, I_uv_pred (24)
    I_tryon   = M_out * I_wrp + (1 - M_out) * I_rp
"""
from __future__ import annotations

import logging
import typing
from dataclasses import dataclass, field

import numpy as np

from .constants import (CHANNELS_BODYPART, CHANNELS_CLOTHING, CHANNELS_IMAGE, CHANNELS_MASK, CHANNELS_PRIORS,
                        CHANNELS_UV, CLOTH_GARMENT, FUSION_SPLIT, PRIORS_BODYPART_OFFSET)
from .errors import ConfigurationError, DimensionError
from .gaf import CandidateHeads, FlowAggregator, FlowPyramid, GatingVariant, predict_candidates
from .layers import Module
from .losses import PerceptualExtractor, compose_tryon
from .nets import SkipUNet, SkipUNetConfig, unet_forward
from .sample import CHANNEL_CONTRACT, TryOnBatch, TryOnSample, collate
from .tensor import Tensor, concat_channels, no_grad, sigmoid, softmax, split_channels
from .warp import FlowField, warp_with_flow

WARP_IN = CHANNELS_IMAGE + CHANNELS_MASK + CHANNELS_PRIORS
SEG_IN = CHANNELS_IMAGE + CHANNELS_PRIORS
FUSION_IN = CHANNELS_IMAGE + CHANNELS_CLOTHING + CHANNELS_IMAGE + CHANNELS_UV + CHANNELS_BODYPART
FUSION_OUT = sum(FUSION_SPLIT)


@dataclass(frozen=True)
class ModelSettings:
    K: int = 3
    gating: str = "convgru"
    hidden: int = 8
    base_width: int = 16
    warp_depth: int = 4
    seg_depth: int = 4
    fusion_depth: int = 4
    dense_priors: bool = True
    seed: int = 7

    def __post_init__(self):
        GatingVariant.parse(self.gating)
        if self.K < 0:
            raise ConfigurationError(f"K must be non-negative, got {self.K}.")
        if self.K > self.warp_depth:
            raise ConfigurationError(f"K = {self.K} needs {self.K + 1} decoder features; warp_net.depth = "
                                     f"{self.warp_depth} provides {self.warp_depth + 1}.")
        if GatingVariant.parse(self.gating) is GatingVariant.RESIDUAL and self.K < 1:
            raise ConfigurationError("Residual gating needs K >= 1.")

    @classmethod
    def from_config(cls, config: dict[str, typing.Any]) -> "ModelSettings":
        """ Build from a flat (dotted-key) run configuration. """
        return cls(K=config["K"], gating=config["gating"], hidden=config["gaf.hidden"],
                   base_width=config["base_width"], warp_depth=config["warp_net.depth"],
                   seg_depth=config["seg_net.depth"], fusion_depth=config["fusion_net.depth"],
                   dense_priors=config["priors.dense"], seed=config["seed"])


@dataclass
class StageOutputs:
    pyramid: FlowPyramid | None = None
    f_agg: FlowField | None = None
    I_wrp: Tensor | None = None
    M_wrp: Tensor | None = None
    # (I_wrp^l, M_wrp^l, f_l) for l = 0..K
    levels: list[tuple[Tensor, Tensor, FlowField]] = field(default_factory=list)
    M_exp: Tensor | None = None
    I_ttp: Tensor | None = None
    I_rp: Tensor | None = None
    M_out: Tensor | None = None
    M_exp_pred: Tensor | None = None
    M_bp_pred: Tensor | None = None
    I_uv_pred: Tensor | None = None
    I_tryon: Tensor | None = None

    @property
    def final(self) -> tuple[Tensor, Tensor, FlowField]:
        return self.I_wrp, self.M_wrp, self.f_agg


def check_batch(batch: TryOnBatch) -> TryOnBatch:
    """ Reject batches whose tensors break the channel contract. """
    extent = batch.extent
    for name, t in batch.tensors.items():
        channels = CHANNEL_CONTRACT.get(name)
        if channels is None:
            continue
        if t.ndim != 4 or t.shape[1] != channels:
            raise DimensionError(f"{name}: expected N x {channels} x H x W, got {t.shape} (channel axis).")
        if t.shape[-2:] != extent:
            raise DimensionError(f"{name}: extent {t.shape[-2:]} differs from {extent} (height/width axes).")
    return batch


class ZFlow(Module):
    """ The three stages and their parameters.

    Parameters
    ----------
    settings : ModelSettings
    """
    def __init__(self, settings: ModelSettings = ModelSettings()):
        self.settings = settings
        self.variant = GatingVariant.parse(settings.gating)
        rng = np.random.default_rng(settings.seed)
        warp_cfg = SkipUNetConfig(WARP_IN, 0, settings.warp_depth, settings.base_width, emit_decoder_features=True)
        self.warp_net = SkipUNet(warp_cfg, rng)
        widths = warp_cfg.widths
        self.heads = CandidateHeads([widths[settings.K - j] for j in range(settings.K + 1)], rng)
        self.aggregator = FlowAggregator(self.variant, settings.hidden, rng)
        self.seg_net = SkipUNet(SkipUNetConfig(SEG_IN, CHANNELS_CLOTHING, settings.seg_depth,
                                               settings.base_width), rng)
        self.fusion_net = SkipUNet(SkipUNetConfig(FUSION_IN, FUSION_OUT, settings.fusion_depth,
                                                  settings.base_width), rng)
        self.perceptual = PerceptualExtractor()
        priors_mask = np.ones((1, CHANNELS_PRIORS, 1, 1))
        if not settings.dense_priors:
            priors_mask[:, PRIORS_BODYPART_OFFSET:] = 0
        self._priors_mask = priors_mask
        logger.debug(f"ZFlow with {self.variant.value} gating, K = {settings.K}: "
                     f"{self.parameter_count()} parameters.")

    @property
    def K(self) -> int:
        return self.settings.K

    def stage_parameters(self, stage: str) -> dict[str, Tensor]:
        prefixes = dict(warp=("warp_net.", "heads.", "aggregator."), seg=("seg_net.",), fusion=("fusion_net.",))
        return {k: p for k, p in self.named_parameters() if k.startswith(prefixes[stage])}

    def _priors(self, batch: TryOnBatch) -> Tensor:
        if self.settings.dense_priors:
            return batch.I_priors
        return batch.I_priors * Tensor(self._priors_mask, dtype=batch.I_priors.dtype)

    def warp_stage(self, batch: TryOnBatch) -> StageOutputs:
        check_batch(batch)
        x = concat_channels([batch.I_p, batch.M_p, self._priors(batch)])
        _, features = unet_forward(self.warp_net, x)
        pyramid = predict_candidates(self.heads, features, self.K)
        f_agg = self.aggregator(pyramid)
        out = StageOutputs(pyramid=pyramid, f_agg=f_agg)
        out.I_wrp = warp_with_flow(batch.I_p, f_agg)
        out.M_wrp = warp_with_flow(batch.M_p, f_agg)
        for f_l in pyramid.resized:
            out.levels.append((warp_with_flow(batch.I_p, f_l), warp_with_flow(batch.M_p, f_l), f_l))
        return out

    def conditional_segmentation(self, batch: TryOnBatch) -> Tensor:
        check_batch(batch)
        logits, _ = unet_forward(self.seg_net, concat_channels([batch.I_p, self._priors(batch)]))
        return softmax(logits)

    def fusion_stage(self, batch: TryOnBatch, I_wrp: Tensor, M_exp: Tensor,
                     out: StageOutputs | None = None) -> StageOutputs:
        out = out or StageOutputs()
        if I_wrp.shape != batch.I_m.shape:
            raise DimensionError(f"fusion_stage: I_wrp {I_wrp.shape} differs from I_m {batch.I_m.shape}.")
        if M_exp.ndim != 4 or M_exp.shape[1] != CHANNELS_CLOTHING or M_exp.shape[-2:] != batch.extent:
            raise DimensionError(f"fusion_stage: M_exp must be N x {CHANNELS_CLOTHING} x H x W, got {M_exp.shape}.")
        garment = M_exp[:, CLOTH_GARMENT:CLOTH_GARMENT + 1]
        I_ttp = batch.I_m * (1.0 - garment)
        x = concat_channels([I_wrp, M_exp, I_ttp, batch.I_uv, batch.M_bp_gt])
        raw, _ = unet_forward(self.fusion_net, x)
        i_rp, m_out, m_exp_pred, m_bp_pred, i_uv_pred = split_channels(raw, FUSION_SPLIT)
        out.I_wrp = I_wrp
        out.M_exp = M_exp
        out.I_ttp = I_ttp
        out.I_rp = sigmoid(i_rp)
        out.M_out = sigmoid(m_out)
        out.M_exp_pred = softmax(m_exp_pred)
        out.M_bp_pred = softmax(m_bp_pred)
        out.I_uv_pred = sigmoid(i_uv_pred)
        out.I_tryon = compose_tryon(out.M_out, I_wrp, out.I_rp)
        return out

    def forward(self, batch: TryOnBatch, seg_grad: bool = True) -> StageOutputs:
        """ All three stages; with seg_grad False no fusion gradient reaches the seg net. """
        out = self.warp_stage(batch)
        M_exp = self.conditional_segmentation(batch)
        fused = M_exp if seg_grad else M_exp.detach()
        self.fusion_stage(batch, out.I_wrp, fused, out)
        out.M_exp = M_exp
        return out

    def __call__(self, batch: TryOnBatch, seg_grad: bool = True) -> StageOutputs:
        return self.forward(batch, seg_grad)

    def infer(self, samples: typing.Sequence[TryOnSample]) -> StageOutputs:
        with no_grad():
            return self.forward(collate(samples))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.named_parameters()}
        state.update({k: b.data for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        tensors = dict(self.named_parameters())
        tensors.update(self.named_buffers())
        missing = [k for k in tensors if k not in state]
        if missing:
            raise ConfigurationError(f"Checkpoint lacks {len(missing)} tensors of this model configuration, "
                                     f"first {missing[0]!r}.")
        for k, t in tensors.items():
            value = np.asarray(state[k])
            if value.shape != t.shape:
                raise ConfigurationError(f"Checkpoint tensor {k!r} has shape {value.shape}, model expects {t.shape}.")
            t.data[...] = value.astype(t.dtype)


logger = logging.getLogger(__name__)
