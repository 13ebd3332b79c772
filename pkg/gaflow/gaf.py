""" Gated appearance flow: multi-scale candidate flows and their per-pixel aggregation.

K + 1 candidate flows f_0 .. f_K are predicted from the last K + 1
decoder features, each at twice the resolution of the previous one,
resized to the full extent and folded into a single flow f_agg by a
gating variant:

    convgru   ConvGRU over the candidates, coarse to fine, then a 1x1
              projection of the final hidden state
    convlstm  same with a ConvLSTM cell
    residual  f_(K-1) + sigmoid(conv[f_(K-1); f_K]) * f_K
    single    f_K alone (no aggregation)
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .layers import Conv2d, Module
from .tensor import Tensor, concat_channels, sigmoid, split_channels, tanh
from .warp import FlowField, resize_flow


class GatingVariant(enum.Enum):
    CONVGRU = "convgru"
    CONVLSTM = "convlstm"
    RESIDUAL = "residual"
    SINGLE = "single"

    @classmethod
    def parse(cls, s: "str | GatingVariant") -> "GatingVariant":
        if isinstance(s, cls):
            return s
        try:
            return cls(str(s).lower())
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ConfigurationError(f"Unknown gating variant {s!r}; choose one of {choices}.")


@dataclass
class FlowPyramid:
    candidates: list[FlowField]
    resized: list[FlowField] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    @property
    def K(self) -> int:
        return len(self.candidates) - 1

    def validate(self) -> None:
        if not self.candidates:
            raise ConfigurationError("A flow pyramid needs at least one candidate.")
        for lower, upper in zip(self.candidates[:-1], self.candidates[1:]):
            if upper.height != 2 * lower.height or upper.width != 2 * lower.width:
                raise DimensionError(f"Candidate extents must double per level: {lower.extent} -> {upper.extent}.")
        if self.resized:
            if len(self.resized) != len(self.candidates):
                raise DimensionError("Resized list length differs from the candidate list.")
            extents = {f.extent for f in self.resized}
            if len(extents) != 1:
                raise DimensionError(f"Resized candidates have differing extents {sorted(extents)}.")


@dataclass
class GatingCellState:
    hidden: Tensor
    cell: Tensor | None = None

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int, dtype, with_cell: bool = False):
        shape = (batch, channels, height, width)
        cell = Tensor(np.zeros(shape), dtype=dtype) if with_cell else None
        return cls(Tensor(np.zeros(shape), dtype=dtype), cell)


class CandidateHeads(Module):
    """ Independent 3x3 convolutions turning decoder features into 2-channel flows.

    Parameters
    ----------
    feature_channels : list[int]
        channel counts of the K + 1 decoder features used, coarse first
    rng : numpy.random.Generator
    """
    def __init__(self, feature_channels: list[int], rng: np.random.Generator):
        self.convs = [Conv2d(c, 2, 3, rng=rng) for c in feature_channels]

    @property
    def K(self) -> int:
        return len(self.convs) - 1

    def __call__(self, decoder_features: list[Tensor]) -> FlowPyramid:
        return predict_candidates(self, decoder_features, self.K)


def predict_candidates(heads: CandidateHeads, decoder_features: list[Tensor], K: int) -> FlowPyramid:
    """ Predict f_0 .. f_K from the last K + 1 decoder features (outermost last). """
    if K < 0:
        raise ConfigurationError(f"K must be non-negative, got {K}.")
    if len(decoder_features) < K + 1:
        raise ConfigurationError(f"K = {K} needs {K + 1} decoder feature maps, the backbone provides "
                                 f"{len(decoder_features)}; increase warp_net.depth or lower K.")
    if len(heads.convs) != K + 1:
        raise ConfigurationError(f"{len(heads.convs)} candidate heads cannot serve K = {K}.")
    features = decoder_features[-(K + 1):]
    candidates = [FlowField(conv(feat)) for conv, feat in zip(heads.convs, features)]
    h, w = candidates[-1].extent
    resized = [resize_flow(f, h, w) for f in candidates]
    return FlowPyramid(candidates, resized)


class ConvGRUCell(Module):
    """ Convolutional GRU over 2-channel flow inputs.

        z  = sigmoid(conv_z[h; x])
        r  = sigmoid(conv_r[h; x])
        h~ = tanh(conv_h[r * h; x])
        h' = (1 - z) * h + z * h~
    """
    def __init__(self, hidden: int, rng: np.random.Generator, input_channels: int = 2):
        self.hidden = hidden
        self.conv_z = Conv2d(hidden + input_channels, hidden, 3, rng=rng)
        self.conv_r = Conv2d(hidden + input_channels, hidden, 3, rng=rng)
        self.conv_h = Conv2d(hidden + input_channels, hidden, 3, rng=rng)

    def initial_state(self, like: Tensor) -> GatingCellState:
        n, _, h, w = like.shape
        return GatingCellState.zeros(n, self.hidden, h, w, like.dtype)

    def __call__(self, state: GatingCellState, candidate: FlowField) -> GatingCellState:
        return convgru_step(state, candidate, self)

    def gates(self, state: GatingCellState, x: Tensor) -> tuple[Tensor, Tensor]:
        hx = concat_channels([state.hidden, x])
        return sigmoid(self.conv_z(hx)), sigmoid(self.conv_r(hx))


def _check_state(state: GatingCellState, candidate: FlowField) -> Tensor:
    x = candidate.displacements
    if state.hidden.shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"Gating cell state extent {state.hidden.shape[-2:]} differs from the "
                             f"candidate extent {x.shape[-2:]}.")
    return x


def convgru_step(state: GatingCellState, candidate: FlowField, params: ConvGRUCell) -> GatingCellState:
    x = _check_state(state, candidate)
    h = state.hidden
    z, r = params.gates(state, x)
    h_tilde = tanh(params.conv_h(concat_channels([r * h, x])))
    return GatingCellState((1 - z) * h + z * h_tilde)


class ConvLSTMCell(Module):
    """ Convolutional LSTM; one 3x3 convolution produces the i, f, o, g gates. """
    def __init__(self, hidden: int, rng: np.random.Generator, input_channels: int = 2):
        self.hidden = hidden
        self.conv = Conv2d(hidden + input_channels, 4 * hidden, 3, rng=rng)

    def initial_state(self, like: Tensor) -> GatingCellState:
        n, _, h, w = like.shape
        return GatingCellState.zeros(n, self.hidden, h, w, like.dtype, with_cell=True)

    def __call__(self, state: GatingCellState, candidate: FlowField) -> GatingCellState:
        x = _check_state(state, candidate)
        gates = self.conv(concat_channels([state.hidden, x]))
        i, f, o, g = split_channels(gates, [self.hidden] * 4)
        cell = sigmoid(f) * state.cell + sigmoid(i) * tanh(g)
        return GatingCellState(sigmoid(o) * tanh(cell), cell)


class ResidualGate(Module):
    def __init__(self, rng: np.random.Generator):
        self.conv = Conv2d(4, 2, 3, rng=rng)

    def __call__(self, coarse: FlowField, fine: FlowField) -> FlowField:
        g = sigmoid(self.conv(concat_channels([coarse.displacements, fine.displacements])))
        return FlowField(coarse.displacements + g * fine.displacements)


class FlowAggregator(Module):
    """ Parameters of one gating variant.

    Parameters
    ----------
    variant : GatingVariant
    hidden : int
        hidden channels of the recurrent cells
    rng : numpy.random.Generator
    """
    def __init__(self, variant: GatingVariant, hidden: int, rng: np.random.Generator):
        self.variant = GatingVariant.parse(variant)
        if self.variant is GatingVariant.CONVGRU:
            self.cell = ConvGRUCell(hidden, rng)
            self.projection = Conv2d(hidden, 2, 1, rng=rng)
        elif self.variant is GatingVariant.CONVLSTM:
            self.cell = ConvLSTMCell(hidden, rng)
            self.projection = Conv2d(hidden, 2, 1, rng=rng)
        elif self.variant is GatingVariant.RESIDUAL:
            self.gate = ResidualGate(rng)

    def __call__(self, pyramid: FlowPyramid) -> FlowField:
        return aggregate(pyramid, self.variant, self)


def aggregate(pyramid: FlowPyramid, variant: GatingVariant, params: FlowAggregator) -> FlowField:
    """ Fold the resized candidates into f_agg, extent (2, H, W). """
    variant = GatingVariant.parse(variant)
    if variant is not params.variant:
        raise ConfigurationError(f"Aggregator parameters are for {params.variant.value}, not {variant.value}.")
    resized = pyramid.resized or pyramid.candidates
    if variant is GatingVariant.SINGLE:
        return resized[-1]
    if variant is GatingVariant.RESIDUAL:
        if pyramid.K < 1:
            raise ConfigurationError("Residual gating needs K >= 1 (two candidates).")
        return params.gate(resized[-2], resized[-1])
    state = params.cell.initial_state(resized[0].displacements)
    for candidate in resized:
        state = params.cell(state, candidate)
    return FlowField(params.projection(state.hidden))


logger = logging.getLogger(__name__)
