""" Central finite-difference checks of the hand-written adjoints.

Every case builds a scalar function of a few float64 tensors and compares
the tape gradient with (f(x + eps) - f(x - eps)) / (2 eps) on a seeded
subset of entries. The error of one tensor is

    max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-8)
"""
from __future__ import annotations

import logging
import time
import typing
from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import losses
from .gaf import (ConvGRUCell, ConvLSTMCell, FlowAggregator, FlowPyramid, GatingCellState, GatingVariant,
                  ResidualGate)
from .nets import SkipUNet, SkipUNetConfig
from .tensor import (Tape, Tensor, backward, clamp_min, concat_channels, exp, leaky_relu, log, mean, no_grad,
                     precision, relu, reshape, sigmoid, smooth_l1, softmax, split_channels, sqrt, square, tabs,
                     tanh, tsum)
from .warp import FlowField, warp_with_flow

DEFAULT_TOLERANCE = 1e-5
DEFAULT_SAMPLES = 24


@dataclass
class GradcheckResult:
    name: str
    error: float
    passed: bool

    def __str__(self) -> str:
        return f"{'ok  ' if self.passed else 'FAIL'} {self.name:<24s} max relative error {self.error:.2e}"


def _value(fn: typing.Callable, inputs: typing.Sequence[Tensor]) -> float:
    with no_grad():
        return fn(*inputs).item()


def check_gradients(fn: typing.Callable[..., Tensor], inputs: typing.Sequence[Tensor], eps: float = 1e-6,
                    samples: int = DEFAULT_SAMPLES, seed: int = 0) -> float:
    """ Maximum relative error over all inputs.

    Parameters
    ----------
    fn : callable
        maps the input tensors to a scalar tensor
    inputs : sequence of Tensor
        tensors with requires_grad set; perturbed in place and restored
    eps : float
    samples : int
        entries checked per tensor (all entries of smaller tensors)
    seed : int
        selects the sampled entries
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
        backward(out)
        tape.clear()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        size = flat.size
        index = np.arange(size) if size <= samples else np.sort(rng.choice(size, samples, replace=False))
        numeric = np.empty(len(index))
        for j, i in enumerate(index):
            original = flat[i]
            flat[i] = original + eps
            plus = _value(fn, inputs)
            flat[i] = original - eps
            minus = _value(fn, inputs)
            flat[i] = original
            numeric[j] = (plus - minus) / (2 * eps)
        a = analytic[index]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(a - numeric).max(initial=0.0) / scale))
    return worst


def _param(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _projection(rng: np.random.Generator, shape) -> Tensor:
    """ Fixed random weights turning a tensor output into a scalar. """
    return Tensor(rng.normal(size=shape))


def _scalar(out: Tensor, w: Tensor) -> Tensor:
    return tsum(out * w)


def _elementwise_cases(rng):
    x = _param(rng, 2, 3, 4)
    pos = _param(rng, 2, 3, 4, low=0.5, high=2.0)
    b = _param(rng, 3, 1)
    w = _projection(rng, (2, 3, 4))
    yield "add/sub/mul/div", (lambda x, b, p: _scalar((x + b) * p - x / p + (b - x), w)), [x, b, pos]
    for name, op in (("exp", exp), ("tanh", tanh), ("sigmoid", sigmoid), ("relu", relu),
                     ("leaky_relu", leaky_relu), ("abs", tabs), ("square", square),
                     ("smooth_l1", lambda t: smooth_l1(t, 0.5)), ("clamp_min", lambda t: clamp_min(t, 0.1))):
        yield name, (lambda x, op=op: _scalar(op(x), w)), [_param(rng, 2, 3, 4)]
    for name, op in (("log", log), ("sqrt", sqrt)):
        yield name, (lambda x, op=op: _scalar(op(x), w)), [_param(rng, 2, 3, 4, low=0.5, high=2.0)]
    yield "softmax", (lambda x: _scalar(softmax(x), w)), [_param(rng, 2, 3, 4)]
    wm = _projection(rng, (2, 4))
    yield "mean/sum/reshape", (lambda x: tsum(mean(reshape(x, (2, 12)), axis=1)) + tsum(x[:, 1] * wm)), \
        [_param(rng, 2, 3, 4)]
    wc = _projection(rng, (1, 5, 3, 3))

    def concat_split(a, c):
        parts = split_channels(concat_channels([a, c]), [1, 4])
        return _scalar(concat_channels(parts[::-1]), wc)
    yield "concat/split", concat_split, [_param(rng, 1, 2, 3, 3), _param(rng, 1, 3, 3, 3)]


def _spatial_cases(rng):
    x = _param(rng, 2, 3, 6, 5)
    weight = _param(rng, 4, 3, 3, 3)
    bias = _param(rng, 4)
    w1 = _projection(rng, (2, 4, 6, 5))
    yield "conv2d", (lambda x, k, b: _scalar(F.conv2d(x, k, b, 1, 1), w1)), [x, weight, bias]
    w2 = _projection(rng, (2, 4, 3, 3))
    yield "conv2d stride 2", (lambda x, k: _scalar(F.conv2d(x, k, None, 2, 1), w2)), \
        [_param(rng, 2, 3, 6, 5), _param(rng, 4, 3, 3, 3)]
    wu = _projection(rng, (1, 2, 8, 6))
    yield "upsample_bilinear", (lambda x: _scalar(F.upsample_bilinear(x, 8, 6), wu)), [_param(rng, 1, 2, 4, 3)]
    yield "upsample aligned", (lambda x: _scalar(F.upsample_bilinear(x, 8, 6, align_corners=True), wu)), \
        [_param(rng, 1, 2, 4, 3)]
    wp = _projection(rng, (1, 2, 3, 2))
    yield "avg_pool2d", (lambda x: _scalar(F.avg_pool2d(x, 2), wp)), [_param(rng, 1, 2, 6, 4)]
    wn = _projection(rng, (2, 3, 4, 4))
    yield "instance_norm", (lambda x: _scalar(F.instance_norm(x), wn)), [_param(rng, 2, 3, 4, 4)]
    wr = _projection(rng, (1, 2, 7, 6))
    yield "pad_reflect", (lambda x: _scalar(F.pad_reflect(x, 1), wr)), [_param(rng, 1, 2, 5, 4)]
    ww = _projection(rng, (2, 3, 6, 5))
    image = _param(rng, 2, 3, 6, 5, low=0.0)
    flow = _param(rng, 2, 2, 6, 5, low=-1.7, high=1.7)
    yield "warp_with_flow", (lambda i, f: _scalar(warp_with_flow(i, FlowField(f)), ww)), [image, flow]


def _loss_cases(rng):
    pred = _param(rng, 2, 3, 8, 8, low=0.0)
    target = Tensor(rng.uniform(size=(2, 3, 8, 8)))
    yield "l1", (lambda p: losses.l1(p, target)), [pred]
    extractor = losses.PerceptualExtractor()
    yield "perceptual_loss", (lambda p: losses.perceptual_loss(p, target, extractor)), [_param(rng, 2, 3, 8, 8)]
    yield "tv_loss", (lambda f: losses.tv_loss(f)), [_param(rng, 2, 2, 5, 4)]
    onehot = np.eye(7)[rng.integers(7, size=(2, 4, 3))].transpose(0, 3, 1, 2)
    yield "weighted_cross_entropy", (lambda z: losses.weighted_cross_entropy(softmax(z), Tensor(onehot),
                                                                              (3, 1, 1, 1, 3, 1, 1))), \
        [_param(rng, 2, 7, 4, 3)]
    edge_target = Tensor(rng.uniform(size=(1, 3, 5, 5)))
    yield "edge_loss", (lambda p: losses.edge_loss(p, edge_target)), \
        [_param(rng, 1, 3, 5, 5)]
    m_exp = Tensor(np.eye(7)[rng.integers(7, size=(1, 4, 4))].transpose(0, 3, 1, 2))
    m_bp = Tensor(np.eye(11)[rng.integers(11, size=(1, 4, 4))].transpose(0, 3, 1, 2))
    uv = Tensor(rng.uniform(size=(1, 2, 4, 4)))
    yield "recon_loss", (lambda a, b, c: losses.recon_loss(softmax(a), m_exp, softmax(b), m_bp, sigmoid(c), uv)), \
        [_param(rng, 1, 7, 4, 4), _param(rng, 1, 11, 4, 4), _param(rng, 1, 2, 4, 4)]
    wt = _projection(rng, (1, 3, 4, 4))
    yield "compose_tryon", (lambda m, a, b: _scalar(losses.compose_tryon(sigmoid(m), a, b), wt)), \
        [_param(rng, 1, 1, 4, 4), _param(rng, 1, 3, 4, 4), _param(rng, 1, 3, 4, 4)]
    weights = losses.LossWeights()
    model_image = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    model_mask = Tensor((rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(float))
    garment = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    garment_mask = Tensor(rng.uniform(size=(1, 1, 8, 8)))

    def warp_loss(f0, f1):
        levels = [(warp_with_flow(garment, f), warp_with_flow(garment_mask, f), f) for f in (f0, f1)]
        return losses.warp_stage_loss(levels[-1], levels, model_image, model_mask, weights, extractor)
    yield "warp_stage_loss", warp_loss, [_param(rng, 1, 2, 8, 8), _param(rng, 1, 2, 8, 8)]


def _cell_cases(rng):
    gru = ConvGRUCell(2, rng)
    w = _projection(rng, (1, 2, 4, 4))
    gru_params = [gru.conv_z.weight, gru.conv_r.weight, gru.conv_h.weight,
                  gru.conv_z.bias, gru.conv_r.bias, gru.conv_h.bias]
    yield "ConvGRU cell", (lambda h, x, *_: _scalar(gru(GatingCellState(h), FlowField(x)).hidden, w)), \
        [_param(rng, 1, 2, 4, 4), _param(rng, 1, 2, 4, 4)] + gru_params
    lstm = ConvLSTMCell(2, rng)

    def lstm_fn(h, c, x, *_):
        s = lstm(GatingCellState(h, c), FlowField(x))
        return _scalar(s.hidden, w) + _scalar(s.cell, w)
    yield "ConvLSTM cell", lstm_fn, [_param(rng, 1, 2, 4, 4), _param(rng, 1, 2, 4, 4), _param(rng, 1, 2, 4, 4),
                                     lstm.conv.weight, lstm.conv.bias]
    gate = ResidualGate(rng)
    yield "residual gate", (lambda a, b, *_: _scalar(gate(FlowField(a), FlowField(b)).displacements, w)), \
        [_param(rng, 1, 2, 4, 4), _param(rng, 1, 2, 4, 4), gate.conv.weight, gate.conv.bias]


def _aggregator_cases(rng):
    w = _projection(rng, (1, 2, 4, 4))
    for variant in (GatingVariant.CONVGRU, GatingVariant.CONVLSTM, GatingVariant.RESIDUAL):
        aggregator = FlowAggregator(variant, 2, rng)

        def fn(f0, f1, *_, aggregator=aggregator):
            native = [FlowField(Tensor(np.zeros((1, 2, 2, 2)))), FlowField(Tensor(np.zeros((1, 2, 4, 4))))]
            pyramid = FlowPyramid(native, [FlowField(f0), FlowField(f1)])
            return _scalar(aggregator(pyramid).displacements, w)
        yield f"{variant.value} aggregator", fn, \
            [_param(rng, 1, 2, 4, 4), _param(rng, 1, 2, 4, 4)] + aggregator.parameters()


def _unet_cases(rng):
    net = SkipUNet(SkipUNetConfig(2, 2, depth=2, base_width=2, emit_decoder_features=True), rng)
    w = _projection(rng, (1, 2, 8, 8))
    wf = _projection(rng, (1, 4, 4, 4))

    def fn(x, stem, up, head):
        out, features = net(x)
        return _scalar(out, w) + _scalar(features[1], wf)
    yield "Skip-UNet", fn, [_param(rng, 1, 2, 8, 8), net.stem.weight, net.up[0].weight, net.head.weight]


CASE_GROUPS = (_elementwise_cases, _spatial_cases, _loss_cases, _cell_cases, _aggregator_cases, _unet_cases)


def run_suite(tolerance: float = DEFAULT_TOLERANCE, samples: int = DEFAULT_SAMPLES,
              seed: int = 0) -> list[GradcheckResult]:
    """ Check every differentiable operation in 64-bit precision. """
    results = []
    start = time.monotonic()
    with precision("float64"):
        rng = np.random.default_rng(seed)
        for group in CASE_GROUPS:
            for name, fn, inputs in group(rng):
                error = check_gradients(fn, inputs, samples=samples, seed=seed)
                result = GradcheckResult(name, error, error < tolerance)
                logger.debug(str(result))
                results.append(result)
    failed = sum(not r.passed for r in results)
    logger.info(f"Gradient check: {len(results) - failed}/{len(results)} passed "
                f"in {time.monotonic() - start:.1f} s.")
    return results


logger = logging.getLogger(__name__)
