import numpy as np
import pytest

from gaflow import gaf
from gaflow.errors import ConfigurationError, DimensionError
from gaflow.gaf import FlowAggregator, FlowPyramid, GatingCellState, GatingVariant
from gaflow.tensor import Tape, Tensor, backward, precision, square, tsum
from gaflow.warp import FlowField


def zero_parameters(module):
    for p in module.parameters():
        p.data[...] = 0


def flows(extents, value=1.0):
    return [FlowField(Tensor(np.full((1, 2, h, w), value), dtype=np.float64)) for h, w in extents]


def test_parse_variants():
    assert GatingVariant.parse("ConvGRU") is GatingVariant.CONVGRU
    assert GatingVariant.parse(GatingVariant.SINGLE) is GatingVariant.SINGLE
    with pytest.raises(ConfigurationError):
        GatingVariant.parse("attention")


def test_convgru_with_zero_weights_halves_state():
    with precision("float64"):
        cell = gaf.ConvGRUCell(3, np.random.default_rng(0))
    zero_parameters(cell)
    state = GatingCellState(Tensor(np.ones((1, 3, 4, 4)), dtype=np.float64))
    candidate = flows([(4, 4)])[0]
    for n in range(1, 4):
        state = cell(state, candidate)
        assert np.allclose(state.hidden.data, 0.5 ** n)


def test_convlstm_state_shapes():
    cell = gaf.ConvLSTMCell(4, np.random.default_rng(0))
    x = Tensor(np.zeros((2, 2, 4, 6)))
    state = cell.initial_state(x)
    state = cell(state, FlowField(x))
    assert state.hidden.shape == (2, 4, 4, 6)
    assert state.cell.shape == (2, 4, 4, 6)


def test_cell_rejects_extent_mismatch():
    cell = gaf.ConvGRUCell(2, np.random.default_rng(0))
    state = cell.initial_state(Tensor(np.zeros((1, 2, 4, 4))))
    with pytest.raises(DimensionError):
        cell(state, FlowField(np.zeros((1, 2, 8, 8))))


def test_pyramid_extents_must_double():
    with pytest.raises(DimensionError):
        FlowPyramid(flows([(4, 3), (6, 6)]))
    assert FlowPyramid(flows([(2, 3), (4, 6), (8, 12)])).K == 2


def test_predict_candidates_needs_enough_features():
    rng = np.random.default_rng(0)
    heads = gaf.CandidateHeads([4, 4, 4], rng)
    features = [Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 4, 4, 4)))]
    with pytest.raises(ConfigurationError):
        gaf.predict_candidates(heads, features, 2)


def test_predict_candidates_resizes_to_finest():
    rng = np.random.default_rng(0)
    heads = gaf.CandidateHeads([8, 4], rng)
    features = [Tensor(np.zeros((1, 16, 1, 1))), Tensor(np.ones((1, 8, 2, 3))), Tensor(np.ones((1, 4, 4, 6)))]
    pyramid = gaf.predict_candidates(heads, features, 1)
    assert [f.extent for f in pyramid.candidates] == [(2, 3), (4, 6)]
    assert [f.extent for f in pyramid.resized] == [(4, 6), (4, 6)]


def test_single_returns_finest_candidate():
    aggregator = FlowAggregator("single", 4, np.random.default_rng(0))
    pyramid = FlowPyramid(flows([(2, 2), (4, 4)], 1.0), flows([(4, 4), (4, 4)], 2.0))
    assert aggregator(pyramid) is pyramid.resized[-1]
    assert aggregator.parameter_count() == 0


def test_residual_gate_with_zero_weights():
    with precision("float64"):
        aggregator = FlowAggregator("residual", 4, np.random.default_rng(0))
    zero_parameters(aggregator)
    resized = flows([(4, 4)], 1.0) + flows([(4, 4)], 2.0)
    pyramid = FlowPyramid(flows([(2, 2), (4, 4)]), resized)
    f_agg = aggregator(pyramid)
    assert np.allclose(f_agg.numpy(), 1.0 + 0.5 * 2.0)


def test_residual_needs_two_candidates():
    aggregator = FlowAggregator("residual", 4, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        aggregator(FlowPyramid(flows([(4, 4)])))


@pytest.mark.parametrize("variant", ["convgru", "convlstm"])
def test_recurrent_aggregation_shape(variant):
    aggregator = FlowAggregator(variant, 4, np.random.default_rng(0))
    pyramid = FlowPyramid(flows([(2, 3), (4, 6)]), flows([(4, 6), (4, 6)]))
    f_agg = aggregator(pyramid)
    assert f_agg.displacements.shape == (1, 2, 4, 6)
    assert np.all(np.isfinite(f_agg.numpy()))


def test_aggregate_rejects_foreign_parameters():
    aggregator = FlowAggregator("convgru", 4, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        gaf.aggregate(FlowPyramid(flows([(4, 4)])), "single", aggregator)


@pytest.mark.parametrize("variant", ["convgru", "convlstm", "residual"])
def test_every_aggregator_parameter_receives_gradient(variant):
    rng = np.random.default_rng(3)
    with precision("float64"):
        aggregator = FlowAggregator(variant, 3, rng)
        resized = [FlowField(Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)) for _ in range(2)]
    pyramid = FlowPyramid(flows([(2, 2), (4, 4)]), resized)
    aggregator.zero_grad()
    with Tape() as tape:
        backward(tsum(square(aggregator(pyramid).displacements)))
        tape.clear()
    names = [k for k, p in aggregator.named_parameters() if not np.any(p.grad != 0)]
    assert names == []
    assert all(np.any(f.displacements.grad != 0) for f in resized)
