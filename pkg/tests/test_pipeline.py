import numpy as np
import pytest

from gaflow import synthdata
from gaflow.constants import PRIORS_BODYPART_OFFSET
from gaflow.errors import ConfigurationError, DimensionError
from gaflow.losses import l1
from gaflow.pipeline import ModelSettings, ZFlow
from gaflow.sample import collate
from gaflow.tensor import Tape, Tensor, backward, no_grad

SMALL = dict(K=2, hidden=2, base_width=2, warp_depth=2, seg_depth=2, fusion_depth=2)


@pytest.fixture(scope="module")
def samples():
    return synthdata.generate(31, 2, 16, 16, amplitude=1.0)


@pytest.fixture
def batch(samples):
    return collate(samples, [0, 1])


@pytest.fixture
def model():
    return ZFlow(ModelSettings(**SMALL))


def test_settings_validation():
    with pytest.raises(ConfigurationError):
        ModelSettings(**dict(SMALL, K=3))
    with pytest.raises(ConfigurationError):
        ModelSettings(**dict(SMALL, K=0, gating="residual"))
    with pytest.raises(ConfigurationError):
        ModelSettings(**dict(SMALL, gating="attention"))


def test_forward_shapes(model, batch):
    with no_grad():
        out = model(batch)
    assert out.I_wrp.shape == (2, 3, 16, 16)
    assert out.M_wrp.shape == (2, 1, 16, 16)
    assert [f.extent for f in out.pyramid.candidates] == [(4, 4), (8, 8), (16, 16)]
    assert len(out.levels) == 3
    assert np.allclose(out.M_exp.data.sum(axis=1), 1.0, atol=1e-5)
    assert np.allclose(out.M_bp_pred.data.sum(axis=1), 1.0, atol=1e-5)
    assert out.I_tryon.shape == (2, 3, 16, 16)
    assert 0 <= out.M_out.data.min() and out.M_out.data.max() <= 1


def test_tryon_is_composition(model, batch):
    with no_grad():
        out = model(batch)
    expected = out.M_out.data * out.I_wrp.data + (1 - out.M_out.data) * out.I_rp.data
    assert np.allclose(out.I_tryon.data, expected, atol=1e-6)


def test_torso_region_is_removed_from_model_image(model, batch):
    with no_grad():
        M_exp = model.conditional_segmentation(batch)
        out = model.fusion_stage(batch, batch.I_m, M_exp)
    assert np.allclose(out.I_ttp.data, batch.I_m.data * (1 - M_exp.data[:, 1:2]))


def test_fusion_stage_checks_extents(model, batch):
    with pytest.raises(DimensionError):
        model.fusion_stage(batch, Tensor(np.zeros((2, 3, 8, 8))), Tensor(np.zeros((2, 7, 16, 16))))


def test_stage_parameters_partition_the_model(model):
    counts = [sum(p.data.size for p in model.stage_parameters(s).values()) for s in ("warp", "seg", "fusion")]
    assert sum(counts) == model.parameter_count()
    assert all(c > 0 for c in counts)


def _seg_gradients(model, batch, seg_grad):
    model.zero_grad()
    with Tape() as tape:
        out = model(batch, seg_grad=seg_grad)
        backward(l1(out.I_tryon, batch.I_m))
        tape.clear()
    return [p.grad for p in model.stage_parameters("seg").values()]


def test_segmentation_gradient_can_be_cut(model, batch):
    assert all(np.all(g == 0) for g in _seg_gradients(model, batch, False))
    assert any(np.any(g != 0) for g in _seg_gradients(model, batch, True))


def test_sparse_priors_ignore_body_parts(samples):
    model = ZFlow(ModelSettings(**SMALL, dense_priors=False))
    a = collate(samples)
    b = collate(samples)
    b.I_priors.data[:, 22:] = 0
    with no_grad():
        assert np.allclose(model.warp_stage(a).I_wrp.data, model.warp_stage(b).I_wrp.data)


def test_state_dict_roundtrip(model, batch):
    other = ZFlow(ModelSettings(**dict(SMALL, seed=99)))
    other.load_state_dict(model.state_dict())
    with no_grad():
        assert np.allclose(model(batch).I_tryon.data, other(batch).I_tryon.data)


def test_state_dict_mismatch(model):
    state = dict(model.state_dict())
    with pytest.raises(ConfigurationError):
        ZFlow(ModelSettings(**dict(SMALL, gating="convlstm"))).load_state_dict(state)
    state.pop(next(iter(state)))
    with pytest.raises(ConfigurationError):
        model.load_state_dict(state)


def test_infer_does_not_record(model, samples):
    with Tape() as tape:
        out = model.infer(samples[:1])
        assert len(tape) == 0
    assert not out.I_tryon.requires_grad


@pytest.mark.parametrize("gating", ["convgru", "convlstm", "residual", "single"])
def test_every_gating_variant_runs(samples, gating):
    model = ZFlow(ModelSettings(**dict(SMALL, gating=gating)))
    with no_grad():
        out = model.warp_stage(collate(samples[:1]))
    assert out.f_agg.displacements.shape == (1, 2, 16, 16)


def test_sparse_priors_zero_body_part_channels(samples):
    batch = collate(samples)
    assert np.any(batch.I_priors.data[:, PRIORS_BODYPART_OFFSET:] != 0)
    sparse = ZFlow(ModelSettings(**SMALL, dense_priors=False))._priors(batch)
    assert np.all(sparse.data[:, PRIORS_BODYPART_OFFSET:] == 0)
    assert np.array_equal(sparse.data[:, :PRIORS_BODYPART_OFFSET], batch.I_priors.data[:, :PRIORS_BODYPART_OFFSET])
    dense = ZFlow(ModelSettings(**SMALL))._priors(batch)
    assert dense is batch.I_priors
