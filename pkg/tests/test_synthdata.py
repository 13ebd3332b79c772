import numpy as np
import pytest

from gaflow import synthdata
from gaflow.errors import ConfigurationError, ContractError, DimensionError, GenerationError
from gaflow.sample import TryOnSample, check_sample


@pytest.fixture(scope="module")
def samples():
    return synthdata.generate(11, 3, 64, 48, amplitude=3.0)


def test_samples_satisfy_contract(samples):
    for s in samples:
        check_sample(s)
        assert s.extent == (64, 48)
        assert s.gt_flow.shape == (2, 64, 48)


def test_generation_is_deterministic(samples):
    again = synthdata.generate(11, 3, 64, 48, amplitude=3.0, threads=2)
    assert all(a.equals(b) for a, b in zip(samples, again))
    other = synthdata.generate(12, 1, 64, 48, amplitude=3.0)
    assert not other[0].equals(samples[0])


def test_images_are_quantized(samples):
    for name in ("I_p", "I_m"):
        value = getattr(samples[0], name) * 255
        assert np.allclose(value, np.round(value), atol=1e-3)


def test_flow_vanishes_outside_worn_garment(samples):
    s = samples[0]
    assert np.all(s.gt_flow[:, s.M_m_gt[0] == 0] == 0)
    assert np.abs(s.gt_flow).max() <= 3.0 + 1e-6


def test_ground_truth_flow_reproduces_model_image(samples):
    for s in samples:
        assert synthdata.self_consistency(s) < 0.02


def test_zero_amplitude_keeps_garment_in_place():
    s = synthdata.generate(3, 1, 64, 48, amplitude=0.0)[0]
    assert np.array_equal(s.M_p, s.M_m_gt)
    assert np.all(s.gt_flow == 0)


def test_garment_class_matches_mask(samples):
    s = samples[1]
    assert np.array_equal(s.M_s_gt[1], s.M_m_gt[0])


def test_invalid_arguments():
    with pytest.raises(GenerationError):
        synthdata.generate(0, 0)
    with pytest.raises(GenerationError):
        synthdata.generate(0, 1, amplitude=5.0)
    with pytest.raises(GenerationError):
        synthdata.generate(0, 1, 8, 8)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("GAFLOW_THREADS", "3")
    assert synthdata.worker_count() == 3
    monkeypatch.setenv("GAFLOW_THREADS", "zero")
    with pytest.raises(ConfigurationError):
        synthdata.worker_count()


def test_point_in_polygon():
    square = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]])
    px = np.array([2.0, 5.0, -1.0])
    py = np.array([2.0, 2.0, 2.0])
    assert list(synthdata.point_in_polygon(px, py, square)) == [True, False, False]


def test_check_sample_rejects_broken_labels(samples):
    s = samples[2]
    broken = TryOnSample(**dict(s.arrays(), M_s_gt=s.M_s_gt * 0.5))
    with pytest.raises(ContractError):
        check_sample(broken)
    short = TryOnSample(**dict(s.arrays(), I_uv=s.I_uv[:1]))
    with pytest.raises(DimensionError):
        check_sample(short)
