import os
import tempfile

import numpy as np
import pytest

from gaflow import experiments, synthdata, training
from gaflow.checkpoint import load_checkpoint
from gaflow.pipeline import ModelSettings, ZFlow
from gaflow.scripts import RunConfig


@pytest.fixture
def setup_tmpdir():
    with tempfile.TemporaryDirectory() as tmpdirname:
        yield tmpdirname


@pytest.fixture(scope="module")
def benchmark():
    """ 200 training and 32 held-out pairs at 64x48, seed 7. """
    train = synthdata.generate(7, 200, 64, 48, amplitude=3.0)
    val = synthdata.generate([7, 1], 32, 64, 48, amplitude=3.0)
    return train, val


@pytest.fixture(scope="module")
def ablation(benchmark):
    train, val = benchmark
    config = RunConfig().flat()
    config.update({"K": 3, "epochs": 30, "lr": 1e-3})
    with tempfile.TemporaryDirectory() as tmpdirname:
        rows = experiments.run_ablation(config, ["single", "convgru", "residual"], train, val, tmpdirname)
    return {r["variant"]: r for r in rows}


@pytest.fixture(scope="module")
def joint_run(benchmark):
    """ tau = 2 warm-up epochs followed by 5 joint epochs; evaluations at tau and at the end. """
    train, val = benchmark
    config = RunConfig().flat()
    config.update({"epochs": 7, "tau": 2, "lr": 1e-3})
    with tempfile.TemporaryDirectory() as tmpdirname:
        trainer = training.Trainer(config, train, (), tmpdirname)
        trainer.fit()
        warm = ZFlow(ModelSettings.from_config(config))
        warm.load_state_dict(load_checkpoint(os.path.join(tmpdirname, training.checkpoint_name(2))))
        at_tau = training.evaluate(warm, val, config["batch_size"])
        final = trainer.evaluate(val)
    return at_tau, final


@pytest.mark.slow
def test_gated_flow_recovers_ground_truth(ablation):
    convgru, single = ablation["convgru"], ablation["single"]
    assert convgru["epe"] < 1.5
    assert convgru["epe"] <= 0.9 * single["epe"]


@pytest.mark.slow
def test_convgru_gating_not_worse_than_residual(ablation):
    assert ablation["residual"]["warp_ssim"] - ablation["convgru"]["warp_ssim"] <= 0.002


@pytest.mark.slow
def test_joint_training_improves_tryon(joint_run):
    at_tau, final = joint_run
    assert final["tryon_ssim"] > at_tau["tryon_ssim"]


@pytest.mark.slow
def test_fusion_beats_pasted_garment(joint_run):
    _, final = joint_run
    assert final["tryon_ssim"] > final["paste_ssim"]


@pytest.mark.slow
def test_warp_stage_learns(setup_tmpdir):
    samples = synthdata.generate(61, 12, 32, 32, amplitude=3.0)
    config = RunConfig().flat()
    config.update({"K": 2, "base_width": 4, "gaf.hidden": 4, "warp_net.depth": 3, "seg_net.depth": 3,
                   "fusion_net.depth": 3, "batch_size": 4, "epochs": 8, "tau": 8, "lr": 2e-3})
    trainer = training.Trainer(config, samples[:8], (), setup_tmpdir, stages=("warp",))
    before = trainer.evaluate(samples[8:])
    trainer.fit()
    after = trainer.evaluate(samples[8:])
    losses = [h["losses"]["wrp"] for h in trainer.history]
    assert losses[-1] < losses[0]
    assert after["warp_ssim"] > before["warp_ssim"]


@pytest.mark.slow
def test_warmup_loss_moving_average_decreases(setup_tmpdir):
    samples = synthdata.generate(63, 16, 32, 32, amplitude=2.0)
    config = RunConfig().flat()
    config.update({"K": 2, "base_width": 4, "gaf.hidden": 4, "warp_net.depth": 3, "seg_net.depth": 3,
                   "fusion_net.depth": 3, "batch_size": 4, "epochs": 15, "tau": 15, "lr": 2e-3})
    trainer = training.Trainer(config, samples, (), setup_tmpdir)
    trainer.fit()
    assert all(h["phase"] == training.PHASE_WARMUP for h in trainer.history)
    totals = np.array([h["losses"]["total"] for h in trainer.history])
    averages = np.convolve(totals, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(averages) < 0)


@pytest.mark.slow
def test_segmentation_beats_majority_class(setup_tmpdir):
    samples = synthdata.generate(62, 12, 32, 32, amplitude=2.0)
    config = RunConfig().flat()
    config.update({"K": 2, "base_width": 4, "gaf.hidden": 4, "warp_net.depth": 3, "seg_net.depth": 3,
                   "fusion_net.depth": 3, "batch_size": 4, "epochs": 30, "tau": 30, "lr": 5e-3})
    trainer = training.Trainer(config, samples[:8], (), setup_tmpdir)
    trainer.fit()
    values = trainer.evaluate(samples[8:])
    assert values["seg_accuracy"] > values["majority_accuracy"]
