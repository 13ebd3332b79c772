import os
import tempfile

import pytest

from gaflow import datasetio, scripts
from gaflow.constants import EXIT_CONFIG_ERROR, EXIT_IO_ERROR, EXIT_OK
from gaflow.errors import ConfigurationError
from gaflow.pipeline import ModelSettings


@pytest.fixture
def setup_tmpdir():
    with tempfile.TemporaryDirectory() as tmpdirname:
        yield tmpdirname


def small_args(tmpdir, *extra):
    overrides = ",".join([f"data.dir={os.path.join(tmpdir, 'data')}", "data.count=3", "data.val_count=2",
                          "data.amplitude=1.0", "base_width=2", "gaf.hidden=2", "warp_net.depth=2",
                          "seg_net.depth=2", "fusion_net.depth=2", "batch_size=2", "prefetch=1"])
    return ["--out", os.path.join(tmpdir, "run"), "--resolution", "16x16", "--K", "2", "--epochs", "1",
            "--tau", "0", "--set", overrides] + list(extra)


def test_packaged_config_matches_defaults():
    config = scripts.RunConfig()
    defaults = config.flat()
    config.readToml(scripts.PACKAGED_CONFIG)
    assert config.flat() == defaults


def test_defaults_match_model_settings():
    config = scripts.RunConfig().flat()
    assert config["base_width"] == ModelSettings().base_width
    assert ModelSettings.from_config(config) == ModelSettings()


def test_coerce():
    assert scripts.Config.coerce("priors.dense", True, "false") is False
    assert scripts.Config.coerce("K", 3, "4") == 4
    assert scripts.Config.coerce("lr", 1e-4, "2e-4") == pytest.approx(2e-4)
    assert scripts.Config.coerce("loss.class_weights", [1.0], "1;2;3") == [1.0, 2.0, 3.0]
    with pytest.raises(ConfigurationError):
        scripts.Config.coerce("K", 3, "three")
    with pytest.raises(ConfigurationError):
        scripts.Config.coerce("K", 3, 2.5)


def test_unknown_key():
    config = scripts.RunConfig()
    with pytest.raises(ConfigurationError):
        config.set("loss.gamma", 1.0)
    with pytest.raises(ConfigurationError):
        config.merge(dict(warp_net=dict(width=3)))


def test_user_config_file(setup_tmpdir):
    path = os.path.join(setup_tmpdir, "user.toml")
    with open(path, "w") as fp:
        fp.write('gating = "residual"\n[loss]\nlambda3 = 0.0\n')
    config = scripts.RunConfig()
    config.readToml(path)
    assert config.get("gating") == "residual"
    assert config.get("loss.lambda3") == 0.0


def test_parse_resolution():
    assert scripts.parse_resolution("64x48") == (64, 48)
    with pytest.raises(ConfigurationError):
        scripts.parse_resolution("64")


def test_help_lists_configuration_keys(capsys):
    with pytest.raises(SystemExit):
        scripts.main(["--help"])
    assert "loss.class_weights" in capsys.readouterr().out


def test_bad_configuration_exit_codes(setup_tmpdir):
    assert scripts.main(["train"] + small_args(setup_tmpdir) + ["--set", "gating=attention"]) == EXIT_CONFIG_ERROR
    args = small_args(setup_tmpdir)
    args[args.index("16x16")] = "18x18"
    assert scripts.main(["train"] + args) == EXIT_CONFIG_ERROR
    missing = os.path.join(setup_tmpdir, "missing.toml")
    assert scripts.main(["train", "--config", missing] + small_args(setup_tmpdir)) == EXIT_IO_ERROR


def test_corrupt_dataset_exit_code(setup_tmpdir):
    assert scripts.main(["gen-data"] + small_args(setup_tmpdir)) == EXIT_OK
    path = os.path.join(setup_tmpdir, "data", "train", "00000_cloth.ppm")
    with open(path, "wb") as fp:
        fp.write(b"P6\n16 16\n255\n")
    assert scripts.main(["train"] + small_args(setup_tmpdir)) == EXIT_IO_ERROR


def test_commands_end_to_end(setup_tmpdir):
    run = os.path.join(setup_tmpdir, "run")
    assert scripts.main(["gen-data"] + small_args(setup_tmpdir)) == EXIT_OK
    assert os.path.exists(os.path.join(setup_tmpdir, "data", "train", datasetio.MANIFEST))
    assert os.path.exists(os.path.join(setup_tmpdir, "data", "val", datasetio.MANIFEST))

    assert scripts.main(["train"] + small_args(setup_tmpdir)) == EXIT_OK
    for name in ("final.zflw", "checkpoint_epoch000.zflw", "checkpoint_epoch001.zflw", "metrics.csv",
                 "train.log"):
        assert os.path.exists(os.path.join(run, name))

    written = scripts.RunConfig()
    written.readToml(os.path.join(run, scripts.RUN_CONFIG))
    parser = scripts.build_parser(scripts.RunConfig())
    used = scripts.load_config(parser.parse_args(["train"] + small_args(setup_tmpdir)))
    assert written.flat() == used.flat()

    assert scripts.main(["eval"] + small_args(setup_tmpdir)) == EXIT_OK
    with open(os.path.join(run, "eval.csv")) as fp:
        assert len(fp.readlines()) == 2

    assert scripts.main(["infer"] + small_args(setup_tmpdir, "--indices", "0,1")) == EXIT_OK
    for i in (0, 1):
        for name in ("wrp", "mexp", "tryon"):
            path = os.path.join(run, f"infer_{i:05d}_{name}.ppm")
            with open(path, "rb") as fp:
                assert datasetio.decode_pnm(fp.read()).shape == (3, 16, 16)

    assert scripts.main(["infer"] + small_args(setup_tmpdir, "--indices", "7")) == EXIT_CONFIG_ERROR
    other = os.path.join(setup_tmpdir, "nothing.zflw")
    assert scripts.main(["eval"] + small_args(setup_tmpdir, "--checkpoint", other)) == EXIT_IO_ERROR


def test_ablate(setup_tmpdir):
    args = small_args(setup_tmpdir, "--variants", "single,residual")
    assert scripts.main(["ablate"] + args) == EXIT_OK
    with open(os.path.join(setup_tmpdir, "run", "ablation.txt")) as fp:
        lines = fp.read().splitlines()
    assert lines[0].split() == ["variant", "warp_ssim", "warp_psnr", "epe"]
    assert [l.split()[0] for l in lines[2:]] == ["single", "residual"]


def test_train_without_epochs_writes_initial_checkpoint(setup_tmpdir):
    run = os.path.join(setup_tmpdir, "run")
    args = small_args(setup_tmpdir)
    args[args.index("--epochs") + 1] = "0"
    assert scripts.main(["train"] + args) == EXIT_OK
    checkpoints = sorted(f for f in os.listdir(run) if f.endswith(".zflw"))
    assert checkpoints == ["checkpoint_epoch000.zflw"]
