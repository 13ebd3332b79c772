import abc
import argparse
import logging
import os
import sys
import typing

import numpy as np
import toml

from . import datasetio, experiments, gradcheck, synthdata, training
from .checkpoint import load_checkpoint
from .constants import EXIT_CONFIG_ERROR, EXIT_IO_ERROR, EXIT_NUMERICAL_ERROR, EXIT_OK
from .errors import (ConfigurationError, ContractError, DimensionError, FormatError, GenerationError,
                     NumericalError, SolverError)
from .gaf import GatingVariant
from .metrics import psnr, ssim
from .pipeline import ModelSettings, ZFlow
from .tensor import PRECISIONS, set_precision

PACKAGED_CONFIG = os.path.join(os.path.dirname(__file__), "data", "gaflow-config.toml")
RUN_CONFIG = "run-config.toml"

# Colours of the seven clothing classes in the M_exp preview
PALETTE = np.array([[0.0, 0.0, 0.0], [0.9, 0.2, 0.2], [0.9, 0.8, 0.3], [0.2, 0.7, 0.3],
                    [0.2, 0.4, 0.9], [0.5, 0.3, 0.7], [0.9, 0.6, 0.5]])


def get_logger(name, level, out_dir="."):
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError:
        log_dir_created = False
    else:
        log_dir_created = True

    package_logger = logging.getLogger("gaflow")
    logger = logging.getLogger(f"gaflow.{name}")
    for _l in (package_logger, logger):
        _l.setLevel(level)

    if log_dir_created:
        log_filename = os.path.join(out_dir, f"{name}.log")
    else:
        log_filename = f"{name}.log"

    # Drop handlers of an earlier command in the same process
    for handler in list(package_logger.handlers):
        package_logger.removeHandler(handler)
        handler.close()

    # Create handlers
    file_handler = logging.FileHandler(log_filename)
    file_handler.setLevel(level)

    system_handler = logging.StreamHandler(sys.stdout)
    system_handler.setLevel(level)

    # Create formatters
    formatter_filehandler = logging.Formatter('%(asctime)s %(levelname)6s - %(name)s:%(funcName)s():%(lineno)d - %(message)s')
    formatter_systemhandler = logging.Formatter('%(levelname)6s - %(name)s:%(funcName)s():%(lineno)d - %(message)s')

    # Add formatters
    file_handler.setFormatter(formatter_filehandler)
    system_handler.setFormatter(formatter_systemhandler)

    # Module loggers propagate to the package logger
    package_logger.addHandler(file_handler)
    package_logger.addHandler(system_handler)

    if not log_dir_created:
        logger.debug(f"Could not create log file in {out_dir}. Using local directory instead.")
    return logger


class Config(abc.ABC):
    def __init__(self):
        super().__init__()
        self.config = {}
        self.set_defaults()

    @abc.abstractmethod
    def set_defaults(self):
        pass

    @classmethod
    def csl2list(cls, s: str) -> list[str]:
        return [_s for _s in s.split(",") if _s]

    @classmethod
    def csl2dict(cls, s: str) -> dict[str, str]:
        d = {}
        for _s in s.split(','):
            if not _s:
                continue
            if '=' not in _s:
                raise ConfigurationError(f"Expected key=value, got {_s!r}.")
            k, v = _s.split('=', 1)
            d[k.strip()] = v.strip()
        return d

    def readToml(self, filename: str) -> dict:
        if not os.path.exists(filename):
            return {}
        with open(filename, 'r') as fp:
            try:
                config = toml.load(fp)
            except toml.TomlDecodeError as e:
                raise ConfigurationError(f"{filename}: {e}")
        self.merge(config)
        return self.config

    def writeToml(self, filename: str, comments: str = ''):
        with open(filename, 'w') as fp:
            if comments:
                fp.write(comments)
            toml.dump(self.config, fp)

    def merge(self, d: dict, prefix: str = "") -> None:
        for k, v in d.items():
            if isinstance(v, dict):
                self.merge(v, f"{prefix}{k}.")
            else:
                self.set(f"{prefix}{k}", v)

    def flat(self, d: dict | None = None, prefix: str = "") -> dict[str, typing.Any]:
        """ The configuration with dotted keys ('loss.beta1'). """
        d = self.config if d is None else d
        result = {}
        for k, v in d.items():
            if isinstance(v, dict):
                result.update(self.flat(v, f"{prefix}{k}."))
            else:
                result[f"{prefix}{k}"] = v
        return result

    def _section(self, key: str) -> tuple[dict, str]:
        *path, leaf = key.split(".")
        section = self.config
        for p in path:
            section = section.get(p)
            if not isinstance(section, dict):
                raise ConfigurationError(f"Unknown configuration key {key!r}.")
        if leaf not in section or isinstance(section[leaf], dict):
            raise ConfigurationError(f"Unknown configuration key {key!r}.")
        return section, leaf

    def get(self, key: str) -> typing.Any:
        section, leaf = self._section(key)
        return section[leaf]

    def set(self, key: str, value: typing.Any) -> None:
        section, leaf = self._section(key)
        section[leaf] = self.coerce(key, section[leaf], value)

    @classmethod
    def coerce(cls, key: str, default: typing.Any, value: typing.Any) -> typing.Any:
        """ Convert value to the type of the default; strings are parsed. """
        try:
            if isinstance(default, bool):
                if isinstance(value, bool):
                    return value
                if isinstance(value, str) and value.lower() in ("true", "yes", "on", "1"):
                    return True
                if isinstance(value, str) and value.lower() in ("false", "no", "off", "0"):
                    return False
                raise ValueError(value)
            if isinstance(default, int):
                if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                    raise ValueError(value)
                return int(value)
            if isinstance(default, float):
                if isinstance(value, bool):
                    raise ValueError(value)
                return float(value)
            if isinstance(default, list):
                if isinstance(value, str):
                    value = [v for v in value.replace(";", " ").split() if v]
                return [float(v) for v in value]
            if isinstance(value, str):
                return value
            raise ValueError(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"Invalid value {value!r} for {key!r}; expected {type(default).__name__}.")


class RunConfig(Config):

    def __init__(self):
        super().__init__()

    def set_defaults(self):
        default_config = dict(seed=7,
                              precision="float32",
                              resolution="64x48",
                              K=3,
                              gating="convgru",
                              base_width=16,
                              lr=1e-4,
                              batch_size=4,
                              epochs=30,
                              tau=5,
                              out_dir="runs",
                              prefetch=2,
                              gaf=dict(hidden=8),
                              warp_net=dict(depth=4),
                              seg_net=dict(depth=4),
                              fusion_net=dict(depth=4),
                              adam=dict(beta1=0.9, beta2=0.999, eps=1e-8),
                              loss=dict(beta1=1.0, beta2=0.25, beta3=1.0, beta4=0.1,
                                        lambda1=1.0, lambda2=0.25, lambda3=0.5, lambda4=0.5,
                                        alpha1=1.0, alpha2=1.0, alpha3=1.0,
                                        class_weights=[3.0, 1.0, 1.0, 1.0, 3.0, 1.0, 1.0]),
                              priors=dict(dense=True),
                              train=dict(seg_grad_from_fusion=True, warmup_fusion=True),
                              data=dict(dir="data/synthetic", count=200, val_count=32, amplitude=3.0))
        for k, v in default_config.items():
            self.config[k] = v

    @property
    def resolution(self) -> tuple[int, int]:
        return parse_resolution(self.config["resolution"])

    def validate(self) -> "RunConfig":
        c = self.flat()
        if c["precision"] not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}, got {c['precision']!r}.")
        h, w = self.resolution
        for net in ("warp_net", "seg_net", "fusion_net"):
            f = 2 ** c[f"{net}.depth"]
            if h % f or w % f:
                raise ConfigurationError(f"resolution {h}x{w} is not divisible by 2^{net}.depth = {f}.")
        for key in ("epochs", "tau", "K"):
            if c[key] < 0:
                raise ConfigurationError(f"{key} must be non-negative, got {c[key]}.")
        for key in ("batch_size", "prefetch", "data.count", "gaf.hidden", "base_width"):
            if c[key] < 1:
                raise ConfigurationError(f"{key} must be at least 1, got {c[key]}.")
        if not 0 <= c["data.amplitude"] <= synthdata.MAX_AMPLITUDE:
            raise ConfigurationError(f"data.amplitude must lie in [0, {synthdata.MAX_AMPLITUDE}].")
        ModelSettings.from_config(c)
        training.loss_weights(c)
        return self


def parse_resolution(s: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in s.lower().split("x"))
    except ValueError:
        raise ConfigurationError(f"resolution must be given as HxW, got {s!r}.")
    if h < 1 or w < 1:
        raise ConfigurationError(f"resolution must be positive, got {s!r}.")
    return h, w


# flag -> configuration key
FLAG_KEYS = dict(seed="seed", out="out_dir", gating="gating", K="K", resolution="resolution",
                 epochs="epochs", tau="tau")


class HelpFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def config_epilog(config: RunConfig) -> str:
    lines = ["Configuration keys (TOML file, or --set key=value,...) with their defaults:", ""]
    for k, v in config.flat().items():
        if isinstance(v, list):
            v = ";".join(f"{x:g}" for x in v)
        lines.append(f"    {k:28s} {v}")
    lines += ["", "Environment: GAFLOW_THREADS caps the worker threads of gen-data (default 1)."]
    return "\n".join(lines)


def build_parser(config: RunConfig) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Reads configuration file (TOML).', type=str)
    common.add_argument('--seed', help='Seed of all randomness', type=int, default=argparse.SUPPRESS)
    common.add_argument('--out', help='Output directory for checkpoints, metrics and logs',
                        type=str, default=argparse.SUPPRESS)
    common.add_argument('--gating', help='Gating variant', choices=[v.value for v in GatingVariant],
                        default=argparse.SUPPRESS)
    common.add_argument('--K', help='Index of the finest candidate flow (K + 1 candidates)', type=int,
                        default=argparse.SUPPRESS)
    common.add_argument('--resolution', help='Image extent HxW', type=str, default=argparse.SUPPRESS)
    common.add_argument('--epochs', help='Training epochs', type=int, default=argparse.SUPPRESS)
    common.add_argument('--tau', help='Warm-up epochs', type=int, default=argparse.SUPPRESS)
    s = 'Comma-separated overrides, e.g. --set lr=0.0002,loss.lambda3=0; list values separated by ";"'
    common.add_argument('--set', help=s, type=str, default='')
    common.add_argument('-v', '--verbose', help='Log debugging output', action='store_true')

    parser = argparse.ArgumentParser(
        prog='gaflow',
        description='Gated appearance flow virtual try-on: data generation, training and evaluation',
        formatter_class=HelpFormatter,
        epilog=config_epilog(config)
    )
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('gen-data', parents=[common], formatter_class=HelpFormatter, epilog=config_epilog(config),
                   help='Generate the synthetic train and validation sets')
    sub.add_parser('train', parents=[common], formatter_class=HelpFormatter, epilog=config_epilog(config),
                   help='Run the warm-up and joint training schedule')
    p = sub.add_parser('eval', parents=[common], formatter_class=HelpFormatter, epilog=config_epilog(config),
                       help='Evaluate a checkpoint on the validation set')
    p.add_argument('--checkpoint', help='Checkpoint file (defaults to <out>/final.zflw)', type=str)
    sub.add_parser('gradcheck', parents=[common], formatter_class=HelpFormatter, epilog=config_epilog(config),
                   help='Run the 64-bit finite-difference gradient suite')
    p = sub.add_parser('infer', parents=[common], formatter_class=HelpFormatter, epilog=config_epilog(config),
                       help='Write I_wrp, M_exp and I_tryon images for validation samples')
    p.add_argument('--checkpoint', help='Checkpoint file (defaults to <out>/final.zflw)', type=str)
    p.add_argument('--indices', help='Comma-separated validation sample indices', type=str, default='0')
    p = sub.add_parser('ablate', parents=[common], formatter_class=HelpFormatter, epilog=config_epilog(config),
                       help='Compare gating variants on the warping stage')
    p.add_argument('--variants', help='Comma-separated gating variants', type=str, default='convgru,residual')
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """ defaults < packaged file < --config < flags < --set """
    config = RunConfig()
    config.readToml(PACKAGED_CONFIG)
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"Error opening configuration file {args.config}.")
        config.readToml(args.config)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            config.set(key, value)
    for k, v in config.csl2dict(args.set).items():
        config.set(k, v)
    return config.validate()


def load_data(config: RunConfig, logger: logging.Logger):
    root = config.get("data.dir")
    if not os.path.exists(os.path.join(root, "train", datasetio.MANIFEST)):
        logger.info(f"No dataset found in {root}; generating one.")
        generate_data(config, logger)
    train, val = datasetio.load_splits(root)
    if train[0].extent != config.resolution:
        raise ConfigurationError(f"Dataset in {root} has extent {train[0].extent}, "
                                 f"configuration asks for {config.resolution}.")
    return train, val


def generate_data(config: RunConfig, logger: logging.Logger) -> None:
    h, w = config.resolution
    seed = config.get("seed")
    amplitude = config.get("data.amplitude")
    train = synthdata.generate(seed, config.get("data.count"), h, w, amplitude)
    val = synthdata.generate([seed, 1], config.get("data.val_count"), h, w, amplitude) \
        if config.get("data.val_count") else []
    datasetio.save_splits(config.get("data.dir"), train, val)
    consistency = [synthdata.self_consistency(s) for s in train[:16]]
    logger.info(f"Generated {len(train)} training and {len(val)} validation samples of {h}x{w} "
                f"in {config.get('data.dir')}; garment self-consistency L1 {np.mean(consistency):.4f}.")


def load_model(config: RunConfig, checkpoint: str | None) -> ZFlow:
    path = checkpoint or os.path.join(config.get("out_dir"), "final.zflw")
    model = ZFlow(ModelSettings.from_config(config.flat()))
    model.load_state_dict(load_checkpoint(path))
    return model


def cmd_gen_data(args, config, logger) -> int:
    generate_data(config, logger)
    return EXIT_OK


def cmd_train(args, config, logger) -> int:
    train, val = load_data(config, logger)
    out_dir = config.get("out_dir")
    os.makedirs(out_dir, exist_ok=True)
    config.writeToml(os.path.join(out_dir, RUN_CONFIG), comments="# gaflow run configuration\n")
    trainer = training.Trainer(config.flat(), train, val, out_dir)
    path = trainer.fit()
    logger.info(f"Training finished; final checkpoint {path}.")
    return EXIT_OK


def cmd_eval(args, config, logger) -> int:
    _, val = load_data(config, logger)
    if not val:
        raise ConfigurationError("eval needs a validation split; set data.val_count.")
    model = load_model(config, args.checkpoint)
    values = training.evaluate(model, val, config.get("batch_size"))
    writer = training.MetricsWriter(os.path.join(config.get("out_dir"), "eval.csv"))
    writer.write(0, "eval", values)
    for k in training.METRIC_COLUMNS[2:]:
        logger.info(f"{k:14s} {values[k]:.4f}")
    logger.info(f"paste baseline SSIM {values['paste_ssim']:.4f}, "
                f"majority-class accuracy {values['majority_accuracy']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, config, logger) -> int:
    results = gradcheck.run_suite()
    for r in results:
        logger.info(str(r))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for {', '.join(failed)}.")
        return EXIT_NUMERICAL_ERROR
    return EXIT_OK


def cmd_infer(args, config, logger) -> int:
    _, val = load_data(config, logger)
    model = load_model(config, args.checkpoint)
    indices = [int(i) for i in config.csl2list(args.indices)]
    for i in indices:
        if not 0 <= i < len(val):
            raise ConfigurationError(f"Sample index {i} outside the validation set of {len(val)} samples.")
    out = model.infer([val[i] for i in indices])
    out_dir = config.get("out_dir")
    os.makedirs(out_dir, exist_ok=True)
    for n, i in enumerate(indices):
        labels = out.M_exp.data[n].argmax(axis=0)
        images = dict(wrp=out.I_wrp.data[n], mexp=PALETTE[labels].transpose(2, 0, 1), tryon=out.I_tryon.data[n])
        for name, image in images.items():
            path = os.path.join(out_dir, f"infer_{i:05d}_{name}.ppm")
            with open(path, "wb") as fp:
                fp.write(datasetio.encode_pnm(datasetio.to_bytes8(image)))
        logger.info(f"Sample {i}: try-on SSIM {ssim(out.I_tryon.data[n], val[i].I_m):.4f}, "
                    f"PSNR {psnr(out.I_tryon.data[n], val[i].I_m):.2f} dB.")
    return EXIT_OK


def cmd_ablate(args, config, logger) -> int:
    train, val = load_data(config, logger)
    if not val:
        raise ConfigurationError("ablate needs a validation split; set data.val_count.")
    variants = config.csl2list(args.variants)
    rows = experiments.run_ablation(config.flat(), variants, train, val, config.get("out_dir"))
    table = experiments.format_table(rows)
    with open(os.path.join(config.get("out_dir"), "ablation.txt"), "w") as fp:
        fp.write(table + "\n")
    for line in table.splitlines():
        logger.info(line)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "gradcheck": cmd_gradcheck,
            "infer": cmd_infer,
            "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser(RunConfig())
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
    except (ConfigurationError, GenerationError) as e:
        sys.stderr.write(f"Configuration error: {e}\n")
        return EXIT_CONFIG_ERROR
    except OSError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_IO_ERROR

    set_precision(config.get("precision"))
    logger = get_logger(args.command, logging.DEBUG if args.verbose else logging.INFO, config.get("out_dir"))
    logger.info(f"Configuration:")
    logger.info("-" * 20)
    for k, v in config.flat().items():
        logger.info(f"\t{k:28s} {v}")

    try:
        return COMMANDS[args.command](args, config, logger)
    except (ConfigurationError, GenerationError, DimensionError, ContractError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except (FormatError, OSError) as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO_ERROR
    except (NumericalError, SolverError) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL_ERROR
