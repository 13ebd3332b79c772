""" Training schedule, evaluation and the metrics report.

The schedule has two phases:

    warm-up (epochs 1 .. tau)   warp stage on L_wrp and segmentation on L_cs,
                                each with its own inputs; optionally the
                                fusion stage on L_fus with detached inputs
    joint   (epochs tau + 1 ..) a1 L_wrp + a2 L_cs + a3 L_fus, with the
                                live M_exp feeding the fusion stage

One Adam optimizer owns every trainable parameter. A checkpoint holding
model and optimizer state is written before the first epoch and after
every epoch.
"""
from __future__ import annotations

import asyncio
import csv
import logging
import math
import os
import typing

import numpy as np

from . import metrics
from .checkpoint import save_checkpoint
from .dataloader import BatchPrefetcher, epoch_order, iterate_batches
from .errors import ContractError, NumericalError
from .losses import (LossWeights, fusion_loss, recon_loss, total_loss, warp_stage_loss,
                     weighted_cross_entropy)
from .optim import Adam
from .pipeline import ModelSettings, StageOutputs, ZFlow
from .sample import TryOnBatch, TryOnSample
from .tensor import Tape, Tensor, backward, no_grad
from .warp import endpoint_error

METRIC_COLUMNS = ("epoch", "split", "warp_ssim", "warp_psnr", "tryon_ssim", "tryon_psnr", "epe", "seg_accuracy")

PHASE_WARMUP = "warm-up"
PHASE_JOINT = "joint"

STAGES_ALL = ("warp", "seg", "fusion")


def loss_weights(config: dict[str, typing.Any]) -> LossWeights:
    loss = {k.split(".", 1)[1]: v for k, v in config.items() if k.startswith("loss.")}
    return LossWeights.from_config(loss)


def compute_losses(model: ZFlow, batch: TryOnBatch, weights: LossWeights, phase: str,
                   stages: typing.Sequence[str] = STAGES_ALL, seg_grad: bool = True,
                   warmup_fusion: bool = True) -> tuple[dict[str, Tensor], StageOutputs]:
    """ Forward pass and the losses of one batch.

    Returns
    -------
    (dict, StageOutputs)
        losses keyed 'wrp', 'cs', 'fus' (those computed) and 'total'
    """
    losses: dict[str, Tensor] = {}
    out = model.warp_stage(batch)
    losses["wrp"] = warp_stage_loss(out.final, out.levels, batch.I_m, batch.M_m_gt, weights, model.perceptual)
    if "seg" in stages:
        out.M_exp = model.conditional_segmentation(batch)
        losses["cs"] = weighted_cross_entropy(out.M_exp, batch.M_s_gt, weights.class_weights)
    fuse = "fusion" in stages and "seg" in stages and (phase == PHASE_JOINT or warmup_fusion)
    if fuse:
        if phase == PHASE_JOINT:
            I_wrp = out.I_wrp
            M_exp = out.M_exp if seg_grad else out.M_exp.detach()
        else:
            I_wrp, M_exp = out.I_wrp.detach(), out.M_exp.detach()
        model.fusion_stage(batch, I_wrp, M_exp, out)
        recon = recon_loss(out.M_exp_pred, M_exp, out.M_bp_pred, batch.M_bp_gt, out.I_uv_pred, batch.I_uv)
        losses["fus"] = fusion_loss(out.I_tryon, batch.I_m, recon, weights, model.perceptual)
        out.M_exp = M_exp

    if phase == PHASE_JOINT and fuse:
        total = total_loss(losses["wrp"], losses["cs"], losses["fus"], weights)
    else:
        # warm-up stages share no parameters; the plain sum trains them independently
        total = losses["wrp"]
        for k in ("cs", "fus"):
            if k in losses:
                total = total + losses[k]
    losses["total"] = total
    return losses, out


def _mean(values: list[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return float(np.mean(finite)) if finite else math.nan


def evaluate(model: ZFlow, samples: typing.Sequence[TryOnSample], batch_size: int = 4,
             stages: typing.Sequence[str] = STAGES_ALL) -> dict[str, float]:
    """ Read-only evaluation, averaged over samples.

    Warp SSIM/PSNR compare I_wrp and I_m inside M_m_gt; EPE is measured
    over M_m_gt. Stages not evaluated report NaN.
    """
    rows: dict[str, list[float]] = {k: [] for k in METRIC_COLUMNS[2:] + ("paste_ssim", "majority_accuracy")}
    with no_grad():
        for batch in iterate_batches(samples, None, batch_size):
            out = model.warp_stage(batch)
            if "seg" in stages:
                out.M_exp = model.conditional_segmentation(batch)
                if "fusion" in stages:
                    model.fusion_stage(batch, out.I_wrp, out.M_exp, out)
            arrays = batch.arrays()
            for n in range(len(batch)):
                mask = arrays["M_m_gt"][n]
                i_m = arrays["I_m"][n]
                i_wrp = out.I_wrp.data[n]
                rows["warp_ssim"].append(metrics.ssim(i_wrp * mask, i_m * mask))
                rows["warp_psnr"].append(metrics.psnr(i_wrp * mask, i_m * mask))
                if batch.gt_flow is not None:
                    rows["epe"].append(endpoint_error(out.f_agg.numpy()[n], arrays["gt_flow"][n], mask[0]))
                else:
                    rows["epe"].append(math.nan)
                if out.M_exp is not None:
                    rows["seg_accuracy"].append(metrics.pixel_accuracy(out.M_exp.data[n], arrays["M_s_gt"][n]))
                    rows["majority_accuracy"].append(metrics.majority_accuracy(arrays["M_s_gt"][n]))
                else:
                    rows["seg_accuracy"].append(math.nan)
                    rows["majority_accuracy"].append(math.nan)
                if out.I_tryon is not None:
                    rows["tryon_ssim"].append(metrics.ssim(out.I_tryon.data[n], i_m))
                    rows["tryon_psnr"].append(metrics.psnr(out.I_tryon.data[n], i_m))
                else:
                    rows["tryon_ssim"].append(math.nan)
                    rows["tryon_psnr"].append(math.nan)
                garment = arrays["M_s_gt"][n][1:2]
                rows["paste_ssim"].append(metrics.ssim(paste_baseline(i_wrp, i_m, garment), i_m))
    return {k: _mean(v) for k, v in rows.items()}


def paste_baseline(i_wrp: np.ndarray, i_m: np.ndarray, garment: np.ndarray) -> np.ndarray:
    """ I_wrp pasted over the model image inside the ground-truth garment region. """
    return garment * i_wrp + (1 - garment) * i_m


class MetricsWriter(object):
    """ Appends metric rows to a CSV file with a fixed column order. """
    def __init__(self, path: str):
        self.path = path
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", newline="") as fp:
            csv.writer(fp).writerow(METRIC_COLUMNS)

    def write(self, epoch: int, split: str, values: dict[str, float]) -> None:
        row = [epoch, split] + [f"{values.get(k, math.nan):.6f}" for k in METRIC_COLUMNS[2:]]
        with open(self.path, "a", newline="") as fp:
            csv.writer(fp).writerow(row)


def checkpoint_name(epoch: int) -> str:
    return f"checkpoint_epoch{epoch:03d}.zflw"


class Trainer(object):
    """ Runs the warm-up-then-joint schedule.

    Parameters
    ----------
    config : dict
        flat run configuration (dotted keys)
    train_samples, val_samples : sequence of TryOnSample
    out_dir : str
        destination of checkpoints, metrics.csv and NaN dumps
    stages : sequence of str
        stages to train; ("warp",) trains the warping stage only
    """
    def __init__(self, config: dict[str, typing.Any], train_samples: typing.Sequence[TryOnSample],
                 val_samples: typing.Sequence[TryOnSample] = (), out_dir: str | None = None,
                 stages: typing.Sequence[str] = STAGES_ALL):
        if not train_samples:
            raise ContractError("Trainer needs at least one training sample.")
        self.config = config
        self.train_samples = list(train_samples)
        self.val_samples = list(val_samples)
        self.out_dir = out_dir or config["out_dir"]
        self.stages = tuple(stages)
        self.weights = loss_weights(config)
        self.model = ZFlow(ModelSettings.from_config(config))
        params = {}
        for stage in self.stages:
            params.update(self.model.stage_parameters(stage))
        self.optimizer = Adam(params, lr=config["lr"], betas=(config["adam.beta1"], config["adam.beta2"]),
                              eps=config["adam.eps"])
        self.history: list[dict[str, typing.Any]] = []
        self.metrics_writer: MetricsWriter | None = None

    def phase(self, epoch: int) -> str:
        return PHASE_WARMUP if epoch <= self.config["tau"] else PHASE_JOINT

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.model.state_dict()
        state.update(self.optimizer.state_dict())
        return state

    def save(self, name: str) -> str:
        path = os.path.join(self.out_dir, name)
        save_checkpoint(path, self.state_dict())
        logger.info(f"Checkpoint written to {path}.")
        return path

    def dump_batch(self, batch: TryOnBatch, epoch: int, batch_index: int) -> str:
        path = os.path.join(self.out_dir, f"nan_batch_{epoch}_{batch_index}.npz")
        os.makedirs(self.out_dir, exist_ok=True)
        np.savez(path, indices=np.asarray(batch.indices), **batch.arrays())
        return path

    def train_step(self, batch: TryOnBatch, epoch: int, batch_index: int) -> dict[str, float]:
        phase = self.phase(epoch)
        with Tape() as tape:
            try:
                losses, _ = compute_losses(self.model, batch, self.weights, phase, self.stages,
                                           seg_grad=self.config["train.seg_grad_from_fusion"],
                                           warmup_fusion=self.config["train.warmup_fusion"])
                values = {k: v.item() for k, v in losses.items()}
                if not all(math.isfinite(v) for v in values.values()):
                    raise NumericalError(f"Non-finite loss in epoch {epoch} {values}")
            except NumericalError as e:
                tape.clear()
                path = self.dump_batch(batch, epoch, batch_index)
                raise NumericalError(f"{e}; batch dumped to {path}", batch_index)
            self.optimizer.zero_grad()
            backward(losses["total"])
            tape.clear()
        self.optimizer.step()
        logger.debug(f"epoch {epoch} batch {batch_index}: " + ", ".join(f"{k}={v:.5f}" for k, v in values.items()))
        return values

    async def run_epoch(self, epoch: int) -> dict[str, float]:
        order = epoch_order(len(self.train_samples), self.config["seed"], epoch)
        prefetcher = BatchPrefetcher(self.train_samples, order, self.config["batch_size"],
                                     self.config["prefetch"])
        totals: dict[str, list[float]] = {}
        try:
            batch_index = 0
            async for batch in prefetcher:
                for k, v in self.train_step(batch, epoch, batch_index).items():
                    totals.setdefault(k, []).append(v)
                batch_index += 1
        finally:
            await prefetcher.close()
        return {k: float(np.mean(v)) for k, v in totals.items()}

    def evaluate(self, samples: typing.Sequence[TryOnSample] | None = None) -> dict[str, float]:
        samples = self.val_samples if samples is None else samples
        return evaluate(self.model, samples, self.config["batch_size"], self.stages)

    async def run(self) -> str:
        epochs = self.config["epochs"]
        self.metrics_writer = MetricsWriter(os.path.join(self.out_dir, "metrics.csv"))
        initial = self.save(checkpoint_name(0))
        if epochs == 0:
            logger.info("No epochs requested; only the initialization checkpoint was written.")
            return initial
        for epoch in range(1, epochs + 1):
            phase = self.phase(epoch)
            losses = await self.run_epoch(epoch)
            entry = dict(epoch=epoch, phase=phase, losses=losses)
            logger.info(f"Epoch {epoch}/{epochs} ({phase}): "
                        + ", ".join(f"L_{k}={v:.5f}" for k, v in losses.items()))
            if self.val_samples:
                values = self.evaluate()
                entry["val"] = values
                self.metrics_writer.write(epoch, "val", values)
                logger.info(f"Epoch {epoch} validation: warp SSIM {values['warp_ssim']:.4f}, "
                            f"try-on SSIM {values['tryon_ssim']:.4f}, EPE {values['epe']:.3f}, "
                            f"seg accuracy {values['seg_accuracy']:.3f}")
            self.history.append(entry)
            self.save(checkpoint_name(epoch))
        return self.save("final.zflw")

    def fit(self) -> str:
        """ Train for config['epochs'] epochs; returns the path of the last checkpoint written. """
        return asyncio.run(self.run())


logger = logging.getLogger(__name__)
