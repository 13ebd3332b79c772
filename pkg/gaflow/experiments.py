""" Gating-variant comparison grid. """
from __future__ import annotations

import logging
import math
import os
import typing

from .gaf import GatingVariant
from .sample import TryOnSample
from .training import Trainer

ABLATION_COLUMNS = ("variant", "warp_ssim", "warp_psnr", "epe")


def run_ablation(config: dict[str, typing.Any], variants: typing.Sequence[str],
                 train: typing.Sequence[TryOnSample], val: typing.Sequence[TryOnSample],
                 out_dir: str | None = None) -> list[dict[str, typing.Any]]:
    """ Train the warping stage once per gating variant and evaluate it.

    Every variant starts from the same seed, sees the same batches and is
    evaluated on the same held-out samples.
    """
    out_dir = out_dir or config["out_dir"]
    rows = []
    for name in variants:
        variant = GatingVariant.parse(name)
        run_config = dict(config, gating=variant.value)
        trainer = Trainer(run_config, train, (), os.path.join(out_dir, f"ablate_{variant.value}"),
                          stages=("warp",))
        trainer.fit()
        values = trainer.evaluate(val)
        row = dict(variant=variant.value, warp_ssim=values["warp_ssim"], warp_psnr=values["warp_psnr"],
                   epe=values["epe"])
        logger.info(f"{variant.value}: warp SSIM {row['warp_ssim']:.4f}, PSNR {row['warp_psnr']:.2f} dB, "
                    f"EPE {row['epe']:.3f} px")
        rows.append(row)
    return rows


def _cell(value) -> str:
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.4f}"
    return str(value)


def format_table(rows: typing.Sequence[dict[str, typing.Any]],
                 columns: typing.Sequence[str] = ABLATION_COLUMNS) -> str:
    cells = [list(columns)] + [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


logger = logging.getLogger(__name__)
