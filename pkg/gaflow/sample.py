""" Try-on samples, their channel contract and batching. """
from __future__ import annotations

import logging
import typing
from dataclasses import dataclass, fields

import numpy as np

from .constants import (CHANNELS_BODYPART, CHANNELS_CLOTHING, CHANNELS_FLOW, CHANNELS_IMAGE, CHANNELS_MASK,
                        CHANNELS_PRIORS, CHANNELS_UV)
from .errors import ContractError, DimensionError
from .tensor import Tensor, get_default_dtype

# field name -> required channel count
CHANNEL_CONTRACT: dict[str, int] = dict(I_p=CHANNELS_IMAGE,
                                        M_p=CHANNELS_MASK,
                                        I_m=CHANNELS_IMAGE,
                                        M_m_gt=CHANNELS_MASK,
                                        I_priors=CHANNELS_PRIORS,
                                        M_s_gt=CHANNELS_CLOTHING,
                                        M_bp_gt=CHANNELS_BODYPART,
                                        I_uv=CHANNELS_UV,
                                        gt_flow=CHANNELS_FLOW)

ONE_HOT_FIELDS = ("M_s_gt", "M_bp_gt")
UNIT_RANGE_FIELDS = ("I_p", "M_p", "I_m", "M_m_gt", "I_priors", "I_uv")


@dataclass
class TryOnSample:
    """ One garment / model pair, all arrays C x H x W float32. """
    I_p: np.ndarray
    M_p: np.ndarray
    I_m: np.ndarray
    M_m_gt: np.ndarray
    I_priors: np.ndarray
    M_s_gt: np.ndarray
    M_bp_gt: np.ndarray
    I_uv: np.ndarray
    gt_flow: np.ndarray | None = None

    @property
    def extent(self) -> tuple[int, int]:
        return self.I_p.shape[-2:]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def equals(self, other: "TryOnSample") -> bool:
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def check_sample(sample: TryOnSample, tolerance: float = 1e-5) -> TryOnSample:
    """ Verify channel counts, common extents, value ranges and one-hot labels. """
    h, w = sample.extent
    for name, value in sample.arrays().items():
        channels = CHANNEL_CONTRACT[name]
        if value.ndim != 3 or value.shape[0] != channels:
            raise DimensionError(f"{name}: expected {channels} x H x W, got {value.shape} (channel axis).")
        if value.shape[1:] != (h, w):
            raise DimensionError(f"{name}: extent {value.shape[1:]} differs from {(h, w)} (height/width axes).")
    for name in UNIT_RANGE_FIELDS:
        value = getattr(sample, name)
        if value.min() < 0 or value.max() > 1:
            raise ContractError(f"{name}: values must lie in [0, 1].")
    for name in ONE_HOT_FIELDS:
        value = getattr(sample, name)
        if not np.allclose(value.sum(axis=0), 1.0, atol=tolerance) or value.min() < 0:
            raise ContractError(f"{name}: label map is not one-hot per pixel.")
    return sample


class TryOnBatch(object):
    """ N samples stacked into N x C x H x W tensors.

    Attribute names follow TryOnSample; gt_flow is None unless every
    sample carries one.
    """
    def __init__(self, tensors: dict[str, Tensor], indices: typing.Sequence[int] = ()):
        self.tensors = tensors
        self.indices = list(indices)

    def __getattr__(self, name: str):
        tensors = self.__dict__.get("tensors", {})
        if name in tensors:
            return tensors[name]
        if name in CHANNEL_CONTRACT:
            return None
        raise AttributeError(name)

    def __len__(self) -> int:
        return self.tensors["I_p"].shape[0]

    @property
    def extent(self) -> tuple[int, int]:
        return self.tensors["I_p"].shape[-2:]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}


def collate(samples: typing.Sequence[TryOnSample], indices: typing.Sequence[int] = ()) -> TryOnBatch:
    if not samples:
        raise ContractError("collate needs at least one sample.")
    dtype = get_default_dtype()
    extent = samples[0].extent
    tensors = {}
    for f in fields(TryOnSample):
        values = [getattr(s, f.name) for s in samples]
        if any(v is None for v in values):
            continue
        for v in values:
            if v.shape[-2:] != extent:
                raise DimensionError(f"collate: {f.name} extent {v.shape[-2:]} differs from {extent}.")
        tensors[f.name] = Tensor(np.stack(values), dtype=dtype)
    return TryOnBatch(tensors, indices)


logger = logging.getLogger(__name__)
