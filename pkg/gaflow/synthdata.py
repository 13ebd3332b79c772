""" Procedural try-on scenes with exact ground truth.

Every scene has a stick-figure model (head disc, torso ellipse, capsule
limbs), a T-shirt polygon and a smooth garment texture. The flat
garment image I_p shows the texture inside the polygon in the model's
own frame; the model image I_m shows the garment after a smooth
displacement D, so that

    I_m(p) = T(p + D(p))   for p inside the worn garment

and the backward flow gt_flow = D restricted to the worn garment
reproduces I_m from I_p up to interpolation and quantisation error.

Coordinates are (x, y) with pixel centres at integer positions.
"""
from __future__ import annotations

import concurrent.futures
import logging
import os
import typing
from dataclasses import dataclass, field

import numpy as np

from .constants import (BP_HEAD, BP_HIPS, BP_LEFT_LEG, BP_LEFT_LOWER_ARM, BP_LEFT_UPPER_ARM, BP_NECK,
                        BP_RIGHT_LEG, BP_RIGHT_LOWER_ARM, BP_RIGHT_UPPER_ARM, BP_TORSO, CHANNELS_BODYPART,
                        CHANNELS_CLOTHING, CHANNELS_POSE, CLOTH_GARMENT, CLOTH_HEAD, CLOTH_LEFT_ARM,
                        CLOTH_LOWER_BODY, CLOTH_RIGHT_ARM, CLOTH_SKIN)
from .errors import ConfigurationError, GenerationError
from .sample import TryOnSample, check_sample
from .tensor import no_grad
from .warp import warp_with_flow

MAX_AMPLITUDE = 4.0
MAX_BUMPS = 4
BUMP_SIGMA = (6.0, 12.0)
POSE_SIGMA = 2.0
TEXTURE_BLEED = 2
PATTERNS = ("solid", "stripes", "checker", "glyph")
STRIPE_PERIOD = (10.0, 16.0)
PATTERN_AMPLITUDE = 0.25
MIN_EXTENT = (16, 12)

# 18-keypoint order; the synthetic skeleton fills the first 14
KEYPOINTS = ("nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
             "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear")

# Joint layout as fractions of (width, height). The model's right side is image left.
SKELETON = dict(nose=(0.50, 0.15), neck=(0.50, 0.26),
                r_shoulder=(0.32, 0.30), r_elbow=(0.22, 0.46), r_wrist=(0.17, 0.60),
                l_shoulder=(0.68, 0.30), l_elbow=(0.78, 0.46), l_wrist=(0.83, 0.60),
                r_hip=(0.40, 0.62), r_knee=(0.39, 0.80), r_ankle=(0.38, 0.95),
                l_hip=(0.60, 0.62), l_knee=(0.61, 0.80), l_ankle=(0.62, 0.95))


@dataclass
class SceneSpec:
    """ Everything needed to render one sample deterministically. """
    height: int
    width: int
    joints: dict[str, np.ndarray]
    head_center: np.ndarray
    head_radius: float
    torso_center: np.ndarray
    torso_axes: np.ndarray
    garment_polygon: np.ndarray
    pattern: str
    texture: dict[str, typing.Any]
    background: np.ndarray
    skin: np.ndarray
    pants: np.ndarray
    bump_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    bump_vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    bump_sigmas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seed: int = 0

    @property
    def amplitude(self) -> float:
        return float(np.linalg.norm(self.bump_vectors, axis=1).sum()) if len(self.bump_vectors) else 0.0


def worker_count() -> int:
    value = os.environ.get("GAFLOW_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigurationError(f"GAFLOW_THREADS must be a positive integer, got {value!r}.")
    if n < 1:
        raise ConfigurationError(f"GAFLOW_THREADS must be a positive integer, got {n}.")
    return n


def quantize(x: np.ndarray) -> np.ndarray:
    """ Round to 8-bit levels k / 255. """
    return (np.round(np.clip(x, 0, 1) * 255) / 255).astype(np.float32)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return xs, ys


def point_in_polygon(px: np.ndarray, py: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """ Even-odd rule, vectorised over the query points. """
    inside = np.zeros(px.shape, dtype=bool)
    n = len(polygon)
    for i in range(n):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > py) != (y1 > py)
        x_cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < x_cross)
    return inside


def capsule(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    d = b - a
    t = ((px - a[0]) * d[0] + (py - a[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0, 1)
    return (px - a[0] - t * d[0]) ** 2 + (py - a[1] - t * d[1]) ** 2 <= radius * radius


def ellipse(px: np.ndarray, py: np.ndarray, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    return ((px - center[0]) / axes[0]) ** 2 + ((py - center[1]) / axes[1]) ** 2 <= 1


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """ Binary dilation with a (2 radius + 1) square, without wrap-around. """
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = np.zeros_like(mask)
            shifted[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
                mask[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
            out |= shifted
    return out


def _sleeve_points(shoulder: np.ndarray, elbow: np.ndarray, half_width: float, cx: float):
    mid = shoulder + 0.5 * (elbow - shoulder)
    d = (elbow - shoulder) / np.linalg.norm(elbow - shoulder)
    n = np.array([-d[1], d[0]])
    p, q = mid + half_width * n, mid - half_width * n
    # outer edge first
    return (p, q) if abs(p[0] - cx) >= abs(q[0] - cx) else (q, p)


def garment_polygon(joints: dict[str, np.ndarray], torso_center: np.ndarray, torso_axes: np.ndarray,
                    width: int, height: int) -> np.ndarray:
    """ T-shirt outline: collar, short sleeves, straight hem. """
    cx = torso_center[0]
    half = torso_axes[0] * 0.95
    neck_y = joints["neck"][1]
    sleeve = 0.06 * width
    rs_out, rs_in = _sleeve_points(joints["r_shoulder"], joints["r_elbow"], sleeve, cx)
    ls_out, ls_in = _sleeve_points(joints["l_shoulder"], joints["l_elbow"], sleeve, cx)
    armpit_y = joints["r_shoulder"][1] + 0.10 * height
    hem_y = joints["r_hip"][1] + 0.02 * height
    lift = np.array([0.0, -0.03 * height])
    points = [(cx - 0.07 * width, neck_y), joints["r_shoulder"] + lift, rs_out, rs_in,
              (cx - half, armpit_y), (cx - half, hem_y), (cx + half, hem_y), (cx + half, armpit_y),
              ls_in, ls_out, joints["l_shoulder"] + lift, (cx + 0.07 * width, neck_y)]
    return np.array([np.asarray(p, dtype=np.float64) for p in points])


def sample_scene(rng: np.random.Generator, height: int, width: int, amplitude: float) -> SceneSpec:
    """ Draw the random parameters of one scene. """
    if height < MIN_EXTENT[0] or width < MIN_EXTENT[1]:
        raise GenerationError(f"Scene extent {height} x {width} is below the minimum {MIN_EXTENT}.")
    shift = np.array([rng.uniform(-0.03, 0.03) * width, rng.uniform(-0.02, 0.02) * height])
    scale = rng.uniform(0.95, 1.05)
    centre = np.array([0.5 * width, 0.5 * height])
    joints = {}
    for name, (fx, fy) in SKELETON.items():
        p = np.array([fx * width, fy * height])
        joints[name] = centre + scale * (p - centre) + shift
    for name in ("r_elbow", "r_wrist", "l_elbow", "l_wrist"):
        joints[name] = joints[name] + np.array([0.0, rng.uniform(-0.03, 0.03) * height])

    torso_center = np.array([joints["neck"][0], 0.5 * (joints["neck"][1] + joints["r_hip"][1]) + 0.02 * height])
    torso_axes = np.array([0.18 * width * scale, 0.20 * height * scale])
    polygon = garment_polygon(joints, torso_center, torso_axes, width, height)

    pattern = PATTERNS[rng.integers(len(PATTERNS))]
    texture: dict[str, typing.Any] = dict(base=rng.uniform(0.3, 0.7, size=3),
                                          tint=rng.uniform(-1, 1, size=3),
                                          amplitude=rng.uniform(0.1, PATTERN_AMPLITUDE))
    if pattern == "stripes":
        angle = rng.uniform(0, np.pi)
        texture.update(period=rng.uniform(*STRIPE_PERIOD), direction=np.array([np.cos(angle), np.sin(angle)]))
    elif pattern == "checker":
        texture.update(period=rng.uniform(*STRIPE_PERIOD))
    elif pattern == "glyph":
        texture.update(center=torso_center + np.array([0.0, -0.03 * height]), radius=0.08 * width)

    bumps = int(rng.integers(1, MAX_BUMPS + 1))
    lo, hi = polygon.min(axis=0), polygon.max(axis=0)
    centers = rng.uniform(lo, hi, size=(bumps, 2))
    angles = rng.uniform(0, 2 * np.pi, size=bumps)
    weights = rng.uniform(0.2, 1.0, size=bumps)
    # magnitudes sum to at most the amplitude, keeping the field invertible
    magnitudes = amplitude * rng.uniform(0.6, 1.0) * weights / weights.sum()
    vectors = magnitudes[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    sigmas = rng.uniform(*BUMP_SIGMA, size=bumps)

    return SceneSpec(height=height, width=width, joints=joints,
                     head_center=np.array([joints["nose"][0], joints["nose"][1] - 0.01 * height]),
                     head_radius=0.09 * height * scale, torso_center=torso_center, torso_axes=torso_axes,
                     garment_polygon=polygon, pattern=pattern, texture=texture,
                     background=np.full(3, rng.uniform(0.75, 0.9)),
                     skin=np.array([0.85, 0.65, 0.5]) * rng.uniform(0.8, 1.05),
                     pants=rng.uniform(0.1, 0.35, size=3),
                     bump_centers=centers, bump_vectors=vectors, bump_sigmas=sigmas)


def displacement(spec: SceneSpec, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """ D(p) = sum of Gaussian bumps, 2 x H x W. """
    d = np.zeros((2,) + px.shape)
    for c, v, s in zip(spec.bump_centers, spec.bump_vectors, spec.bump_sigmas):
        g = np.exp(-((px - c[0]) ** 2 + (py - c[1]) ** 2) / (2 * s * s))
        d[0] += v[0] * g
        d[1] += v[1] * g
    return d


def texture(spec: SceneSpec, qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
    """ Garment colour at continuous positions, 3 x ... in [0, 1]. """
    t = spec.texture
    base = t["base"].reshape((3,) + (1,) * qx.ndim)
    tint = t["tint"].reshape((3,) + (1,) * qx.ndim)
    if spec.pattern == "solid":
        signal = np.zeros_like(qx)
    elif spec.pattern == "stripes":
        d = t["direction"]
        signal = np.sin(2 * np.pi * (qx * d[0] + qy * d[1]) / t["period"])
    elif spec.pattern == "checker":
        signal = np.sin(2 * np.pi * qx / t["period"]) * np.sin(2 * np.pi * qy / t["period"])
    elif spec.pattern == "glyph":
        c, r = t["center"], t["radius"]
        signal = np.exp(-((qx - c[0]) ** 2 + (qy - c[1]) ** 2) / (2 * r * r))
    else:
        raise GenerationError(f"Unknown texture pattern {spec.pattern!r}.")
    return np.clip(base + t["amplitude"] * signal[None] * tint, 0, 1)


def body_parts(spec: SceneSpec, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """ Integer body-part label map, H x W. """
    j = spec.joints
    w = spec.width
    labels = np.zeros(px.shape, dtype=np.int64)
    hips_center = 0.5 * (j["r_hip"] + j["l_hip"])
    layers = [(capsule(px, py, j["r_hip"], j["r_ankle"], 0.07 * w), BP_RIGHT_LEG),
              (capsule(px, py, j["l_hip"], j["l_ankle"], 0.07 * w), BP_LEFT_LEG),
              (ellipse(px, py, hips_center, np.array([0.17 * w, 0.06 * spec.height])), BP_HIPS),
              (ellipse(px, py, spec.torso_center, spec.torso_axes), BP_TORSO),
              (capsule(px, py, j["r_shoulder"], j["r_elbow"], 0.05 * w), BP_RIGHT_UPPER_ARM),
              (capsule(px, py, j["l_shoulder"], j["l_elbow"], 0.05 * w), BP_LEFT_UPPER_ARM),
              (capsule(px, py, j["r_elbow"], j["r_wrist"], 0.04 * w), BP_RIGHT_LOWER_ARM),
              (capsule(px, py, j["l_elbow"], j["l_wrist"], 0.04 * w), BP_LEFT_LOWER_ARM),
              (capsule(px, py, j["neck"], spec.head_center, 0.05 * w), BP_NECK),
              (ellipse(px, py, spec.head_center, np.array([spec.head_radius] * 2)), BP_HEAD)]
    for mask, label in layers:
        labels[mask] = label
    return labels


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    return (labels[None] == np.arange(classes).reshape(-1, 1, 1)).astype(np.float32)


def pose_heatmaps(spec: SceneSpec, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    maps = np.zeros((CHANNELS_POSE,) + px.shape)
    for i, name in enumerate(KEYPOINTS):
        if name not in spec.joints:
            continue
        x, y = spec.joints[name]
        maps[i] = np.exp(-((px - x) ** 2 + (py - y) ** 2) / (2 * POSE_SIGMA ** 2))
    return maps


def clothing_labels(bp: np.ndarray, garment: np.ndarray) -> np.ndarray:
    labels = np.zeros(bp.shape, dtype=np.int64)
    labels[np.isin(bp, (BP_HIPS, BP_LEFT_LEG, BP_RIGHT_LEG))] = CLOTH_LOWER_BODY
    labels[np.isin(bp, (BP_NECK, BP_TORSO))] = CLOTH_SKIN
    labels[np.isin(bp, (BP_LEFT_UPPER_ARM, BP_LEFT_LOWER_ARM))] = CLOTH_LEFT_ARM
    labels[np.isin(bp, (BP_RIGHT_UPPER_ARM, BP_RIGHT_LOWER_ARM))] = CLOTH_RIGHT_ARM
    labels[bp == BP_HEAD] = CLOTH_HEAD
    labels[garment] = CLOTH_GARMENT
    return labels


def uv_map(silhouette: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """ Coordinates normalised to the silhouette's bounding box, zero outside it. """
    ys, xs = np.nonzero(silhouette)
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    u = (px - x0) / max(x1 - x0, 1)
    v = (py - y0) / max(y1 - y0, 1)
    return np.stack([u, v]) * silhouette[None]


def render(spec: SceneSpec) -> TryOnSample:
    """ Rasterise a scene into a TryOnSample. """
    h, w = spec.height, spec.width
    px, py = pixel_grid(h, w)
    amplitude = spec.amplitude
    lo, hi = spec.garment_polygon.min(axis=0), spec.garment_polygon.max(axis=0)
    if lo[0] - amplitude < 0 or lo[1] - amplitude < 0 or hi[0] + amplitude > w - 1 or hi[1] + amplitude > h - 1:
        raise GenerationError(f"Garment polygon leaves the {h} x {w} image after deformation.")

    # flat garment
    m_p = point_in_polygon(px, py, spec.garment_polygon)
    bleed = dilate(m_p, TEXTURE_BLEED)
    i_p = np.where(bleed[None], texture(spec, px, py), 1.0)

    # worn garment
    d = displacement(spec, px, py)
    qx, qy = px + d[0], py + d[1]
    m_m = point_in_polygon(qx, qy, spec.garment_polygon)
    worn = texture(spec, qx, qy)

    bp = body_parts(spec, px, py)
    silhouette = bp > 0
    i_m = np.broadcast_to(spec.background.reshape(3, 1, 1), (3, h, w)).copy()
    i_m = np.where(np.isin(bp, (BP_HIPS, BP_LEFT_LEG, BP_RIGHT_LEG))[None], spec.pants.reshape(3, 1, 1), i_m)
    skin = silhouette & ~np.isin(bp, (BP_HIPS, BP_LEFT_LEG, BP_RIGHT_LEG))
    i_m = np.where(skin[None], spec.skin.reshape(3, 1, 1), i_m)
    i_m = np.where((bp == BP_HEAD)[None], 0.9 * spec.skin.reshape(3, 1, 1), i_m)
    i_m = np.where(m_m[None], worn, i_m)
    i_m = quantize(i_m)

    head = i_m * (bp == BP_HEAD)[None]
    priors = np.concatenate([silhouette[None].astype(np.float64), pose_heatmaps(spec, px, py), head,
                             one_hot(bp, CHANNELS_BODYPART)])
    sample = TryOnSample(I_p=quantize(i_p),
                         M_p=m_p[None].astype(np.float32),
                         I_m=i_m,
                         M_m_gt=m_m[None].astype(np.float32),
                         I_priors=priors.astype(np.float32),
                         M_s_gt=one_hot(clothing_labels(bp, m_m), CHANNELS_CLOTHING),
                         M_bp_gt=one_hot(bp, CHANNELS_BODYPART),
                         I_uv=uv_map(silhouette, px, py).astype(np.float32),
                         gt_flow=(d * m_m[None]).astype(np.float32))
    return check_sample(sample)


def generate_sample(seed: np.random.SeedSequence, height: int, width: int, amplitude: float) -> TryOnSample:
    rng = np.random.default_rng(seed)
    spec = sample_scene(rng, height, width, amplitude)
    return render(spec)


def generate(seed: int | typing.Sequence[int], count: int, height: int = 64, width: int = 48, amplitude: float = 3.0,
             threads: int | None = None) -> list[TryOnSample]:
    """ Generate count samples; the result depends only on the arguments.

    Parameters
    ----------
    seed : int or sequence of int
    count : int
        at least 1
    height, width : int
    amplitude : float
        upper bound on the summed bump magnitudes in pixels, 0 .. 4
    threads : int or None
        worker threads; defaults to GAFLOW_THREADS (1 when unset)
    """
    if count < 1:
        raise GenerationError(f"count must be at least 1, got {count}.")
    if not 0 <= amplitude <= MAX_AMPLITUDE:
        raise GenerationError(f"Deformation amplitude {amplitude} outside [0, {MAX_AMPLITUDE}] pixels.")
    seeds = np.random.SeedSequence(seed).spawn(count)
    threads = threads or worker_count()
    logger.debug(f"Generating {count} samples of {height} x {width} with {threads} thread(s).")
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: generate_sample(s, height, width, amplitude), seeds))


def self_consistency(sample: TryOnSample) -> float:
    """ Mean |warp(I_p, gt_flow) - I_m| over the worn-garment pixels. """
    if sample.gt_flow is None:
        raise GenerationError("Sample carries no ground-truth flow.")
    with no_grad():
        warped = warp_with_flow(sample.I_p, sample.gt_flow).numpy()
    mask = sample.M_m_gt[0] > 0.5
    if not mask.any():
        return 0.0
    return float(np.abs(warped - sample.I_m)[:, mask].mean())


logger = logging.getLogger(__name__)
