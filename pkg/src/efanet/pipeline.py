"""Dataset plumbing: Sobel edge targets, augmentation, rescaling, the scale
bucketing used for evaluation, and a synthetic blob dataset generator."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import dataio
from .engine import resize_bilinear_np

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T

SMALL_THRESHOLD = 0.025   # foreground/total area ratio below which a polyp is "small"
LARGE_THRESHOLD = 0.2     # ...above which it is "large"


@dataclass
class SegSample:
    image: np.ndarray        # (C,H,W) floats in [0,1]
    mask: np.ndarray         # (1,H,W) binary
    edge: np.ndarray         # (1,H,W) binary
    id: str = ""


@dataclass
class AugConfig:
    flip_prob: float = 0.5
    rotation_degrees: tuple = (0, 90, 180, 270)
    free_angle_rotation: bool = False
    crop_fraction_min: float = 0.8
    crop_fraction_max: float = 1.0
    scale_ratios: tuple = (0.75, 1.0, 1.25)
    target_size: int = 64
    edge_dilation_radius: int = 1

    def __post_init__(self):
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip_prob must be in [0,1]")
        if any(r <= 0 for r in self.scale_ratios):
            raise ValueError("scale ratios must be positive")
        if self.target_size % 32:
            raise ValueError("target_size must be divisible by 32")


def sobel_edge_gt(mask, dilation_radius=1):
    """Edge ground truth: foreground pixels with nonzero Sobel gradient,
    optionally thickened by morphological dilation.

    Border handling is replicate, so a full-frame mask yields no edges.
    """
    g = np.asarray(mask, dtype=np.float64)
    squeeze = g.ndim == 3
    if squeeze:
        g = g[0]
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("sobel_edge_gt: mask must be binary")
    gx = ndimage.correlate(g, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(g, SOBEL_Y, mode="nearest")
    edge = ((gx * gx + gy * gy) > 0) & (g == 1)
    if dilation_radius > 0:
        size = 2 * dilation_radius + 1
        edge = ndimage.binary_dilation(edge, structure=np.ones((size, size), bool))
    out = edge.astype(np.float64)
    return out[None] if squeeze else out


def polyp_scale_ratio(mask):
    """Foreground area ratio and the scale bucket it falls into."""
    g = np.asarray(mask)
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("polyp_scale_ratio: mask must be binary")
    r = float(g.sum()) / g.size
    if r < SMALL_THRESHOLD:
        bucket = "small"
    elif r > LARGE_THRESHOLD:
        bucket = "large"
    else:
        bucket = "medium"
    return r, bucket


# -- geometric transforms ----------------------------------------------------


def _resize_image(img, oh, ow):
    return np.clip(resize_bilinear_np(img, oh, ow, align_corners=False), 0.0, 1.0)


def _resize_mask_nearest(mask, oh, ow):
    h, w = mask.shape[-2:]
    rows = np.minimum((np.arange(oh) + 0.5) * h / oh, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(ow) + 0.5) * w / ow, w - 1).astype(np.int64)
    return mask[..., rows[:, None], cols[None, :]].copy()


def _rebuild(sample, image, mask, radius):
    mask = (mask >= 0.5).astype(np.float64)
    return SegSample(image=image, mask=mask,
                     edge=sobel_edge_gt(mask, radius), id=sample.id)


def flip_sample(sample, axis, radius=1):
    """axis: 'h' flips left-right, 'v' flips top-bottom."""
    ax = -1 if axis == "h" else -2
    return _rebuild(sample, np.flip(sample.image, axis=ax).copy(),
                    np.flip(sample.mask, axis=ax).copy(), radius)


def rotate_sample(sample, degrees, radius=1):
    if degrees % 90 == 0:
        k = (degrees // 90) % 4
        img = np.rot90(sample.image, k, axes=(-2, -1)).copy()
        msk = np.rot90(sample.mask, k, axes=(-2, -1)).copy()
    else:
        img = np.stack([ndimage.rotate(c, degrees, reshape=False, order=1,
                                       mode="nearest") for c in sample.image])
        img = np.clip(img, 0.0, 1.0)
        msk = np.stack([ndimage.rotate(c, degrees, reshape=False, order=1,
                                       mode="constant", cval=0.0)
                        for c in sample.mask])
    return _rebuild(sample, img, msk, radius)


def crop_sample(sample, fraction, top, left, radius=1):
    """Crop a `fraction`-sized window at (top,left) and resize back."""
    h, w = sample.mask.shape[-2:]
    ch = max(1, int(round(h * fraction)))
    cw = max(1, int(round(w * fraction)))
    if fraction >= 1.0:
        return sample
    img = sample.image[..., top:top + ch, left:left + cw]
    msk = sample.mask[..., top:top + ch, left:left + cw]
    return _rebuild(sample, _resize_image(img, h, w),
                    _resize_mask_nearest(msk, h, w), radius)


def augment(sample, rng, config: AugConfig):
    """Random flip, rotation and crop with identical geometry on image/mask;
    the edge map is regenerated from the transformed mask."""
    radius = config.edge_dilation_radius
    if rng.random() < config.flip_prob:
        sample = flip_sample(sample, "h", radius)
    if rng.random() < config.flip_prob:
        sample = flip_sample(sample, "v", radius)
    if config.free_angle_rotation:
        deg = float(rng.uniform(0.0, 360.0))
    else:
        deg = float(rng.choice(np.asarray(config.rotation_degrees)))
    if deg:
        sample = rotate_sample(sample, deg, radius)
    frac = float(rng.uniform(config.crop_fraction_min, config.crop_fraction_max))
    if frac < 1.0:
        h, w = sample.mask.shape[-2:]
        ch = max(1, int(round(h * frac)))
        cw = max(1, int(round(w * frac)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        sample = crop_sample(sample, frac, top, left, radius)
    return sample


def rescale(sample, size=None, ratio=None, radius=1):
    """Resize to a square target: bilinear image, nearest-neighbor mask."""
    h, w = sample.mask.shape[-2:]
    if size is None:
        if ratio is None:
            raise ValueError("rescale: give size or ratio")
        size = int(round(h * ratio))
    if size < 1:
        raise ValueError(f"rescale: bad target size {size}")
    if (size, size) == (h, w):
        return sample
    return _rebuild(sample, _resize_image(sample.image, size, size),
                    _resize_mask_nearest(sample.mask, size, size), radius)


# -- synthetic dataset -------------------------------------------------------


def _smooth_noise(rng, size, cells, amplitude):
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells))
    return amplitude * resize_bilinear_np(coarse, size, size, align_corners=True)


def _render_blob(size, cy, cx, ry, rx, theta, wobble_amp, wobble_phase):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (ct * dx + st * dy) / rx
    v = (-st * dx + ct * dy) / ry
    rho = np.sqrt(u * u + v * v)
    phi = np.arctan2(v, u)
    limit = 1.0
    for k, (amp, ph) in enumerate(zip(wobble_amp, wobble_phase), start=2):
        limit = limit + amp * np.cos(k * phi + ph)
    return rho <= limit


def synth_sample(rng, size, sample_id, radius=1):
    """One textured background + 1..3 high-contrast elliptical blobs."""
    base = rng.uniform(0.15, 0.35)
    background = base + _smooth_noise(rng, size, max(4, size // 8), 0.06)

    kind = rng.choice(["small", "medium", "large"], p=[0.2, 0.55, 0.25])
    scale = size / 64.0
    if kind == "small":
        radii = [rng.uniform(3.0, 5.2) * scale]
    elif kind == "medium":
        radii = [rng.uniform(6.0, 12.0) * scale
                 for _ in range(int(rng.integers(1, 4)))]
    else:
        radii = [rng.uniform(17.0, 24.0) * scale]
        if rng.random() < 0.3:
            radii.append(rng.uniform(4.0, 7.0) * scale)

    mask = np.zeros((size, size), dtype=bool)
    image = background.copy()
    for r0 in radii:
        ry = r0 * rng.uniform(0.75, 1.25)
        rx = r0 * rng.uniform(0.75, 1.25)
        wob_amp = rng.uniform(0.0, 0.08, size=3)
        margin = max(ry, rx) * (1.0 + wob_amp.sum()) + 2.0
        margin = min(margin, size / 2.0 - 1.0)
        cy = rng.uniform(margin, size - margin)
        cx = rng.uniform(margin, size - margin)
        blob = _render_blob(size, cy, cx, ry, rx, rng.uniform(0.0, np.pi),
                            wob_amp, rng.uniform(0.0, 2 * np.pi, size=3))
        fg = base + 0.3 + rng.uniform(0.0, 0.2)
        image[blob] = fg + _smooth_noise(rng, size, max(4, size // 8), 0.04)[blob]
        mask |= blob
    if not mask.any():  # generator constraint: every mask is nonempty
        mask[size // 2, size // 2] = True
        image[size // 2, size // 2] = min(base + 0.4, 0.95)

    image = image + rng.normal(0.0, 0.02, size=(size, size))
    image = np.clip(image, 0.0, 1.0)[None]
    m = mask.astype(np.float64)[None]
    return SegSample(image=image, mask=m, edge=sobel_edge_gt(m, radius),
                     id=sample_id)


def synth_blob_dataset(n, size, seed, out_dir, train_fraction=0.8,
                       edge_dilation_radius=1):
    """Generate n samples as PGM files plus a train/test manifest.

    Deterministic from the seed, byte for byte.
    """
    if size % 32:
        raise ValueError("size must be divisible by 32")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = int(round(n * train_fraction))
    split_rng = np.random.default_rng(seed + 1)
    order = split_rng.permutation(n)
    splits = {int(idx): ("train" if pos < n_train else "test")
              for pos, idx in enumerate(order)}

    records = []
    for i in range(n):
        sid = f"blob{i:04d}"
        sample = synth_sample(rng, size, sid, edge_dilation_radius)
        img_name = f"{sid}.pgm"
        mask_name = f"{sid}_mask.pgm"
        dataio.write_pgm(os.path.join(out_dir, img_name), sample.image)
        dataio.write_mask(os.path.join(out_dir, mask_name), sample.mask)
        records.append((sid, img_name, mask_name, splits[i]))
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    dataio.write_manifest(manifest_path, records)
    return manifest_path


def load_sample(record, edge_dilation_radius=1):
    """Load one manifest record into a SegSample."""
    sid, img_path, mask_path, _split = record
    image = dataio.read_pnm(img_path)
    mask = dataio.read_mask(mask_path)
    return SegSample(image=image, mask=mask,
                     edge=sobel_edge_gt(mask, edge_dilation_radius), id=sid)
