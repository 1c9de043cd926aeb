"""Synthetic H&E-like tiles with exact nucleus instance masks.

Colour comes from optical densities mixed Beer-Lambert style from a
hematoxylin and an eosin stain vector, both jittered per image. Nuclei
are textured ellipses; fibrous and blotchy stroma adds background edges
that do not belong to any nucleus.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import make_sample

HEMATOXYLIN = np.array([0.65, 0.70, 0.29])
EOSIN = np.array([0.07, 0.99, 0.11])

MIN_SEPARATION = 6.0
MIN_AREA = 20
_MAX_TRIES = 400


def _unit(v):
    return v / np.linalg.norm(v)


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return n / (n.std() + 1e-8)


def _ellipse(shape, center, a, b, theta):
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    dy = rr - center[0]
    dx = cc - center[1]
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / a) ** 2 + (v / b) ** 2


def _place_nuclei(rng, shape, count, axis_range):
    h, w = shape
    mask = np.zeros(shape, dtype=np.int64)
    centers = []
    placed = 0
    tries = 0
    while placed < count:
        tries += 1
        if tries > _MAX_TRIES * max(count, 1):
            raise RuntimeError(f"cannot place {count} nuclei in a {h}x{w} image "
                               f"with separation {MIN_SEPARATION}")
        a = rng.uniform(*axis_range)
        b = a * rng.uniform(0.55, 1.0)
        theta = rng.uniform(0, np.pi)
        c = (rng.uniform(2, h - 3), rng.uniform(2, w - 3))
        if centers and np.min(np.hypot(*(np.array(centers) - c).T)) < MIN_SEPARATION:
            continue
        # boundary jitter makes nuclei less perfectly elliptic
        wobble = 1.0 + 0.12 * _smooth_noise(rng, shape, 3.0)
        inside = _ellipse(shape, c, a, b, theta) <= wobble
        trial = mask.copy()
        trial[inside] = placed + 1
        ids, areas = np.unique(trial, return_counts=True)
        areas = dict(zip(ids.tolist(), areas.tolist()))
        if any(areas.get(i, 0) < MIN_AREA for i in range(1, placed + 2)):
            continue
        # occlusion must not split an earlier nucleus into pieces
        touched = np.unique(mask[inside])
        if any(ndimage.label(trial == i)[1] > 1 for i in touched[touched > 0]):
            continue
        mask = trial
        centers.append(c)
        placed += 1
    return mask


def synth_image(rng, height, width, count, axis_range=(4.0, 8.5)):
    """Return ``(image, instance_mask)`` for one tile."""
    shape = (height, width)
    mask = _place_nuclei(rng, shape, count, axis_range)

    h_vec = _unit(HEMATOXYLIN + rng.normal(0, 0.05, 3).clip(-0.2, 0.2))
    e_vec = _unit(EOSIN + rng.normal(0, 0.05, 3).clip(-0.2, 0.2))
    h_gain = rng.uniform(0.8, 1.2)
    e_gain = rng.uniform(0.7, 1.3)

    # eosin: cytoplasm/stroma with fibres and blotches
    eosin = 0.25 + 0.06 * _smooth_noise(rng, shape, 6.0) + 0.04 * _smooth_noise(rng, shape, 1.5)
    for _ in range(rng.integers(2, 6)):
        r0, c0 = rng.uniform(0, height), rng.uniform(0, width)
        ang = rng.uniform(0, np.pi)
        rr, cc = np.mgrid[0:height, 0:width]
        dist = np.abs((rr - r0) * np.cos(ang) - (cc - c0) * np.sin(ang))
        eosin += 0.25 * np.exp(-0.5 * (dist / rng.uniform(0.8, 2.0)) ** 2)
    for _ in range(rng.integers(1, 4)):
        blob = _ellipse(shape, (rng.uniform(0, height), rng.uniform(0, width)),
                        rng.uniform(6, 14), rng.uniform(4, 10), rng.uniform(0, np.pi)) <= 1
        eosin += 0.18 * ndimage.gaussian_filter(blob.astype(float), 1.0)
    hema = 0.03 + 0.02 * _smooth_noise(rng, shape, 4.0)

    # nuclei: per-instance intensity, chromatin speckle, soft rim
    fg = mask > 0
    level = np.zeros(shape)
    if fg.any():
        per = rng.uniform(0.55, 1.0, mask.max() + 1)
        level = per[mask] * fg
    chromatin = 0.12 * _smooth_noise(rng, shape, 0.8)
    hema = hema + (level * (1.0 + chromatin)).clip(0, None)
    hema = ndimage.gaussian_filter(hema, 0.7)
    eosin = eosin * (1.0 - 0.6 * ndimage.gaussian_filter(fg.astype(float), 0.7))

    od = h_gain * hema[..., None] * h_vec + e_gain * eosin.clip(0, None)[..., None] * e_vec
    image = np.exp(-2.0 * od)
    image = image + rng.normal(0, 0.015, image.shape)
    return np.clip(image, 0, 1).astype(np.float32), mask


def synth_generate(n_images, height=128, width=128, nuclei_per_image_range=(8, 20), seed=0,
                   positive_radius=0, axis_range=(4.0, 8.5)):
    """Deterministic synthetic corpus of ``n_images`` samples."""
    if n_images < 0 or height < 1 or width < 1:
        raise ValueError("sizes must be positive")
    lo, hi = nuclei_per_image_range
    if lo < 0 or hi < lo:
        raise ValueError(f"bad nuclei range {nuclei_per_image_range}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_images):
        count = int(rng.integers(lo, hi + 1))
        image, mask = synth_image(rng, height, width, count, axis_range)
        samples.append(make_sample(f"synth_{i:04d}", image, mask, positive_radius=positive_radius))
    return samples
