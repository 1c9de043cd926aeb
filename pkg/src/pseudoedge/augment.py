"""Paired photometric and geometric augmentation.

Geometric ops move the image (bilinear), the instance mask (nearest) and
the points (exact forward map, then rounding) together. Warped label maps
keep their NEGATIVE/IGNORE states (pixels warped in from outside the
source become IGNORE); POSITIVE pixels are re-stamped at the
surviving points so they stay exactly the rasterized annotations.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage
from skimage.color import hsv2rgb, rgb2hsv

from .annotation import IGNORE, POSITIVE, positive_footprint


@dataclass(frozen=True)
class AugmentationConfig:
    brightness: float = 0.0           # max additive delta
    contrast: float = 0.0             # max relative delta
    saturation: float = 0.0
    hue: float = 0.0                  # max hue shift, fraction of a turn
    blur_sigma: tuple = (0.0, 0.0)    # sigma range; upper 0 disables
    blur_prob: float = 0.0
    noise_sigma: float = 0.0
    rotation: float = 0.0             # max degrees, either direction
    rot90: bool = False
    hflip: float = 0.0                # probabilities
    vflip: float = 0.0
    scale: tuple = (1.0, 1.0)
    shear: float = 0.0                # max degrees
    translate: float = 0.0            # max fraction of the side length
    affine_prob: float = 0.0
    elastic_alpha: float = 0.0        # 0 disables
    elastic_sigma: float = 4.0
    elastic_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue", "noise_sigma", "rotation",
                     "shear", "translate", "elastic_alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("blur_prob", "hflip", "vflip", "affine_prob", "elastic_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if self.blur_sigma[0] > self.blur_sigma[1] or self.scale[0] > self.scale[1]:
            raise ValueError("ranges must be ordered (low, high)")
        if self.scale[0] <= 0:
            raise ValueError("scale must be positive")
        if self.elastic_alpha > 0 and self.elastic_sigma <= 0:
            raise ValueError("elastic_sigma must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @property
    def photometric(self) -> bool:
        return bool(self.brightness or self.contrast or self.saturation or self.hue
                    or (self.blur_prob and self.blur_sigma[1] > 0) or self.noise_sigma)

    @property
    def geometric(self) -> bool:
        return bool(self.rotation or self.rot90 or self.hflip or self.vflip
                    or (self.affine_prob and (self.scale != (1.0, 1.0) or self.shear or self.translate))
                    or (self.elastic_prob and self.elastic_alpha))


IDENTITY = AugmentationConfig()


def paper_augmentation(seed=0, side=256) -> AugmentationConfig:
    """Every augmentation family the recipe lists, at moderate strength.

    Elastic magnitudes are alpha=34, sigma=4 at 256 px, scaled with ``side``.
    """
    k = side / 256.0
    return AugmentationConfig(brightness=0.1, contrast=0.1, saturation=0.1, hue=0.02,
                              blur_sigma=(0.1, 1.0), blur_prob=0.3, noise_sigma=0.02,
                              rotation=180.0, rot90=False, hflip=0.5, vflip=0.5,
                              scale=(0.9, 1.1), shear=5.0, translate=0.05, affine_prob=0.5,
                              elastic_alpha=34.0 * k, elastic_sigma=4.0 * k, elastic_prob=0.3,
                              seed=seed)


# photometric --------------------------------------------------------------

def color_jitter(image, rng, brightness, contrast, saturation, hue):
    img = image
    if brightness:
        img = img + rng.uniform(-brightness, brightness)
    if contrast:
        mean = img.mean()
        img = (img - mean) * (1 + rng.uniform(-contrast, contrast)) + mean
    if saturation:
        gray = img.mean(axis=2, keepdims=True)
        img = (img - gray) * (1 + rng.uniform(-saturation, saturation)) + gray
    if hue:
        hsv = rgb2hsv(np.clip(img, 0, 1))
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-hue, hue)) % 1.0
        img = hsv2rgb(hsv)
    return np.clip(img, 0, 1)


def gaussian_blur(image, sigma):
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0))


def gaussian_noise(image, rng, sigma):
    return np.clip(image + rng.normal(0, sigma, image.shape), 0, 1)


# geometric ----------------------------------------------------------------

def affine_matrix(shape, angle_deg=0.0, scale=1.0, shear_deg=0.0, translate=(0.0, 0.0)):
    """Forward 3x3 map on homogeneous (row, col) about the image centre."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = np.deg2rad(angle_deg)
    s = np.deg2rad(shear_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    shear = np.array([[1.0, 0.0], [np.tan(s), 1.0]])
    lin = scale * rot @ shear
    centre = np.array([cy, cx])
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = centre - lin @ centre + np.asarray(translate)
    return m


@dataclass
class GeometricOp:
    """One drawn geometric transform.

    ``kind`` is ``hflip``, ``vflip``, ``rot90`` (``k`` quarter turns,
    counter-clockwise), ``affine`` (forward ``matrix``) or ``elastic``
    (displacement fields ``dy``, ``dx``: output pixel q samples q + d(q)).
    """

    kind: str
    k: int = 0
    matrix: np.ndarray | None = None
    dy: np.ndarray | None = None
    dx: np.ndarray | None = None

    def _coords(self, shape):
        h, w = shape
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        if self.kind == "elastic":
            return np.stack([rr + self.dy, cc + self.dx])
        inv = np.linalg.inv(self.matrix)
        src = inv[:2, :2] @ np.stack([rr.ravel(), cc.ravel()]) + inv[:2, 2:3]
        return src.reshape(2, h, w)

    def apply(self, arr, order, cval=0):
        """Warp a 2-D or (H, W, C) array; ``order`` 0 = nearest, 1 = bilinear."""
        if self.kind == "hflip":
            return np.ascontiguousarray(arr[:, ::-1])
        if self.kind == "vflip":
            return np.ascontiguousarray(arr[::-1])
        if self.kind == "rot90":
            return np.ascontiguousarray(np.rot90(arr, self.k))
        coords = self._coords(arr.shape[:2])
        if arr.ndim == 2:
            return ndimage.map_coordinates(arr, coords, order=order, mode="constant", cval=cval)
        return np.stack([ndimage.map_coordinates(arr[..., c], coords, order=order, mode="reflect")
                         for c in range(arr.shape[2])], axis=-1)

    def map_points(self, pts, shape):
        """Forward-map float (row, col) points; ``shape`` is the input shape."""
        h, w = shape
        if self.kind == "hflip":
            return np.stack([pts[:, 0], w - 1 - pts[:, 1]], axis=1)
        if self.kind == "vflip":
            return np.stack([h - 1 - pts[:, 0], pts[:, 1]], axis=1)
        if self.kind == "rot90":
            for _ in range(self.k % 4):
                pts = np.stack([w - 1 - pts[:, 1], pts[:, 0]], axis=1)
                h, w = w, h
            return pts
        if self.kind == "affine":
            return (self.matrix[:2, :2] @ pts.T + self.matrix[:2, 2:3]).T
        # fixed-point inversion of the displacement field: q = p - d(q)
        q = pts.copy()
        for _ in range(20):
            d = np.stack([ndimage.map_coordinates(self.dy, q.T, order=1, mode="nearest"),
                          ndimage.map_coordinates(self.dx, q.T, order=1, mode="nearest")], axis=1)
            q = pts - d
        return q

    def out_shape(self, shape):
        if self.kind == "rot90" and self.k % 2:
            return shape[1], shape[0]
        return shape


def draw_geometry(cfg: AugmentationConfig, shape, rng) -> list[GeometricOp]:
    """Draw the geometric ops for one sample, consuming ``rng`` in a fixed order."""
    ops = []
    if cfg.hflip and rng.random() < cfg.hflip:
        ops.append(GeometricOp("hflip"))
    if cfg.vflip and rng.random() < cfg.vflip:
        ops.append(GeometricOp("vflip"))
    if cfg.rot90:
        k = int(rng.integers(0, 4))
        if k:
            ops.append(GeometricOp("rot90", k=k))
            if k % 2:
                shape = shape[::-1]
    angle = rng.uniform(-cfg.rotation, cfg.rotation) if cfg.rotation else 0.0
    scale, shear, trans = 1.0, 0.0, (0.0, 0.0)
    if cfg.affine_prob and rng.random() < cfg.affine_prob:
        scale = rng.uniform(*cfg.scale)
        shear = rng.uniform(-cfg.shear, cfg.shear) if cfg.shear else 0.0
        t = cfg.translate
        trans = (rng.uniform(-t, t) * shape[0], rng.uniform(-t, t) * shape[1]) if t else (0.0, 0.0)
    if angle or scale != 1.0 or shear or trans != (0.0, 0.0):
        ops.append(GeometricOp("affine", matrix=affine_matrix(shape, angle, scale, shear, trans)))
    if cfg.elastic_alpha and cfg.elastic_prob and rng.random() < cfg.elastic_prob:
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), cfg.elastic_sigma, mode="constant")
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), cfg.elastic_sigma, mode="constant")
        ops.append(GeometricOp("elastic", dy=dy * cfg.elastic_alpha, dx=dx * cfg.elastic_alpha))
    return ops


def warp_mask(mask, ops):
    """Apply drawn ops to a stand-alone instance mask (nearest neighbour)."""
    for op in ops:
        mask = op.apply(mask, order=0)
    return mask


def apply_photometric(image, cfg: AugmentationConfig, rng):
    if cfg.brightness or cfg.contrast or cfg.saturation or cfg.hue:
        image = color_jitter(image, rng, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue)
    if cfg.blur_prob and cfg.blur_sigma[1] > 0 and rng.random() < cfg.blur_prob:
        image = gaussian_blur(image, rng.uniform(*cfg.blur_sigma))
    if cfg.noise_sigma:
        image = gaussian_noise(image, rng, cfg.noise_sigma)
    return image


def augment(sample, cfg: AugmentationConfig, draw_seed: int = 0, return_ops: bool = False):
    """Augmented copy of ``sample``; ``(cfg.seed, draw_seed)`` fixes every draw.

    With ``return_ops`` the drawn geometric ops come back too, so the same
    transform can be replayed with :func:`warp_mask`.
    """
    if not (cfg.geometric or cfg.photometric):
        return (sample, []) if return_ops else sample
    rng = np.random.default_rng([cfg.seed, draw_seed])
    ops = draw_geometry(cfg, sample.shape, rng)

    image, mask, labels = sample.image, sample.instance_mask, sample.labels
    pts = sample.points.astype(np.float64)
    for op in ops:
        pts = op.map_points(pts, image.shape[:2])
        image = op.apply(image, order=1)
        if mask is not None:
            mask = op.apply(mask, order=0)
        # outside the source image nothing is known
        labels = op.apply(labels, order=0, cval=IGNORE)
    image = apply_photometric(image, cfg, rng)

    h, w = image.shape[:2]
    pts = np.floor(pts + 0.5).astype(np.int64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < h) & (pts[:, 1] >= 0) & (pts[:, 1] < w)
    pts = pts[keep]
    if len(pts):
        # shrinking transforms can round two points onto one pixel
        _, first = np.unique(pts, axis=0, return_index=True)
        pts = pts[np.sort(first)]
    if ops:
        labels = labels.copy()
        labels[labels == POSITIVE] = IGNORE
        labels[positive_footprint(pts, h, w, sample.positive_radius)] = POSITIVE
    out = sample.with_(image=np.ascontiguousarray(image, dtype=np.float32), instance_mask=mask,
                       labels=np.ascontiguousarray(labels, dtype=np.uint8), points=pts)
    return (out, ops) if return_ops else out
