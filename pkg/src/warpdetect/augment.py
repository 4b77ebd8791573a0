"""Test-time augmentation: rotation, shear, and crop-zoom with seeded draws.

Enabled transforms compose in the order rotation -> shear -> crop into a
single affine map; the image is resampled once through the bilinear
sampler and each box becomes the axis-aligned hull of its transformed
corners, clipped to the frame. Boxes losing more than 80% of their area
are dropped; a scene whose labels all drop is reported via the returned
label list being empty (callers skip it with a notice).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .detect import GroundTruthBox
from .errors import ConfigurationError

log = logging.getLogger(__name__)

MAX_AREA_LOSS = 0.8
VALID_OPS = ("rotation", "shear", "crop")


@dataclass
class AugmentationSpec:
    rotation_deg: float = 10.0
    shear_deg: float = 10.0
    crop_fraction: float = 0.15
    enabled: tuple = ()

    def __post_init__(self):
        if self.rotation_deg < 0 or self.shear_deg < 0:
            raise ConfigurationError("augmentation ranges must be nonnegative")
        if not (0.0 <= self.crop_fraction < 1.0):
            raise ConfigurationError("crop_fraction must lie in [0,1)")
        bad = set(self.enabled) - set(VALID_OPS)
        if bad:
            raise ConfigurationError(f"unknown augmentation ops: {sorted(bad)}")
        self.enabled = tuple(op for op in VALID_OPS if op in self.enabled)


def _compose(A1, b1, A2, b2):
    """Affine composition: apply (A1,b1) first, then (A2,b2)."""
    return A2 @ A1, A2 @ b1 + b2


def _forward_map(spec, rng, fixed_rotation_deg=None):
    """Affine forward map on [0,1]^2 coordinates for one seeded draw."""
    A = np.eye(2)
    b = np.zeros(2)
    c = np.array([0.5, 0.5])
    if "rotation" in spec.enabled:
        deg = (fixed_rotation_deg if fixed_rotation_deg is not None
               else rng.uniform(-spec.rotation_deg, spec.rotation_deg))
        th = math.radians(deg)
        R = np.array([[math.cos(th), -math.sin(th)],
                      [math.sin(th), math.cos(th)]])
        A, b = _compose(A, b, R, c - R @ c)
    if "shear" in spec.enabled:
        shx = math.tan(math.radians(rng.uniform(-spec.shear_deg,
                                                spec.shear_deg)))
        shy = math.tan(math.radians(rng.uniform(-spec.shear_deg,
                                                spec.shear_deg)))
        S = np.array([[1.0, shx], [shy, 1.0]])
        A, b = _compose(A, b, S, c - S @ c)
    if "crop" in spec.enabled:
        s = 1.0 - spec.crop_fraction
        origin = rng.uniform(0.0, 1.0 - s, size=2)
        C = np.eye(2) / s
        A, b = _compose(A, b, C, -origin / s)
    return A, b


def _resample(image, A, b):
    """Backward-warp the image through the inverse of the forward map."""
    C, H, W = image.shape
    Ainv = np.linalg.inv(A)
    # pixel centers in [0,1] box coordinates
    xs = (np.arange(W) + 0.5) / W
    ys = (np.arange(H) + 0.5) / H
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([X, Y], axis=-1).reshape(-1, 2)
    src = (pts - b) @ Ainv.T
    # to pixel units of the source image
    pix = np.empty((1, H, W, 2))
    pix[0, ..., 0] = (src[:, 0] * W - 0.5).reshape(H, W)
    pix[0, ..., 1] = (src[:, 1] * H - 0.5).reshape(H, W)
    snapped = np.rint(pix)
    pix = np.where(np.abs(pix - snapped) <= 1e-9, snapped, pix)
    return backend.bilinear_forward(image[None], pix, 0)[0]


def _transform_box(box, A, b):
    cx, cy, w, h = box
    corners = np.array([[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2],
                        [cx - w / 2, cy + h / 2], [cx + w / 2, cy + h / 2]])
    moved = corners @ A.T + b
    x0, y0 = moved.min(axis=0)
    x1, y1 = moved.max(axis=0)
    hull_area = (x1 - x0) * (y1 - y0)
    cx0, cy0 = max(x0, 0.0), max(y0, 0.0)
    cx1, cy1 = min(x1, 1.0), min(y1, 1.0)
    if cx1 <= cx0 or cy1 <= cy0:
        return None
    clipped_area = (cx1 - cx0) * (cy1 - cy0)
    if hull_area <= 0 or 1.0 - clipped_area / hull_area > MAX_AREA_LOSS:
        return None
    return ((cx0 + cx1) / 2, (cy0 + cy1) / 2, cx1 - cx0, cy1 - cy0)


def augment(image, labels, spec, seed, fixed_rotation_deg=None):
    """Apply the enabled transforms; returns (image, labels).

    ``fixed_rotation_deg`` overrides the rotation draw (test hook). An
    empty returned label list means every box was lost and the scene
    should be skipped.
    """
    image = np.asarray(image, dtype=np.float64)
    if not spec.enabled:
        return image, list(labels)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1)]))
    A, b = _forward_map(spec, rng, fixed_rotation_deg)
    out = _resample(image, A, b)
    kept = []
    for gt in labels:
        moved = _transform_box(gt.box, A, b)
        if moved is not None:
            kept.append(GroundTruthBox(box=moved, class_id=gt.class_id))
    if labels and not kept:
        log.info("augment: all %d boxes lost; scene will be skipped",
                 len(labels))
    return out, kept
