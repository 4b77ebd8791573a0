"""Synthetic deformed-scene generation.

Each scene composites soft-edged parametric shapes (quadratic spines with
width profiles, three families: blob-leaf, elongated stem, rosette) over
low-frequency clutter and unlabeled distractor blobs. Shapes are bent by a
random thin-plate warp scaled by ``bend_amplitude``; overlapping pairs are
forced with probability ``occlusion_prob``. Tight boxes come from the
rendered support (pixels above 0.1 of the shape peak). Identical seed and
spec give bit-identical scenes.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import backend, tps
from .detect import GroundTruthBox
from .errors import ConfigurationError, DomainError

# support threshold is 0.1 of peak: exp(-d^2 / 2 sigma^2) = 0.1
SUPPORT_RADIUS = float(np.sqrt(2.0 * np.log(10.0)))   # ~2.1460 sigma

CLASS_NAMES = ("blob_leaf", "elongated_stem", "rosette")

# per-class base colors (RGB), jittered per instance
_CLASS_COLORS = np.array([
    [0.30, 0.62, 0.24],   # blob-leaf: saturated green
    [0.55, 0.58, 0.20],   # stem: yellow-green
    [0.22, 0.55, 0.45],   # rosette: blue-green
])


@dataclass
class SceneSpec:
    image_size: int = 64
    num_objects: int = 1
    num_classes: int = 3
    occlusion_prob: float = 0.0
    bend_amplitude: float = 0.0
    clutter_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.num_objects <= 4):
            raise ConfigurationError("num_objects must be in 1..4")
        if not (1 <= self.num_classes <= 3):
            raise ConfigurationError("num_classes must be in 1..3")
        for name in ("occlusion_prob", "bend_amplitude", "clutter_level"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise DomainError(f"{name} must lie in [0,1], got {v}")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16")


@dataclass
class ShapeGeometry:
    """Strokes of one shape: each a quadratic spine (3 control points, in
    local pixel coordinates) with endpoint/midpoint widths."""
    strokes: list                 # [(ctrl (3,2), (sigma_end, sigma_mid))]
    profile: str                  # "bell" | "taper"
    peak: float
    color: np.ndarray


def _quad_bezier(ctrl, t):
    t = t[:, None]
    return ((1 - t) ** 2 * ctrl[0] + 2 * (1 - t) * t * ctrl[1]
            + t ** 2 * ctrl[2])


def _sigma_profile(kind, sig_end, sig_mid, t):
    bell = np.sin(np.pi * np.clip(t, 0.02, 0.98))
    if kind == "bell":
        return sig_end + (sig_mid - sig_end) * bell ** 0.7
    return sig_end + (sig_mid - sig_end) * bell          # taper


def sample_shape(rng, class_id, image_size):
    """Draw the geometry of one shape instance of the given family."""
    s = image_size
    angle = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])
    normal = np.array([-direction[1], direction[0]])
    if class_id == 0:      # blob-leaf: short fat spine
        length = s * rng.uniform(0.16, 0.26)
        sig_mid = length * rng.uniform(0.26, 0.36)
        sig_end = sig_mid * 0.25
        bow = rng.uniform(-0.25, 0.25) * length
        ctrl = np.array([-0.5 * length * direction,
                         bow * normal,
                         0.5 * length * direction])
        strokes = [(ctrl, (sig_end, sig_mid))]
        profile = "bell"
    elif class_id == 1:    # elongated stem: long thin spine
        length = s * rng.uniform(0.30, 0.42)
        sig_mid = length * rng.uniform(0.055, 0.085)
        sig_end = sig_mid * rng.uniform(0.6, 0.9)
        bow = rng.uniform(-0.35, 0.35) * length
        ctrl = np.array([-0.5 * length * direction,
                         bow * normal,
                         0.5 * length * direction])
        strokes = [(ctrl, (sig_end, sig_mid))]
        profile = "taper"
    else:                  # rosette: lobes radiating from a center
        lobes = int(rng.integers(4, 7))
        length = s * rng.uniform(0.10, 0.15)
        strokes = []
        base = rng.uniform(0, 2 * np.pi)
        for k in range(lobes):
            a = base + 2 * np.pi * k / lobes + rng.uniform(-0.25, 0.25)
            d = np.array([np.cos(a), np.sin(a)])
            n = np.array([-d[1], d[0]])
            bow = rng.uniform(-0.15, 0.15) * length
            ctrl = np.array([0.12 * length * d,
                             0.5 * length * d + bow * n,
                             length * d])
            sig_mid = length * rng.uniform(0.22, 0.3)
            strokes.append((ctrl, (sig_mid * 0.3, sig_mid)))
        profile = "bell"
    color = np.clip(_CLASS_COLORS[class_id]
                    + rng.uniform(-0.06, 0.06, 3), 0.02, 0.98)
    return ShapeGeometry(strokes=strokes, profile=profile,
                         peak=rng.uniform(0.8, 0.98), color=color)


def analytic_extent(geom, n_samples=1024):
    """Bounding box (x0,y0,x1,y1) of the support of the *unbent* shape:
    the union over the spine of discs with radius SUPPORT_RADIUS*sigma(t)."""
    t = np.linspace(0.0, 1.0, n_samples)
    lo = np.array([np.inf, np.inf])
    hi = -np.array([np.inf, np.inf])
    for ctrl, (sig_end, sig_mid) in geom.strokes:
        pts = _quad_bezier(ctrl, t)
        rad = SUPPORT_RADIUS * _sigma_profile(geom.profile, sig_end,
                                              sig_mid, t)
        lo = np.minimum(lo, (pts - rad[:, None]).min(axis=0))
        hi = np.maximum(hi, (pts + rad[:, None]).max(axis=0))
    return lo[0], lo[1], hi[0], hi[1]


def render_alpha(geom, patch_size, offset, n_samples=96):
    """Rasterize the shape's soft mask on a patch whose pixel (0,0) center
    sits at local coordinate ``offset``."""
    P = patch_size
    ys, xs = np.meshgrid(np.arange(P), np.arange(P), indexing="ij")
    pix = np.stack([xs + offset[0], ys + offset[1]], axis=-1).reshape(-1, 2)
    t = np.linspace(0.0, 1.0, n_samples)
    alpha = np.zeros(P * P)
    for ctrl, (sig_end, sig_mid) in geom.strokes:
        pts = _quad_bezier(ctrl, t)
        sig = _sigma_profile(geom.profile, sig_end, sig_mid, t)
        d2 = ((pix[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        alpha = np.maximum(alpha, np.exp(-0.5 * d2 / sig[None, :] ** 2).max(axis=1))
    return geom.peak * alpha.reshape(P, P)


def _bend_patch(rng, alpha, amplitude):
    """Warp the rasterized mask by a random 3x3-lattice thin-plate warp."""
    P = alpha.shape[0]
    lattice = tps.normalized_lattice(3, 3)
    disp = rng.uniform(-0.3, 0.3, (9, 2)) * amplitude
    params = tps.fit_tps(tps.ControlPointSet(lattice, lattice + disp), 0.0)
    grid = tps.make_grid(params, P, P)
    # pixel-space sampling without autodiff
    pix = np.empty((1, P, P, 2))
    pix[0, ..., 0] = (grid.coords[..., 0] + 1) * 0.5 * (P - 1)
    pix[0, ..., 1] = (grid.coords[..., 1] + 1) * 0.5 * (P - 1)
    return backend.bilinear_forward(alpha[None, None], pix, 0)[0, 0]


def _support_box(alpha):
    """Tight pixel box (x0,y0,x1,y1), inclusive, of alpha > 0.1 * peak."""
    thr = 0.1 * alpha.max()
    rows = np.flatnonzero((alpha > thr).any(axis=1))
    cols = np.flatnonzero((alpha > thr).any(axis=0))
    if len(rows) == 0:
        return None
    return cols[0], rows[0], cols[-1], rows[-1]


def _smooth_noise(rng, size, coarse, amp):
    """Low-frequency noise: a coarse grid upsampled bilinearly."""
    g = rng.normal(0.0, 1.0, (3, coarse, coarse))
    src = np.linspace(0, coarse - 1, size)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, coarse - 1)
    f = src - i0
    rows = (g[:, i0][:, :, i0] * (1 - f)[None, :, None]
            + g[:, i1][:, :, i0] * f[None, :, None])
    out = (rows * (1 - f)[None, None, :]
           + (g[:, i0][:, :, i1] * (1 - f)[None, :, None]
              + g[:, i1][:, :, i1] * f[None, :, None]) * f[None, None, :])
    return amp * out


def _soft_ellipse(rng, size):
    """Unlabeled distractor: a tilted soft ellipse patch and its radius."""
    r = rng.uniform(4.0, 9.0)
    ecc = rng.uniform(0.4, 1.0)
    ang = rng.uniform(0, np.pi)
    P = int(np.ceil(2.5 * r)) | 1
    c = P // 2
    ys, xs = np.meshgrid(np.arange(P) - c, np.arange(P) - c, indexing="ij")
    u = xs * np.cos(ang) + ys * np.sin(ang)
    v = -xs * np.sin(ang) + ys * np.cos(ang)
    d2 = (u / r) ** 2 + (v / (ecc * r)) ** 2
    return np.exp(-1.8 * d2), c


def gen_scene(spec):
    """Render one scene; returns (image (3,S,S) float64 in [0,1], labels)."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    S = spec.image_size
    canvas = np.empty((3, S, S))
    canvas[0] = 0.10
    canvas[1] = 0.13
    canvas[2] = 0.08
    canvas += _smooth_noise(rng, S, 6, 0.16 * spec.clutter_level)
    canvas += _smooth_noise(rng, S, 16, 0.06 * spec.clutter_level)

    n_distract = int(round(5 * spec.clutter_level))
    for _ in range(n_distract):
        patch, c = _soft_ellipse(rng, S)
        color = np.clip(np.array([0.30, 0.45, 0.25])
                        + rng.uniform(-0.12, 0.12, 3), 0, 1)
        strength = rng.uniform(0.25, 0.5)
        cx = int(rng.integers(0, S))
        cy = int(rng.integers(0, S))
        x0, y0 = max(0, cx - c), max(0, cy - c)
        x1, y1 = min(S, cx + c + 1), min(S, cy + c + 1)
        px0, py0 = x0 - (cx - c), y0 - (cy - c)
        sub = patch[py0:py0 + (y1 - y0), px0:px0 + (x1 - x0)] * strength
        for ch in range(3):
            canvas[ch, y0:y1, x0:x1] *= (1 - sub)
            canvas[ch, y0:y1, x0:x1] += color[ch] * sub

    labels = []
    prev_box = None
    for obj in range(spec.num_objects):
        class_id = int(rng.integers(0, spec.num_classes))
        geom = sample_shape(rng, class_id, S)
        x0, y0, x1, y1 = analytic_extent(geom)
        margin = 4.0 + 0.30 * spec.bend_amplitude * max(x1 - x0, y1 - y0)
        P = int(np.ceil(max(x1 - x0, y1 - y0) + 2 * margin))
        offset = np.array([(x0 + x1) / 2 - (P - 1) / 2,
                           (y0 + y1) / 2 - (P - 1) / 2])
        alpha = render_alpha(geom, P, offset)
        if spec.bend_amplitude > 0:
            alpha = _bend_patch(rng, alpha, spec.bend_amplitude)
        box = _support_box(alpha)
        if box is None:
            continue
        bx0, by0, bx1, by1 = box
        bw, bh = bx1 - bx0 + 1, by1 - by0 + 1

        occlude = (prev_box is not None
                   and rng.uniform() < spec.occlusion_prob)
        if occlude:
            pcx, pcy, pw, ph = prev_box
            ang = rng.uniform(0, 2 * np.pi)
            dist = 0.5 * rng.uniform(0.4, 0.8) * (max(pw, ph) + max(bw, bh))
            tx = pcx + dist * np.cos(ang) - (bx0 + bw / 2)
            ty = pcy + dist * np.sin(ang) - (by0 + bh / 2)
        else:
            tx = rng.uniform(1 - bx0, S - 1 - bx1)
            ty = rng.uniform(1 - by0, S - 1 - by1)
        tx = int(round(np.clip(tx, -bx0, S - 1 - bx1)))
        ty = int(round(np.clip(ty, -by0, S - 1 - by1)))

        # composite the patch (clipped to the frame)
        gx0, gy0 = max(0, tx), max(0, ty)
        gx1, gy1 = min(S, tx + P), min(S, ty + P)
        if gx1 <= gx0 or gy1 <= gy0:
            continue
        sub = alpha[gy0 - ty:gy1 - ty, gx0 - tx:gx1 - tx]
        for ch in range(3):
            canvas[ch, gy0:gy1, gx0:gx1] *= (1 - sub)
            canvas[ch, gy0:gy1, gx0:gx1] += geom.color[ch] * sub

        # label from the composited support
        lx0 = np.clip(bx0 + tx, 0, S - 1)
        ly0 = np.clip(by0 + ty, 0, S - 1)
        lx1 = np.clip(bx1 + tx, 0, S - 1)
        ly1 = np.clip(by1 + ty, 0, S - 1)
        cx = (lx0 + lx1 + 1) / 2 / S
        cy = (ly0 + ly1 + 1) / 2 / S
        w = (lx1 - lx0 + 1) / S
        h = (ly1 - ly0 + 1) / S
        labels.append(GroundTruthBox(box=(cx, cy, w, h), class_id=class_id))
        prev_box = ((lx0 + lx1 + 1) / 2, (ly0 + ly1 + 1) / 2,
                    lx1 - lx0 + 1, ly1 - ly0 + 1)

    return np.clip(canvas, 0.0, 1.0), labels


# -- datasets ------------------------------------------------------------------

@dataclass
class DatasetConfig:
    image_size: int = 64
    max_objects: int = 3
    num_classes: int = 3
    occlusion_prob: float = 0.5
    bend_amplitude: float = 0.6
    clutter_level: float = 0.7
    n_train: int = 600
    n_test: int = 150
    seed: int = 20240501


def scene_seed(root_seed, index):
    """Stable per-item seed: hash of (root seed, index)."""
    return int(np.random.SeedSequence([int(root_seed), int(index)])
               .generate_state(1, dtype=np.uint64)[0])


def build_scene_spec(cfg, index, root_seed):
    seed = scene_seed(root_seed, index)
    count_rng = np.random.default_rng(seed ^ 0x9E3779B97F4A7C15)
    return SceneSpec(image_size=cfg.image_size,
                     num_objects=int(count_rng.integers(1, cfg.max_objects + 1)),
                     num_classes=cfg.num_classes,
                     occlusion_prob=cfg.occlusion_prob,
                     bend_amplitude=cfg.bend_amplitude,
                     clutter_level=cfg.clutter_level,
                     seed=seed)


def make_split(cfg, n_scenes, split_salt):
    """Generate a split deterministically; split_salt decorrelates splits."""
    root = scene_seed(cfg.seed, split_salt)
    return [gen_scene(build_scene_spec(cfg, i, root)) for i in range(n_scenes)]


def make_dataset(cfg):
    """(train, test) scene lists for a dataset configuration."""
    return make_split(cfg, cfg.n_train, 0), make_split(cfg, cfg.n_test, 1)


def save_dataset(root, scenes, split):
    """PNG images plus one label file per image: lines 'class cx cy w h'."""
    d = os.path.join(root, split)
    os.makedirs(d, exist_ok=True)
    for i, (img, labels) in enumerate(scenes):
        arr = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(
            os.path.join(d, f"scene_{i:05d}.png"))
        with open(os.path.join(d, f"scene_{i:05d}.txt"), "w") as fh:
            for gt in labels:
                fh.write(f"{gt.class_id} " +
                         " ".join(f"{v:.17g}" for v in gt.box) + "\n")


def load_dataset(root, split):
    d = os.path.join(root, split)
    if not os.path.isdir(d):
        raise ConfigurationError(f"no such dataset split: {d}")
    scenes = []
    for name in sorted(os.listdir(d)):
        if not name.endswith(".png"):
            continue
        img = np.asarray(Image.open(os.path.join(d, name)),
                         dtype=np.float64).transpose(2, 0, 1) / 255.0
        labels = []
        with open(os.path.join(d, name[:-4] + ".txt")) as fh:
            for line in fh:
                parts = line.split()
                if parts:
                    labels.append(GroundTruthBox(
                        box=tuple(float(v) for v in parts[1:5]),
                        class_id=int(parts[0])))
        scenes.append((img, labels))
    return scenes
