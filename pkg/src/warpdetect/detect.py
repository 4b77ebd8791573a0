"""Miniature single-scale anchor-free detection head.

Two 1x1 convolution branches produce per-cell class logits and raw box
parameters. Plain decoding: center = cell corner + sigmoid offsets, size =
exp(raw) capped at 1. With DFL enabled the box branch predicts B-bin
distributions over the four side distances (in cell units) and boxes decode
from their expectations. Training couples summed BCE over every cell with
CIoU (and optionally DFL) on the cells owning a ground-truth center.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import init, ops
from .errors import ConfigurationError, DimensionError, DomainError
from .tensor import Tensor, as_tensor

CENTER_EPS = 1e-6
# guards the CIoU alpha denominator; only reached when pred == gt exactly
ALPHA_DENOM_FLOOR = 1e-12


@dataclass
class Detection:
    box: tuple          # (cx, cy, w, h) normalized
    class_id: int
    score: float

    def validate(self):
        cx, cy, w, h = self.box
        if w <= 0 or h <= 0:
            raise DomainError(f"detection size must be positive, got {self.box}")
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise DomainError(f"detection center out of frame: {self.box}")
        if not (0.0 < self.score < 1.0):
            raise DomainError(f"score must lie in (0,1), got {self.score}")


@dataclass
class GroundTruthBox:
    box: tuple          # (cx, cy, w, h) normalized
    class_id: int

    def validate(self):
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise DomainError(f"ground-truth size must be positive: {self.box}")


@dataclass
class HeadOutput:
    cls_logits: Tensor      # (K, Hg, Wg) or batched (N, K, Hg, Wg)
    box_raw: Tensor         # (4, Hg, Wg) or (4*B, Hg, Wg), same batching


@dataclass
class DetectConfig:
    num_classes: int = 3
    grid_size: int = 8
    dfl_bins: int = 0                   # 0 disables DFL
    score_threshold: float = 0.25
    nms_iou_threshold: float = 0.5
    lambda_box: float = 5.0
    lambda_dfl: float = 1.0

    @property
    def box_channels(self):
        return 4 * self.dfl_bins if self.dfl_bins else 4


@dataclass
class DetectionHead:
    cls_w: Tensor
    cls_b: Tensor
    box_w: Tensor
    box_b: Tensor
    cfg: DetectConfig

    def named_parameters(self, prefix="head"):
        return {f"{prefix}.cls_w": self.cls_w, f"{prefix}.cls_b": self.cls_b,
                f"{prefix}.box_w": self.box_w, f"{prefix}.box_b": self.box_b}


# bias priors: classification starts near-background (sigmoid ~ 0.02) so
# the summed BCE does not spend epochs collapsing 60+ cells per class, and
# plain-mode sizes start at a quarter frame, safely below the exp cap at 1
# (whose gradient is zero once saturated)
CLS_PRIOR_LOGIT = -4.0
SIZE_PRIOR = 0.25


def init_head(rng, in_channels, cfg):
    cls_b = init.zeros((cfg.num_classes,))
    cls_b.data[:] = CLS_PRIOR_LOGIT
    box_b = init.zeros((cfg.box_channels,))
    if not cfg.dfl_bins:
        box_b.data[2:] = math.log(SIZE_PRIOR)
    return DetectionHead(
        cls_w=init.uniform_fan_in(rng, (cfg.num_classes, in_channels, 1, 1),
                                  in_channels),
        cls_b=cls_b,
        box_w=init.uniform_fan_in(rng, (cfg.box_channels, in_channels, 1, 1),
                                  in_channels),
        box_b=box_b,
        cfg=cfg)


def head_forward(head, features):
    """Project backbone features to class logits and raw box parameters."""
    features = as_tensor(features)
    cls = ops.conv2d(features, head.cls_w, head.cls_b, 1, 0)
    box = ops.conv2d(features, head.box_w, head.box_b, 1, 0)
    return HeadOutput(cls_logits=cls, box_raw=box)


# -- geometry ---------------------------------------------------------------

def _corners(box):
    cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b):
    """Intersection over union of (...,4) cxcywh boxes (vectorized)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)


def ciou_terms(pcx, pcy, pw, ph, gt):
    """CIoU losses (Tensor, shape (M,)) for predicted coordinate tensors
    against constant ground-truth boxes (M,4)."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if np.any(gt[:, 2] <= 0) or np.any(gt[:, 3] <= 0):
        raise DomainError("degenerate ground-truth box (w or h <= 0)")
    gx1, gy1, gx2, gy2 = _corners(gt)
    gcx, gcy, gw, gh = gt[:, 0], gt[:, 1], gt[:, 2], gt[:, 3]

    half_w = ops.scale(pw, 0.5)
    half_h = ops.scale(ph, 0.5)
    px1 = ops.sub(pcx, half_w)
    px2 = ops.add(pcx, half_w)
    py1 = ops.sub(pcy, half_h)
    py2 = ops.add(pcy, half_h)

    iw = ops.relu(ops.sub(ops.minimum(px2, gx2), ops.maximum(px1, gx1)))
    ih = ops.relu(ops.sub(ops.minimum(py2, gy2), ops.maximum(py1, gy1)))
    inter = ops.mul(iw, ih)
    union = ops.sub(ops.add(ops.mul(pw, ph), gw * gh), inter)
    iou_t = ops.div(inter, union)

    rho2 = ops.add(ops.square(ops.sub(pcx, gcx)), ops.square(ops.sub(pcy, gcy)))
    ex1 = ops.minimum(px1, gx1)
    ey1 = ops.minimum(py1, gy1)
    ex2 = ops.maximum(px2, gx2)
    ey2 = ops.maximum(py2, gy2)
    c2 = ops.add(ops.square(ops.sub(ex2, ex1)), ops.square(ops.sub(ey2, ey1)))

    gt_angle = np.arctan(gw / gh)
    angle = ops.arctan(ops.div(pw, ph))
    v = ops.scale(ops.square(ops.sub(Tensor(gt_angle), angle)), 4.0 / math.pi ** 2)
    one_minus_iou = ops.sub(Tensor(np.ones(len(gt))), iou_t)
    alpha = ops.div(v, ops.maximum(ops.add(one_minus_iou, v), ALPHA_DENOM_FLOOR))
    return ops.add(ops.add(one_minus_iou, ops.div(rho2, c2)), ops.mul(alpha, v))


def ciou_loss(pred, gt):
    """Scalar CIoU loss between one predicted box (Tensor or array of 4
    cxcywh values) and one ground-truth box; differentiable in pred."""
    pred = as_tensor(pred)
    if pred.data.shape != (4,):
        raise DimensionError(f"pred must be a 4-vector, got {pred.data.shape}")
    parts = [ops.take_flat(pred, [i]) for i in range(4)]
    out = ciou_terms(parts[0], parts[1], parts[2], parts[3],
                     np.asarray(gt, dtype=np.float64).reshape(1, 4))
    return ops.reshape(out, ())


def dfl_terms(logits, targets):
    """Distributed-focal losses (Tensor, (M,)) for (M,B) logit tensors
    against continuous bin coordinates (M,)."""
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    B = logits.data.shape[-1]
    if np.any(t < 0) or np.any(t > B - 1):
        raise DomainError(f"DFL target outside [0, {B - 1}]")
    lo = np.floor(t)
    hi = np.ceil(t)
    w_lo = np.where(lo == hi, 1.0, hi - t)
    w_hi = np.where(lo == hi, 0.0, t - lo)
    lse = ops.reshape(ops.logsumexp(logits, axis=1), (-1,))
    M = len(t)
    rows = np.arange(M) * B
    ce_lo = ops.sub(lse, ops.take_flat(logits, rows + lo.astype(np.intp)))
    ce_hi = ops.sub(lse, ops.take_flat(logits, rows + hi.astype(np.intp)))
    return ops.add(ops.mul(ce_lo, w_lo), ops.mul(ce_hi, w_hi))


def dfl_loss(side_logits, target):
    """Scalar DFL for one B-bin side distribution and a continuous target."""
    side_logits = as_tensor(side_logits)
    if side_logits.data.ndim != 1:
        raise DimensionError("side_logits must be a 1-D bin vector")
    out = dfl_terms(ops.reshape(side_logits, (1, -1)), [float(target)])
    return ops.reshape(out, ())


# -- decoding ----------------------------------------------------------------

def _cell_grids(Hg, Wg):
    jj, ii = np.meshgrid(np.arange(Wg), np.arange(Hg), indexing="xy")
    return ii.astype(np.float64), jj.astype(np.float64)


def _dfl_expectation_np(raw, B):
    """(4B, Hg, Wg) logits -> (4, Hg, Wg) expected side distances."""
    four, Hg, Wg = 4, raw.shape[1], raw.shape[2]
    r = raw.reshape(4, B, Hg, Wg)
    r = r - r.max(axis=1, keepdims=True)
    e = np.exp(r)
    p = e / e.sum(axis=1, keepdims=True)
    bins = np.arange(B, dtype=np.float64)[None, :, None, None]
    return (p * bins).sum(axis=1)


def decode_boxes_np(box_raw, cfg):
    """(box_channels, Hg, Wg) raw values -> (Hg, Wg, 4) cxcywh (no grad)."""
    Hg, Wg = box_raw.shape[1], box_raw.shape[2]
    ii, jj = _cell_grids(Hg, Wg)
    if cfg.dfl_bins:
        d = _dfl_expectation_np(box_raw, cfg.dfl_bins)
        x1 = (jj + 0.5 - d[0]) / Wg
        y1 = (ii + 0.5 - d[1]) / Hg
        x2 = (jj + 0.5 + d[2]) / Wg
        y2 = (ii + 0.5 + d[3]) / Hg
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        w, h = x2 - x1, y2 - y1
    else:
        sig = 1.0 / (1.0 + np.exp(-box_raw[:2]))
        cx = (jj + sig[0]) / Wg
        cy = (ii + sig[1]) / Hg
        w = np.minimum(np.exp(box_raw[2]), 1.0)
        h = np.minimum(np.exp(box_raw[3]), 1.0)
    cx = np.clip(cx, CENTER_EPS, 1 - CENTER_EPS)
    cy = np.clip(cy, CENTER_EPS, 1 - CENTER_EPS)
    w = np.clip(w, CENTER_EPS, 1.0)
    h = np.clip(h, CENTER_EPS, 1.0)
    return np.stack([cx, cy, w, h], axis=-1)


def decode_detections(head_out, cfg, score_floor=None):
    """Per-image candidate Detections above the score floor (no grad).

    Accepts a batched or unbatched HeadOutput; returns a list per image
    (or a single list when unbatched).
    """
    cls = head_out.cls_logits.data
    raw = head_out.box_raw.data
    batched = cls.ndim == 4
    if not batched:
        cls, raw = cls[None], raw[None]
    floor = cfg.score_threshold if score_floor is None else score_floor
    out = []
    for n in range(cls.shape[0]):
        scores = 1.0 / (1.0 + np.exp(-cls[n]))
        boxes = decode_boxes_np(raw[n], cfg)
        k, i, j = np.where(scores >= floor)
        dets = [Detection(box=tuple(boxes[a, b]), class_id=int(c),
                          score=float(scores[c, a, b]))
                for c, a, b in zip(k, i, j)]
        out.append(dets)
    return out if batched else out[0]


# -- assignment and losses -----------------------------------------------------

def assign_cells(gts, Hg, Wg):
    """One-cell-per-target assignment: each ground truth goes to the cell
    holding its center; on collision the larger box wins (tie: lower index).
    Returns list of (gt_index, i, j)."""
    owner = {}
    for idx, gt in enumerate(gts):
        cx, cy, w, h = gt.box
        j = min(int(cx * Wg), Wg - 1)
        i = min(int(cy * Hg), Hg - 1)
        key = (i, j)
        if key in owner:
            prev = owner[key]
            prev_area = gts[prev].box[2] * gts[prev].box[3]
            if w * h <= prev_area:
                continue
        owner[key] = idx
    return [(idx, i, j) for (i, j), idx in sorted(owner.items())]


def total_loss(head_out, gts, cfg):
    """Per-image loss: summed BCE over all cells/classes plus lambda_box *
    summed CIoU on assigned cells (plus lambda_dfl * DFL when enabled).

    Returns (scalar Tensor, breakdown dict of floats).
    """
    cls = head_out.cls_logits
    raw = head_out.box_raw
    if cls.data.ndim != 3:
        raise DimensionError("total_loss expects an unbatched HeadOutput")
    K, Hg, Wg = cls.data.shape
    targets = np.zeros((K, Hg, Wg))
    assigned = assign_cells(gts, Hg, Wg)
    for idx, i, j in assigned:
        targets[gts[idx].class_id, i, j] = 1.0
    cls_loss = ops.sum_all(ops.bce_with_logits(cls, targets))

    breakdown = {"cls": float(cls_loss.data)}
    loss = cls_loss
    if assigned:
        gt_boxes = np.array([gts[idx].box for idx, _, _ in assigned])
        cells_i = np.array([i for _, i, _ in assigned], dtype=np.float64)
        cells_j = np.array([j for _, _, j in assigned], dtype=np.float64)
        flat_ij = (cells_i * Wg + cells_j).astype(np.intp)
        plane = Hg * Wg

        if cfg.dfl_bins:
            B = cfg.dfl_bins
            # side distances from the cell center, in cell units
            gx1, gy1, gx2, gy2 = _corners(gt_boxes)
            tl = np.clip(cells_j + 0.5 - gx1 * Wg, 0, B - 1)
            tt = np.clip(cells_i + 0.5 - gy1 * Hg, 0, B - 1)
            tr = np.clip(gx2 * Wg - (cells_j + 0.5), 0, B - 1)
            tb = np.clip(gy2 * Hg - (cells_i + 0.5), 0, B - 1)
            side_targets = [tl, tt, tr, tb]
            dfl_sum = None
            sides_exp = []
            bins = np.arange(B, dtype=np.float64)
            for s in range(4):
                idx = ((s * B + np.arange(B))[None, :] * plane
                       + flat_ij[:, None])
                side_logits = ops.take_flat(raw, idx)       # (M,B)
                term = ops.sum_all(dfl_terms(side_logits, side_targets[s]))
                dfl_sum = term if dfl_sum is None else ops.add(dfl_sum, term)
                soft = ops.softmax_expectation(side_logits, bins)
                sides_exp.append(soft)
            l, t, r, b = sides_exp
            pcx = ops.scale(ops.add(ops.sub(r, l), 2 * (cells_j + 0.5)), 0.5 / Wg)
            pcy = ops.scale(ops.add(ops.sub(b, t), 2 * (cells_i + 0.5)), 0.5 / Hg)
            pw = ops.scale(ops.add(l, r), 1.0 / Wg)
            ph = ops.scale(ops.add(t, b), 1.0 / Hg)
            pw = ops.maximum(ops.minimum(pw, 1.0), CENTER_EPS)
            ph = ops.maximum(ops.minimum(ph, 1.0), CENTER_EPS)
            ciou_sum = ops.sum_all(ciou_terms(pcx, pcy, pw, ph, gt_boxes))
            loss = ops.add(loss, ops.scale(ciou_sum, cfg.lambda_box))
            loss = ops.add(loss, ops.scale(dfl_sum, cfg.lambda_dfl))
            breakdown["box"] = float(ciou_sum.data) * cfg.lambda_box
            breakdown["dfl"] = float(dfl_sum.data) * cfg.lambda_dfl
        else:
            takes = [ops.take_flat(raw, c * plane + flat_ij) for c in range(4)]
            pcx = ops.mul(ops.add(ops.sigmoid(takes[0]), cells_j), 1.0 / Wg)
            pcy = ops.mul(ops.add(ops.sigmoid(takes[1]), cells_i), 1.0 / Hg)
            pw = ops.minimum(ops.exp(takes[2]), 1.0)
            ph = ops.minimum(ops.exp(takes[3]), 1.0)
            ciou_sum = ops.sum_all(ciou_terms(pcx, pcy, pw, ph, gt_boxes))
            loss = ops.add(loss, ops.scale(ciou_sum, cfg.lambda_box))
            breakdown["box"] = float(ciou_sum.data) * cfg.lambda_box
    else:
        breakdown["box"] = 0.0
    if cfg.dfl_bins and not assigned:
        breakdown["dfl"] = 0.0
    breakdown["total"] = float(loss.data)
    return loss, breakdown


# -- non-maximum suppression ---------------------------------------------------

def _det_sort_key(d):
    return (-d.score, d.class_id) + tuple(d.box)


def nms(dets, iou_threshold, score_threshold):
    """Greedy per-class suppression: keep the best-scored box, drop later
    same-class boxes overlapping it above the threshold. Deterministic
    tie-break by (score desc, class id, lexicographic box)."""
    if not (0 <= iou_threshold <= 1) or not (0 <= score_threshold <= 1):
        raise ConfigurationError("thresholds must lie in [0,1]")
    alive = [d for d in dets if d.score >= score_threshold]
    kept = []
    for cls in sorted({d.class_id for d in alive}):
        group = sorted((d for d in alive if d.class_id == cls),
                       key=_det_sort_key)
        boxes = np.array([d.box for d in group]).reshape(-1, 4)
        suppressed = np.zeros(len(group), dtype=bool)
        for a in range(len(group)):
            if suppressed[a]:
                continue
            kept.append(group[a])
            if a + 1 < len(group):
                overlaps = iou(boxes[a], boxes[a + 1:])
                suppressed[a + 1:] |= overlaps > iou_threshold
    return sorted(kept, key=_det_sort_key)


def nms_arrays(boxes, scores, classes, iou_threshold, score_threshold):
    """Array-based NMS used on the evaluation path; returns indices into the
    inputs, ordered like :func:`nms` (score desc, class, lexicographic box)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    kept = []
    live = np.flatnonzero(scores >= score_threshold)
    for cls in np.unique(classes[live]):
        idx = live[classes[live] == cls]
        b = boxes[idx]
        order = np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], -scores[idx]))
        idx = idx[order]
        b = b[order]
        suppressed = np.zeros(len(idx), dtype=bool)
        for a in range(len(idx)):
            if suppressed[a]:
                continue
            kept.append(idx[a])
            if a + 1 < len(idx):
                suppressed[a + 1:] |= iou(b[a], b[a + 1:]) > iou_threshold
    if not kept:
        return np.array([], dtype=np.intp)
    kept = np.array(kept, dtype=np.intp)
    kb = boxes[kept]
    order = np.lexsort((kb[:, 3], kb[:, 2], kb[:, 1], kb[:, 0],
                        classes[kept], -scores[kept]))
    return kept[order]


# -- text serialization ---------------------------------------------------------

def detections_to_text(dets):
    lines = [f"{d.class_id} {d.score:.17g} " +
             " ".join(f"{v:.17g}" for v in d.box) for d in dets]
    return "\n".join(lines) + ("\n" if lines else "")


def detections_from_text(text):
    out = []
    for line in text.strip().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ConfigurationError(f"bad detection line: {line!r}")
        out.append(Detection(box=tuple(float(v) for v in parts[2:]),
                             class_id=int(parts[0]), score=float(parts[1])))
    return out
