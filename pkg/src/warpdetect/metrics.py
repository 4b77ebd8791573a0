"""Evaluation protocol: greedy IoU matching, precision/recall/F1,
all-point interpolated mAP, exact-scene accuracy, confusion counts.

"Accuracy" here is exact-scene accuracy: the fraction of images with zero
false positives and zero false negatives at the report's score threshold.
This is a local definition (detection papers rarely define one) and is
flagged as such wherever it is printed.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import detect
from .augment import augment
from .errors import DimensionError
from .tensor import no_grad

log = logging.getLogger(__name__)

ACCURACY_NOTE = "exact-scene accuracy (zero FP and zero FN per image; local definition)"

# score floor for mAP candidate lists; P/R/F1 use the report threshold
MAP_SCORE_FLOOR = 1e-3
# cap on candidates entering NMS per image (by score)
MAX_CANDIDATES = 100


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    map50: float
    f1: float
    mean_inference_ms: float
    per_class_ap: list
    false_positive_count: int

    FIELDS = ("accuracy", "precision", "recall", "map50", "f1",
              "mean_inference_ms", "per_class_ap", "false_positive_count")

    def to_dict(self):
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "map50": self.map50, "f1": self.f1,
                "mean_inference_ms": self.mean_inference_ms,
                "per_class_ap": list(self.per_class_ap),
                "false_positive_count": int(self.false_positive_count)}

    @staticmethod
    def from_dict(d):
        return MetricsReport(**d)


def f1_score(p, r):
    return 2 * p * r / (p + r) if (p + r) > 0 else 0.0


def match_greedy(det_boxes, det_scores, det_classes, gt_boxes, gt_classes,
                 iou_threshold, class_aware=True):
    """One-to-one greedy matching, highest-score detection first.

    Returns (matched det->gt index map as list of pairs, det TP mask,
    gt matched mask). Ties break on lexicographic box order; each
    detection takes the unmatched ground truth with the highest IoU at or
    above the threshold.
    """
    n_det = len(det_boxes)
    n_gt = len(gt_boxes)
    pairs = []
    det_tp = np.zeros(n_det, dtype=bool)
    gt_used = np.zeros(n_gt, dtype=bool)
    if n_det == 0 or n_gt == 0:
        return pairs, det_tp, gt_used
    order = np.lexsort((det_boxes[:, 3], det_boxes[:, 2], det_boxes[:, 1],
                        det_boxes[:, 0], -det_scores))
    for di in order:
        if class_aware:
            cand = np.flatnonzero(~gt_used & (gt_classes == det_classes[di]))
        else:
            cand = np.flatnonzero(~gt_used)
        if len(cand) == 0:
            continue
        ious = detect.iou(det_boxes[di], gt_boxes[cand])
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            gi = int(cand[best])
            pairs.append((int(di), gi))
            det_tp[di] = True
            gt_used[gi] = True
    return pairs, det_tp, gt_used


def _forward_and_decode(model, images, cfg):
    """Batched forward + per-image candidate arrays above the mAP floor."""
    t0 = time.perf_counter()
    with no_grad():
        out = model.forward(images)
    elapsed = time.perf_counter() - t0
    cls = out.cls_logits.data
    raw = out.box_raw.data
    results = []
    for n in range(cls.shape[0]):
        scores_map = 1.0 / (1.0 + np.exp(-cls[n]))
        boxes_map = detect.decode_boxes_np(raw[n], cfg)
        k, i, j = np.where(scores_map >= MAP_SCORE_FLOOR)
        scores = scores_map[k, i, j]
        if len(scores) > MAX_CANDIDATES:
            keep = np.argsort(-scores, kind="stable")[:MAX_CANDIDATES]
            k, i, j, scores = k[keep], i[keep], j[keep], scores[keep]
        boxes = boxes_map[i, j]
        kept = detect.nms_arrays(boxes, scores, k, cfg.nms_iou_threshold,
                                 MAP_SCORE_FLOOR)
        results.append((boxes[kept], scores[kept], k[kept]))
    return results, elapsed


def evaluate(model, dataset, cfg, augmentation=None, aug_seed=0,
             iou_match=0.5, batch_size=16):
    """Run the detector over a dataset and compute the metric suite.

    Detections are thresholded at cfg.score_threshold for P/R/F1/accuracy
    and FP counts; mAP integrates the full ranked list. Test-time
    augmentation (when given) is applied per scene with seeds derived from
    aug_seed; scenes whose labels all drop are skipped with a notice.
    """
    if not dataset:
        raise DimensionError("dataset must be nonempty")
    images = []
    gt_lists = []
    skipped = 0
    for idx, (img, labels) in enumerate(dataset):
        if augmentation is not None and augmentation.enabled:
            img, labels = augment(img, labels, augmentation,
                                  seed=np.random.SeedSequence(
                                      [aug_seed, idx]).generate_state(1)[0])
            if not labels:
                skipped += 1
                continue
        images.append(img)
        gt_lists.append(labels)
    if skipped:
        log.info("evaluate: skipped %d scenes with no surviving labels", skipped)

    all_dets = []
    total_time = 0.0
    n_images = len(images)
    for start in range(0, n_images, batch_size):
        batch = np.stack(images[start:start + batch_size])
        results, elapsed = _forward_and_decode(model, batch, cfg)
        total_time += elapsed
        all_dets.extend(results)

    tp = fp = fn = 0
    exact = 0
    for (boxes, scores, classes), gts in zip(all_dets, gt_lists):
        mask = scores >= cfg.score_threshold
        b, s, c = boxes[mask], scores[mask], classes[mask]
        gt_boxes = np.array([g.box for g in gts]).reshape(-1, 4)
        gt_classes = np.array([g.class_id for g in gts], dtype=int)
        _, det_tp, gt_used = match_greedy(b, s, c, gt_boxes, gt_classes,
                                          iou_match)
        tp_i = int(det_tp.sum())
        fp_i = len(b) - tp_i
        fn_i = len(gts) - int(gt_used.sum())
        tp += tp_i
        fp += fp_i
        fn += fn_i
        exact += int(fp_i == 0 and fn_i == 0)

    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    map50, per_class = compute_map(all_dets, gt_lists, iou_match,
                                   cfg.num_classes)
    return MetricsReport(
        accuracy=exact / n_images if n_images else 0.0,
        precision=precision, recall=recall, map50=map50,
        f1=f1_score(precision, recall),
        mean_inference_ms=1000.0 * total_time / max(n_images, 1),
        per_class_ap=per_class, false_positive_count=int(fp))


def compute_map(all_dets, all_gts, iou_threshold=0.5, num_classes=None):
    """All-point interpolated mAP at one IoU threshold.

    ``all_dets``: per image either (boxes, scores, classes) arrays or a
    list of Detections; ``all_gts``: per image a list of GroundTruthBox.
    Returns (mAP over classes present in the ground truth, per-class AP
    list with NaN for absent classes).
    """
    norm_dets = []
    for item in all_dets:
        if isinstance(item, tuple):
            norm_dets.append(item)
        else:
            boxes = np.array([d.box for d in item]).reshape(-1, 4)
            scores = np.array([d.score for d in item])
            classes = np.array([d.class_id for d in item], dtype=int)
            norm_dets.append((boxes, scores, classes))
    if num_classes is None:
        ks = [int(c.max()) for _, _, c in norm_dets if len(c)] + \
             [g.class_id for gts in all_gts for g in gts]
        num_classes = max(ks) + 1 if ks else 0

    per_class = []
    for k in range(num_classes):
        npos = sum(1 for gts in all_gts for g in gts if g.class_id == k)
        if npos == 0:
            per_class.append(float("nan"))
            continue
        rows = []
        for img, (boxes, scores, classes) in enumerate(norm_dets):
            for di in np.flatnonzero(classes == k):
                rows.append((-scores[di], img, int(di)))
        rows.sort()
        gt_used = {img: np.zeros(len(gts), dtype=bool)
                   for img, gts in enumerate(all_gts)}
        tps = np.zeros(len(rows), dtype=bool)
        for r, (negs, img, di) in enumerate(rows):
            gts = all_gts[img]
            cand = [gi for gi, g in enumerate(gts)
                    if g.class_id == k and not gt_used[img][gi]]
            if not cand:
                continue
            dboxes, _, _ = norm_dets[img]
            ious = detect.iou(dboxes[di],
                              np.array([gts[gi].box for gi in cand]))
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                gt_used[img][cand[best]] = True
                tps[r] = True
        per_class.append(_average_precision(tps, npos))
    present = [v for v in per_class if not np.isnan(v)]
    return (float(np.mean(present)) if present else 0.0), per_class


def _average_precision(tp_flags, npos):
    """Area under the monotone precision envelope (all-point interpolation)."""
    if len(tp_flags) == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    ranks = np.arange(1, len(tp_flags) + 1)
    precision = tp_cum / ranks
    recall = tp_cum / npos
    # monotone envelope from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for i in range(len(tp_flags)):
        if tp_flags[i]:
            ap += (recall[i] - prev_r) * env[i]
            prev_r = recall[i]
    return float(ap)


def confusion_matrix(all_dets, all_gts, num_classes, iou_threshold=0.5):
    """(K+1)x(K+1) counts; row = truth, column = prediction, last index =
    background. Matching is class-agnostic so mislabeled detections land in
    off-diagonal cells."""
    K = num_classes
    M = np.zeros((K + 1, K + 1), dtype=int)
    for item, gts in zip(all_dets, all_gts):
        if isinstance(item, tuple):
            boxes, scores, classes = item
        else:
            boxes = np.array([d.box for d in item]).reshape(-1, 4)
            scores = np.array([d.score for d in item])
            classes = np.array([d.class_id for d in item], dtype=int)
        gt_boxes = np.array([g.box for g in gts]).reshape(-1, 4)
        gt_classes = np.array([g.class_id for g in gts], dtype=int)
        pairs, det_tp, gt_used = match_greedy(
            boxes, scores, classes, gt_boxes, gt_classes, iou_threshold,
            class_aware=False)
        for di, gi in pairs:
            M[gt_classes[gi], classes[di]] += 1
        for di in np.flatnonzero(~det_tp):
            M[K, classes[di]] += 1
        for gi in np.flatnonzero(~gt_used):
            M[gt_classes[gi], K] += 1
    return M
