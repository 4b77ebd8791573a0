"""The five-variant model family: optional spatial transformer (affine or
thin-plate), optional CBAM on the warped image, a three-block convolution
backbone, and the detection head.

Components draw their initial weights from per-component seeded streams,
so two variants built with the same seed share identical backbone and head
initializations; ablation differences come from the added mechanisms, not
from reshuffled randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import cbam, detect, init, ops, serial, stn
from .errors import ConfigurationError
from .tensor import Tensor, as_tensor

VARIANTS = ("yolo", "stn", "stn_tps", "cbam_stn", "cbam_stn_tps")

# the attention block sits on the warped 3-channel image (between the
# spatial transformer and the backbone), so the reduction must divide 3
CBAM_IMAGE_REDUCTION = 1

_STN_DEFAULT = stn.StnConfig
_DETECT_DEFAULT = detect.DetectConfig


@dataclass
class ModelConfig:
    variant: str = "cbam_stn_tps"
    image_size: int = 64
    in_channels: int = 3
    backbone_channels: tuple = (8, 16, 32)
    stn: _STN_DEFAULT = field(default_factory=_STN_DEFAULT)
    detect: _DETECT_DEFAULT = field(default_factory=_DETECT_DEFAULT)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; "
                                     f"expected one of {VARIANTS}")
        if len(self.backbone_channels) != 3:
            raise ConfigurationError("backbone needs exactly 3 blocks")
        stride = 2 ** len(self.backbone_channels)
        if self.image_size % stride:
            raise ConfigurationError(f"image_size must be divisible by "
                                     f"{stride}")
        if self.detect.grid_size != self.image_size // stride:
            raise ConfigurationError(
                f"detect.grid_size must equal image_size/{stride} = "
                f"{self.image_size // stride}")

    @property
    def has_stn(self):
        return self.variant != "yolo"

    @property
    def has_cbam(self):
        return self.variant.startswith("cbam")

    @property
    def stn_mode(self):
        return "tps" if self.variant.endswith("_tps") else "affine"


@dataclass
class DetectorModel:
    cfg: ModelConfig
    loc_net: object            # LocalizationNet or None
    cbam_params: object        # CbamParams or None
    backbone: list             # [(conv_w, conv_b), ...]
    head: detect.DetectionHead

    def forward(self, images):
        """(N,3,H,W) or (3,H,W) image(s) -> HeadOutput (same batching)."""
        x = as_tensor(images)
        if self.cfg.has_stn:
            x = stn.stn_tps_forward(self.loc_net, self._stn_cfg(), x)
        if self.cfg.has_cbam:
            x = cbam.cbam_forward(self.cbam_params, x)
        for w, b in self.backbone:
            x = ops.avg_pool2(ops.relu(ops.conv2d(x, w, b, 1, 1)))
        return detect.head_forward(self.head, x)

    def _stn_cfg(self):
        return replace(self.cfg.stn, mode=self.cfg.stn_mode)

    def named_parameters(self):
        params = {}
        if self.loc_net is not None:
            params.update(self.loc_net.named_parameters("stn"))
        if self.cbam_params is not None:
            params.update(self.cbam_params.named_parameters("cbam"))
        for i, (w, b) in enumerate(self.backbone):
            params[f"backbone.{i}.w"] = w
            params[f"backbone.{i}.b"] = b
        params.update(self.head.named_parameters("head"))
        return params

    @property
    def param_count(self):
        return sum(int(t.data.size) for t in self.named_parameters().values())

    def save(self, path):
        serial.save_archive(path, {k: v.data for k, v
                                   in self.named_parameters().items()})

    def load(self, path):
        stored = serial.load_archive(path)
        params = self.named_parameters()
        if set(stored) != set(params):
            missing = set(params) ^ set(stored)
            raise ConfigurationError(f"archive does not match model: {missing}")
        for k, t in params.items():
            if stored[k].shape != t.data.shape:
                raise ConfigurationError(f"shape mismatch for {k}")
            t.data[:] = stored[k]
        return self


def _component_rng(seed, idx):
    return np.random.default_rng(np.random.SeedSequence([int(seed), idx]))


def build_model(variant, cfg=None, seed=0):
    """Assemble a variant; alignment of forward order with the detection
    pipeline (warp -> attention -> backbone -> head) is fixed here."""
    if cfg is None:
        cfg = ModelConfig(variant=variant)
    elif cfg.variant != variant:
        cfg = replace(cfg, variant=variant)

    loc_net = None
    if cfg.has_stn:
        loc_net = stn.init_localization_net(
            _component_rng(seed, 1), cfg.in_channels,
            cfg.image_size, cfg.image_size, cfg.stn.grid_size)
    cbam_params = None
    if cfg.has_cbam:
        cbam_params = cbam.init_cbam(_component_rng(seed, 2),
                                     cfg.in_channels, CBAM_IMAGE_REDUCTION)
    rng_bb = _component_rng(seed, 0)
    backbone = []
    c_in = cfg.in_channels
    for c_out in cfg.backbone_channels:
        backbone.append((init.uniform_fan_in(rng_bb, (c_out, c_in, 3, 3),
                                             c_in * 9),
                         init.zeros((c_out,))))
        c_in = c_out
    head = detect.init_head(_component_rng(seed, 3), c_in, cfg.detect)
    return DetectorModel(cfg=cfg, loc_net=loc_net, cbam_params=cbam_params,
                         backbone=backbone, head=head)


def batch_loss(model, head_out, gts_lists, dcfg):
    """Mean per-image total loss over a batch, built as one graph.

    Numerically identical to averaging :func:`detect.total_loss` over the
    images (asserted in tests); assignment and decoding are vectorized
    across the batch.
    """
    cls = head_out.cls_logits
    raw = head_out.box_raw
    N, K, Hg, Wg = cls.data.shape
    targets = np.zeros((N, K, Hg, Wg))
    picked = []
    for n, gts in enumerate(gts_lists):
        for idx, i, j in detect.assign_cells(gts, Hg, Wg):
            targets[n, gts[idx].class_id, i, j] = 1.0
            picked.append((n, gts[idx].box, i, j))
    cls_loss = ops.sum_all(ops.bce_with_logits(cls, targets))
    loss = cls_loss
    parts = {"cls": float(cls_loss.data) / N, "box": 0.0}
    if picked:
        gt_boxes = np.array([b for _, b, _, _ in picked])
        nn = np.array([n for n, _, _, _ in picked], dtype=np.intp)
        ii = np.array([i for _, _, i, _ in picked], dtype=np.float64)
        jj = np.array([j for _, _, _, j in picked], dtype=np.float64)
        plane = Hg * Wg
        D = raw.data.shape[1]
        base = nn * D * plane + (ii * Wg + jj).astype(np.intp)
        if dcfg.dfl_bins:
            B = dcfg.dfl_bins
            gx1, gy1 = gt_boxes[:, 0] - gt_boxes[:, 2] / 2, \
                gt_boxes[:, 1] - gt_boxes[:, 3] / 2
            gx2, gy2 = gt_boxes[:, 0] + gt_boxes[:, 2] / 2, \
                gt_boxes[:, 1] + gt_boxes[:, 3] / 2
            side_targets = [np.clip(jj + 0.5 - gx1 * Wg, 0, B - 1),
                            np.clip(ii + 0.5 - gy1 * Hg, 0, B - 1),
                            np.clip(gx2 * Wg - (jj + 0.5), 0, B - 1),
                            np.clip(gy2 * Hg - (ii + 0.5), 0, B - 1)]
            bins = np.arange(B, dtype=np.float64)
            dfl_sum = None
            sides_exp = []
            for s in range(4):
                idx = base[:, None] + (s * B + np.arange(B))[None, :] * plane
                side_logits = ops.take_flat(raw, idx)
                term = ops.sum_all(detect.dfl_terms(side_logits,
                                                    side_targets[s]))
                dfl_sum = term if dfl_sum is None else ops.add(dfl_sum, term)
                sides_exp.append(ops.softmax_expectation(side_logits, bins))
            l, t, r, b = sides_exp
            pcx = ops.scale(ops.add(ops.sub(r, l), 2 * (jj + 0.5)), 0.5 / Wg)
            pcy = ops.scale(ops.add(ops.sub(b, t), 2 * (ii + 0.5)), 0.5 / Hg)
            pw = ops.maximum(ops.minimum(
                ops.scale(ops.add(l, r), 1.0 / Wg), 1.0), detect.CENTER_EPS)
            ph = ops.maximum(ops.minimum(
                ops.scale(ops.add(t, b), 1.0 / Hg), 1.0), detect.CENTER_EPS)
            ciou_sum = ops.sum_all(detect.ciou_terms(pcx, pcy, pw, ph,
                                                     gt_boxes))
            loss = ops.add(loss, ops.scale(ciou_sum, dcfg.lambda_box))
            loss = ops.add(loss, ops.scale(dfl_sum, dcfg.lambda_dfl))
            parts["box"] = float(ciou_sum.data) * dcfg.lambda_box / N
            parts["dfl"] = float(dfl_sum.data) * dcfg.lambda_dfl / N
        else:
            takes = [ops.take_flat(raw, base + c * plane) for c in range(4)]
            pcx = ops.mul(ops.add(ops.sigmoid(takes[0]), jj), 1.0 / Wg)
            pcy = ops.mul(ops.add(ops.sigmoid(takes[1]), ii), 1.0 / Hg)
            pw = ops.minimum(ops.exp(takes[2]), 1.0)
            ph = ops.minimum(ops.exp(takes[3]), 1.0)
            ciou_sum = ops.sum_all(detect.ciou_terms(pcx, pcy, pw, ph,
                                                     gt_boxes))
            loss = ops.add(loss, ops.scale(ciou_sum, dcfg.lambda_box))
            parts["box"] = float(ciou_sum.data) * dcfg.lambda_box / N
    elif dcfg.dfl_bins:
        parts["dfl"] = 0.0
    total = ops.scale(loss, 1.0 / N)
    parts["total"] = float(total.data)
    return total, parts
