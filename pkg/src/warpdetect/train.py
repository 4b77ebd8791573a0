"""Training loop: adaptive-moment updates with decoupled weight decay,
seeded shuffling, per-epoch validation metrics, and early stopping on
stagnant mAP."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, models
from .errors import ConfigurationError
from .tensor import no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    patience: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


class AdamW:
    """Adaptive moments with decoupled weight decay, one parameter group."""

    def __init__(self, params, lr=0.002, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


@dataclass
class RunRecord:
    model_variant: str
    seed: int
    per_epoch_metrics: list
    final: metrics.MetricsReport
    train_losses: list = field(default_factory=list)
    epochs_run: int = 0
    param_count: int = 0

    def to_dict(self):
        return {"model_variant": self.model_variant, "seed": int(self.seed),
                "epochs_run": int(self.epochs_run),
                "param_count": int(self.param_count),
                "train_losses": [float(v) for v in self.train_losses],
                "per_epoch_metrics": [m.to_dict()
                                      for m in self.per_epoch_metrics],
                "final": self.final.to_dict()}

    @staticmethod
    def from_dict(d):
        return RunRecord(
            model_variant=d["model_variant"], seed=d["seed"],
            per_epoch_metrics=[metrics.MetricsReport.from_dict(m)
                               for m in d["per_epoch_metrics"]],
            final=metrics.MetricsReport.from_dict(d["final"]),
            train_losses=list(d["train_losses"]),
            epochs_run=d["epochs_run"], param_count=d["param_count"])


def train(variant, train_scenes, val_scenes, tcfg=None, mcfg=None, seed=0,
          progress=None):
    """Train one variant on in-memory scenes; returns the RunRecord.

    Identical (variant, seed, data, config) reproduce identical loss
    curves and metrics bit for bit. Divergence (non-finite loss) aborts
    with a diagnostic. Early stopping triggers after `patience` epochs
    without mAP improvement.
    """
    tcfg = tcfg or TrainConfig()
    model = models.build_model(variant, mcfg, seed=seed)
    dcfg = model.cfg.detect
    opt = AdamW(model.named_parameters(), lr=tcfg.learning_rate,
                betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.eps,
                weight_decay=tcfg.weight_decay)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), 0xA5]))

    images = np.stack([img for img, _ in train_scenes])
    gts = [labels for _, labels in train_scenes]
    n = len(train_scenes)

    record = RunRecord(model_variant=variant, seed=seed,
                       per_epoch_metrics=[], final=None,
                       param_count=model.param_count)
    best_map = -1.0
    stale = 0
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            opt.zero_grad()
            out = model.forward(images[idx])
            loss, _ = models.batch_loss(model, out,
                                        [gts[i] for i in idx], dcfg)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"run aborted: divergence (non-finite loss) in variant "
                    f"{variant}, seed {seed}, epoch {epoch}, step {steps}")
            loss.backward()
            opt.step()
            epoch_loss += value
            steps += 1
        record.train_losses.append(epoch_loss / steps)
        report = metrics.evaluate(model, val_scenes, dcfg)
        record.per_epoch_metrics.append(report)
        record.epochs_run = epoch + 1
        if progress:
            progress(epoch, record.train_losses[-1], report)
        if report.map50 > best_map + 1e-9:
            best_map = report.map50
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                log.info("early stop at epoch %d (mAP stale for %d epochs)",
                         epoch, stale)
                break
    record.final = record.per_epoch_metrics[-1]
    return record, model


def overfit_single_scene(variant, scene, steps=200, seed=0, mcfg=None,
                         lr=0.002):
    """Drive one fixed scene for a number of steps; returns the loss curve.

    The overfit-one-sample check asserts the final loss falls below 10% of
    the initial loss.
    """
    model = models.build_model(variant, mcfg, seed=seed)
    dcfg = model.cfg.detect
    opt = AdamW(model.named_parameters(), lr=lr)
    img, labels = scene
    batch = img[None]
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        out = model.forward(batch)
        loss, _ = models.batch_loss(model, out, [labels], dcfg)
        losses.append(float(loss.data))
        if not math.isfinite(losses[-1]):
            raise FloatingPointError("divergence during overfit run")
        loss.backward()
        opt.step()
    return losses, model
