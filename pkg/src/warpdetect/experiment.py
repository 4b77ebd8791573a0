"""The variant x seed experiment grid: training runs, combined metric
tables, significance tests, and timing reports.

Deterministic outputs (metric tables, t-test reports, run records minus
timing) are bit-identical across reruns with the same config on one
machine; wall-clock timing lives in a separate table. Runs execute in
worker processes when WARPDETECT_THREADS (or the CPU count) allows,
sequentially otherwise; result order never depends on completion order.
"""

import itertools
import os
from concurrent.futures import ProcessPoolExecutor
import multiprocessing as mp

import numpy as np

from . import config as config_mod
from . import metrics, models, scenes, stats, train
from .augment import AugmentationSpec

# Table III-style test-time augmentation rows
TTA_ROWS = (("none", ()),
            ("crop", ("crop",)),
            ("shear", ("shear",)),
            ("shear+crop", ("shear", "crop")),
            ("rotation", ("rotation",)))

METRIC_COLUMNS = ("accuracy", "precision", "recall", "map50", "f1")


def worker_count(n_tasks):
    env = os.environ.get("WARPDETECT_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


def _run_one(cfg_dict, variant, seed):
    cfg = config_mod.config_from_dict(cfg_dict)
    train_scenes, test_scenes = scenes.make_dataset(cfg.dataset)
    record, model = train.train(variant, train_scenes, test_scenes,
                                tcfg=cfg.train,
                                mcfg=cfg.model_config(variant), seed=seed)
    return record.to_dict(), {k: v.data for k, v
                              in model.named_parameters().items()}


def run_grid(cfg, out_dir, progress=None):
    """Train every (variant, seed) pair and write all reports under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "runs"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "models"), exist_ok=True)
    config_mod.save_config(os.path.join(out_dir, "config.yaml"), cfg)

    tasks = list(itertools.product(cfg.experiment.variants,
                                   cfg.experiment.seeds))
    cfg_dict = cfg.to_dict()
    workers = worker_count(len(tasks))
    results = {}
    if workers > 1:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            futures = {(v, s): ex.submit(_run_one, cfg_dict, v, s)
                       for v, s in tasks}
            for (v, s), fut in futures.items():
                results[(v, s)] = fut.result()
                if progress:
                    progress(v, s)
    else:
        for v, s in tasks:
            results[(v, s)] = _run_one(cfg_dict, v, s)
            if progress:
                progress(v, s)

    records = {}
    for (v, s), (rec_dict, params) in results.items():
        records[(v, s)] = train.RunRecord.from_dict(rec_dict)
        config_mod.write_doc(
            os.path.join(out_dir, "runs", f"{v}_s{s}.yaml"), rec_dict)
        model = models.build_model(v, cfg.model_config(v), seed=s)
        for k, t in model.named_parameters().items():
            t.data[:] = params[k]
        model.save(os.path.join(out_dir, "models", f"{v}_s{s}.wda"))

    write_metric_tables(cfg, records, out_dir)
    write_ttest_report(cfg, records, out_dir)
    write_confusion_reports(cfg, records, out_dir)
    if cfg.experiment.tta:
        write_tta_table(cfg, out_dir)
    return records


def _aggregate(records, variants, seeds, column):
    """mean/std of a final metric per variant over seeds."""
    table = {}
    for v in variants:
        vals = [getattr(records[(v, s)].final, column) for s in seeds]
        table[v] = (float(np.mean(vals)), float(np.std(vals)), vals)
    return table


def write_metric_tables(cfg, records, out_dir):
    variants = cfg.experiment.variants
    seeds = cfg.experiment.seeds
    lines = [
        "# Final test-split metrics per variant "
        f"(mean +/- std over seeds {list(seeds)})",
        f"# accuracy = {metrics.ACCURACY_NOTE}",
        "# best mean per column marked **bold**",
    ]
    agg = {col: _aggregate(records, variants, seeds, col)
           for col in METRIC_COLUMNS}
    fp = _aggregate(records, variants, seeds, "false_positive_count")
    best = {col: max(agg[col], key=lambda v: agg[col][v][0])
            for col in METRIC_COLUMNS}
    best_fp = min(fp, key=lambda v: fp[v][0])
    header = f"{'variant':<14}" + "".join(f"{c:>22}" for c in METRIC_COLUMNS) \
        + f"{'fp_count':>22}"
    lines.append(header)
    for v in variants:
        row = f"{v:<14}"
        for col in METRIC_COLUMNS:
            mean, std, _ = agg[col][v]
            cell = f"{mean:.4f} +/- {std:.4f}"
            if v == best[col]:
                cell = f"**{cell}**"
            row += f"{cell:>22}"
        mean, std, _ = fp[v]
        cell = f"{mean:.1f} +/- {std:.1f}"
        if v == best_fp:
            cell = f"**{cell}**"
        row += f"{cell:>22}"
        lines.append(row)
    if "yolo" in variants:
        base = fp["yolo"][0]
        lines.append("")
        lines.append("# raw false positives (mean over seeds) relative to yolo")
        for v in variants:
            ratio = fp[v][0] / base if base > 0 else float("nan")
            delta = (1.0 - ratio) * 100 if base > 0 else float("nan")
            lines.append(f"{v:<14} fp_ratio={ratio:.4f}  reduction={delta:+.1f}%")
    with open(os.path.join(out_dir, "metrics_table.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")

    # timing lives apart: wall-clock is not reproducible bit for bit
    tlines = ["# Mean per-image forward time (ms); wall-clock, not covered "
              "by determinism guarantees"]
    for v in variants:
        vals = [records[(v, s)].final.mean_inference_ms for s in seeds]
        tlines.append(f"{v:<14} {np.mean(vals):8.3f} +/- {np.std(vals):.3f}")
    with open(os.path.join(out_dir, "timing_table.txt"), "w") as fh:
        fh.write("\n".join(tlines) + "\n")


def _epoch_series(records, variant, seeds, column):
    """Per-epoch metric averaged over seeds, truncated to the shortest run."""
    per_seed = [[getattr(m, column) for m in records[(variant, s)].per_epoch_metrics]
                for s in seeds]
    n = min(len(s) for s in per_seed)
    return [float(np.mean([s[e] for s in per_seed])) for e in range(n)]


def write_ttest_report(cfg, records, out_dir):
    variants = cfg.experiment.variants
    seeds = cfg.experiment.seeds
    lines = ["# Paired t-tests on per-epoch validation metrics "
             "(series averaged over seeds, paired by epoch)",
             "# significance threshold p < 0.05"]
    for a, b in itertools.combinations(variants, 2):
        for col in METRIC_COLUMNS:
            sa = _epoch_series(records, a, seeds, col)
            sb = _epoch_series(records, b, seeds, col)
            n = min(len(sa), len(sb))
            if n < 2:
                continue
            res = stats.paired_t_test(sa[:n], sb[:n])
            flag = " significant" if res.significant_at_05 else ""
            note = " degenerate" if res.degenerate else ""
            lines.append(f"{a} vs {b} [{col}]: t={res.t:+.4f} "
                         f"p={res.p:.6f}{flag}{note}")
    with open(os.path.join(out_dir, "ttest_report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_model(cfg, out_dir, variant, seed):
    model = models.build_model(variant, cfg.model_config(variant), seed=seed)
    return model.load(os.path.join(out_dir, "models",
                                   f"{variant}_s{seed}.wda"))


def write_confusion_reports(cfg, records, out_dir):
    """Confusion counts for the first seed of every variant."""
    _, test_scenes = scenes.make_dataset(cfg.dataset)
    seed = cfg.experiment.seeds[0]
    gt_lists = [labels for _, labels in test_scenes]
    for v in cfg.experiment.variants:
        model = _load_model(cfg, out_dir, v, seed)
        dcfg = model.cfg.detect
        dets = []
        for start in range(0, len(test_scenes), 16):
            batch = np.stack([img for img, _
                              in test_scenes[start:start + 16]])
            decoded, _ = metrics._forward_and_decode(model, batch, dcfg)
            for boxes, scores, classes in decoded:
                keep = scores >= dcfg.score_threshold
                dets.append((boxes[keep], scores[keep], classes[keep]))
        M = metrics.confusion_matrix(dets, gt_lists, dcfg.num_classes)
        names = list(scenes.CLASS_NAMES[:dcfg.num_classes]) + ["background"]
        lines = [f"# Confusion counts for {v} (seed {seed}); rows = truth, "
                 "columns = prediction",
                 "labels: " + " ".join(names)]
        for r in range(M.shape[0]):
            lines.append(" ".join(str(int(c)) for c in M[r]))
        with open(os.path.join(out_dir, f"confusion_{v}.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")


def write_tta_table(cfg, out_dir):
    """Table III-style rows: metrics under test-time transformations."""
    _, test_scenes = scenes.make_dataset(cfg.dataset)
    lines = ["# Test-time augmentation metrics (mean over seeds)",
             f"# rows follow the augmentation protocol; {metrics.ACCURACY_NOTE}"]
    header = f"{'augmentation':<14}{'variant':<14}" + \
        "".join(f"{c:>12}" for c in METRIC_COLUMNS)
    lines.append(header)
    for row_name, enabled in TTA_ROWS:
        spec = AugmentationSpec(enabled=enabled)
        for v in cfg.experiment.variants:
            vals = {c: [] for c in METRIC_COLUMNS}
            for s in cfg.experiment.seeds:
                model = _load_model(cfg, out_dir, v, s)
                rep = metrics.evaluate(model, test_scenes, model.cfg.detect,
                                       augmentation=spec, aug_seed=1000 + s)
                for c in METRIC_COLUMNS:
                    vals[c].append(getattr(rep, c))
            line = f"{row_name:<14}{v:<14}" + "".join(
                f"{np.mean(vals[c]):>12.4f}" for c in METRIC_COLUMNS)
            lines.append(line)
    with open(os.path.join(out_dir, "tta_table.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
