"""Command-line surface: reproducible experiments and figure emission.

Subcommands: fit-tps, warp, gen-data, gradcheck, experiment, eval, stats,
plot. Every command writes only under its --out directory; all randomness
derives from configured seeds. Exit status 0 means every requested output
was written and all internal assertions held; bad inputs or degenerate
configurations exit 2.
"""

import argparse
import os
import sys

import numpy as np

from . import config as config_mod
from . import experiment, metrics, models, scenes, stats, tps, train
from .augment import AugmentationSpec
from .errors import WarpdetectError
from .verification import gradcheck_battery


def _parse_points_file(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#")[0].strip()
            if not line:
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 4:
                raise WarpdetectError(
                    f"expected 'sx sy tx ty' per line, got {line!r}")
            rows.append(vals)
    arr = np.array(rows)
    return tps.ControlPointSet(arr[:, :2], arr[:, 2:])


def cmd_fit_tps(args):
    points = _parse_points_file(args.points)
    os.makedirs(args.out, exist_ok=True)
    lambdas = ([float(v) for v in args.lambda_sweep.split(",")]
               if args.lambda_sweep else [args.lam])
    print(f"{'lambda':>12} {'bending_energy':>18} {'max_residual':>14}")
    last_params = None
    for lam in lambdas:
        params = tps.fit_tps(points, lam)
        mapped = tps.transform_points(params, points.source)
        resid = float(np.max(np.linalg.norm(mapped - points.target, axis=1)))
        energy = tps.bending_energy(params)
        print(f"{lam:>12.6g} {energy:>18.10g} {resid:>14.6g}")
        last_params = params
    with open(os.path.join(args.out, "tps_params.txt"), "w") as fh:
        fh.write(tps.params_to_text(last_params))
    return 0


def _load_image(path):
    from PIL import Image
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def _save_image(path, img):
    from PIL import Image
    arr = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def _draw_grid_overlay(img, params, spacing=8):
    """Paint the deformed lattice onto the image (white polylines)."""
    out = img.copy()
    C, H, W = img.shape
    ts = np.linspace(-1, 1, 200)
    lines = []
    for v in np.linspace(-1, 1, max(H, W) // spacing + 1):
        lines.append(np.stack([ts, np.full_like(ts, v)], axis=1))
        lines.append(np.stack([np.full_like(ts, v), ts], axis=1))
    for line in lines:
        warped = tps.transform_points(params, line)
        xs = np.clip(np.round((warped[:, 0] + 1) * 0.5 * (W - 1)), 0, W - 1)
        ys = np.clip(np.round((warped[:, 1] + 1) * 0.5 * (H - 1)), 0, H - 1)
        inside = ((warped[:, 0] >= -1) & (warped[:, 0] <= 1)
                  & (warped[:, 1] >= -1) & (warped[:, 1] <= 1))
        out[:, ys[inside].astype(int), xs[inside].astype(int)] = 1.0
    return out


def cmd_warp(args):
    from .sampler import bilinear_sample
    from .tensor import Tensor, no_grad
    img = _load_image(args.image)
    with open(args.params) as fh:
        params = tps.params_from_text(fh.read())
    os.makedirs(args.out, exist_ok=True)
    H, W = img.shape[1], img.shape[2]
    grid = tps.make_grid(params, H, W)
    with no_grad():
        warped = bilinear_sample(Tensor(img), grid).data
    if args.grid_overlay:
        warped = _draw_grid_overlay(warped, params)
    _save_image(os.path.join(args.out, "warped.png"), warped)
    print(f"wrote {os.path.join(args.out, 'warped.png')}")
    return 0


def cmd_gen_data(args):
    cfg = scenes.DatasetConfig(
        image_size=args.image_size, max_objects=args.max_objects,
        occlusion_prob=args.occlusion_prob,
        bend_amplitude=args.bend_amplitude,
        clutter_level=args.clutter_level, n_train=args.n_train,
        n_test=args.n_test, seed=args.seed)
    train_scenes, test_scenes = scenes.make_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    scenes.save_dataset(args.out, train_scenes, "train")
    scenes.save_dataset(args.out, test_scenes, "test")
    config_mod.write_doc(os.path.join(args.out, "dataset.yaml"),
                         {"dataset": cfg.__dict__})
    print(f"wrote {cfg.n_train} train / {cfg.n_test} test scenes to {args.out}")
    return 0


def cmd_gradcheck(args):
    worst = gradcheck_battery(seeds=range(args.seeds))
    failed = 0
    for name, rep in worst.items():
        print(rep)
        if not rep.passed and not rep.inconclusive:
            failed += 1
    return 1 if failed else 0


def _overrides_from_args(args):
    overrides = {}
    if args.variants:
        overrides["experiment.variants"] = args.variants.split(",")
    if args.seeds:
        overrides["experiment.seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.epochs is not None:
        overrides["train.epochs"] = args.epochs
    if args.tta:
        overrides["experiment.tta"] = True
    return overrides


def cmd_experiment(args):
    cfg = config_mod.load_config(args.config, _overrides_from_args(args))
    if args.dry_run:
        print(config_mod.dump_doc(cfg.to_dict()), end="")
        return 0
    def progress(v, s):
        print(f"finished {v} seed {s}", flush=True)
    experiment.run_grid(cfg, args.out, progress=progress)
    print(f"reports written under {args.out}")
    return 0


def cmd_eval(args):
    cfg = config_mod.load_config(args.config, {})
    data = scenes.load_dataset(args.data, args.split)
    model = models.build_model(args.variant, cfg.model_config(args.variant),
                               seed=0)
    model.load(args.model)
    aug = None
    if args.augment:
        aug = AugmentationSpec(enabled=tuple(args.augment.split(",")))
    rep = metrics.evaluate(model, data, model.cfg.detect, augmentation=aug,
                           aug_seed=args.aug_seed)
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_doc(os.path.join(args.out, "eval_report.yaml"),
                         rep.to_dict())
    print(f"# accuracy = {metrics.ACCURACY_NOTE}")
    for k, v in rep.to_dict().items():
        print(f"{k}: {v}")
    return 0


def cmd_stats(args):
    runs = {}
    run_dir = os.path.join(args.report_dir, "runs")
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".yaml"):
            rec = train.RunRecord.from_dict(
                config_mod.read_doc(os.path.join(run_dir, name)))
            runs.setdefault(rec.model_variant, {})[rec.seed] = rec
    for v in (args.a, args.b):
        if v not in runs:
            raise WarpdetectError(f"no run records for variant {v!r} in "
                                  f"{run_dir}")
    lines = []
    for col in experiment.METRIC_COLUMNS:
        seeds_a = sorted(runs[args.a])
        seeds_b = sorted(runs[args.b])
        sa = experiment._epoch_series({(args.a, s): runs[args.a][s]
                                       for s in seeds_a}, args.a, seeds_a, col)
        sb = experiment._epoch_series({(args.b, s): runs[args.b][s]
                                       for s in seeds_b}, args.b, seeds_b, col)
        n = min(len(sa), len(sb))
        res = stats.paired_t_test(sa[:n], sb[:n])
        flag = " significant" if res.significant_at_05 else ""
        lines.append(f"{args.a} vs {args.b} [{col}]: t={res.t:+.4f} "
                     f"p={res.p:.6f}{flag}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "stats_report.txt"), "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_plot(args):
    from . import plotting
    run_dir = os.path.join(args.report_dir, "runs")
    if not os.path.isdir(run_dir):
        raise WarpdetectError(f"no runs directory under {args.report_dir}")
    records = {}
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".yaml"):
            rec = train.RunRecord.from_dict(
                config_mod.read_doc(os.path.join(run_dir, name)))
            records[f"{rec.model_variant}_s{rec.seed}"] = rec
    if not records:
        raise WarpdetectError(f"no run records under {run_dir}")
    os.makedirs(args.out, exist_ok=True)
    plotting.plot_loss_curves(
        {k: r.train_losses for k, r in records.items()},
        os.path.join(args.out, "loss_curves.png"))
    plotting.plot_metric_curves(
        {k: [m.map50 for m in r.per_epoch_metrics]
         for k, r in records.items()},
        "mAP@0.5", os.path.join(args.out, "map50_curves.png"))
    wrote = ["loss_curves.png", "map50_curves.png"]
    for name in sorted(os.listdir(args.report_dir)):
        if name.startswith("confusion_") and name.endswith(".txt"):
            with open(os.path.join(args.report_dir, name)) as fh:
                lines = fh.read().strip().splitlines()
            labels = lines[1].split(":", 1)[1].split()
            M = np.array([[int(v) for v in row.split()]
                          for row in lines[2:]])
            out_name = name[:-4] + ".png"
            plotting.plot_confusion(M, labels,
                                    os.path.join(args.out, out_name),
                                    title=name[:-4])
            wrote.append(out_name)
    print("wrote " + ", ".join(wrote))
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="warpdetect",
        description="Thin-plate spatial transformers, attention, and a "
                    "miniature detector on a synthetic deformation benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("fit-tps", help="fit warp parameters to point pairs")
    q.add_argument("--points", required=True,
                   help="text file with 'sx sy tx ty' rows")
    q.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.0)
    q.add_argument("--lambda-sweep", default=None,
                   help="comma list of lambdas; prints an energy column")
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_fit_tps)

    q = sub.add_parser("warp", help="warp an image with fitted parameters")
    q.add_argument("--image", required=True)
    q.add_argument("--params", required=True)
    q.add_argument("--grid-overlay", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_warp)

    q = sub.add_parser("gen-data", help="generate a synthetic dataset")
    q.add_argument("--out", required=True)
    q.add_argument("--n-train", type=int, default=600)
    q.add_argument("--n-test", type=int, default=150)
    q.add_argument("--image-size", type=int, default=64)
    q.add_argument("--max-objects", type=int, default=3)
    q.add_argument("--occlusion-prob", type=float, default=0.5)
    q.add_argument("--bend-amplitude", type=float, default=0.6)
    q.add_argument("--clutter-level", type=float, default=0.7)
    q.add_argument("--seed", type=int, default=20240501)
    q.set_defaults(fn=cmd_gen_data)

    q = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    q.add_argument("--seeds", type=int, default=10)
    q.set_defaults(fn=cmd_gradcheck)

    q = sub.add_parser("experiment", help="run the variant x seed grid")
    q.add_argument("--config", default=None)
    q.add_argument("--out", required=True)
    q.add_argument("--variants", default=None, help="comma list")
    q.add_argument("--seeds", default=None, help="comma list of ints")
    q.add_argument("--epochs", type=int, default=None)
    q.add_argument("--tta", action="store_true",
                   help="also emit test-time augmentation rows")
    q.add_argument("--dry-run", action="store_true")
    q.set_defaults(fn=cmd_experiment)

    q = sub.add_parser("eval", help="evaluate a saved model on a dataset")
    q.add_argument("--model", required=True, help="weights archive (.wda)")
    q.add_argument("--variant", required=True)
    q.add_argument("--config", default=None)
    q.add_argument("--data", required=True, help="dataset directory")
    q.add_argument("--split", default="test")
    q.add_argument("--augment", default=None,
                   help="comma subset of rotation,shear,crop")
    q.add_argument("--aug-seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_eval)

    q = sub.add_parser("stats", help="paired t-tests between two variants")
    q.add_argument("--report-dir", required=True)
    q.add_argument("--a", required=True)
    q.add_argument("--b", required=True)
    q.add_argument("--out", default=None)
    q.set_defaults(fn=cmd_stats)

    q = sub.add_parser("plot", help="figures from experiment reports")
    q.add_argument("--report-dir", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except WarpdetectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
