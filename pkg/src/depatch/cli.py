"""``depatch`` command line.

    depatch train    --config cfg.json [--out DIR] [--resume]
    depatch eval     --patch patch.png --config cfg.json [--columns original,eot]
    depatch compare  --config cfg.json
    depatch sweep    --patch label=patch.png [--patch ...] --config cfg.json
    depatch import   SRC DST --format {toy,yolo,coco}
    depatch plot     curve.csv --out curve.png
    depatch train-detector --out toy_detector.bin

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .config import ConfigError, load_config, load_dataset, parse_override

log = logging.getLogger("depatch")


def _overrides(args):
    out = [parse_override(s) for s in (args.set or [])]
    flat = {}
    if getattr(args, "seed", None) is not None:
        flat.setdefault("train", {})["seed"] = args.seed
        flat.setdefault("eval", {})["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        flat.setdefault("train", {})["epochs"] = args.epochs
    if getattr(args, "out", None) is not None:
        flat["output_dir"] = str(args.out)
    if getattr(args, "columns", None):
        flat.setdefault("eval", {})["columns"] = [c.strip().lower() for c in args.columns.split(",") if c.strip()]
    if getattr(args, "jobs", None) is not None:
        flat.setdefault("eval", {})["jobs"] = args.jobs
    return out + [flat]


def _config(args):
    return load_config(args.config, _overrides(args))


def _detector(cfg):
    from .detector import load_detector
    kw = {"checkpoint": cfg.detector["checkpoint"]} if cfg.detector.get("checkpoint") else {}
    return load_detector(cfg.detector["name"], **kw)


def _load_patch(path):
    from .patch import load_patch
    try:
        return load_patch(path)
    except (OSError, ValueError) as e:
        raise RuntimeError(f"cannot read patch {path}: {e}") from None


def cmd_train(args):
    from .trainer import run_training
    cfg = _config(args)
    train_set = load_dataset(cfg.train_data, "train_data", size=160)
    out = Path(cfg.output_dir)
    cfg.write_resolved(out)

    def progress(rec):
        if rec["epoch"] % max(1, args.log_every) == 0 or rec["epoch"] == cfg.train.epochs - 1:
            log.info("epoch %d n=%s r=%s total=%.4f l_acc=%.4f", rec["epoch"], rec["n"], rec["r"],
                     rec.get("total", float("nan")), rec.get("l_acc", float("nan")))

    run_training(cfg.train, train_set, _detector(cfg), out_dir=out, resume=args.resume,
                 progress=progress)
    print(out / "patch.png")
    return 0


def cmd_eval(args):
    from .evaluation import evaluate
    cfg = _config(args)
    patch = _load_patch(args.patch)
    test_set = load_dataset(cfg.test_data, "test_data", size=160)
    report = evaluate(patch, _detector(cfg), test_set, cfg.eval)
    out = Path(cfg.output_dir)
    cfg.write_resolved(out)
    path = report.write(out, args.name)
    for k, v in report.columns.items():
        print(f"{k:>10}  {'n/a' if v is None else f'{v:.4f}'}")
    print(f"{'Overall':>10}  {'n/a' if report.overall is None else f'{report.overall:.4f}'}")
    print(path)
    return 0


def cmd_compare(args):
    from .evaluation import baseline_comparison, comparison_rows, write_table_csv
    cfg = _config(args)
    train_set = load_dataset(cfg.train_data, "train_data", size=160)
    test_set = load_dataset(cfg.test_data, "test_data", size=160)
    out = Path(cfg.output_dir)
    cfg.write_resolved(out)
    kw = {"seeds": tuple(cfg.compare.get("seeds", [0])), "area": cfg.compare.get("area", 90000)}
    if cfg.compare.get("rows"):
        kw["rows"] = tuple(cfg.compare["rows"])
    if "columns" in cfg.compare:
        kw["columns"] = cfg.compare["columns"]
    table = baseline_comparison(cfg.train, train_set, test_set, _detector(cfg), cfg.eval,
                                out_dir=out, progress=lambda row, seed, rep: log.info(
                                    "%s seed %d overall %.4f", row, seed, rep.overall), **kw)
    path = write_table_csv(out / "compare.csv", comparison_rows(table))
    print(path.read_text(), end="")
    return 0


def cmd_sweep(args):
    from .evaluation import degradation_sweep, write_curve_csv
    cfg = _config(args)
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else cfg.sweep["ratios"]
    test_set = load_dataset(cfg.test_data, "test_data", size=160)
    det = _detector(cfg)
    curves = {}
    for item in args.patch:
        label, _, path = item.rpartition("=")
        label = label or Path(path).stem
        curves[label] = degradation_sweep(_load_patch(path), det, test_set, ratios, cfg.eval)
    out = Path(cfg.output_dir)
    cfg.write_resolved(out)
    path = write_curve_csv(out / "sweep.csv", curves)
    if args.plot:
        plot_curves(path, out / "sweep.png")
    print(path)
    return 0


def cmd_import(args):
    from .data import import_dataset
    kw = {"split": args.split}
    if args.format == "toy":
        kw.update(count=args.count, seed=args.seed)
    if args.annotations:
        kw["annotations"] = args.annotations
    try:
        n = import_dataset(args.src, args.dst, args.format, **kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    print(f"{n} images written to {args.dst}")
    return 0


def plot_curves(csv_path, out_path):
    import csv
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    curves = {}
    with open(csv_path) as fh:
        for row in csv.DictReader(fh):
            if row["ap"] == "n/a":
                continue
            curves.setdefault(row["label"], []).append((float(row["ratio"]), float(row["ap"])))
    if not curves:
        raise RuntimeError(f"{csv_path} holds no curve points")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in curves.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("occlusion ratio")
    ax.set_ylabel("AP@0.5")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def cmd_plot(args):
    out = args.out or Path(args.csv).with_suffix(".png")
    print(plot_curves(args.csv, out))
    return 0


def cmd_train_detector(args):
    from .detector.toy import save_checkpoint, train_toy_detector
    torch.set_num_threads(1)
    net = train_toy_detector(seed=args.seed, num_images=args.images, epochs=args.det_epochs,
                             log=lambda m: log.info(m))
    meta = {"seed": args.seed, "num_images": args.images, "epochs": args.det_epochs}
    print(save_checkpoint(args.out, net, meta))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="depatch", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"depatch {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, patch=False):
        sp.add_argument("--config", help="experiment JSON file")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=10")

    sp = sub.add_parser("train", help="optimize a patch")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    sp.add_argument("--log-every", type=int, default=50)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a patch")
    common(sp)
    sp.add_argument("--patch", required=True)
    sp.add_argument("--columns", help="comma list of original,eot,tc_mean,oc,jpeg")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--name", default="report", help="report file stem")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="decoupling vs information-deletion baselines")
    common(sp)
    sp.add_argument("--jobs", type=int)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("sweep", help="AP as a function of the occlusion ratio")
    common(sp)
    sp.add_argument("--patch", action="append", required=True, metavar="[LABEL=]PATH")
    sp.add_argument("--ratios", help="comma list, ascending")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--plot", action="store_true", help="also write sweep.png")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("import", help="normalize a detection dataset")
    sp.add_argument("src", help="source directory (ignored for --format toy)")
    sp.add_argument("dst")
    sp.add_argument("--format", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--count", type=int, default=200, help="toy: number of images")
    sp.add_argument("--seed", type=int, default=0, help="toy: generator seed")
    sp.add_argument("--annotations", help="coco: explicit instances json")
    sp.set_defaults(func=cmd_import)

    sp = sub.add_parser("plot", help="line plot of a sweep CSV")
    sp.add_argument("csv")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("train-detector", help="retrain the bundled toy detector")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--images", type=int, default=6000)
    sp.add_argument("--det-epochs", type=int, default=25)
    sp.set_defaults(func=cmd_train_detector)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
