"""Command line shell: gen-data, estimate-geometry, train, infer, eval, plot-pr."""

import argparse
import json
import logging
import os
import sys

# honor the thread cap before numpy binds its thread pools
_threads = os.environ.get("GASTKIT_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

from pathlib import Path

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_DATA = 3

log = logging.getLogger("gastkit")


def _scene_specs_from_file(path, seed):
    """Scene description JSON -> list of per-view SceneSpec."""
    from .synthscene import Camera, CategorySpec, SceneSpec

    with open(path) as f:
        doc = json.load(f)
    cats = [
        CategorySpec(c["id"], c["name"], c["height_mean"], c["height_std"],
                     tuple(c["color"]))
        for c in doc.get("categories", [])
    ]
    specs = []
    for v in doc["views"]:
        kwargs = dict(doc.get("defaults", {}))
        kwargs.update(v)
        cam = Camera(**kwargs.pop("camera", {}))
        if cats:
            kwargs["categories"] = cats
        specs.append(SceneSpec(camera=cam, **kwargs))
    return specs


def default_scene_specs(n_views=3, n_videos_per_view=20, image_hw=(96, 144),
                        frames_per_video=40):
    from .synthscene import Camera, SceneSpec

    cameras = [
        Camera(focal=110.0, height=3.0, pitch=0.0),
        Camera(focal=95.0, height=2.5, pitch=0.0),
        Camera(focal=125.0, height=3.5, pitch=0.0),
    ]
    return [
        SceneSpec(view=f"view{i}", camera=cameras[i % len(cameras)],
                  image_hw=tuple(image_hw), n_videos=n_videos_per_view,
                  frames_per_video=frames_per_video)
        for i in range(n_views)
    ]


def cmd_gen_data(args):
    from . import data

    if args.scene:
        specs = _scene_specs_from_file(args.scene, args.seed)
    else:
        specs = default_scene_specs()
    manifest = data.write_dataset(args.out, specs, args.seed,
                                  image_format=args.image_format)
    print(f"wrote {len(manifest['videos'])} videos to {args.out}")
    return EXIT_OK


def cmd_estimate_geometry(args):
    from . import pipeline

    out = args.out or str(Path(args.dataset) / "priors")
    paths = pipeline.estimate_priors(args.dataset, out)
    for p in paths:
        print(p)
    return EXIT_OK


def _load_run_config(args):
    from .pipeline import RunConfig

    if args.config:
        cfg = RunConfig.from_json(args.config)
    else:
        cfg = RunConfig()
    # precedence: flags > file > defaults
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    return cfg


def cmd_train(args):
    from . import pipeline

    cfg = _load_run_config(args)
    result = pipeline.train(cfg, resume=args.resume)
    status = "aborted (last good checkpoint retained)" if result.aborted else "done"
    print(f"training {status}: {result.steps} steps, "
          f"final checkpoint {result.final_checkpoint}")
    return EXIT_OK if not result.aborted else EXIT_DATA


def cmd_infer(args):
    from . import pipeline

    cfg = _load_run_config(args)
    out = args.out or str(Path(cfg.out_dir) / "detections.jsonl")
    results = pipeline.infer(cfg, args.checkpoint, split=args.split,
                             out_path=out)
    n = sum(len(v) for v in results.values())
    print(f"wrote {n} detections over {len(results)} frames to {out}")
    return EXIT_OK


def cmd_eval(args):
    from . import metrics, pipeline

    cfg = _load_run_config(args)
    report = pipeline.evaluate(cfg, args.detections, split=args.split)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.save_report(report, out_dir / "eval_report.json")
    metrics.save_pr_curves(report, out_dir / "pr_curves")
    print(json.dumps({"mAP": report["mAP"], **report["means"]}, indent=2))
    return EXIT_OK


def cmd_plot_pr(args):
    import csv

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in sorted(Path(args.pr_dir).glob("pr_*.csv")):
        with open(path) as f:
            rows = list(csv.DictReader(f))
        if not rows:
            continue
        recall = [float(r["recall"]) for r in rows]
        precision = [float(r["precision"]) for r in rows]
        plt.figure(figsize=(5, 4))
        plt.plot(recall, precision)
        plt.xlabel("recall")
        plt.ylabel("precision")
        plt.title(path.stem)
        plt.xlim(0, 1)
        plt.ylim(0, 1.05)
        plt.grid(alpha=0.3)
        plt.savefig(out_dir / f"{path.stem}.png", dpi=120)
        plt.close()
        print(out_dir / f"{path.stem}.png")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gastkit",
                                description="corner-based video detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--scene", help="scene description JSON")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--image-format", choices=["binary", "png"], default="binary")
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("estimate-geometry",
                       help="build per-view priors from the training split")
    e.add_argument("--dataset", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_estimate_geometry)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run dual-prediction inference")
    i.add_argument("--config")
    i.add_argument("--dataset")
    i.add_argument("--out")
    i.add_argument("--seed", type=int)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--split", default="test")
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("eval", help="evaluate detections against a split")
    v.add_argument("--config")
    v.add_argument("--dataset")
    v.add_argument("--out")
    v.add_argument("--seed", type=int)
    v.add_argument("--detections", required=True)
    v.add_argument("--split", default="test")
    v.set_defaults(func=cmd_eval)

    pp = sub.add_parser("plot-pr", help="render PR curve CSVs to PNG")
    pp.add_argument("--pr-dir", required=True)
    pp.add_argument("--out")
    pp.set_defaults(func=cmd_plot_pr)

    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    from .engine import ContractError, DimensionError
    from .geometry import PriorUnavailable

    try:
        return args.func(args)
    except (ContractError, DimensionError) as e:
        log.error("%s", e)
        return EXIT_CONTRACT
    except (PriorUnavailable, FileNotFoundError, KeyError) as e:
        log.error("%s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
