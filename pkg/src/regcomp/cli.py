"""Command-line entry point.

Every subcommand works inside one output directory (``--out``, default the
config's ``output_dir``) so the stages can be chained::

    regcomp --config run.yaml --out runs/a generate-data
    regcomp --config run.yaml --out runs/a train-classifier
    regcomp --config run.yaml --out runs/a fit-competency
    regcomp --config run.yaml --out runs/a train-inpainter
    regcomp --config run.yaml --out runs/a evaluate
    regcomp --out runs/a map --method gradients --image x.png --output g.png

``run`` does all of the above in one go. Failures exit with status 1 and
print ``error in stage '<name>'`` to stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

METHOD_CHOICES = ("cropping", "masking", "perturbation", "gradients", "reconstruction", "combined")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class CliError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regcomp", description="Regional competency maps for image classifiers.")
    p.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="output directory (overrides the configured output_dir)")
    p.add_argument("--threads", type=int, help="BLAS threads; set before numerical libraries load")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate-data", help="write the synthetic benchmark as PNGs + manifest")
    sub.add_parser("train-classifier", help="train the perception model")
    sub.add_parser("fit-competency", help="fit the competency estimator")
    sub.add_parser("train-inpainter", help="train the reconstruction decoder")

    s = sub.add_parser("segment", help="segment one image")
    s.add_argument("--image", required=True)
    s.add_argument("--output", required=True, help="false-colour segment PNG")

    s = sub.add_parser("map", help="dependency map for one image")
    s.add_argument("--method", required=True, choices=METHOD_CHOICES)
    s.add_argument("--image", required=True)
    s.add_argument("--output", required=True, help="16-bit map PNG (a .json sidecar is written too)")
    s.add_argument("--fill", default="mean", help="fill strategy for masking / perturbation")

    sub.add_parser("evaluate", help="select fills/thresholds on the tune split and score the test split")

    s = sub.add_parser("render", help="heatmap overlay of a saved map on its image")
    s.add_argument("--image", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--alpha", type=float, default=0.5)

    sub.add_parser("run", help="full pipeline")

    s = sub.add_parser("bench", help="per-image timing table")
    s.add_argument("--n-images", type=int, default=10)
    s.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), help="cropping grid override")
    return p


def _config(args):
    from .config import RunConfig, load_config
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    if args.threads is not None:
        changes["threads"] = args.threads
    return cfg.replace(**changes) if changes else cfg


def _data(cfg, out: Path):
    from .data import load_dataset
    from .pipeline import prepare_data
    written = out / "data"
    if cfg.data.path is None and (written / "manifest.txt").exists():
        return load_dataset(written, n_classes=cfg.data.n_classes)
    return prepare_data(cfg)


def _run_command(args, cfg) -> str:
    from . import pipeline
    from .competency import fit_competency
    from .data import read_png, write_dataset
    from .inpainter import train_inpainter
    from .perception import PerceptionModel, train_classifier
    from .regional import DependencyMap
    from .render import load_map_png, render_heatmap, save_map_png, save_rgb_png, save_segment_png
    from .segmentation import felzenszwalb_segment

    out = Path(cfg.output_dir)
    models_dir = out / "models"
    cmd = args.command

    if cmd == "run":
        result = pipeline.run_pipeline(cfg, out)
        from .evaluation import format_table
        return format_table(result.rows)
    if cmd == "generate-data":
        data = pipeline.prepare_data(cfg)
        manifest = write_dataset(data, out / "data")
        return f"wrote {len(data)} images, manifest {manifest}"
    if cmd == "train-classifier":
        model = train_classifier(_data(cfg, out), cfg.classifier, seed=cfg.seed)
        models_dir.mkdir(parents=True, exist_ok=True)
        model.save(models_dir / "perception.zip")
        return f"train accuracy {model.train_accuracy:.4f}, calibration accuracy {model.val_accuracy:.4f}"
    if cmd == "fit-competency":
        model = PerceptionModel.load(models_dir / "perception.zip")
        est = fit_competency(model, _data(cfg, out), cfg.competency, seed=cfg.seed)
        est.save(models_dir / "competency.zip")
        return "competency estimator saved"
    if cmd == "train-inpainter":
        model = PerceptionModel.load(models_dir / "perception.zip")
        dec = train_inpainter(model, _data(cfg, out), cfg.segmentation, cfg.inpainter, seed=cfg.seed)
        dec.save(models_dir / "inpainter.zip")
        return f"final reconstruction loss {dec.loss_history[-1]:.5f}"
    if cmd == "segment":
        seg = felzenszwalb_segment(read_png(args.image), cfg.segmentation)
        save_segment_png(args.output, seg)
        return f"{seg.n_segments} segments"
    if cmd == "map":
        models = pipeline.load_models(models_dir)
        image = read_png(args.image)
        seg = felzenszwalb_segment(image, cfg.segmentation)
        if args.method == "combined":
            a, b = (pipeline.method_maps(m, [image], [seg], models, cfg)[0] for m in ("gradients", "reconstruction"))
            from .regional import combine_maps
            dmap: DependencyMap = combine_maps(a, b)
        else:
            dmap = pipeline.method_maps(args.method, [image], [seg], models, cfg,
                                        args.fill if args.method in ("masking", "perturbation") else None)[0]
        save_map_png(args.output, dmap, {"fill": args.fill} if args.method in ("masking", "perturbation") else {})
        return f"{args.method} map written in {dmap.seconds:.3f}s"
    if cmd == "evaluate":
        from .evaluation import format_table
        result = pipeline.evaluate_models(cfg, _data(cfg, out), pipeline.load_models(models_dir), out)
        return format_table(result.rows)
    if cmd == "render":
        image = read_png(args.image)
        save_rgb_png(args.output, render_heatmap(image, load_map_png(args.map), args.alpha))
        return f"wrote {args.output}"
    if cmd == "bench":
        models = pipeline.load_models(models_dir)
        test = _data(cfg, out).subset("test")
        methods = [m for m in cfg.methods.enabled if m != "reconstruction" or models.decoder is not None]
        if "combined" in methods and "reconstruction" not in methods:
            methods.remove("combined")
        times = pipeline.bench(models, test.images[:args.n_images], cfg, methods,
                               cropping_grid=tuple(args.grid) if args.grid else None)
        table = pipeline.format_bench(times)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.txt").write_text(table + "\n")
        return table
    raise CliError(cmd, f"unknown command {cmd}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error in stage 'config': --threads must be at least 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        from .config import ConfigError
        cfg = _config(args)
    except (ConfigError, ValueError) as exc:
        print(f"error in stage 'config': {exc}", file=sys.stderr)
        return 2
    from .pipeline import StageError
    try:
        print(_run_command(args, cfg))
    except StageError as exc:
        print(f"error in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return 1
    except CliError as exc:
        print(f"error in stage '{exc.stage}': {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report which subcommand broke
        print(f"error in stage '{args.command}': {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
