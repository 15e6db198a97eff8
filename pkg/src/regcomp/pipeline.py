"""End-to-end runs: train, fit, build maps, evaluate, write artifacts.

Output directory layout::

    config.yaml                  resolved configuration
    models/perception.zip        classifier bundle
    models/competency.zip        competency estimator bundle
    models/inpainter.zip         reconstruction decoder bundle
    maps/<method>/<index>.png    16-bit normalised map per test image (+ .json sidecar)
    selection.json               fill strategy and threshold chosen per method
    metrics.csv                  accuracy columns only (byte-stable across reruns)
    report.txt, timing.csv       paper-style table with wall times
    manifest.json                file list with sha256, config hash, status

Timing sidecars, ``report.txt`` and ``timing.csv`` carry wall times and are the
only files whose bytes change between identical runs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import atomic_write_bytes
from .competency import CompetencyEstimator, fit_competency
from .config import RunConfig
from .data import generate_synthetic, load_dataset
from .evaluation import MetricsRow, aggregate, binarize_map, confusion, evaluate_maps, format_table, \
    select_threshold, to_csv
from .inpainter import InpainterDecoder, train_inpainter
from .perception import LabeledDataset, PerceptionModel, train_classifier
from .regional import (METHODS, DependencyMap, FillStrategy, combine_maps, cropping_map, gradient_map,
                       masking_map, perturbation_map, reconstruction_map)
from .render import save_map_png
from .segmentation import SegmentMap, felzenszwalb_segment

log = logging.getLogger(__name__)

__all__ = ["StageError", "Models", "RunResult", "prepare_data", "train_models", "load_models",
           "segment_all", "method_maps", "select_method", "evaluate_models", "run_pipeline", "bench",
           "format_bench"]

SEGMENTED = ("masking", "perturbation", "gradients", "reconstruction")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str, status: dict | None = None):
    if status is not None:
        status["stage"] = name
    t0 = time.perf_counter()
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)


@dataclass
class Models:
    model: PerceptionModel
    estimator: CompetencyEstimator
    decoder: InpainterDecoder | None = None


@dataclass
class RunResult:
    rows: list[MetricsRow]
    selection: dict
    out_dir: Path | None = None
    maps: dict = field(default_factory=dict)
    tune_maps: dict = field(default_factory=dict)


# ---------------------------------------------------------------- stages

def prepare_data(cfg: RunConfig) -> LabeledDataset:
    if cfg.data.path is not None:
        return load_dataset(cfg.data.path, n_classes=cfg.data.n_classes)
    return generate_synthetic(cfg.data.synthetic_spec(cfg.seed))


def train_models(cfg: RunConfig, data: LabeledDataset, status: dict | None = None,
                 need_decoder: bool = True) -> Models:
    with stage("train-classifier", status):
        model = train_classifier(data, cfg.classifier, seed=cfg.seed)
    with stage("fit-competency", status):
        est = fit_competency(model, data, cfg.competency, seed=cfg.seed)
    decoder = None
    if need_decoder:
        with stage("train-inpainter", status):
            decoder = train_inpainter(model, data, cfg.segmentation, cfg.inpainter, seed=cfg.seed)
    return Models(model, est, decoder)


def segment_all(images, params) -> tuple[list[SegmentMap], list[float]]:
    segs, secs = [], []
    for img in images:
        t0 = time.perf_counter()
        segs.append(felzenszwalb_segment(img, params))
        secs.append(time.perf_counter() - t0)
    return segs, secs


def _fill(cfg: RunConfig, method: str, kind: str) -> FillStrategy:
    fc = getattr(cfg.methods, method)
    return FillStrategy(kind, fc.blur_sigma, fc.noise_std, seed=cfg.seed)


def method_maps(method: str, images, segmaps, models: Models, cfg: RunConfig,
                fill: str | None = None, seg_seconds=None) -> list[DependencyMap]:
    """Maps for one method over a stack of images.

    For segment-based methods the recorded wall time includes segmentation
    when ``seg_seconds`` is given.
    """
    out = []
    for i, img in enumerate(images):
        if method == "cropping":
            cc = cfg.methods.cropping
            m = cropping_map(models.estimator, img, cc.grid_h, cc.grid_w, cc.margin)
        elif method == "masking":
            m = masking_map(models.estimator, img, segmaps[i], _fill(cfg, method, fill))
        elif method == "perturbation":
            m = perturbation_map(models.estimator, img, segmaps[i], _fill(cfg, method, fill))
        elif method == "gradients":
            m = gradient_map(models.estimator, img, segmaps[i])
        elif method == "reconstruction":
            if models.decoder is None:
                raise ValueError("reconstruction needs a trained inpainter")
            m = reconstruction_map(models.decoder, models.model, img, segmaps[i])
        else:
            raise ValueError(f"method_maps does not build {method!r} directly")
        if seg_seconds is not None and method in SEGMENTED:
            m.seconds += seg_seconds[i]
        out.append(m)
    return out


def _overall(maps, truths, threshold: float) -> float:
    return aggregate([confusion(binarize_map(m.normalized, threshold), t)
                      for m, t in zip(maps, truths)]).overall


def select_method(method: str, images, segmaps, truths, models: Models, cfg: RunConfig,
                  cache: dict | None = None) -> dict:
    """Pick the fill (where applicable) and threshold for ``method`` on held-out masked images.

    Fills are compared by overall pixel accuracy, each at its own
    balanced-accuracy threshold; the first listed fill wins ties.
    """
    grid = cfg.evaluation.grid
    cache = {} if cache is None else cache
    if method == "combined":
        maps = [combine_maps(a, b) for a, b in zip(cache["gradients"], cache["reconstruction"])]
        cache[method] = maps
        return {"threshold": select_threshold(maps, truths, grid), "fill": None}
    fills = getattr(cfg.methods, method).fills if method in ("masking", "perturbation") else (None,)
    best = None
    scores = {}
    for kind in fills:
        maps = method_maps(method, images, segmaps, models, cfg, kind)
        th = select_threshold(maps, truths, grid)
        acc = _overall(maps, truths, th)
        if kind is not None:
            scores[kind] = acc
        if best is None or acc > best[0] + 1e-12:
            best = (acc, kind, th, maps)
    cache[method] = best[3]
    out = {"threshold": best[2], "fill": best[1]}
    if scores:
        out["fill_scores"] = scores
    return out


# ---------------------------------------------------------------- full run

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, cfg: RunConfig, status: dict, timing_files: set) -> None:
    files = []
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name == "manifest.json" or ".tmp" in p.name:
            continue
        rel = p.relative_to(out).as_posix()
        if rel in timing_files or rel.endswith(".png.json"):
            files.append({"path": rel, "timing": True})
        else:
            files.append({"path": rel, "sha256": _sha256(p)})
    record = {"config_sha256": cfg.digest(), "status": status.get("state", "running"),
              "stage": status.get("stage"), "error": status.get("error"), "files": files}
    atomic_write_bytes(out / "manifest.json", json.dumps(record, indent=1).encode())


def run_pipeline(cfg: RunConfig, out_dir=None, keep_maps: bool = False) -> RunResult:
    """Execute every stage for ``cfg`` and write the artifacts under ``out_dir``.

    On failure the manifest is written with ``status: failed`` and the stage
    name, partial outputs are left in place, and :class:`StageError` is raised.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    atomic_write_bytes(out / "config.yaml", cfg.dump().encode())
    status: dict = {"state": "running"}
    timing_files = {"report.txt", "timing.csv"}
    try:
        result = _run(cfg, out, status, keep_maps)
        status["state"] = "complete"
        status["stage"] = None
        return result
    except StageError as exc:
        status["state"] = "failed"
        status["error"] = str(exc)
        raise
    finally:
        _write_manifest(out, cfg, status, timing_files)


def _check_masks(data: LabeledDataset) -> None:
    for split in ("tune", "test"):
        ds = data.subset(split)
        if len(ds) == 0:
            raise ValueError(f"{split} split is empty")
        if any(m is None for m in ds.masks):
            raise ValueError(f"{split} split is missing ground-truth masks")


def _run(cfg: RunConfig, out: Path, status: dict, keep_maps: bool) -> RunResult:
    enabled = cfg.methods.enabled
    with stage("data", status):
        data = prepare_data(cfg)
        _check_masks(data)
    models = train_models(cfg, data, status, need_decoder="reconstruction" in enabled)
    with stage("save-models", status):
        models.model.save(out / "models" / "perception.zip")
        models.estimator.save(out / "models" / "competency.zip")
        if models.decoder is not None:
            models.decoder.save(out / "models" / "inpainter.zip")
    return evaluate_models(cfg, data, models, out, status, keep_maps)


def load_models(models_dir) -> Models:
    """Load bundles written by a previous run (the decoder is optional)."""
    models_dir = Path(models_dir)
    model = PerceptionModel.load(models_dir / "perception.zip")
    est = CompetencyEstimator.load(models_dir / "competency.zip", model)
    dec_path = models_dir / "inpainter.zip"
    decoder = InpainterDecoder.load(dec_path) if dec_path.exists() else None
    return Models(model, est, decoder)


def evaluate_models(cfg: RunConfig, data: LabeledDataset, models: Models, out: Path,
                    status: dict | None = None, keep_maps: bool = False) -> RunResult:
    """Selection on the tune split, maps on the test split, report files."""
    enabled = cfg.methods.enabled
    with stage("data", status):
        _check_masks(data)
        tune, test = data.subset("tune"), data.subset("test")
    with stage("segment", status):
        tune_segs, _ = segment_all(tune.images, cfg.segmentation)
        test_segs, test_seg_secs = segment_all(test.images, cfg.segmentation)

    selection, tune_cache = {}, {}
    with stage("select", status):
        for method in enabled:
            selection[method] = select_method(method, tune.images, tune_segs, tune.masks, models, cfg,
                                              tune_cache)
    atomic_write_bytes(out / "selection.json", json.dumps(selection, indent=1, sort_keys=True).encode())

    rows, test_maps = [], {}
    with stage("maps", status):
        for method in enabled:
            if method == "combined":
                maps = [combine_maps(a, b) for a, b in zip(test_maps["gradients"], test_maps["reconstruction"])]
            else:
                maps = method_maps(method, test.images, test_segs, models, cfg, selection[method]["fill"],
                                   test_seg_secs)
            test_maps[method] = maps
            if cfg.evaluation.save_maps:
                mdir = out / "maps" / method
                mdir.mkdir(parents=True, exist_ok=True)
                params = {k: v for k, v in selection[method].items() if k != "fill_scores"}
                for idx, m in enumerate(maps):
                    save_map_png(mdir / f"{idx:04d}.png", m, params)
    with stage("evaluate", status):
        for method in enabled:
            rows.append(evaluate_maps(method, test_maps[method], test.masks, selection[method]["threshold"]))
        atomic_write_bytes(out / "metrics.csv", to_csv(rows, include_time=False).encode())
        atomic_write_bytes(out / "timing.csv", to_csv(rows, include_time=True).encode())
        atomic_write_bytes(out / "report.txt", (format_table(rows) + "\n").encode())
    return RunResult(rows, selection, out, test_maps if keep_maps else {}, tune_cache if keep_maps else {})


# ---------------------------------------------------------------- timing

def bench(models: Models, images, cfg: RunConfig, methods=METHODS, fill: str = "mean",
          cropping_grid: tuple | None = None) -> dict:
    """Mean per-image wall time per method, calls serialised one image at a time.

    Segment-based methods include segmentation time; ``combined`` is the sum
    of its two inputs. ``cropping_grid`` overrides the configured grid.
    """
    if cropping_grid is not None:
        cc = cfg.methods.cropping
        cfg = cfg.replace(methods=type(cfg.methods)(
            cfg.methods.enabled, type(cc)(cropping_grid[0], cropping_grid[1], cc.margin),
            cfg.methods.masking, cfg.methods.perturbation))
    segs, seg_secs = segment_all(images, cfg.segmentation)
    times, built = {}, {}
    for method in methods:
        if method == "combined":
            continue
        kind = fill if method in ("masking", "perturbation") else None
        built[method] = method_maps(method, images, segs, models, cfg, kind, seg_secs)
        times[method] = float(np.mean([m.seconds for m in built[method]]))
    if "combined" in methods:
        times["combined"] = times["gradients"] + times["reconstruction"]
    return times


def format_bench(times: dict) -> str:
    width = max(len(m) for m in times)
    lines = [f"{'Method':<{width}}  Avg Time (s)"]
    lines += [f"{m:<{width}}  {t:12.4f}" for m, t in times.items()]
    return "\n".join(lines)
