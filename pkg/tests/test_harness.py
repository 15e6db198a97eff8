import json
import subprocess
import sys

import numpy as np
import pytest
import yaml
from PIL import Image

from regcomp import cli
from regcomp.config import ConfigError, RunConfig, load_config, parse_config
from regcomp.data import (DatasetError, SyntheticSpec, _max_extent, generate_synthetic, load_dataset, read_png,
                          write_dataset, write_png)
from regcomp.pipeline import StageError, run_pipeline
from regcomp.regional import DependencyMap
from regcomp.render import grayscale, load_map_png, render_heatmap, save_map_png, save_rgb_png

TINY = {"data": {"image_size": 32, "n_train": 24, "n_calibration": 12, "n_tune": 4, "n_test": 4},
        "classifier": {"epochs": 2}, "inpainter": {"epochs": 1},
        "methods": {"cropping": {"grid_h": 2, "grid_w": 2}, "masking": {"fills": ["mean", "zeros"]},
                    "perturbation": {"fills": ["mean"]}}}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return run_pipeline(parse_config(TINY), out), out


# ---------------------------------------------------------------- synthetic data

def test_generation_is_byte_identical():
    spec = SyntheticSpec(image_size=16, n_train=6, n_calibration=3, n_tune=2, n_test=2, seed=5)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.images.tobytes() == b.images.tobytes()
    assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks) if x is not None)


def test_masks_present_only_where_expected(small_data):
    for split in ("train", "calibration"):
        assert all(m is None for m in small_data.subset(split).masks)
    for split in ("tune", "test"):
        assert all(m is not None and m.any() for m in small_data.subset(split).masks)


def test_mask_fraction_within_patch_range():
    spec = SyntheticSpec(image_size=64, n_train=0, n_calibration=0, n_tune=0, n_test=40, seed=1)
    data = generate_synthetic(spec)
    lo, hi = spec.patch_fraction
    n = spec.image_size
    for m in data.masks:
        # slack of one pixel ring around a patch whose side is at most _max_extent(hi) * n
        ring = 4 * _max_extent(hi) * n + 4
        assert lo * n * n - ring <= m.sum() <= hi * n * n + ring


def test_mask_covers_every_unfamiliar_pixel():
    # familiar colours keep saturation <= 0.6, every texture has a fully saturated colour
    spec = SyntheticSpec(image_size=32, n_train=0, n_calibration=0, n_tune=0, n_test=20, seed=2)
    data = generate_synthetic(spec)
    for img, m in zip(data.images, data.masks):
        sat = (img.max(axis=0) - img.min(axis=0)) / np.maximum(img.max(axis=0), 1e-9)
        assert not (sat[~m] > 0.7).any()
        assert (sat[m] > 0.7).mean() > 0.2


def test_patch_larger_than_image_rejected():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(patch_fraction=(0.5, 0.9)))


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(image_size=30)
    with pytest.raises(ValueError):
        SyntheticSpec(n_test=-1)


# ---------------------------------------------------------------- on-disk datasets

def test_dataset_round_trip(small_data, tmp_path):
    write_dataset(small_data, tmp_path / "ds")
    again = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(again.images, small_data.images)
    np.testing.assert_array_equal(again.labels, small_data.labels)
    assert list(again.splits) == list(small_data.splits)
    for a, b in zip(again.masks, small_data.masks):
        assert (a is None and b is None) or np.array_equal(a, b)
    assert again.n_classes == small_data.n_classes


def _tiny_dataset(root):
    root.mkdir(parents=True, exist_ok=True)
    write_png(root / "a.png", np.zeros((3, 8, 8)))
    write_png(root / "b.png", np.ones((3, 8, 8)))
    return root


def test_missing_mask_names_the_line(tmp_path):
    root = _tiny_dataset(tmp_path / "ds")
    (root / "manifest.txt").write_text("a.png 0 train\n# comment\nb.png 1 test missing.png\n")
    with pytest.raises(DatasetError, match=r"manifest.txt:3: missing mask"):
        load_dataset(root)


@pytest.mark.parametrize("line,pattern", [
    ("c.png 0 train", "missing image"),
    ("a.png x train", "not an integer"),
    ("a.png 5 train", "label 5 outside"),
    ("a.png 0 holdout", "unknown split"),
    ("a.png 0", "expected 3 or 4 fields"),
])
def test_manifest_errors(tmp_path, line, pattern):
    root = _tiny_dataset(tmp_path / "ds")
    (root / "manifest.txt").write_text(f"# n_classes 2\na.png 0 train\n{line}\n")
    with pytest.raises(DatasetError, match=rf"manifest.txt:3: .*{pattern}"):
        load_dataset(root)


def test_shape_inconsistency_rejected(tmp_path):
    root = _tiny_dataset(tmp_path / "ds")
    write_png(root / "c.png", np.zeros((3, 4, 4)))
    (root / "manifest.txt").write_text("a.png 0 train\nc.png 1 train\n")
    with pytest.raises(DatasetError, match="manifest.txt:2"):
        load_dataset(root)


def test_all_255_png_is_all_ones(tmp_path):
    Image.fromarray(np.full((5, 7, 3), 255, np.uint8)).save(tmp_path / "w.png")
    img = read_png(tmp_path / "w.png")
    assert img.shape == (3, 5, 7)
    assert np.all(img == 1.0)


# ---------------------------------------------------------------- config

def test_defaults_parse_and_round_trip(tmp_path):
    cfg = parse_config({})
    assert cfg == RunConfig()
    (tmp_path / "c.yaml").write_text(cfg.dump())
    again = load_config(tmp_path / "c.yaml")
    assert again == cfg and again.digest() == cfg.digest()


@pytest.mark.parametrize("raw,where", [
    ({"sed": 1}, "unknown key"),
    ({"classifier": {"epochs": 2, "learning_rate": 0.1}}, "classifier: unknown key"),
    ({"methods": {"cropping": {"gird_h": 3}}}, "methods.cropping: unknown key"),
    ({"classifier": {"epochs": "ten"}}, "classifier.epochs: expected int"),
    ({"segmentation": {"k": -1.0}}, "segmentation: k must be positive"),
    ({"methods": {"enabled": ["combined"]}}, "combined"),
    ({"methods": {"masking": {"fills": ["sepia"]}}}, "unknown fill"),
    ({"data": {"path": "/nonexistent/dataset"}}, "does not exist"),
    ({"competency": None, "threads": 0}, "threads"),
])
def test_bad_configs_rejected(raw, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(raw)


def test_unknown_key_rejected_before_any_stage(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"classifier": {"epoch": 3}}))
    out = tmp_path / "out"
    code = cli.main(["--config", str(path), "--out", str(out), "run"])
    assert code == 2
    assert not out.exists()


def test_digest_tracks_content():
    assert parse_config({"seed": 1}).digest() != parse_config({"seed": 2}).digest()


# ---------------------------------------------------------------- rendering

def test_render_alpha_zero_is_grayscale(rng):
    img = rng.random((3, 6, 6))
    out = render_heatmap(img, DependencyMap(rng.random((6, 6)), "x"), alpha=0.0)
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    for c in range(3):
        np.testing.assert_allclose(out[c], gray, rtol=1e-15)


def test_render_full_map_is_red(rng):
    dm = DependencyMap(np.zeros((4, 4)), "x")
    dm.normalized = np.ones((4, 4))
    out = render_heatmap(rng.random((3, 4, 4)), dm, alpha=1.0)
    assert np.all(out[0] == 1) and np.all(out[1] == 0) and np.all(out[2] == 0)


def test_render_is_deterministic_and_validates(rng, tmp_path):
    img = rng.random((3, 8, 8))
    dm = DependencyMap(rng.random((8, 8)), "x")
    save_rgb_png(tmp_path / "a.png", render_heatmap(img, dm))
    save_rgb_png(tmp_path / "b.png", render_heatmap(img, dm))
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    with pytest.raises(ValueError):
        render_heatmap(img, DependencyMap(np.zeros((4, 4)), "x"))
    with pytest.raises(ValueError):
        render_heatmap(img, dm, alpha=1.5)
    assert grayscale(img[:1]).shape == (8, 8)


def test_map_png_is_16_bit_with_sidecar(rng, tmp_path):
    dm = DependencyMap(rng.random((9, 9)), "gradients", 0.25)
    save_map_png(tmp_path / "m.png", dm, {"threshold": 0.3})
    with Image.open(tmp_path / "m.png") as im:
        assert im.mode.startswith("I")
    np.testing.assert_allclose(load_map_png(tmp_path / "m.png"), dm.normalized, atol=0.5 / 65535)
    side = json.loads((tmp_path / "m.png.json").read_text())
    assert side["method"] == "gradients" and side["wall_time"] == 0.25
    assert side["raw_min"] == dm.raw.min() and side["params"] == {"threshold": 0.3}


# ---------------------------------------------------------------- pipeline

def test_pipeline_outputs(tiny_run):
    result, out = tiny_run
    methods = ("cropping", "masking", "perturbation", "gradients", "reconstruction", "combined")
    assert [r.method for r in result.rows] == list(methods)
    for name in ("config.yaml", "metrics.csv", "timing.csv", "report.txt", "selection.json",
                 "models/perception.zip", "models/competency.zip", "models/inpainter.zip"):
        assert (out / name).exists(), name
    for m in methods:
        assert len(list((out / "maps" / m).glob("*.png"))) == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["config_sha256"] == parse_config(TINY).digest()
    listed = {f["path"]: f for f in manifest["files"]}
    assert "sha256" in listed["metrics.csv"] and listed["timing.csv"]["timing"]
    sel = json.loads((out / "selection.json").read_text())
    assert sel["masking"]["fill"] in ("mean", "zeros") and sel["gradients"]["fill"] is None


def test_pipeline_failure_names_stage(tmp_path):
    raw = dict(TINY, data=dict(TINY["data"], n_test=0))
    with pytest.raises(StageError) as info:
        run_pipeline(parse_config(raw), tmp_path)
    assert info.value.stage == "data"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["stage"] == "data"


# ---------------------------------------------------------------- command line

def test_cli_help_lists_subcommands():
    text = cli.build_parser().format_help()
    for cmd in ("generate-data", "train-classifier", "fit-competency", "train-inpainter", "segment", "map",
                "evaluate", "render", "run", "bench"):
        assert cmd in text


def test_cli_stages_chain(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    out = tmp_path / "run"
    base = ["--config", str(cfg), "--out", str(out), "--seed", "3", "--threads", "1"]
    for cmd in ("generate-data", "train-classifier", "fit-competency", "train-inpainter", "evaluate"):
        assert cli.main(base + [cmd]) == 0, cmd
    assert (out / "data" / "manifest.txt").exists()
    assert (out / "metrics.csv").exists()
    image = sorted((out / "data" / "images").glob("test_*[0-9].png"))[0]
    assert cli.main(base + ["segment", "--image", str(image), "--output", str(tmp_path / "s.png")]) == 0
    for method in ("gradients", "combined", "masking"):
        target = tmp_path / f"{method}.png"
        assert cli.main(base + ["map", "--method", method, "--image", str(image), "--output", str(target)]) == 0
        assert target.exists() and (tmp_path / f"{method}.png.json").exists()
    assert cli.main(base + ["render", "--image", str(image), "--map", str(tmp_path / "gradients.png"),
                            "--output", str(tmp_path / "r.png")]) == 0
    with Image.open(tmp_path / "r.png") as im:
        assert im.size == (32, 32) and im.mode == "RGB"
    assert cli.main(base + ["bench", "--n-images", "2", "--grid", "2", "2"]) == 0
    assert "cropping" in (out / "bench.txt").read_text()


def test_cli_failure_reports_stage(tmp_path, capsys):
    code = cli.main(["--out", str(tmp_path / "empty"), "fit-competency"])
    assert code == 1
    assert "error in stage 'fit-competency'" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "regcomp", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "bench" in proc.stdout
