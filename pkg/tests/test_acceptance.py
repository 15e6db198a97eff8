"""The nine acceptance criteria, each printing one PASS/FAIL line.

Criteria 5 to 7 share the ``benchmark_runs`` fixture, which trains and
evaluates the default configuration for seeds 0 to 4 (several minutes each).
"""
import time

import numpy as np
import pytest

from conftest import BENCHMARK_SEEDS
from helpers import competency_fd_errors
from regcomp.competency import CompetencyConfig, competency_parts, fit_class_gaussians, fit_competency
from regcomp.config import parse_config
from regcomp.evaluation import PixelConfusion, aggregate, confusion
from regcomp.perception import TrainConfig, train_classifier
from regcomp.pipeline import bench, load_models, run_pipeline
from regcomp.segmentation import FelzParams, felzenszwalb_segment
from segmentation_oracle import reference_segment


def _report(capsys, number, name, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def _rows(runs):
    return {seed: {r.method: r for r in res.rows} for seed, (res, _, _) in runs.items()}


# ---------------------------------------------------------------- 1

def test_1_gradient_fidelity(small_estimator, small_data, capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors, resampled = [], 0
    for i in range(10):
        if i % 2 == 0:
            image = rng.random((3, 32, 32))
        else:
            base = small_data.images[rng.integers(len(small_data))]
            image = np.clip(base + rng.uniform(-0.3, 0.3, base.shape), 0, 1)
        err, res = competency_fd_errors(small_estimator, image, 50, rng, h=1e-4)
        errors.append(err)
        resampled += res
    worst = float(np.max(errors))
    secs = time.perf_counter() - t0
    _report(capsys, 1, "gradient fidelity", worst < 1e-3 and secs < 120,
            f"max relative error {worst:.2e} over 500 pixels, {resampled} kink probes resampled, {secs:.1f}s")


# ---------------------------------------------------------------- 2

def _random_image(rng, base_images):
    kind = rng.integers(6)
    shape = base_images.shape[1:]
    if kind == 0:
        return rng.random(shape)
    if kind == 1:
        return rng.normal(0, rng.uniform(0.1, 100), shape)
    if kind == 2:
        return np.full(shape, rng.uniform(-50, 50))
    if kind == 3:
        return base_images[rng.integers(len(base_images))]
    if kind == 4:
        base = base_images[rng.integers(len(base_images))]
        return np.clip(base + rng.uniform(-0.5, 0.5, shape), 0, 1)
    return rng.choice([0.0, 1.0], size=shape) * rng.uniform(1, 1e4)


def test_2_score_bounds(small_data, capsys):
    rng = np.random.default_rng(7)
    violations, checked = [], 0
    for e in range(10):
        model = train_classifier(small_data, TrainConfig(epochs=int(rng.integers(1, 5))), seed=100 + e)
        cfg = CompetencyConfig(components_per_class=int(rng.integers(1, 3)),
                               noise_basis=("covariance", "diagonal")[e % 2],
                               negative_scale=float(rng.uniform(2, 5)))
        est = fit_competency(model, small_data, cfg, seed=e)
        for _ in range(100):
            p = competency_parts(est, _random_image(rng, small_data.images))
            checked += 1
            ok = (0 < p["score"] < 1 and p["score"] <= min(p["p_class"], p["p_in"])
                  and p["score"] == p["p_class"] * p["p_in"])
            if not ok:
                violations.append(p)
    _report(capsys, 2, "score bounds", not violations and checked == 1000,
            f"{checked} images over 10 estimators, {len(violations)} violations")


# ---------------------------------------------------------------- 3

def test_3_segmentation_oracle(capsys):
    mismatches = 0
    for i in range(100):
        rng = np.random.default_rng(5000 + i)
        img = rng.random((3, 8, 8))
        p = FelzParams(k=float(rng.uniform(0.1, 3.0)), sigma=float(rng.choice([0.0, 0.5, 0.8])),
                       min_size=int(rng.integers(1, 10)))
        got = felzenszwalb_segment(img, p)
        ref, n = reference_segment(img, p.k, p.sigma, p.min_size)
        mismatches += int(got.n_segments != n or not np.array_equal(got.labels, ref))
    monotone_fail = 0
    for i in range(20):
        rng = np.random.default_rng(6000 + i)
        img = rng.random((3, 8, 8))
        k1 = float(rng.uniform(0.05, 2.0))
        k2 = k1 * float(rng.uniform(1.1, 5.0))
        n1 = felzenszwalb_segment(img, FelzParams(k=k1, min_size=1)).n_segments
        n2 = felzenszwalb_segment(img, FelzParams(k=k2, min_size=1)).n_segments
        monotone_fail += int(n2 > n1)
    _report(capsys, 3, "segmentation oracle", mismatches == 0 and monotone_fail == 0,
            f"{mismatches}/100 partitions differ from the reference, {monotone_fail}/20 monotonicity failures")


# ---------------------------------------------------------------- 4

def test_4_em_soundness(capsys):
    bad_traces = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 8))
        x = np.vstack([rng.normal(loc=rng.normal(scale=3, size=d), scale=rng.uniform(0.5, 2), size=(50, d))
                       for _ in range(3)])
        labels = rng.integers(0, 2, size=len(x))
        gmm = fit_class_gaussians(x, labels, components_per_class=int(rng.integers(2, 4)), seed=seed)
        for trace in gmm.log_likelihood_trace:
            if np.any(np.diff(trace) < -1e-9 * np.maximum(1.0, np.abs(trace[:-1]))):
                bad_traces += 1
    rng = np.random.default_rng(99)
    x = rng.normal(size=(60, 5)) @ rng.normal(size=(5, 5))
    labels = np.arange(60) % 2
    gmm = fit_class_gaussians(x, labels, 1)
    exact = True
    for c in range(2):
        xc = x[labels == c]
        mean = xc.mean(axis=0)
        cov = (xc - mean).T @ (xc - mean) / len(xc)
        cov = 0.5 * (cov + cov.T) + 1e-6 * np.trace(cov) / 5 * np.eye(5)
        exact &= np.array_equal(gmm.means[c, 0], mean) and np.array_equal(gmm.covariances[c, 0], cov)
    _report(capsys, 4, "EM soundness", bad_traces == 0 and exact,
            f"{bad_traces} decreasing traces over 20 datasets, closed form exact: {exact}")


# ---------------------------------------------------------------- 5

def test_5_method_ordering(benchmark_runs, capsys):
    rows = _rows(benchmark_runs)
    wins = sum(all(r["reconstruction"].overall >= r[m].overall for m in ("masking", "perturbation", "cropping"))
               for r in rows.values())
    overall = np.mean([r["reconstruction"].overall for r in rows.values()])
    tpr = np.mean([r["reconstruction"].tpr for r in rows.values()])
    slowest = max(t for _, _, t in benchmark_runs.values())
    per_seed = ", ".join(f"s{s}: reco {r['reconstruction'].overall:.1f} / mask {r['masking'].overall:.1f} / "
                         f"pert {r['perturbation'].overall:.1f} / crop {r['cropping'].overall:.1f}"
                         for s, r in rows.items())
    ok = wins >= 4 and overall >= 85 and tpr >= 70 and slowest < 15 * 60
    _report(capsys, 5, "method ordering", ok,
            f"reconstruction best in {wins}/{len(rows)} seeds, mean overall {overall:.2f}, mean TPR {tpr:.2f}, "
            f"slowest seed {slowest / 60:.1f} min; {per_seed}")


# ---------------------------------------------------------------- 6

def test_6_gradients_competitiveness(benchmark_runs, capsys):
    rows = _rows(benchmark_runs)
    grads = [r["gradients"].overall for r in rows.values()]
    combined_ok = [r["combined"].overall >= min(r["gradients"].overall, r["reconstruction"].overall)
                   for r in rows.values()]
    mean_grad = float(np.mean(grads))
    per_seed = ", ".join(f"s{s}: grad {r['gradients'].overall:.1f} / reco {r['reconstruction'].overall:.1f} / "
                         f"comb {r['combined'].overall:.1f}" for s, r in rows.items())
    _report(capsys, 6, "gradients competitiveness", mean_grad >= 75 and all(combined_ok),
            f"gradients overall mean {mean_grad:.2f} (min seed {min(grads):.2f}), "
            f"combined >= min(inputs) in {sum(combined_ok)}/{len(rows)} seeds; {per_seed}")


# ---------------------------------------------------------------- 7

def test_7_timing_shape(benchmark_runs, capsys):
    result, out, _ = benchmark_runs[BENCHMARK_SEEDS[0]]
    models = load_models(out / "models")
    cfg = parse_config({})
    from regcomp.data import generate_synthetic
    images = generate_synthetic(cfg.data.synthetic_spec(0)).subset("test").images[:10]
    times = bench(models, images, cfg, ("cropping", "gradients", "reconstruction"), cropping_grid=(10, 10))
    ratio = times["cropping"] / times["gradients"]
    ok = times["gradients"] < 1 and times["reconstruction"] < 1 and ratio >= 5
    _report(capsys, 7, "timing shape", ok,
            f"per 64x64 image: gradients {times['gradients']:.3f}s, reconstruction {times['reconstruction']:.3f}s, "
            f"cropping 10x10 {times['cropping']:.3f}s ({ratio:.1f}x gradients)")


# ---------------------------------------------------------------- 8

# ten mask pairs with counts and rates enumerated by hand
_PAIRS = [
    ([[1, 1], [0, 0]], [[1, 0], [0, 1]], (1, 1, 1, 1)),
    ([[1, 0], [0, 0]], [[1, 0], [0, 0]], (1, 0, 3, 0)),
    ([[0, 0], [0, 0]], [[1, 0], [0, 0]], (0, 0, 3, 1)),
    ([[1, 1], [1, 1]], [[1, 0], [0, 0]], (1, 3, 0, 0)),
    ([[1, 1, 1, 0]], [[1, 1, 0, 0]], (2, 1, 1, 0)),
    ([[1, 0, 0], [0, 1, 0], [0, 0, 1]], [[1, 1, 1], [0, 0, 0], [0, 0, 0]], (1, 2, 4, 2)),
    ([[0, 0], [0, 0]], [[0, 0], [0, 0]], (0, 0, 4, 0)),
    ([[0, 0], [1, 1]], [[1, 1], [0, 0]], (0, 2, 0, 2)),
    ([[1, 0, 1, 0, 1]], [[1, 1, 1, 1, 1]], (3, 0, 0, 2)),
    ([[0, 1, 0], [1, 1, 0]], [[0, 1, 1], [0, 1, 0]], (2, 1, 2, 1)),
]
# mean per-image rates over the ten pairs, worked out by hand over the defined entries
_HAND_MEANS = {"overall": (50 + 100 + 75 + 25 + 75 + 500 / 9 + 100 + 0 + 60 + 200 / 3) / 10,
               "tpr": (50 + 100 + 0 + 100 + 100 + 100 / 3 + 0 + 60 + 200 / 3) / 9,
               "tnr": (50 + 100 + 100 + 0 + 50 + 200 / 3 + 100 + 0 + 200 / 3) / 9,
               "ppv": (50 + 100 + 25 + 200 / 3 + 100 / 3 + 0 + 100 + 200 / 3) / 8,
               "npv": (50 + 100 + 75 + 100 + 200 / 3 + 100 + 0 + 0 + 200 / 3) / 9}


def test_8_metric_arithmetic(capsys):
    confs = [confusion(np.array(p, bool), np.array(t, bool)) for p, t, _ in _PAIRS]
    counts_ok = all((c.tp, c.fp, c.tn, c.fn) == want for c, (_, _, want) in zip(confs, _PAIRS))
    row = aggregate(confs)
    means_ok = all(getattr(row, k) == pytest.approx(v, rel=1e-14) for k, v in _HAND_MEANS.items())
    oracle = aggregate([PixelConfusion(3, 0, 13, 0), PixelConfusion(10, 0, 54, 0)])
    oracle_ok = all(getattr(oracle, k) == 100.0 for k in _HAND_MEANS)
    _report(capsys, 8, "metric arithmetic", counts_ok and means_ok and oracle_ok,
            f"counts exact: {counts_ok}, aggregated means match: {means_ok}, oracle all 100: {oracle_ok}")


# ---------------------------------------------------------------- 9

_DETERMINISM = {"data": {"image_size": 32, "n_train": 45, "n_calibration": 15, "n_tune": 6, "n_test": 6},
                "classifier": {"epochs": 3}, "inpainter": {"epochs": 2},
                "methods": {"cropping": {"grid_h": 4, "grid_w": 4}}}


def test_9_end_to_end_determinism(tmp_path, capsys):
    cfg = parse_config(_DETERMINISM)
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(cfg, a)
    run_pipeline(cfg, b)
    pngs = sorted(p.relative_to(a) for p in (a / "maps").rglob("*.png"))
    same_csv = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    same_png = all((a / p).read_bytes() == (b / p).read_bytes() for p in pngs)
    same_models = all((a / "models" / f).read_bytes() == (b / "models" / f).read_bytes()
                      for f in ("perception.zip", "competency.zip", "inpainter.zip"))
    _report(capsys, 9, "end-to-end determinism", same_csv and same_png and len(pngs) == 36,
            f"metrics.csv identical: {same_csv}, {len(pngs)} map PNGs identical: {same_png}, "
            f"model bundles identical: {same_models}")
