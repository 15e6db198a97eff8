import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from regcomp.competency import fit_competency  # noqa: E402
from regcomp.data import SyntheticSpec, generate_synthetic  # noqa: E402
from regcomp.perception import TrainConfig, train_classifier  # noqa: E402

SMALL_SPEC = SyntheticSpec(image_size=32, n_classes=3, n_train=90, n_calibration=30, n_tune=12, n_test=12)


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_model(small_data):
    return train_classifier(small_data, TrainConfig(epochs=4), seed=0)


@pytest.fixture(scope="session")
def small_estimator(small_model, small_data):
    return fit_competency(small_model, small_data, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


BENCHMARK_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def benchmark_runs(tmp_path_factory):
    """Full default pipeline per seed: ``{seed: (RunResult, out_dir, wall seconds)}``.

    Takes several minutes per seed; every benchmark-level check shares it.
    """
    import time

    from regcomp.config import RunConfig
    from regcomp.pipeline import run_pipeline

    runs = {}
    for seed in BENCHMARK_SEEDS:
        out = tmp_path_factory.mktemp(f"bench{seed}")
        t0 = time.perf_counter()
        result = run_pipeline(RunConfig(seed=seed), out, keep_maps=True)
        runs[seed] = (result, out, time.perf_counter() - t0)
    return runs
