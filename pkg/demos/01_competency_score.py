"""Competency score on familiar, patched and noise images.

Trains the default classifier on a small synthetic set, fits the two
calibration heads and prints the score together with its two factors:
the probability that the predicted class is right given the input is in
distribution, and the probability that it is in distribution at all. The
gradient of the score is then checked against central differences at a
few pixels.

Run from the repository root::

    python3 demos/01_competency_score.py
"""
import numpy as np

from regcomp.competency import competency_gradient, competency_parts, competency_score, fit_competency
from regcomp.data import SyntheticSpec, generate_synthetic
from regcomp.perception import TrainConfig, accuracy, train_classifier

data = generate_synthetic(SyntheticSpec(image_size=32, n_train=150, n_calibration=60, n_tune=6, n_test=6, seed=3))
train = data.subset("train")
model = train_classifier(data, TrainConfig(epochs=8), seed=3)
print(f"classifier accuracy on its training images: {accuracy(model, train.images, train.labels):.3f}")

est = fit_competency(model, data, seed=3)
rng = np.random.default_rng(0)
test = data.subset("test")
cases = {
    "familiar (train)": train.images[0],
    "patched (test)": test.images[0],
    "uniform noise": rng.random(train.images[0].shape),
}
print(f"\n{'image':<18} {'p_class':>10} {'p_in':>10} {'score':>10}")
for name, img in cases.items():
    p = competency_parts(est, img)
    print(f"{name:<18} {p['p_class']:>10.4f} {p['p_in']:>10.3g} {p['score']:>10.3g}")

# %% gradient against central differences
img = test.images[0]
grad = competency_gradient(est, img)
h = 1e-4
print("\npixel          analytic       numeric")
for _ in range(5):
    idx = tuple(int(rng.integers(n)) for n in img.shape)
    up, down = img.copy(), img.copy()
    up[idx] += h
    down[idx] -= h
    fd = (competency_score(est, up) - competency_score(est, down)) / (2 * h)
    print(f"{str(idx):<12} {grad[idx]:>+12.4e} {fd:>+12.4e}")
