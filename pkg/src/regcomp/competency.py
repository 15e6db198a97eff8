"""Probabilistic competency score and its gradient with respect to the image.

The score is the product of two logistic heads evaluated on one forward
pass of the perception model:

* a multinomial transfer head on the feature vector, giving the probability
  that the predicted class is right when the input is in distribution;
* a binary head on the per-class Mahalanobis distances of the feature
  vector, giving the probability that the input is in distribution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp, softmax

from . import nn
from .bundle import load_bundle, save_bundle
from .perception import LabeledDataset, PerceptionModel, extract_features

__all__ = [
    "ClassGaussianMixture", "LogisticHead", "CompetencyEstimator", "CompetencyConfig",
    "fit_class_gaussians", "mahalanobis_distances", "fit_logistic", "fit_transfer_head",
    "fit_ood_head", "fit_competency", "competency_score", "competency_parts",
    "competency_gradient", "patch_shuffle",
]


# ------------------------------------------------------------------ GMM

@dataclass
class ClassGaussianMixture:
    """Per-class Gaussian mixtures sharing one component count.

    Arrays are indexed ``[class, component, ...]``.
    """

    weights: np.ndarray      # (K, M)
    means: np.ndarray        # (K, M, D)
    covariances: np.ndarray  # (K, M, D, D), ridge included
    ridge: np.ndarray        # (K, M)
    log_likelihood_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.precisions = np.linalg.inv(self.covariances)
        self.precisions = 0.5 * (self.precisions + np.swapaxes(self.precisions, -1, -2))
        self.log_dets = np.linalg.slogdet(self.covariances)[1]

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def arrays(self, prefix="gmm.") -> dict:
        return {prefix + "weights": self.weights, prefix + "means": self.means,
                prefix + "covariances": self.covariances, prefix + "ridge": self.ridge}


def _log_gauss(x, mean, cov):
    d = x.shape[1]
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (x - mean).T)
    return -0.5 * (np.sum(z ** 2, axis=0) + d * np.log(2 * np.pi)) - np.log(np.diag(chol)).sum()


def _ridged_cov(x, w, mean, eps):
    diff = x - mean
    cov = (w[:, None] * diff).T @ diff / w.sum()
    cov = 0.5 * (cov + cov.T)
    return cov + eps * np.eye(cov.shape[0])


def _class_ridge(x):
    cov = _ridged_cov(x, np.ones(len(x)), x.mean(axis=0), 0.0)
    eps = 1e-6 * np.trace(cov) / cov.shape[0]
    return eps if eps > 0 else 1e-12


def _kmeanspp(x, m, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, m):
        d2 = np.min([np.sum((x - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def _em_class(x, m, rng, max_iter=200, tol=1e-7):
    n, d = x.shape
    # one ridge per class, fixed before EM, so each M-step is an exact maximiser
    eps = _class_ridge(x)
    if m == 1:
        mean = x.mean(axis=0)
        cov = _ridged_cov(x, np.ones(n), mean, eps)
        ll = float(_log_gauss(x, mean, cov).sum())
        return np.ones(1), mean[None], cov[None], np.array([eps]), [ll]
    means = _kmeanspp(x, m, rng)
    # hard assignment to the seeds gives the initial responsibilities
    assign = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    resp = np.eye(m)[assign]
    trace = []
    prev = None
    for _ in range(max_iter):
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        covs = np.array([_ridged_cov(x, resp[:, j] + 1e-12, means[j], eps) for j in range(m)])
        logp = np.stack([np.log(weights[j]) + _log_gauss(x, means[j], covs[j])
                         for j in range(m)], axis=1)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        resp = np.exp(logp - norm[:, None])
        if prev is not None and abs(ll - prev) <= tol * abs(prev):
            break
        prev = ll
    return weights, means, covs, np.full(m, eps), trace


def fit_class_gaussians(features: np.ndarray, labels: np.ndarray, components_per_class: int = 1,
                        seed: int = 0, n_classes: int | None = None) -> ClassGaussianMixture:
    """Expectation-maximisation per class on that class's feature vectors.

    Every covariance of a class gets the same ridge ``1e-6 * trace / dim``
    on its diagonal, taken from that class's sample covariance. EM
    stops when the relative log-likelihood change drops below 1e-7 or after
    200 iterations. The per-class log-likelihood after every M-step is kept
    in ``log_likelihood_trace``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if components_per_class < 1:
        raise ValueError("components_per_class must be >= 1")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    parts = []
    for c in range(n_classes):
        x = features[labels == c]
        if len(x) == 0:
            raise ValueError(f"class {c} has no samples")
        if len(x) < components_per_class:
            raise ValueError(f"class {c} has fewer samples than components")
        parts.append(_em_class(x, components_per_class, rng))
    weights, means, covs, ridge, traces = map(list, zip(*parts))
    return ClassGaussianMixture(np.array(weights), np.array(means), np.array(covs),
                                np.array(ridge), traces)


def _distances_and_argmin(gmm: ClassGaussianMixture, x: np.ndarray):
    diff = x[None, None, :] - gmm.means                       # (K, M, D)
    q = np.einsum("kmd,kmde,kme->km", diff, gmm.precisions, diff)
    q = np.maximum(q, 0.0)
    j = np.argmin(q, axis=1)
    return np.sqrt(q[np.arange(len(j)), j]), j, diff


def mahalanobis_distances(gmm: ClassGaussianMixture, feature: np.ndarray) -> np.ndarray:
    """Per class, the smallest Mahalanobis distance over that class's components."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (gmm.dim,):
        raise ValueError(f"feature has shape {feature.shape}, expected ({gmm.dim},)")
    if not np.all(np.isfinite(feature)):
        raise ValueError("feature contains non-finite values")
    return _distances_and_argmin(gmm, feature)[0]


def mahalanobis_batch(gmm: ClassGaussianMixture, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    diff = features[:, None, None, :] - gmm.means[None]
    q = np.einsum("nkmd,kmde,nkme->nkm", diff, gmm.precisions, diff)
    return np.sqrt(np.maximum(q, 0.0).min(axis=2))


# ------------------------------------------------------------ logistic heads

@dataclass
class LogisticHead:
    """``softmax(W x + b)`` (multinomial) or ``sigmoid(w . x + b)`` (binary)."""

    weight: np.ndarray
    bias: np.ndarray
    mode: str = "multinomial"
    objective_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=np.float64))
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=np.float64))
        if self.mode not in ("multinomial", "binary"):
            raise ValueError(f"unknown head mode {self.mode!r}")

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weight.T + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Multinomial: rows of class probabilities. Binary: P(positive)."""
        z = self.logits(x)
        if self.mode == "binary":
            return expit(z[..., 0])
        return softmax(z, axis=-1)


def fit_logistic(x: np.ndarray, y: np.ndarray, mode: str = "multinomial", n_classes: int | None = None,
                 lam: float = 1e-3, max_iter: int = 5000, tol: float = 1e-5) -> LogisticHead:
    """L2-penalised logistic regression by full-batch gradient descent.

    Inputs are standardised before fitting and the scaling is folded back into
    the returned weights, so the penalty acts on standardised coefficients.
    The step is the inverse of a Lipschitz bound on the gradient, which makes
    the recorded objective nonincreasing.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n, d = x.shape
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = np.hstack([(x - mu) / sd, np.ones((n, 1))])
    if mode == "binary":
        if len(np.unique(y)) < 2:
            raise ValueError("binary head needs both label values")
        target = y.astype(np.float64)[:, None]
        k = 1
        curv = 0.25
    else:
        k = int(y.max()) + 1 if n_classes is None else n_classes
        if len(np.unique(y)) < 2:
            raise ValueError("transfer head needs at least two classes in the data")
        target = np.eye(k)[y]
        curv = 0.5
    penal = np.ones((d + 1, 1))
    penal[-1] = 0.0
    step = 1.0 / (curv * np.linalg.norm(xs, 2) ** 2 / n + lam)
    theta = np.zeros((d + 1, k))

    def objective_and_grad(theta):
        z = xs @ theta
        if mode == "binary":
            p = expit(z)
            loss = np.mean(np.logaddexp(0, z) - target * z)
        else:
            lse = logsumexp(z, axis=1, keepdims=True)
            p = np.exp(z - lse)
            loss = np.mean(lse[:, 0] - np.sum(target * z, axis=1))
        obj = loss + 0.5 * lam * np.sum(penal * theta ** 2)
        grad = xs.T @ (p - target) / n + lam * penal * theta
        return obj, grad

    trace = []
    obj, grad = objective_and_grad(theta)
    trace.append(float(obj))
    for _ in range(max_iter):
        if np.linalg.norm(grad) < tol:
            break
        theta = theta - step * grad
        obj, grad = objective_and_grad(theta)
        trace.append(float(obj))
    w = (theta[:-1] / sd[:, None]).T
    b = theta[-1] - w @ mu
    return LogisticHead(w, b, mode, trace)


def fit_transfer_head(features: np.ndarray, labels: np.ndarray, n_classes: int | None = None,
                      **kw) -> LogisticHead:
    return fit_logistic(features, labels, "multinomial", n_classes=n_classes, **kw)


def fit_ood_head(distances: np.ndarray, in_distribution: np.ndarray, **kw) -> LogisticHead:
    """Binary head on Mahalanobis distance vectors; output is P(in distribution)."""
    return fit_logistic(distances, np.asarray(in_distribution, dtype=bool).astype(int), "binary", **kw)


# ------------------------------------------------------------ estimator

@dataclass(frozen=True)
class CompetencyConfig:
    components_per_class: int = 1
    threshold: float = 0.5
    lam: float = 1e-3
    max_iter: int = 5000
    negative_scale: float = 3.0
    noise_basis: str = "covariance"
    shuffle_grid: int = 4

    def __post_init__(self):
        if self.noise_basis not in ("covariance", "diagonal"):
            raise ValueError("noise_basis must be 'covariance' or 'diagonal'")
        if self.components_per_class < 1 or self.max_iter < 1 or self.shuffle_grid < 2:
            raise ValueError("components_per_class and max_iter must be >= 1, shuffle_grid >= 2")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not self.lam > 0 or not self.negative_scale > 0:
            raise ValueError("lam and negative_scale must be positive")


@dataclass
class CompetencyEstimator:
    model: PerceptionModel
    gmm: ClassGaussianMixture
    transfer: LogisticHead
    ood: LogisticHead
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        d = self.model.feature_dim
        if self.gmm.dim != d or self.transfer.weight.shape[1] != d:
            raise ValueError("feature dimensions disagree across estimator members")
        if self.ood.weight.shape[1] != self.gmm.n_classes:
            raise ValueError("OOD head width must equal the class count")

    def score(self, image: np.ndarray) -> float:
        return competency_score(self, image)

    def is_incompetent(self, image: np.ndarray) -> bool:
        return competency_score(self, image) < self.threshold

    def save(self, path) -> None:
        arrays = self.gmm.arrays()
        arrays.update({"transfer.weight": self.transfer.weight, "transfer.bias": self.transfer.bias,
                       "ood.weight": self.ood.weight, "ood.bias": self.ood.bias})
        save_bundle(path, "competency", {"threshold": self.threshold,
                                         "model_digest": self.model.digest()}, arrays)

    @classmethod
    def load(cls, path, model: PerceptionModel) -> "CompetencyEstimator":
        meta, a = load_bundle(path, "competency")
        if meta["model_digest"] != model.digest():
            raise ValueError(f"{path}: estimator was fitted against a different perception model")
        gmm = ClassGaussianMixture(a["gmm.weights"], a["gmm.means"], a["gmm.covariances"],
                                   a["gmm.ridge"])
        return cls(model, gmm, LogisticHead(a["transfer.weight"], a["transfer.bias"], "multinomial"),
                   LogisticHead(a["ood.weight"], a["ood.bias"], "binary"), meta["threshold"])


def patch_shuffle(image: np.ndarray, grid: int, rng: np.random.Generator) -> np.ndarray:
    """Permute the tiles of a ``grid x grid`` partition of the image."""
    c, h, w = image.shape
    th, tw = h // grid, w // grid
    out = image.copy()
    tiles = [image[:, i * th:(i + 1) * th, j * tw:(j + 1) * tw]
             for i in range(grid) for j in range(grid)]
    for pos, src in enumerate(rng.permutation(len(tiles))):
        i, j = divmod(pos, grid)
        out[:, i * th:(i + 1) * th, j * tw:(j + 1) * tw] = tiles[src]
    return out


def fit_competency(model: PerceptionModel, data: LabeledDataset,
                   config: CompetencyConfig = CompetencyConfig(), seed: int = 0) -> CompetencyEstimator:
    """Fit the class Gaussians on train features and both heads on calibration data.

    Out-of-distribution negatives for the binary head are synthesised from
    the calibration set: half are calibration features with Gaussian noise
    of ``negative_scale`` standard deviations per dimension, half are
    features of tile-shuffled calibration images. With
    ``noise_basis="covariance"`` the dimensions are the principal axes of
    the sample's class covariance (noise covariance ``scale**2 * Sigma``);
    ``"diagonal"`` uses the raw feature coordinates.
    """
    rng = np.random.default_rng(seed)
    train = data.subset("train")
    cal = data.subset("calibration")
    if len(cal) == 0:
        raise ValueError("calibration split is empty")
    k = data.n_classes
    f_train = extract_features(model, train.images)
    gmm = fit_class_gaussians(f_train, train.labels, config.components_per_class, seed, n_classes=k)
    f_cal = extract_features(model, cal.images)
    transfer = fit_transfer_head(f_cal, cal.labels, n_classes=k, lam=config.lam, max_iter=config.max_iter)

    n = len(cal)
    n_noise = (n + 1) // 2
    n_shuffle = n - n_noise
    pick = rng.integers(0, n, size=n_noise)
    z = rng.normal(size=(n_noise, f_cal.shape[1])) * config.negative_scale
    if config.noise_basis == "covariance":
        chol = np.linalg.cholesky(gmm.covariances[:, 0])           # (K, D, D)
        f_noise = f_cal[pick] + np.einsum("nde,ne->nd", chol[cal.labels[pick]], z)
    else:
        f_noise = f_cal[pick] + z * f_cal.std(axis=0)
    pick = rng.integers(0, n, size=n_shuffle)
    shuffled = np.array([patch_shuffle(cal.images[i], config.shuffle_grid, rng) for i in pick])
    f_shuffle = extract_features(model, shuffled) if n_shuffle else np.zeros((0, f_cal.shape[1]))
    negatives = np.vstack([f_noise, f_shuffle])
    dists = mahalanobis_batch(gmm, np.vstack([f_cal, negatives]))
    labels = np.r_[np.ones(n, bool), np.zeros(len(negatives), bool)]
    ood = fit_ood_head(dists, labels, lam=config.lam, max_iter=config.max_iter)
    return CompetencyEstimator(model, gmm, transfer, ood, config.threshold)


# ------------------------------------------------------------ score & gradient

def _check(est: CompetencyEstimator, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != est.model.input_shape:
        raise nn.ShapeError(f"image shape {image.shape} does not match {est.model.input_shape}", layer=0)
    return image


def competency_parts(est: CompetencyEstimator, image: np.ndarray) -> dict:
    """Score plus its two factors and the predicted class, from one forward pass."""
    image = _check(est, image)
    trace = nn.forward(est.model.spec, est.model.params, image)
    return _parts_from_trace(est, trace)


# Both factors are kept inside [_P_LO, _P_HI] so their product stays strictly
# inside (0, 1) in float64; the clamp has zero derivative where it binds.
_P_LO = 1e-150
_P_HI = 1.0 - 2.0 ** -52


def _clamp(p: float) -> tuple[float, bool]:
    if p < _P_LO:
        return _P_LO, False
    if p > _P_HI:
        return _P_HI, False
    return float(p), True


def _parts_from_trace(est, trace):
    c_hat = int(np.argmax(trace.final))
    f = trace.tap("features")
    p_class = _clamp(est.transfer.predict_proba(f)[c_hat])[0]
    dist = mahalanobis_distances(est.gmm, f)
    p_in = _clamp(est.ood.predict_proba(dist))[0]
    return {"score": p_class * p_in, "p_class": p_class, "p_in": p_in,
            "predicted": c_hat, "features": f, "distances": dist}


def competency_score(est: CompetencyEstimator, image: np.ndarray) -> float:
    return competency_parts(est, image)["score"]


def competency_gradient(est: CompetencyEstimator, image: np.ndarray) -> np.ndarray:
    """Exact gradient of the competency score with respect to every pixel.

    The predicted class is held fixed; at each class the Mahalanobis branch
    of the nearest component is differentiated.
    """
    image = _check(est, image)
    trace = nn.forward(est.model.spec, est.model.params, image)
    c_hat = int(np.argmax(trace.final))
    f = trace.tap("features")

    W = est.transfer.weight
    probs = est.transfer.predict_proba(f)
    p_class, live = _clamp(probs[c_hat])
    d_pclass = probs[c_hat] * (W[c_hat] - probs @ W) if live else np.zeros(W.shape[1])

    dist, comp, diff = _distances_and_argmin(est.gmm, f)
    rows = np.arange(len(comp))
    prec = est.gmm.precisions[rows, comp]               # (K, D, D)
    dvec = diff[rows, comp]                             # (K, D)
    safe = np.where(dist > 0, dist, 1.0)
    d_dist = np.einsum("kde,ke->kd", prec, dvec) / safe[:, None]
    d_dist[dist == 0] = 0.0
    raw_in = float(est.ood.predict_proba(dist))
    p_in, live = _clamp(raw_in)
    d_pin = raw_in * (1.0 - raw_in) * (est.ood.weight[0] @ d_dist) if live else np.zeros(f.shape[-1])

    d_score = p_in * d_pclass + p_class * d_pin
    return nn.backward_to_input(trace, est.model.params, d_score, at="features")
