"""The image classifier whose competency is being explained."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .bundle import load_bundle, save_bundle

log = logging.getLogger(__name__)

SPLITS = ("train", "calibration", "tune", "test")


@dataclass
class LabeledDataset:
    """Images ``(N, C, H, W)`` in [0, 1] with labels, split tags and optional masks.

    ``masks`` holds one entry per image: a boolean ``(H, W)`` array where
    True marks unfamiliar pixels, or None.
    """

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    masks: list = field(default_factory=list)
    n_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        if not self.masks:
            self.masks = [None] * len(self.labels)
        if self.images.ndim != 4:
            raise ValueError("images must be (N, C, H, W)")
        if not (len(self.images) == len(self.labels) == len(self.splits) == len(self.masks)):
            raise ValueError("images, labels, splits and masks differ in length")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")
        bad = set(self.splits.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        hw = self.images.shape[2:]
        for i, m in enumerate(self.masks):
            if m is not None:
                m = np.asarray(m, dtype=bool)
                if m.shape != hw:
                    raise ValueError(f"mask {i} has shape {m.shape}, image is {hw}")
                self.masks[i] = m

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def subset(self, split: str) -> "LabeledDataset":
        idx = self.indices(split)
        return LabeledDataset(self.images[idx], self.labels[idx], self.splits[idx],
                              [self.masks[i] for i in idx], self.n_classes)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class PerceptionModel:
    spec: nn.NetworkSpec
    params: dict
    n_classes: int
    feature_dim: int = 64
    train_accuracy: float = float("nan")
    val_accuracy: float = float("nan")
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.spec.output_shape(self.spec.taps["features"]) != (self.feature_dim,):
            raise ValueError("features tap does not match feature_dim")

    @property
    def input_shape(self) -> tuple:
        return self.spec.input_shape

    def digest(self) -> str:
        return nn.params_digest(self.params)

    def save(self, path) -> None:
        meta = {"spec": self.spec.to_dict(), "n_classes": self.n_classes,
                "feature_dim": self.feature_dim,
                "train_accuracy": float(self.train_accuracy),
                "val_accuracy": float(self.val_accuracy),
                "loss_history": [float(v) for v in self.loss_history]}
        save_bundle(path, "perception", meta, self.params)

    @classmethod
    def load(cls, path) -> "PerceptionModel":
        meta, arrays = load_bundle(path, "perception")
        return cls(nn.NetworkSpec.from_dict(meta["spec"]), arrays, meta["n_classes"],
                   meta["feature_dim"], meta["train_accuracy"], meta["val_accuracy"],
                   meta["loss_history"])


def build_perception_spec(input_shape, n_classes: int, feature_dim: int = 64) -> nn.NetworkSpec:
    """conv16-relu-pool-conv32-relu-pool-flatten-dense(features)-relu-dense(logits)-softmax."""
    c, h, w = input_shape
    layers = (
        nn.Conv2d(c, 16, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(16, 32, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Dense(32 * (h // 4) * (w // 4), feature_dim),
        nn.ReLU(),
        nn.Dense(feature_dim, n_classes),
        nn.Softmax(),
    )
    return nn.NetworkSpec(tuple(input_shape), layers, {"features": 7, "logits": 9},
                          required_taps=("features", "logits"))


def _check_shape(model: PerceptionModel, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3:] != model.input_shape:
        raise nn.ShapeError(f"image shape {images.shape[-3:]} does not match model "
                            f"input {model.input_shape}", layer=0)
    return images


def predict_batch(model: PerceptionModel, images: np.ndarray, batch_size: int = 64):
    """Class ids and softmax rows for a stack of images."""
    images = _check_shape(model, images)
    probs = []
    for start in range(0, len(images), batch_size):
        probs.append(nn.forward(model.spec, model.params, images[start:start + batch_size]).final)
    probs = np.concatenate(probs) if probs else np.zeros((0, model.n_classes))
    return probs.argmax(axis=1), probs


def predict(model: PerceptionModel, image: np.ndarray) -> tuple[int, np.ndarray]:
    """Predicted class (ties go to the lower id) and the softmax vector."""
    image = _check_shape(model, image)
    probs = nn.forward(model.spec, model.params, image).final
    return int(np.argmax(probs)), probs


def extract_features(model: PerceptionModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Penultimate dense-layer activations (before the rectifier).

    Accepts a single image or a stack; the output has a matching leading axis.
    """
    images = _check_shape(model, images)
    if images.ndim == 3:
        return nn.forward(model.spec, model.params, images).tap("features")
    out = [nn.forward(model.spec, model.params, images[s:s + batch_size]).tap("features")
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.feature_dim))


def accuracy(model: PerceptionModel, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    pred, _ = predict_batch(model, images)
    return float(np.mean(pred == labels))


def train_classifier(data: LabeledDataset, config: TrainConfig = TrainConfig(),
                     seed: int = 0, feature_dim: int = 64) -> PerceptionModel:
    """Minibatch SGD with momentum on mean cross-entropy over the train split.

    The calibration split is held out from all updates and only used to
    report validation accuracy.
    """
    train = data.subset("train")
    if len(train) == 0:
        raise ValueError("train split is empty")
    if data.n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    spec = build_perception_spec(data.image_shape, data.n_classes, feature_dim)
    params = nn.init_params(spec, rng)
    state: dict = {}
    onehot = np.eye(data.n_classes)[train.labels]
    logits_at = spec.taps["logits"]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            trace = nn.forward(spec, params, train.images[batch])
            p = trace.outputs[-1]
            loss = -np.mean(np.log(np.clip(p[np.arange(len(batch)), train.labels[batch]], 1e-300, None)))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch offset {start}")
            total += loss * len(batch)
            # d(mean CE)/d(logits) = (p - y) / n
            g = (p - onehot[batch]) / len(batch)
            grads = nn.backward(trace, params, g, at=logits_at)[1]
            params, state = nn.sgd_step(params, grads, config.lr, config.momentum, state)
        history.append(total / len(order))
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    model = PerceptionModel(spec, params, data.n_classes, feature_dim)
    model.train_accuracy = accuracy(model, train.images, train.labels)
    cal = data.subset("calibration")
    model.val_accuracy = accuracy(model, cal.images, cal.labels)
    model.loss_history = history
    return model
