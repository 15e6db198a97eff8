"""Decoder that reconstructs an image from the perception model's features."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .bundle import load_bundle, save_bundle
from .perception import LabeledDataset, PerceptionModel, extract_features
from .segmentation import FelzParams, SegmentMap, felzenszwalb_segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InpainterConfig:
    """Decoder training settings. ``optimizer`` is ``"adam"`` or ``"sgd"``;
    ``momentum`` only applies to the latter."""

    epochs: int = 15
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class InpainterDecoder:
    """Feature vector -> image. Features are standardised with stored train statistics."""

    spec: nn.NetworkSpec
    params: dict
    feature_mean: np.ndarray
    feature_std: np.ndarray
    model_digest: str
    loss_history: list = field(default_factory=list)

    @property
    def output_shape(self) -> tuple:
        return self.spec.output_shape()

    def decode(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_std
        return nn.forward(self.spec, self.params, z).final

    def save(self, path) -> None:
        arrays = dict(self.params)
        arrays["feature_mean"] = self.feature_mean
        arrays["feature_std"] = self.feature_std
        save_bundle(path, "inpainter", {"spec": self.spec.to_dict(), "model_digest": self.model_digest,
                                        "loss_history": [float(v) for v in self.loss_history]}, arrays)

    @classmethod
    def load(cls, path) -> "InpainterDecoder":
        meta, arrays = load_bundle(path, "inpainter")
        mean = arrays.pop("feature_mean")
        std = arrays.pop("feature_std")
        return cls(nn.NetworkSpec.from_dict(meta["spec"]), arrays, mean, std,
                   meta["model_digest"], meta["loss_history"])


def build_decoder_spec(feature_dim: int, image_shape) -> nn.NetworkSpec:
    c, h, w = image_shape
    if h % 4 or w % 4:
        raise ValueError("decoder needs image sides divisible by 4")
    layers = (
        nn.Dense(feature_dim, 32 * (h // 4) * (w // 4)),
        nn.Reshape((32, h // 4, w // 4)),
        nn.Upsample(2), nn.Conv2d(32, 8, 3, 1, 1), nn.ReLU(),
        nn.Upsample(2), nn.Conv2d(8, 8, 3, 1, 1), nn.ReLU(),
        nn.Conv2d(8, c, 3, 1, 1),
        nn.Sigmoid(),
    )
    return nn.NetworkSpec((feature_dim,), layers)


def mask_with_ones(image: np.ndarray, region: np.ndarray) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    out[:, region] = 1.0
    return out


def train_inpainter(model: PerceptionModel, data: LabeledDataset, segparams: FelzParams = FelzParams(),
                    config: InpainterConfig = InpainterConfig(), seed: int = 0,
                    segmaps: list[SegmentMap] | None = None) -> InpainterDecoder:
    """Train the decoder to undo single-segment masking.

    Every epoch, each training image has one random segment filled with ones;
    the frozen perception model encodes the masked image and the decoder is
    fitted by mean squared error against the original over all pixels.
    """
    train = data.subset("train")
    if len(train) == 0:
        raise ValueError("train split is empty")
    rng = np.random.default_rng(seed)
    if segmaps is None:
        segmaps = [felzenszwalb_segment(img, segparams) for img in train.images]
    digest = model.digest()
    f_clean = extract_features(model, train.images)
    mean = f_clean.mean(axis=0)
    std = f_clean.std(axis=0)
    std[std < 1e-8] = 1.0
    spec = build_decoder_spec(model.feature_dim, data.image_shape)
    params = nn.init_params(spec, rng)
    state: dict = {}
    history = []
    for epoch in range(config.epochs):
        picks = [rng.integers(s.n_segments) for s in segmaps]
        masked = np.array([mask_with_ones(img, s.labels == p)
                           for img, s, p in zip(train.images, segmaps, picks)])
        z = (extract_features(model, masked) - mean) / std
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            trace = nn.forward(spec, params, z[batch])
            err = trace.outputs[-1] - train.images[batch]
            loss = float(np.mean(err ** 2))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite inpainter loss at epoch {epoch}")
            total += loss * len(batch)
            grads = nn.backward(trace, params, 2.0 * err / err.size)[1]
            if config.optimizer == "adam":
                params, state = nn.adam_step(params, grads, config.lr, state)
            else:
                params, state = nn.sgd_step(params, grads, config.lr, config.momentum, state)
        history.append(total / len(order))
        log.debug("inpainter epoch %d loss %.5f", epoch, history[-1])
    if model.digest() != digest:
        raise RuntimeError("perception model parameters changed during inpainter training")
    return InpainterDecoder(spec, params, mean, std, digest, history)


def reconstruct(decoder: InpainterDecoder, model: PerceptionModel, image: np.ndarray) -> np.ndarray:
    """Decode the features of ``image`` (single image or stack)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-3:] != decoder.output_shape:
        raise nn.ShapeError(f"image shape {image.shape[-3:]} does not match decoder output "
                            f"{decoder.output_shape}", layer=0)
    if decoder.model_digest != model.digest():
        raise ValueError("decoder was trained against a different perception model")
    return decoder.decode(extract_features(model, image))
