"""Small dense-tensor network engine with reverse-mode differentiation.

Only the fixed layer vocabulary needed by the perception model and the
inpainting decoder is supported. Tensors are plain numpy arrays laid out as
``(batch, channels, height, width)`` for images and ``(batch, features)``
after flattening. Parameters are stored as float32; every forward and
backward computation runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = [
    "Conv2d", "ReLU", "MaxPool2d", "Flatten", "Dense", "Softmax", "Sigmoid",
    "Reshape", "Upsample", "NetworkSpec", "ForwardTrace", "ShapeError",
    "NonFiniteGradient", "init_params", "forward", "backward",
    "backward_to_input", "backward_to_params", "sgd_step", "adam_step", "params_digest",
]


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class NonFiniteGradient(FloatingPointError):
    """Raised by :func:`sgd_step` when a gradient contains NaN or inf."""


# ---------------------------------------------------------------- layers

@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    kind: str = field(default="conv", init=False)

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"conv expects ({self.in_channels}, H, W), got {shape}")
        c, h, w = shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output would be empty for input {shape}")
        return (self.out_channels, ho, wo)

    def param_shapes(self):
        k = self.kernel
        return {"weight": (self.out_channels, self.in_channels, k, k),
                "bias": (self.out_channels,)}

    def fan_in(self):
        return self.in_channels * self.kernel * self.kernel


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)

    def out_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class MaxPool2d:
    size: int = 2
    kind: str = field(default="maxpool", init=False)

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W), got {shape}")
        c, h, w = shape
        if h % self.size or w % self.size:
            raise ShapeError(f"maxpool size {self.size} does not divide {h}x{w}")
        return (c, h // self.size, w // self.size)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)

    def out_shape(self, shape):
        return (int(np.prod(shape)),)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="dense", init=False)

    def out_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features),
                "bias": (self.out_features,)}

    def fan_in(self):
        return self.in_features


@dataclass(frozen=True)
class Softmax:
    kind: str = field(default="softmax", init=False)

    def out_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError(f"softmax expects a flat vector, got {shape}")
        return tuple(shape)


@dataclass(frozen=True)
class Sigmoid:
    kind: str = field(default="sigmoid", init=False)

    def out_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class Reshape:
    shape: tuple
    kind: str = field(default="reshape", init=False)

    def out_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {shape} to {self.shape}")
        return tuple(self.shape)


@dataclass(frozen=True)
class Upsample:
    factor: int = 2
    kind: str = field(default="upsample", init=False)

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"upsample expects (C, H, W), got {shape}")
        c, h, w = shape
        return (c, h * self.factor, w * self.factor)


_LAYER_TYPES = {cls.__dataclass_fields__["kind"].default: cls
                for cls in (Conv2d, ReLU, MaxPool2d, Flatten, Dense, Softmax,
                            Sigmoid, Reshape, Upsample)}


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus named tap points.

    ``taps`` maps a name to the index of the layer whose *output* it exposes.
    Construction validates that every adjacent pair of layers is shape
    compatible, so a spec that exists is a spec that runs.
    """

    input_shape: tuple
    layers: tuple
    taps: dict = field(default_factory=dict)
    required_taps: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "taps", dict(self.taps))
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.out_shape(shapes[-1])))
            except ShapeError as err:
                raise ShapeError(str(err), layer=i) from None
        object.__setattr__(self, "_shapes", tuple(shapes))
        for name, idx in self.taps.items():
            if not 0 <= idx < len(self.layers):
                raise ValueError(f"tap {name!r} points at missing layer {idx}")
        for name in self.required_taps:
            if name not in self.taps:
                raise ValueError(f"spec lacks required tap {name!r}")

    def output_shape(self, index: int = -1) -> tuple:
        """Per-sample output shape of layer ``index`` (default: last)."""
        return self._shapes[1:][index]

    @property
    def output_shapes(self) -> tuple:
        return self._shapes[1:]

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {k: getattr(layer, k) for k in layer.__dataclass_fields__}
            if "shape" in d:
                d["shape"] = list(d["shape"])
            layers.append(d)
        return {"input_shape": list(self.input_shape), "layers": layers,
                "taps": dict(self.taps), "required_taps": list(self.required_taps)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            kind = ld.pop("kind")
            if "shape" in ld:
                ld["shape"] = tuple(ld["shape"])
            layers.append(_LAYER_TYPES[kind](**ld))
        return cls(tuple(d["input_shape"]), tuple(layers), dict(d["taps"]),
                   tuple(d.get("required_taps", ())))


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform init in +-1/sqrt(fan_in) for every weight and bias."""
    params = {}
    for i, layer in enumerate(spec.layers):
        if not hasattr(layer, "param_shapes"):
            continue
        bound = 1.0 / np.sqrt(layer.fan_in())
        for name, shape in layer.param_shapes().items():
            params[f"{i}.{name}"] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def params_digest(params: dict[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for key in sorted(params):
        a = np.ascontiguousarray(params[key])
        h.update(key.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- forward

@dataclass
class ForwardTrace:
    """Everything a backward pass needs: input, per-layer outputs, caches."""

    spec: NetworkSpec
    input: np.ndarray
    outputs: list
    caches: list
    batched: bool

    def output(self, index: int = -1) -> np.ndarray:
        out = self.outputs[index]
        return out if self.batched else out[0]

    def tap(self, name: str) -> np.ndarray:
        return self.output(self.spec.taps[name])

    @property
    def final(self) -> np.ndarray:
        return self.output(-1)


def _param(params, i, name):
    try:
        return np.asarray(params[f"{i}.{name}"], dtype=np.float64)
    except KeyError:
        raise ShapeError(f"missing parameter {i}.{name}", layer=i) from None


def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _layer_forward(layer, i, x, params):
    kind = layer.kind
    if kind == "conv":
        w = _param(params, i, "weight")
        b = _param(params, i, "bias")
        cols, ho, wo = _im2col(x, layer.kernel, layer.stride, layer.pad)
        out = cols @ w.reshape(w.shape[0], -1).T + b
        out = out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, x.shape)
    if kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if kind == "maxpool":
        s = layer.size
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // s, w // s, s * s)
        # np.argmax returns the first maximal element, the tie rule we want
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if kind == "dense":
        w = _param(params, i, "weight")
        b = _param(params, i, "bias")
        return x @ w.T + b, x
    if kind == "softmax":
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p, p
    if kind == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        return s, s
    if kind == "reshape":
        return x.reshape((x.shape[0],) + tuple(layer.shape)), x.shape
    if kind == "upsample":
        f = layer.factor
        return np.repeat(np.repeat(x, f, axis=2), f, axis=3), None
    raise ValueError(f"unknown layer kind {kind!r}")


def forward(spec: NetworkSpec, params: dict, x: np.ndarray) -> ForwardTrace:
    """Evaluate ``spec`` on one sample ``(C, H, W)`` or a batch ``(N, C, H, W)``."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == len(spec.input_shape) + 1
    if not batched:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match {spec.input_shape}", layer=0)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    outputs, caches = [], []
    h = x
    for i, layer in enumerate(spec.layers):
        h, cache = _layer_forward(layer, i, h, params)
        outputs.append(h)
        caches.append(cache)
    return ForwardTrace(spec, x, outputs, caches, batched)


# ---------------------------------------------------------------- backward

def _layer_backward(layer, i, g, cache, params, grads):
    kind = layer.kind
    if kind == "conv":
        cols, xshape = cache
        w = _param(params, i, "weight")
        n, o, ho, wo = g.shape
        gf = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if grads is not None:
            grads[f"{i}.weight"] = (gf.T @ cols).reshape(w.shape)
            grads[f"{i}.bias"] = gf.sum(axis=0)
        k, s, p = layer.kernel, layer.stride, layer.pad
        c = xshape[1]
        if s == 1 and p <= k - 1:
            # transposed convolution as a plain one: flipped kernel, swapped channels
            wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gcols, _, _ = _im2col(g, k, 1, k - 1 - p)
            dx = (gcols @ wt.T).reshape(n, xshape[2], xshape[3], c)
            return dx.transpose(0, 3, 1, 2)
        dcols = (gf @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
        dx = np.zeros((n, c, xshape[2] + 2 * p, xshape[3] + 2 * p))
        for a in range(k):
            for b in range(k):
                dx[:, :, a:a + s * ho:s, b:b + s * wo:s] += dcols[..., a, b].transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx
    if kind == "relu":
        return g * cache
    if kind == "maxpool":
        arg, xshape = cache
        s = layer.size
        n, c, h, w = xshape
        blocks = np.zeros(arg.shape + (s * s,))
        np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return blocks.reshape(xshape)
    if kind == "flatten":
        return g.reshape(cache)
    if kind == "dense":
        x = cache
        w = _param(params, i, "weight")
        if grads is not None:
            grads[f"{i}.weight"] = g.T @ x
            grads[f"{i}.bias"] = g.sum(axis=0)
        return g @ w
    if kind == "softmax":
        p = cache
        return p * (g - (g * p).sum(axis=1, keepdims=True))
    if kind == "sigmoid":
        s = cache
        return g * s * (1.0 - s)
    if kind == "reshape":
        return g.reshape(cache)
    if kind == "upsample":
        f = layer.factor
        n, c, h, w = g.shape
        return g.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))
    raise ValueError(f"unknown layer kind {kind!r}")


def backward(trace: ForwardTrace, params: dict, cotangent: np.ndarray,
             at: int | str | None = None, param_grads: bool = True):
    """Reverse-mode pass from layer ``at`` (index or tap name; default last).

    Returns ``(input_grad, param_grads)``; ``param_grads`` is None when not
    requested. Gradients of layers after ``at`` are absent from the result.
    """
    spec = trace.spec
    if len(trace.outputs) != len(spec.layers):
        raise ShapeError("trace does not belong to this spec")
    if at is None:
        at = len(spec.layers) - 1
    elif isinstance(at, str):
        at = spec.taps[at]
    elif at < 0:
        at += len(spec.layers)
    g = np.asarray(cotangent, dtype=np.float64)
    if not trace.batched:
        g = g[None]
    if g.shape != trace.outputs[at].shape:
        raise ShapeError(f"cotangent shape {g.shape} does not match output "
                         f"{trace.outputs[at].shape}", layer=at)
    grads = {} if param_grads else None
    for i in range(at, -1, -1):
        g = _layer_backward(spec.layers[i], i, g, trace.caches[i], params, grads)
    dx = g if trace.batched else g[0]
    return dx, grads


def backward_to_input(trace: ForwardTrace, params: dict, cotangent: np.ndarray,
                      at: int | str | None = None) -> np.ndarray:
    """Gradient of ``<cotangent, output>`` with respect to the network input."""
    return backward(trace, params, cotangent, at=at, param_grads=False)[0]


def backward_to_params(trace: ForwardTrace, params: dict, cotangent: np.ndarray,
                       at: int | str | None = None) -> dict[str, np.ndarray]:
    """Gradient of ``<cotangent, output>`` for each parameter tensor."""
    grads = backward(trace, params, cotangent, at=at)[1]
    # layers above `at` receive zeros so the result mirrors the parameter set
    for key, value in params.items():
        if key not in grads:
            grads[key] = np.zeros(np.shape(value))
    return grads


def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.0,
             state: dict | None = None) -> tuple[dict, dict]:
    """Heavy-ball update ``v <- momentum*v + g; p <- p - lr*v``.

    Returns new ``(params, state)``; inputs are not modified. Raises
    :class:`NonFiniteGradient` without touching anything when any gradient
    entry is NaN or infinite.
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {key}")
    state = {} if state is None else state
    new_params, new_state = {}, {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        v = momentum * state.get(key, 0.0) + g
        new_state[key] = v
        new_params[key] = (np.asarray(p, dtype=np.float64) - lr * v).astype(np.asarray(p).dtype)
    return new_params, new_state


def adam_step(params: dict, grads: dict, lr: float, state: dict | None = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, dict]:
    """Bias-corrected Adam update; same calling convention as :func:`sgd_step`.

    ``state`` holds the step count under ``"t"`` and first and second moment
    estimates per parameter.
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("betas must lie in [0, 1)")
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {key}")
    state = {} if state is None else state
    t = state.get("t", 0) + 1
    new_params, new_state = {}, {"t": t}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        m = beta1 * state.get(("m", key), 0.0) + (1 - beta1) * g
        v = beta2 * state.get(("v", key), 0.0) + (1 - beta2) * g * g
        new_state[("m", key)], new_state[("v", key)] = m, v
        step = lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        new_params[key] = (np.asarray(p, dtype=np.float64) - step).astype(np.asarray(p).dtype)
    return new_params, new_state


def to_jsonable(obj: Any):
    """Best-effort conversion of numpy scalars for metadata dictionaries."""
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
