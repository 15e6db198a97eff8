"""Shared oracles for the test suite."""
import numpy as np

from regcomp import nn
from regcomp.competency import _P_HI, _P_LO, _distances_and_argmin, competency_gradient, competency_score


def activation_pattern(spec, trace):
    """ReLU on/off masks and max-pool winner indices for one forward trace.

    Two inputs with the same pattern lie in the same linear piece of the
    network, so central differences between them are exact up to rounding.
    """
    pattern = []
    prev = trace.input
    for layer, out in zip(spec.layers, trace.outputs):
        if layer.kind == "relu":
            pattern.append(out > 0)
        elif layer.kind == "maxpool":
            n, c, h, w = prev.shape
            s = layer.size
            win = prev[:, :, :h // s * s, :w // s * s].reshape(n, c, h // s, s, w // s, s)
            win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)
            pattern.append(win.argmax(axis=-1))
        prev = out
    return pattern


def same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def relative_error(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def as_float64(params):
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def small_conv_net(rng, channels=3, size=8, k_out=4):
    spec = nn.NetworkSpec((channels, size, size), (
        nn.Conv2d(channels, 4, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(4, 6, 3, 1, 1), nn.ReLU(),
        nn.Flatten(), nn.Dense(6 * (size // 2) ** 2, k_out),
    ))
    return spec, as_float64(nn.init_params(spec, rng))


def competency_fd_errors(est, image, n_pixels, rng, h=1e-4, max_tries=None):
    """Relative errors of the analytic competency gradient at random pixels.

    A probe is resampled when its +-h stencil changes the activation pattern,
    the predicted class, the nearest mixture component of any class, or
    whether a probability clamp binds: those are the points where the score
    is not differentiable and central differences are not an oracle.
    Returns ``(errors, n_resampled)``.
    """
    spec, params = est.model.spec, est.model.params

    def state(x):
        t = nn.forward(spec, params, x)
        f = t.tap("features")
        comp = _distances_and_argmin(est.gmm, f)[1]
        p_class = est.transfer.predict_proba(f)[int(np.argmax(t.final))]
        p_in = float(est.ood.predict_proba(_distances_and_argmin(est.gmm, f)[0]))
        clamps = (p_class < _P_LO, p_class > _P_HI, p_in < _P_LO, p_in > _P_HI)
        return activation_pattern(spec, t), int(np.argmax(t.final)), tuple(comp), clamps, p_class * p_in

    grad = competency_gradient(est, image)
    floor = 1e-6 * float(np.abs(grad).max()) + 1e-300
    base = state(image)
    errors, resampled = [], 0
    max_tries = max_tries or 20 * n_pixels
    while len(errors) < n_pixels:
        idx = tuple(int(rng.integers(0, s)) for s in image.shape)
        xp, xm = image.copy(), image.copy()
        xp[idx] += h
        xm[idx] -= h
        sp, sm = state(xp), state(xm)
        if not all(same_pattern(s[0], base[0]) and s[1:4] == base[1:4] for s in (sp, sm)):
            resampled += 1
            if resampled > max_tries:
                raise RuntimeError("too many non-differentiable probes")
            continue
        fd = (competency_score(est, xp) - competency_score(est, xm)) / (2 * h)
        errors.append(relative_error(grad[idx], fd, floor=floor))
    return np.array(errors), resampled
