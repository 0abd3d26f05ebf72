"""Finite-difference oracle shared by the gradient tests."""

import numpy as np

from ddsp_phaser.model import ModelParams

STEPS = (1e-3, 1e-4, 1e-5, 1e-6)


def _fd4(loss, theta, i, h):
    e = np.zeros_like(theta)
    e[i] = h
    f = [loss(theta + k * e) for k in (-2, -1, 1, 2)]
    return (8 * (f[2] - f[1]) - (f[3] - f[0])) / (12 * h)


def finite_difference(problem, params, steps=STEPS, floor=0.1):
    """Fourth-order central differences over a ladder of relative steps.

    For each parameter the estimate comes from the adjacent pair of steps
    that agree best, which avoids both truncation error (step too large on a
    sharply curved loss) and round-off (step too small).  Parameters near
    zero use ``floor`` as their scale.
    """
    theta = params.to_vector()

    def loss(v):
        return problem.loss(ModelParams.from_vector(v))

    out = np.empty_like(theta)
    for i in range(theta.size):
        scale = max(abs(theta[i]), floor)
        est = [_fd4(loss, theta, i, s * scale) for s in steps]
        gaps = [abs(a - b) for a, b in zip(est, est[1:])]
        k = int(np.argmin(gaps))
        out[i] = est[k + 1]
    return out


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-30)
