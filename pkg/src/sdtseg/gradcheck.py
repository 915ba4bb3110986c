"""Central finite-difference check of the network's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edt import SdtParams, class_sdt_stack
from .network import LossInputs, backward, forward, init_network, loss
from .raster import VOID, LabelMask

DEFAULT_LAMBDAS = (0.0, 0.5, 2.0)


@dataclass
class BlockError:
    name: str
    max_rel_error: float
    max_abs_error: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def make_instance(seed: int, classes: int = 4, size: int = 8, width: int = 4, lam: float = 2.0):
    """Random network, image and targets for a small gradient check.

    Labels include a few void pixels and distance targets come from the
    real transform, so every code path of the loss is exercised.
    """
    rng = np.random.default_rng(seed)
    state = init_network(classes, width, seed)
    params = {k: v + (0.1 * rng.standard_normal(v.shape) if k.endswith(".b") else 0.0)
              for k, v in state.params.items()}
    state = state.with_params(params)
    image = rng.standard_normal((3, size, size))
    labels = rng.integers(0, classes, size=(size, size))
    labels[rng.random((size, size)) < 0.1] = VOID
    mask = LabelMask(labels, classes)
    y_dist = class_sdt_stack(mask, SdtParams(classes, clip=3.0)).data
    weights = rng.uniform(0.5, 2.0, classes)
    return state, image, mask.data, y_dist, weights, lam


def total_loss(state, image, y_seg, y_dist, weights, lam) -> float:
    z_dist, z_seg, _ = forward(state, image)
    return loss(LossInputs(z_seg, z_dist, y_seg, y_dist, weights, lam)).total


def analytic_gradients(state, image, y_seg, y_dist, weights, lam):
    z_dist, z_seg, cache = forward(state, image)
    return backward(state, cache, LossInputs(z_seg, z_dist, y_seg, y_dist, weights, lam))


def numeric_gradients(state, image, y_seg, y_dist, weights, lam, h: float = 1e-5):
    grads = {}
    for name, value in state.params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            shifted = {}
            for sign in (1, -1):
                params = dict(state.params)
                p = value.copy()
                p[idx] += sign * h
                params[name] = p
                shifted[sign] = total_loss(state.with_params(params), image, y_seg, y_dist, weights, lam)
            g[idx] = (shifted[1] - shifted[-1]) / (2 * h)
        grads[name] = g
    return grads


def check_gradients(seed: int, lam: float = 2.0, h: float = 1e-5, corrupt: bool = False) -> list[BlockError]:
    """Per-parameter-block errors of backward against central differences.

    ``corrupt`` perturbs the analytic gradient, as a negative control.
    """
    instance = make_instance(seed, lam=lam)
    analytic = analytic_gradients(*instance)
    if corrupt:
        analytic["fusion.w"] = analytic["fusion.w"] * 1.01
    numeric = numeric_gradients(*instance, h=h)
    report = []
    for name in analytic:
        a, n = analytic[name], numeric[name]
        report.append(BlockError(name, float(relative_error(a, n).max()), float(np.abs(a - n).max())))
    return report
