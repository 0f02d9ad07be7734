"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as _tensor
from .params import ModelParams


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _signed_value(fn: Callable[[], float]) -> tuple[float, list[np.ndarray]]:
    """fn() plus the sign pattern of every LeakyReLU input it evaluated."""
    _tensor.SIGN_LOG = []
    try:
        return fn(), _tensor.SIGN_LOG
    finally:
        _tensor.SIGN_LOG = None


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _kink_free_difference(fn: Callable[[], float], flat: np.ndarray, i: int, step: float) -> float:
    """Derivative along coordinate i from probes that stay on the unperturbed side of every kink.

    Tries a central difference, then second-order one-sided differences, then a
    10-fold smaller step. Probe validity depends only on activation signs, never on
    the gradient being checked.
    """
    orig = flat[i]
    _, base = _signed_value(fn)

    def at(offset):
        flat[i] = orig + offset
        try:
            return _signed_value(fn)
        finally:
            flat[i] = orig

    h = step
    while True:
        (up, s_up), (down, s_down) = at(h), at(-h)
        if _same(s_up, base) and _same(s_down, base):
            return (up - down) / (2.0 * h)
        f0 = fn()
        up2, s_up2 = at(2 * h)
        if _same(s_up, base) and _same(s_up2, base):
            return (-3.0 * f0 + 4.0 * up - up2) / (2.0 * h)
        down2, s_down2 = at(-2 * h)
        if _same(s_down, base) and _same(s_down2, base):
            return (3.0 * f0 - 4.0 * down + down2) / (2.0 * h)
        if h < 1e-12:
            return (up - down) / (2.0 * h)
        h /= 10.0


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, step: float = 1e-6, coords=None,
                 kink_aware: bool = False) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place.

    ``coords`` restricts the probe to a subset of flat indices; other entries
    of the result are NaN. With ``kink_aware`` a probe that would flip the sign of
    any LeakyReLU input is replaced by one that does not.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        if kink_aware:
            out[i] = _kink_free_difference(fn, flat, i, step)
            continue
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(arr.shape)


def check_params(loss_fn: Callable[[ModelParams], "object"], params: ModelParams, step: float = 1e-6,
                 max_coords: int | None = None, rng: np.random.Generator | None = None,
                 kink_aware: bool = False) -> float:
    """Worst relative error between autodiff and central differences over ``params``.

    ``loss_fn`` must rebuild the graph from ``params`` and return a scalar Tensor.
    With ``max_coords`` only that many randomly chosen coordinates per tensor are probed.
    ``kink_aware`` keeps probes of LeakyReLU networks on one side of every kink.
    """
    params.zero_grad()
    loss = loss_fn(params)
    loss.backward()
    analytic = params.grads()
    worst = 0.0
    for name, p in params.items():
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(p.data.size, size=max_coords, replace=False)
        num = numeric_grad(lambda: float(loss_fn(params).data), p.data, step, coords, kink_aware)
        ana = analytic[name]
        if coords is not None:
            num = num.reshape(-1)[coords]
            ana = ana.reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num))
    return worst
